//! Penalized logistic regression with offset, the variance-component loop and
//! inference for the coefficient function.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Design, DesignRow, FunctionalBlock};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, inverse_spd, quad_form, symmetrize};

/// Smallest penalty variance returned by [`update_sigma2`].
pub const SIGMA2_FLOOR: f64 = 1e-10;

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn eta(row: &DesignRow, theta: &[f64]) -> f64 {
    row.w.iter().zip(theta).map(|(w, t)| w * t).sum::<f64>() - row.log_pi
}

/// `Σ (y - expit(w'θ - log pi)) w`.
pub fn logistic_score(rows: &[DesignRow], theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for r in rows {
        let resid = f64::from(r.y) - expit(eta(r, theta));
        for (gi, wi) in g.iter_mut().zip(&r.w) {
            *gi += resid * wi;
        }
    }
    g
}

/// Weighted approximate score for the log-linear hazard `h = exp(w'θ)` with
/// weights `pi / (pi + h)`: events contribute `w pi / (pi + h)`, sampled
/// times `-w h / (pi + h)`.
pub fn approx_score(rows: &[DesignRow], theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for r in rows {
        let log_h: f64 = r.w.iter().zip(theta).map(|(w, t)| w * t).sum();
        // Ratios computed in log space so extreme offsets stay finite.
        let d = log_h - r.log_pi;
        let c = if r.y == 1 {
            // pi / (pi + h) = 1 / (1 + h / pi)
            1.0 / (1.0 + d.exp())
        } else {
            -1.0 / (1.0 + (-d).exp())
        };
        for (gi, wi) in g.iter_mut().zip(&r.w) {
            *gi += c * wi;
        }
    }
    g
}

/// `Σ p (1 - p) w w'` with `p = expit(w'θ - log pi)`.
pub fn fisher_info(rows: &[DesignRow], theta: &[f64]) -> DMatrix<f64> {
    let (x, _, off) = matrices(rows, theta.len());
    let th = DVector::from_column_slice(theta);
    let eta = &x * &th - &off;
    let v: Vec<f64> = eta.iter().map(|&e| {
        let p = expit(e);
        p * (1.0 - p)
    }).collect();
    weighted_gram(&x, &v)
}

fn matrices(rows: &[DesignRow], p: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = rows.len();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i].w[j]);
    let y = DVector::from_fn(n, |i, _| f64::from(rows[i].y));
    let off = DVector::from_fn(n, |i, _| rows[i].log_pi);
    (x, y, off)
}

fn weighted_gram(x: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (i, &vi) in v.iter().enumerate() {
        let s = vi.sqrt();
        xs.row_mut(i).scale_mut(s);
    }
    symmetrize(&xs.tr_mul(&xs))
}

/// Diagonal penalty `B / sigma2`, one variance per penalty group.
pub fn penalty_matrix(design: &Design, sigma2: &[f64]) -> DMatrix<f64> {
    let p = design.n_cols();
    let mut m = DMatrix::zeros(p, p);
    for (g, &s2) in design.groups.iter().zip(sigma2) {
        for &i in &g.indices {
            m[(i, i)] = 1.0 / s2;
        }
    }
    m
}

/// `Σ [y eta - log(1 + e^eta)] - θ'Bθ / (2 sigma2)`.
pub fn penalized_loglik(design: &Design, theta: &[f64], sigma2: &[f64]) -> f64 {
    let mut ll = 0.0;
    for r in &design.rows {
        let e = eta(r, theta);
        ll += f64::from(r.y) * e - log1pexp(e);
    }
    ll - 0.5 * quad_form(&penalty_matrix(design, sigma2), theta)
}

/// Gradient of [`penalized_loglik`].
pub fn penalized_gradient(design: &Design, theta: &[f64], sigma2: &[f64]) -> Vec<f64> {
    let mut g = logistic_score(&design.rows, theta);
    for (grp, &s2) in design.groups.iter().zip(sigma2) {
        for &i in &grp.indices {
            g[i] -= theta[i] / s2;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_halvings: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iter: 100,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlsOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loglik: f64,
    /// Separation was detected and a ridge floor added.
    pub separation: bool,
    /// Penalized log-likelihood after each accepted step.
    pub trace: Vec<f64>,
}

/// Ridge added to every coefficient once separation is detected.
const SEPARATION_RIDGE: f64 = 1e-4;

fn check_labels(rows: &[DesignRow]) -> Result<()> {
    let events = rows.iter().filter(|r| r.y == 1).count();
    if rows.is_empty() {
        return Err(Error::DegenerateDesign("design has no rows".into()));
    }
    if events == 0 {
        return Err(Error::DegenerateDesign(
            "no event rows: the intercept is not identified".into(),
        ));
    }
    if events == rows.len() {
        return Err(Error::DegenerateDesign(
            "no sampled non-event rows: the intercept is not identified".into(),
        ));
    }
    Ok(())
}

/// Newton iterations with step-halving for fixed penalty variances.
pub fn irls_fit(
    design: &Design,
    sigma2: &[f64],
    init: Option<&[f64]>,
    opts: &IrlsOptions,
) -> Result<IrlsOutcome> {
    design.validate()?;
    check_labels(&design.rows)?;
    if sigma2.len() != design.groups.len() {
        return Err(Error::mismatch("one penalty variance per group required"));
    }
    let p = design.n_cols();
    let (x, y, off) = matrices(&design.rows, p);
    let mut pen = penalty_matrix(design, sigma2);
    let mut theta = match init {
        Some(t) if t.len() == p => DVector::from_column_slice(t),
        Some(_) => return Err(Error::mismatch("initial value has the wrong length")),
        None => DVector::zeros(p),
    };

    let objective = |th: &DVector<f64>, pen: &DMatrix<f64>| -> (f64, DVector<f64>) {
        let eta = &x * th - &off;
        let mut ll = 0.0;
        for i in 0..eta.len() {
            ll += y[i] * eta[i] - log1pexp(eta[i]);
        }
        ll -= 0.5 * th.dot(&(pen * th));
        (ll, eta)
    };

    let (mut ll, mut eta) = objective(&theta, &pen);
    let mut separation = false;
    let mut growth = 0usize;
    let mut last_max_eta = eta.amax();
    let mut trace = vec![ll];
    let mut grad_norm = f64::INFINITY;
    for it in 0..opts.max_iter {
        let mut resid = DVector::zeros(eta.len());
        let mut v = vec![0.0; eta.len()];
        for i in 0..eta.len() {
            let pr = expit(eta[i]);
            resid[i] = y[i] - pr;
            v[i] = pr * (1.0 - pr);
        }
        let grad = x.tr_mul(&resid) - &pen * &theta;
        grad_norm = grad.norm();
        if grad_norm < opts.grad_tol {
            return Ok(IrlsOutcome {
                theta: theta.iter().copied().collect(),
                iterations: it,
                grad_norm,
                loglik: ll,
                separation,
                trace,
            });
        }
        let hess = weighted_gram(&x, &v) + &pen;
        let (chol, _) = cholesky_with_jitter(&hess)?;
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &theta + &step * scale;
            let (ll_c, eta_c) = objective(&cand, &pen);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, ll_c, eta_c));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, ll_c, eta_c)) = accepted else {
            // No ascent direction left at machine precision.
            return Ok(IrlsOutcome {
                theta: theta.iter().copied().collect(),
                iterations: it + 1,
                grad_norm,
                loglik: ll,
                separation,
                trace,
            });
        };
        let rel = (&cand - &theta).norm() / theta.norm().max(1.0);
        theta = cand;
        ll = ll_c;
        eta = eta_c;
        trace.push(ll);
        let max_eta = eta.amax();
        if max_eta > 30.0 && max_eta > last_max_eta {
            growth += 1;
        } else {
            growth = 0;
        }
        last_max_eta = max_eta;
        if growth >= 3 && !separation {
            warn!("separation detected (|eta| = {max_eta:.1} and growing); adding ridge floor {SEPARATION_RIDGE}");
            separation = true;
            for i in 0..p {
                pen[(i, i)] += SEPARATION_RIDGE;
            }
            let (l2, e2) = objective(&theta, &pen);
            ll = l2;
            eta = e2;
        }
        if rel < opts.step_tol {
            let grad = x.tr_mul(&(y.clone() - eta.map(expit))) - &pen * &theta;
            return Ok(IrlsOutcome {
                theta: theta.iter().copied().collect(),
                iterations: it + 1,
                grad_norm: grad.norm(),
                loglik: ll,
                separation,
                trace,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm,
    })
}

/// `θ'Bθ / (number of penalized coefficients)` per group, floored at
/// [`SIGMA2_FLOOR`].
pub fn update_sigma2(theta: &[f64], design: &Design) -> Vec<f64> {
    design
        .groups
        .iter()
        .map(|g| {
            if g.indices.is_empty() {
                return 1.0;
            }
            let ss: f64 = g.indices.iter().map(|&i| theta[i] * theta[i]).sum();
            (ss / g.indices.len() as f64).max(SIGMA2_FLOOR)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub irls: IrlsOptions,
    pub outer_max: usize,
    pub outer_tol: f64,
    pub sigma2_init: f64,
    /// Hold the penalty variances fixed instead of alternating.
    pub fixed_sigma2: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            irls: IrlsOptions::default(),
            outer_max: 50,
            outer_tol: 1e-6,
            sigma2_init: 1.0,
            fixed_sigma2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub sigma2: Vec<f64>,
    pub loglik: f64,
    pub irls_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub outer_iterations: usize,
    pub irls_iterations: usize,
    pub grad_norm: f64,
    pub sigma2_converged: bool,
    pub separation: bool,
    pub log: Vec<OuterStep>,
}

/// Penalized fit with inference quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub columns: Vec<String>,
    pub theta: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Unpenalized information `Σ p(1-p) w w'`.
    pub fisher: DMatrix<f64>,
    /// `(fisher + B / sigma2)^-1`.
    pub cov_theta: DMatrix<f64>,
    pub blocks: Vec<FunctionalBlock>,
    pub convergence: Convergence,
}

impl FitResult {
    /// Covariance of the spline coefficients of block `k`.
    pub fn sigma_bb(&self, k: usize) -> DMatrix<f64> {
        let r = self.blocks[k].range();
        self.cov_theta
            .view((r.start, r.start), (r.len(), r.len()))
            .clone_owned()
    }

    pub fn block_coef(&self, k: usize) -> &[f64] {
        &self.theta[self.blocks[k].range()]
    }

    pub fn beta_curve(&self, k: usize, t_grid: &[f64]) -> BetaCurve {
        beta_curve(self, k, t_grid)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Alternate Newton fits for fixed variances with the variance update until
/// the relative change in every variance is below `outer_tol`.
pub fn fit_alternating(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    let n_groups = design.groups.len();
    let mut sigma2 = match &opts.fixed_sigma2 {
        Some(s) if s.len() == n_groups => s.clone(),
        Some(_) => return Err(Error::mismatch("one fixed variance per group required")),
        None => vec![opts.sigma2_init; n_groups],
    };
    let mut theta: Option<Vec<f64>> = None;
    let mut log = Vec::new();
    let mut irls_total = 0;
    let mut converged = n_groups == 0 || opts.fixed_sigma2.is_some();
    let mut last = None;
    for _ in 0..opts.outer_max.max(1) {
        let out = irls_fit(design, &sigma2, theta.as_deref(), &opts.irls)?;
        irls_total += out.iterations;
        log.push(OuterStep {
            sigma2: sigma2.clone(),
            loglik: out.loglik,
            irls_iterations: out.iterations,
        });
        theta = Some(out.theta.clone());
        last = Some(out);
        if converged {
            break;
        }
        let next = update_sigma2(theta.as_ref().unwrap(), design);
        let rel = next
            .iter()
            .zip(&sigma2)
            .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        sigma2 = next;
        if rel < opts.outer_tol {
            converged = true;
            // Refit at the converged variances.
            let out = irls_fit(design, &sigma2, theta.as_deref(), &opts.irls)?;
            irls_total += out.iterations;
            last = Some(out);
            break;
        }
    }
    if !converged {
        warn!("penalty variance did not converge in {} outer iterations", opts.outer_max);
    }
    let out = last.expect("at least one inner fit");
    let fisher = fisher_info(&design.rows, &out.theta);
    let mut pen = penalty_matrix(design, &sigma2);
    if out.separation {
        for i in 0..pen.nrows() {
            pen[(i, i)] += SEPARATION_RIDGE;
        }
    }
    let cov_theta = inverse_spd(&(&fisher + pen))?;
    Ok(FitResult {
        columns: design.columns.clone(),
        theta: out.theta,
        sigma2,
        fisher,
        cov_theta,
        blocks: design.blocks.clone(),
        convergence: Convergence {
            outer_iterations: log.len(),
            irls_iterations: irls_total,
            grad_norm: out.grad_norm,
            sigma2_converged: converged,
            separation: out.separation,
            log,
        },
    })
}

/// Pointwise estimate of `beta` with 95% bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCurve {
    pub t: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub significant: Vec<bool>,
}

impl BetaCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "est", "lo", "hi", "significant"])?;
        for i in 0..self.t.len() {
            wr.write_record([
                format!("{:?}", self.t[i]),
                format!("{:?}", self.estimate[i]),
                format!("{:?}", self.lower[i]),
                format!("{:?}", self.upper[i]),
                u8::from(self.significant[i]).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `phi(t) b ± 1.96 sqrt(phi(t) Sigma_bb phi(t)')` for block `k`.
pub fn beta_curve(fit: &FitResult, k: usize, t_grid: &[f64]) -> BetaCurve {
    let basis = &fit.blocks[k].basis;
    let b = fit.block_coef(k);
    let sbb = fit.sigma_bb(k);
    let mut out = BetaCurve {
        t: t_grid.to_vec(),
        estimate: Vec::with_capacity(t_grid.len()),
        lower: Vec::with_capacity(t_grid.len()),
        upper: Vec::with_capacity(t_grid.len()),
        significant: Vec::with_capacity(t_grid.len()),
    };
    for &t in t_grid {
        let phi = basis.eval(t);
        let est: f64 = phi.iter().zip(b).map(|(p, c)| p * c).sum();
        let se = quad_form(&sbb, &phi).max(0.0).sqrt();
        let (lo, hi) = (est - 1.96 * se, est + 1.96 * se);
        out.estimate.push(est);
        out.lower.push(lo);
        out.upper.push(hi);
        out.significant.push(lo > 0.0 || hi < 0.0);
    }
    out
}

/// How sampled and event times are weighted in the estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Weights `pi / (pi + h)`: the logistic score with offset.
    Waagepetersen,
    /// Weights 1: `Σ_T w - Σ_D w h / pi`.
    HorvitzThompson,
}

/// Unpenalized solution of the estimating equation for `h = exp(w'θ)`.
pub fn fit_estimating(rows: &[DesignRow], p: usize, scheme: WeightScheme) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::Waagepetersen => {
            let cols = (0..p).map(|j| format!("w{j}")).collect();
            let d = Design::unpenalized(cols, rows.to_vec());
            Ok(irls_fit(&d, &[], None, &IrlsOptions::default())?.theta)
        }
        WeightScheme::HorvitzThompson => {
            check_labels(rows)?;
            let events: Vec<&[f64]> = rows.iter().filter(|r| r.y == 1).map(|r| r.w.as_slice()).collect();
            let terms: Vec<(&[f64], f64)> = rows
                .iter()
                .filter(|r| r.y == 0)
                .map(|r| (r.w.as_slice(), (-r.log_pi).exp()))
                .collect();
            poisson_type_fit(&events, &terms, p)
        }
    }
}

/// Maximizer of `Σ_events w'θ - Σ_k m_k exp(w_k'θ)`: the full log-likelihood
/// with exposures `m_k`, or the Horvitz-Thompson equation with `m_k = 1/pi`.
pub fn poisson_type_fit(events: &[&[f64]], terms: &[(&[f64], f64)], p: usize) -> Result<Vec<f64>> {
    let obj = |th: &DVector<f64>| -> f64 {
        let a: f64 = events.iter().map(|w| dotv(w, th)).sum();
        let b: f64 = terms.iter().map(|(w, m)| m * dotv(w, th).exp()).sum();
        a - b
    };
    // Start from the intercept-only solution when column 0 is an intercept.
    let mut theta = DVector::zeros(p);
    let total: f64 = terms.iter().map(|(_, m)| m).sum();
    if p > 0 && total > 0.0 && !events.is_empty() {
        theta[0] = (events.len() as f64 / total).ln();
    }
    let mut f = obj(&theta);
    let opts = IrlsOptions::default();
    for _ in 0..opts.max_iter {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for w in events {
            for j in 0..p {
                grad[j] += w[j];
            }
        }
        for (w, m) in terms {
            let h = m * dotv(w, &theta).exp();
            for j in 0..p {
                grad[j] -= h * w[j];
                for k in 0..p {
                    hess[(j, k)] += h * w[j] * w[k];
                }
            }
        }
        if grad.norm() < opts.grad_tol {
            return Ok(theta.iter().copied().collect());
        }
        let (chol, _) = cholesky_with_jitter(&hess)?;
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..=opts.max_halvings {
            let cand = &theta + &step * scale;
            let fc = obj(&cand);
            if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                let rel = (&cand - &theta).norm() / theta.norm().max(1.0);
                theta = cand;
                f = fc;
                moved = true;
                if rel < opts.step_tol {
                    return Ok(theta.iter().copied().collect());
                }
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            return Ok(theta.iter().copied().collect());
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm: f64::NAN,
    })
}

fn dotv(w: &[f64], th: &DVector<f64>) -> f64 {
    w.iter().zip(th.iter()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_basis, PenaltyGroup};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(n: usize, p: usize, seed: u64) -> Vec<DesignRow> {
        let mut r = rng::from_seed(seed);
        (0..n)
            .map(|i| {
                let mut w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut r)).collect();
                w[0] = 1.0;
                DesignRow {
                    subject_id: (i / 10) as u64,
                    t: i as f64,
                    y: u8::from(r.random::<f64>() < 0.3),
                    log_pi: r.random_range(-3.0..1.0),
                    w,
                }
            })
            .collect()
    }

    fn random_theta(p: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::from_seed(seed);
        (0..p)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                0.5 * z
            })
            .collect()
    }

    fn toy_design(n: usize, p: usize, seed: u64, penalized: &[usize]) -> Design {
        let rows = random_rows(n, p, seed);
        Design {
            columns: (0..p).map(|j| format!("c{j}")).collect(),
            rows,
            groups: if penalized.is_empty() {
                vec![]
            } else {
                vec![PenaltyGroup {
                    indices: penalized.to_vec(),
                }]
            },
            blocks: vec![],
        }
    }

    #[test]
    fn score_identity() {
        for k in 0..100 {
            let rows = random_rows(200, 10, k);
            let th = random_theta(10, 1000 + k);
            let a = approx_score(&rows, &th);
            let b = logistic_score(&rows, &th);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn score_limits() {
        // pi -> infinity: probabilities vanish and only events contribute.
        let mut rows = random_rows(50, 3, 2);
        for r in rows.iter_mut() {
            r.log_pi = 800.0;
        }
        let th = random_theta(3, 3);
        let s = logistic_score(&rows, &th);
        let mut ev = vec![0.0; 3];
        for r in rows.iter().filter(|r| r.y == 1) {
            for j in 0..3 {
                ev[j] += r.w[j];
            }
        }
        for j in 0..3 {
            assert_relative_eq!(s[j], ev[j], epsilon = 1e-12);
        }
        // theta = 0, pi = 1: score = Σ (y - 1/2) w.
        for r in rows.iter_mut() {
            r.log_pi = 0.0;
        }
        let s = logistic_score(&rows, &[0.0; 3]);
        for j in 0..3 {
            let e: f64 = rows.iter().map(|r| (f64::from(r.y) - 0.5) * r.w[j]).sum();
            assert_relative_eq!(s[j], e, epsilon = 1e-12);
        }
        // Single event with pi >> h: approx score is W.
        let row = DesignRow {
            subject_id: 0,
            t: 0.0,
            y: 1,
            log_pi: 40.0,
            w: vec![1.0, 2.0],
        };
        let s = approx_score(&[row], &[0.1, 0.2]);
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fisher_single_row() {
        let row = DesignRow {
            subject_id: 0,
            t: 0.0,
            y: 0,
            log_pi: 0.0,
            w: vec![1.0, 0.0],
        };
        let f = fisher_info(&[row], &[0.0, 3.0]);
        assert_eq!(f[(0, 0)], 0.25);
        assert_eq!(f[(1, 1)], 0.0);
    }

    /// Plain Newton on the explicit likelihood, written independently.
    fn dense_newton(rows: &[DesignRow], p: usize) -> Vec<f64> {
        let mut th = vec![0.0; p];
        for _ in 0..200 {
            let mut g = vec![0.0; p];
            let mut h = vec![vec![0.0; p]; p];
            for r in rows {
                let e: f64 = (0..p).map(|j| r.w[j] * th[j]).sum::<f64>() - r.log_pi;
                let pr = 1.0 / (1.0 + (-e).exp());
                for j in 0..p {
                    g[j] += (f64::from(r.y) - pr) * r.w[j];
                    for k in 0..p {
                        h[j][k] += pr * (1.0 - pr) * r.w[j] * r.w[k];
                    }
                }
            }
            let hm = DMatrix::from_fn(p, p, |i, j| h[i][j]);
            let step = hm.lu().solve(&DVector::from_vec(g)).unwrap();
            for j in 0..p {
                th[j] += step[j];
            }
            if step.norm() < 1e-14 {
                break;
            }
        }
        th
    }

    #[test]
    fn unpenalized_matches_dense_newton() {
        let d = toy_design(20, 3, 7, &[]);
        let fit = irls_fit(&d, &[], None, &IrlsOptions::default()).unwrap();
        let oracle = dense_newton(&d.rows, 3);
        for j in 0..3 {
            assert!((fit.theta[j] - oracle[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn tiny_variance_shrinks_penalized_block() {
        let d = toy_design(200, 6, 8, &[3, 4, 5]);
        let fit = irls_fit(&d, &[1e-12], None, &IrlsOptions::default()).unwrap();
        for j in 3..6 {
            assert!(fit.theta[j].abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let mut d = toy_design(30, 1, 9, &[]);
        for r in d.rows.iter_mut() {
            r.y = 0;
        }
        assert!(matches!(
            irls_fit(&d, &[], None, &IrlsOptions::default()),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn separation_is_guarded() {
        let rows: Vec<DesignRow> = (0..40)
            .map(|i| {
                let x = i as f64 - 19.5;
                DesignRow {
                    subject_id: 0,
                    t: i as f64,
                    y: u8::from(x > 0.0),
                    log_pi: 0.0,
                    w: vec![1.0, x],
                }
            })
            .collect();
        let d = Design::unpenalized(vec!["a".into(), "b".into()], rows);
        let fit = irls_fit(&d, &[], None, &IrlsOptions::default()).unwrap();
        assert!(fit.separation);
        assert!(fit.theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn sigma2_update() {
        let d = Design {
            columns: vec!["a".into(), "b".into(), "c".into()],
            rows: vec![],
            groups: vec![PenaltyGroup { indices: vec![1, 2] }],
            blocks: vec![],
        };
        assert_eq!(update_sigma2(&[5.0, 1.0, 1.0], &d), vec![1.0]);
        assert_eq!(update_sigma2(&[5.0, 0.0, 0.0], &d), vec![SIGMA2_FLOOR]);
        let th = random_theta(3, 4);
        let oracle = (th[1] * th[1] + th[2] * th[2]) / 2.0;
        assert_relative_eq!(update_sigma2(&th, &d)[0], oracle, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = toy_design(150, 6, 10, &[3, 4, 5]);
        let s2 = [0.7];
        for k in 0..20 {
            let th = random_theta(6, 50 + k);
            let g = penalized_gradient(&d, &th, &s2);
            for j in 0..6 {
                let h = 1e-6 * th[j].abs().max(1.0);
                let mut a = th.clone();
                let mut b = th.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (penalized_loglik(&d, &a, &s2) - penalized_loglik(&d, &b, &s2)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "j={j} fd={fd} g={}", g[j]);
            }
        }
    }

    #[test]
    fn hessian_matches_score_jacobian() {
        let d = toy_design(150, 5, 11, &[2, 3, 4]);
        let s2 = [0.4];
        let th = random_theta(5, 12);
        let h = fisher_info(&d.rows, &th) + penalty_matrix(&d, &s2);
        for j in 0..5 {
            let e = 1e-6;
            let mut a = th.clone();
            let mut b = th.clone();
            a[j] += e;
            b[j] -= e;
            let ga = penalized_gradient(&d, &a, &s2);
            let gb = penalized_gradient(&d, &b, &s2);
            for i in 0..5 {
                let fd = -(ga[i] - gb[i]) / (2.0 * e);
                assert!((fd - h[(i, j)]).abs() <= 1e-5 * h[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn ascent_is_monotone() {
        let d = toy_design(300, 8, 13, &[4, 5, 6, 7]);
        let fit = irls_fit(&d, &[0.05], None, &IrlsOptions::default()).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs()));
        assert!(fit.grad_norm < 1e-8);
    }

    #[test]
    fn exact_recovery_with_noiseless_signal() {
        // Enormous offsets-free sample: logistic fit of a functional block whose
        // true coefficients are representable recovers them.
        let basis = build_basis(6, 1.0, 6).unwrap();
        let b_true = [0.5, -1.0, 0.8, 0.0, 0.0, 0.0];
        let mut r = rng::from_seed(14);
        let mut rows = Vec::new();
        for i in 0..200_000 {
            let w: Vec<f64> = std::iter::once(1.0)
                .chain((0..6).map(|_| StandardNormal.sample(&mut r)))
                .collect();
            let eta: f64 = -1.0 + w[1..].iter().zip(&b_true).map(|(a, b)| a * b).sum::<f64>();
            let y = u8::from(r.random::<f64>() < expit(eta));
            rows.push(DesignRow {
                subject_id: i / 100,
                t: i as f64,
                y,
                log_pi: 0.0,
                w,
            });
        }
        let d = Design {
            columns: (0..7).map(|j| format!("c{j}")).collect(),
            rows,
            groups: vec![PenaltyGroup { indices: vec![4, 5, 6] }],
            blocks: vec![FunctionalBlock {
                stream: 0,
                start: 1,
                basis: basis.clone(),
            }],
        };
        let fit = fit_alternating(&d, &FitOptions::default()).unwrap();
        let mut sup = 0.0f64;
        for i in 0..=50 {
            let s = i as f64 / 50.0;
            let truth = basis.curve(&b_true, s);
            sup = sup.max((basis.curve(fit.block_coef(0), s) - truth).abs());
        }
        // Sampling noise at n = 2e5 is ~1e-2; the penalty collapses to the
        // quadratic part, which contains the truth.
        assert!(sup < 0.05, "sup error {sup}");
        assert!(fit.sigma2[0] < 1e-6);
    }

    #[test]
    fn alternating_fit_is_deterministic() {
        let d = toy_design(400, 8, 15, &[4, 5, 6, 7]);
        let a = fit_alternating(&d, &FitOptions::default()).unwrap();
        let b = fit_alternating(&d, &FitOptions::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let g = penalized_gradient(&d, &a.theta, &a.sigma2);
        assert!(crate::linalg::max_abs(&g) < 1e-6);
    }

    fn curve_fit(theta: Vec<f64>, cov: DMatrix<f64>) -> FitResult {
        let basis = build_basis(4, 1.0, 4).unwrap();
        FitResult {
            columns: vec![],
            theta,
            sigma2: vec![1.0],
            fisher: DMatrix::zeros(4, 4),
            cov_theta: cov,
            blocks: vec![FunctionalBlock {
                stream: 0,
                start: 0,
                basis,
            }],
            convergence: Convergence {
                outer_iterations: 0,
                irls_iterations: 0,
                grad_norm: 0.0,
                sigma2_converged: true,
                separation: false,
                log: vec![],
            },
        }
    }

    #[test]
    fn beta_curve_bands() {
        let t: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let c = curve_fit(vec![0.0; 4], DMatrix::identity(4, 4)).beta_curve(0, &t);
        for i in 0..11 {
            assert_eq!(c.estimate[i], 0.0);
            assert_relative_eq!(c.upper[i], -c.lower[i]);
            assert!(!c.significant[i]);
        }
        let c = curve_fit(vec![1.0, 2.0, 0.0, 3.0], DMatrix::zeros(4, 4)).beta_curve(0, &t);
        for i in 0..11 {
            assert_eq!(c.lower[i], c.estimate[i]);
            assert_eq!(c.upper[i], c.estimate[i]);
        }
        let mut r = rng::from_seed(16);
        let a = DMatrix::from_fn(4, 4, |_, _| r.random::<f64>());
        let cov = &a * a.transpose();
        let f = curve_fit(vec![0.3, -0.1, 0.2, 0.5], cov.clone());
        let c = f.beta_curve(0, &[0.7]);
        let phi = f.blocks[0].basis.eval(0.7);
        let direct = 1.96 * quad_form(&cov, &phi).sqrt();
        assert_relative_eq!(c.upper[0] - c.estimate[0], direct, epsilon = 1e-12);
    }

    #[test]
    fn ht_and_full_likelihood_fits() {
        // Constant hazard: both estimators recover log(#events / exposure).
        let events: Vec<Vec<f64>> = vec![vec![1.0]; 12];
        let terms: Vec<(Vec<f64>, f64)> = vec![(vec![1.0], 2.0); 30];
        let ev: Vec<&[f64]> = events.iter().map(|v| v.as_slice()).collect();
        let te: Vec<(&[f64], f64)> = terms.iter().map(|(w, m)| (w.as_slice(), *m)).collect();
        let th = poisson_type_fit(&ev, &te, 1).unwrap();
        assert_relative_eq!(th[0], (12.0f64 / 60.0).ln(), epsilon = 1e-10);
    }
}
