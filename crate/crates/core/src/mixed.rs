//! Multilevel extension: subject-level random effects fit by penalized
//! adaptive Gauss-Hermite quadrature.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{Design, DesignRow};
use crate::error::{Error, Result};
use crate::fit::{expit, fit_alternating, log1pexp, penalty_matrix, update_sigma2, FitOptions};
use crate::linalg::{cholesky_with_jitter, dot, max_abs, symmetrize};

/// Which covariates carry the random effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ZMap {
    /// `Z = M + C J` of the given functional block: random `β` deviations.
    FunctionalBlock(usize),
    /// Random intercept.
    Intercept,
    /// Arbitrary design columns.
    Columns(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomEffectSpec {
    pub z_map: ZMap,
    /// Starting value of `Psi` as a multiple of the identity.
    pub psi_init: f64,
}

impl Default for RandomEffectSpec {
    fn default() -> Self {
        RandomEffectSpec {
            z_map: ZMap::FunctionalBlock(0),
            psi_init: 0.1,
        }
    }
}

impl RandomEffectSpec {
    pub fn q(&self, design: &Design) -> Result<usize> {
        Ok(self.columns(design)?.map_or(1, |c| c.len()))
    }

    /// Design columns holding `Z`, or `None` for the intercept.
    fn columns(&self, design: &Design) -> Result<Option<Vec<usize>>> {
        match &self.z_map {
            ZMap::Intercept => Ok(None),
            ZMap::FunctionalBlock(k) => design
                .blocks
                .get(*k)
                .map(|b| Some(b.range().collect()))
                .ok_or_else(|| Error::invalid(format!("no functional block {k}"))),
            ZMap::Columns(c) => {
                if c.iter().any(|&i| i >= design.n_cols()) {
                    return Err(Error::invalid("random-effect column out of range"));
                }
                Ok(Some(c.clone()))
            }
        }
    }

    /// `Z` rows aligned with `design.rows`.
    pub fn z_rows(&self, design: &Design) -> Result<Vec<Vec<f64>>> {
        let cols = self.columns(design)?;
        Ok(design
            .rows
            .iter()
            .map(|r| match &cols {
                None => vec![1.0],
                Some(c) => c.iter().map(|&i| r.w[i]).collect(),
            })
            .collect())
    }
}

/// Gauss-Hermite rule for the weight `exp(-x²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub n_gq: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// Hermite recurrence, weights `sqrt(pi)` times the squared first
    /// eigenvector components.
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("need at least one quadrature node"));
        }
        let mut j = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            j[(k, k - 1)] = b;
            j[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], sqrt_pi * eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove rounding asymmetry.
        for i in 0..n / 2 {
            let (a, b) = (pairs[i], pairs[n - 1 - i]);
            let x = 0.5 * (b.0 - a.0);
            let w = 0.5 * (a.1 + b.1);
            pairs[i] = (-x, w);
            pairs[n - 1 - i] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let rule = QuadratureRule {
            n_gq: n,
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        };
        let total: f64 = rule.weights.iter().sum();
        if (total - sqrt_pi).abs() > 1e-10 {
            return Err(Error::invalid(format!("Gauss-Hermite weights sum to {total}")));
        }
        Ok(rule)
    }

    /// Tensor-product nodes in `q` dimensions with weights `prod w · exp(|x|²)`.
    fn tensor(&self, q: usize) -> Vec<(Vec<f64>, f64)> {
        let n = self.n_gq;
        let total = n.pow(q as u32);
        (0..total)
            .map(|mut idx| {
                let mut x = Vec::with_capacity(q);
                let mut log_w = 0.0;
                for _ in 0..q {
                    let k = idx % n;
                    idx /= n;
                    x.push(self.nodes[k]);
                    log_w += self.weights[k].ln() + self.nodes[k].powi(2);
                }
                (x, log_w)
            })
            .collect()
    }
}

fn eta(r: &DesignRow, theta: &[f64], z: &[f64], b: &[f64]) -> f64 {
    dot(&r.w, theta) + dot(z, b) - r.log_pi
}

/// `g(θ, b) = Σ [y η − log(1 + e^η)] − b'Ψ⁻¹b / 2`.
pub fn g_value(rows: &[DesignRow], z: &[Vec<f64>], theta: &[f64], psi_inv: &DMatrix<f64>, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (r, zr) in rows.iter().zip(z) {
        let e = eta(r, theta, zr, b);
        s += f64::from(r.y) * e - log1pexp(e);
    }
    let bv = DVector::from_column_slice(b);
    s - 0.5 * (bv.transpose() * psi_inv * &bv)[(0, 0)]
}

/// Mode of `g` in `b` and the negative Hessian `Z'VZ + Ψ⁻¹` there.
#[derive(Debug, Clone, PartialEq)]
pub struct Blup {
    pub b: Vec<f64>,
    pub neg_hessian: DMatrix<f64>,
    pub iterations: usize,
}

fn b_derivs(rows: &[DesignRow], z: &[Vec<f64>], theta: &[f64], psi_inv: &DMatrix<f64>, b: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let q = b.len();
    let bv = DVector::from_column_slice(b);
    let mut grad = -(psi_inv * &bv);
    let mut h = psi_inv.clone();
    for (r, zr) in rows.iter().zip(z) {
        let p = expit(eta(r, theta, zr, b));
        let e = f64::from(r.y) - p;
        let v = p * (1.0 - p);
        for j in 0..q {
            grad[j] += zr[j] * e;
            for k in 0..q {
                h[(j, k)] += v * zr[j] * zr[k];
            }
        }
    }
    (grad, h)
}

/// Newton-Raphson for the subject's random-effect mode.
pub fn newton_blup(rows: &[DesignRow], z: &[Vec<f64>], theta: &[f64], psi: &DMatrix<f64>, init: Option<&[f64]>) -> Result<Blup> {
    let q = psi.nrows();
    let (chol, _) = cholesky_with_jitter(psi)?;
    let psi_inv = chol.inverse();
    let mut b: Vec<f64> = init.map_or_else(|| vec![0.0; q], <[f64]>::to_vec);
    let mut g = g_value(rows, z, theta, &psi_inv, &b);
    for it in 0..100 {
        let (grad, h) = b_derivs(rows, z, theta, &psi_inv, &b);
        let scale = 1.0 + max_abs(b.as_slice());
        if grad.amax() < 1e-10 * scale.max(1.0) {
            return Ok(Blup { b, neg_hessian: h, iterations: it });
        }
        let (hc, _) = cholesky_with_jitter(&h)?;
        let step = hc.solve(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = b.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
            let gc = g_value(rows, z, theta, &psi_inv, &cand);
            if gc >= g - 1e-14 * g.abs().max(1.0) {
                b = cand;
                g = gc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || t * step.amax() < 1e-15 * scale {
            let (grad, h) = b_derivs(rows, z, theta, &psi_inv, &b);
            if grad.amax() < 1e-8 * scale {
                return Ok(Blup { b, neg_hessian: h, iterations: it + 1 });
            }
            return Err(Error::NonConvergence {
                iterations: it + 1,
                grad_norm: grad.norm(),
            });
        }
    }
    let (grad, _) = b_derivs(rows, z, theta, &psi_inv, &b);
    Err(Error::NonConvergence {
        iterations: 100,
        grad_norm: grad.norm(),
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mode-centred nodes `b̃_k = b̂ + sqrt(2) R⁻¹ x_k` with `R'R = H`, their log
/// weights, and `log |R|`.
fn adaptive_nodes(mode: &[f64], neg_hessian: &DMatrix<f64>, rule: &QuadratureRule) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    let q = mode.len();
    let (chol, _) = cholesky_with_jitter(neg_hessian)?;
    let l = chol.l();
    let log_det_r: f64 = (0..q).map(|i| l[(i, i)].ln()).sum();
    let lt = l.transpose();
    let mut nodes = Vec::new();
    let mut log_w = Vec::new();
    for (x, lw) in rule.tensor(q) {
        let xs = DVector::from_iterator(q, x.iter().map(|v| v * std::f64::consts::SQRT_2));
        let y = lt
            .solve_upper_triangular(&xs)
            .ok_or_else(|| Error::invalid("singular curvature at the mode"))?;
        nodes.push(mode.iter().zip(y.iter()).map(|(m, d)| m + d).collect());
        log_w.push(lw);
    }
    Ok((nodes, log_w, log_det_r))
}

/// `log ∫ exp(g(b)) db` by adaptive Gauss-Hermite quadrature centred at
/// `mode` and scaled by the negative Hessian there.
pub fn agq_integral(g: impl Fn(&[f64]) -> f64, mode: &[f64], neg_hessian: &DMatrix<f64>, rule: &QuadratureRule) -> Result<f64> {
    let q = mode.len();
    let (nodes, log_w, log_det_r) = adaptive_nodes(mode, neg_hessian, rule)?;
    let terms: Vec<f64> = nodes.iter().zip(&log_w).map(|(b, lw)| lw + g(b)).collect();
    Ok(0.5 * q as f64 * 2f64.ln() - log_det_r + log_sum_exp(&terms))
}

/// Subject's log marginal likelihood `log ∫ p(y | b) N(b; 0, Ψ) db`.
pub fn agq_marginal_loglik(rows: &[DesignRow], z: &[Vec<f64>], theta: &[f64], psi: &DMatrix<f64>, rule: &QuadratureRule) -> Result<f64> {
    let blup = newton_blup(rows, z, theta, psi, None)?;
    marginal_at(rows, z, theta, psi, rule, &blup)
}

fn marginal_at(rows: &[DesignRow], z: &[Vec<f64>], theta: &[f64], psi: &DMatrix<f64>, rule: &QuadratureRule, blup: &Blup) -> Result<f64> {
    let q = psi.nrows();
    let (chol, _) = cholesky_with_jitter(psi)?;
    let psi_inv = chol.inverse();
    let log_det_psi = 2.0 * (0..q).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let integral = agq_integral(|b| g_value(rows, z, theta, &psi_inv, b), &blup.b, &blup.neg_hessian, rule)?;
    Ok(integral - 0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_psi)
}

/// Self-normalized node weights `ω_k` and the node-wise score and Hessian
/// of the subject's contribution in `θ`, nodes held fixed.
#[derive(Debug, Clone)]
pub struct SubjectTheta {
    pub omega: Vec<f64>,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// `Σ ω_k W'V(b̃_k)W`, always positive semidefinite.
    pub info: DMatrix<f64>,
    pub log_integral: f64,
}

pub fn subject_theta_terms(
    rows: &[DesignRow],
    z: &[Vec<f64>],
    theta: &[f64],
    psi_inv: &DMatrix<f64>,
    nodes: &[Vec<f64>],
    log_w: &[f64],
) -> SubjectTheta {
    let p = theta.len();
    let logs: Vec<f64> = nodes.iter().zip(log_w).map(|(b, lw)| lw + g_value(rows, z, theta, psi_inv, b)).collect();
    let lse = log_sum_exp(&logs);
    let omega: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let mut score = DVector::zeros(p);
    let mut second = DMatrix::zeros(p, p);
    let mut info = DMatrix::zeros(p, p);
    for (b, &om) in nodes.iter().zip(&omega) {
        let mut gk = DVector::zeros(p);
        let mut hk = DMatrix::zeros(p, p);
        for (r, zr) in rows.iter().zip(z) {
            let mu = expit(eta(r, theta, zr, b));
            let e = f64::from(r.y) - mu;
            let v = mu * (1.0 - mu);
            for j in 0..p {
                gk[j] += r.w[j] * e;
                for k in 0..p {
                    hk[(j, k)] += v * r.w[j] * r.w[k];
                }
            }
        }
        score += &gk * om;
        second += (&gk * gk.transpose()) * om;
        info += &hk * om;
    }
    let hessian = -&info + second - &score * score.transpose();
    SubjectTheta {
        omega,
        score,
        hessian,
        info,
        log_integral: lse,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultilevelOptions {
    pub n_gq: usize,
    pub outer_max: usize,
    pub outer_tol: f64,
    pub score_tol: f64,
    pub newton_max: usize,
    pub fit: FitOptions,
}

impl Default for MultilevelOptions {
    fn default() -> Self {
        MultilevelOptions {
            n_gq: 7,
            outer_max: 100,
            outer_tol: 1e-6,
            score_tol: 1e-6,
            newton_max: 50,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelFit {
    pub columns: Vec<String>,
    pub theta: Vec<f64>,
    pub psi: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    /// Random-effect modes keyed by subject.
    pub b_hats: Vec<(u64, Vec<f64>)>,
    /// Penalized approximate marginal log-likelihood.
    pub loglik: f64,
    pub n_gq_used: usize,
    pub outer_iterations: usize,
    pub score_norm: f64,
}

impl MultilevelFit {
    /// `subject_id,b_1..b_q`.
    pub fn write_blups_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let q = self.psi.nrows();
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=q).map(|j| format!("b_{j}")));
        wr.write_record(&header)?;
        for (id, b) in &self.b_hats {
            let mut rec = vec![id.to_string()];
            rec.extend(b.iter().map(|v| format!("{v:?}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Contiguous row ranges of each subject in a canonical design.
pub fn subject_ranges(design: &Design) -> Vec<(u64, Range<usize>)> {
    let mut out: Vec<(u64, Range<usize>)> = Vec::new();
    for (i, r) in design.rows.iter().enumerate() {
        match out.last_mut() {
            Some((id, rg)) if *id == r.subject_id => rg.end = i + 1,
            _ => out.push((r.subject_id, i..i + 1)),
        }
    }
    out
}

struct State<'a> {
    design: &'a Design,
    z: &'a [Vec<f64>],
    ranges: &'a [(u64, Range<usize>)],
    rule: &'a QuadratureRule,
}

impl State<'_> {
    fn blups(&self, theta: &[f64], psi: &DMatrix<f64>, init: &[Vec<f64>]) -> Result<Vec<Blup>> {
        self.ranges
            .par_iter()
            .enumerate()
            .map(|(i, (_, rg))| newton_blup(&self.design.rows[rg.clone()], &self.z[rg.clone()], theta, psi, Some(&init[i])))
            .collect()
    }

    /// Penalized objective and its θ-derivatives at fixed adaptive nodes.
    fn theta_terms(
        &self,
        theta: &[f64],
        psi_inv: &DMatrix<f64>,
        nodes: &[(Vec<Vec<f64>>, Vec<f64>)],
        pen: &DMatrix<f64>,
    ) -> (f64, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let parts: Vec<SubjectTheta> = self
            .ranges
            .par_iter()
            .zip(nodes)
            .map(|((_, rg), (nd, lw))| subject_theta_terms(&self.design.rows[rg.clone()], &self.z[rg.clone()], theta, psi_inv, nd, lw))
            .collect();
        let p = theta.len();
        let th = DVector::from_column_slice(theta);
        let mut obj = -0.5 * (th.transpose() * pen * &th)[(0, 0)];
        let mut score = -(pen * &th);
        let mut hess = -pen.clone();
        let mut info = pen.clone();
        for s in parts {
            obj += s.log_integral;
            score += s.score;
            hess += s.hessian;
            info += s.info;
        }
        debug_assert_eq!(score.len(), p);
        (obj, score, hess, info)
    }
}

/// Fit `θ`, `Ψ` and the penalty variances by alternating mode finding,
/// Newton steps on the AGQ score in `θ`, the EM update of `Ψ` and the
/// variance update of the fixed-effects fitter.
pub fn fit_multilevel(design: &Design, spec: &RandomEffectSpec, rule: &QuadratureRule, opts: &MultilevelOptions) -> Result<MultilevelFit> {
    design.validate()?;
    let ranges = subject_ranges(design);
    if ranges.len() < 2 {
        return Err(Error::invalid("multilevel fitting needs at least two subjects"));
    }
    let q = spec.q(design)?;
    let base = fit_alternating(design, &opts.fit)?;
    if q == 0 {
        return Ok(MultilevelFit {
            columns: base.columns,
            theta: base.theta,
            psi: DMatrix::zeros(0, 0),
            sigma2: base.sigma2,
            b_hats: ranges.iter().map(|(id, _)| (*id, Vec::new())).collect(),
            loglik: f64::NAN,
            n_gq_used: 0,
            outer_iterations: 0,
            score_norm: 0.0,
        });
    }
    let rule = if q > 2 && rule.n_gq > 1 {
        log::warn!("random-effect dimension {q} > 2: using the Laplace approximation (n_gq = 1)");
        QuadratureRule::gauss_hermite(1)?
    } else {
        rule.clone()
    };
    let z = spec.z_rows(design)?;
    let state = State {
        design,
        z: &z,
        ranges: &ranges,
        rule: &rule,
    };
    let mut theta = base.theta.clone();
    let mut sigma2 = base.sigma2.clone();
    let mut psi = DMatrix::identity(q, q) * spec.psi_init;
    let mut b: Vec<Vec<f64>> = vec![vec![0.0; q]; ranges.len()];
    let mut iterations = 0;
    let mut score_norm = f64::INFINITY;
    let mut obj = f64::NEG_INFINITY;
    for outer in 0..opts.outer_max {
        iterations = outer + 1;
        let blups = state.blups(&theta, &psi, &b)?;
        b = blups.iter().map(|x| x.b.clone()).collect();
        let psi_inv = cholesky_with_jitter(&psi)?.0.inverse();
        let nodes = blups
            .iter()
            .map(|bl| adaptive_nodes(&bl.b, &bl.neg_hessian, state.rule).map(|(n, w, _)| (n, w)))
            .collect::<Result<Vec<_>>>()?;
        let pen = penalty_matrix(design, &sigma2);
        let theta_old = theta.clone();
        // Newton on θ with nodes held at the current modes.
        for _ in 0..opts.newton_max {
            let (f, score, hess, info) = state.theta_terms(&theta, &psi_inv, &nodes, &pen);
            obj = f;
            score_norm = score.amax();
            if score_norm < opts.score_tol {
                break;
            }
            let neg = -&hess;
            let dir = match neg.clone().cholesky() {
                Some(c) => c.solve(&score),
                None => cholesky_with_jitter(&info)?.0.solve(&score),
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
                let (fc, sc, _, _) = state.theta_terms(&cand, &psi_inv, &nodes, &pen);
                if fc >= f - 1e-12 * f.abs().max(1.0) || sc.amax() < score_norm {
                    theta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // EM update of Ψ from the modes and their curvature.
        let blups = state.blups(&theta, &psi, &b)?;
        let mut new_psi = DMatrix::zeros(q, q);
        for bl in &blups {
            let bv = DVector::from_column_slice(&bl.b);
            new_psi += &bv * bv.transpose() + cholesky_with_jitter(&bl.neg_hessian)?.0.inverse();
        }
        new_psi /= blups.len() as f64;
        new_psi = symmetrize(&new_psi);
        let floor = 1e-10 * new_psi.trace().max(1e-300) / q as f64;
        let min_eig = SymmetricEigen::new(new_psi.clone()).eigenvalues.min();
        if min_eig < floor {
            log::warn!("random-effect covariance nearly singular; adding a ridge");
            new_psi += DMatrix::identity(q, q) * (floor - min_eig.min(0.0));
        }
        b = blups.iter().map(|x| x.b.clone()).collect();
        let new_sigma2 = if opts.fit.fixed_sigma2.is_some() {
            sigma2.clone()
        } else {
            update_sigma2(&theta, design)
        };
        let rel = |a: &[f64], b: &[f64]| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            num / den
        };
        let d_theta = rel(&theta, &theta_old);
        let d_psi = (&new_psi - &psi).norm() / psi.norm().max(1e-8);
        let d_sig = rel(&new_sigma2, &sigma2);
        psi = new_psi;
        sigma2 = new_sigma2;
        if d_theta < opts.outer_tol && d_psi < opts.outer_tol && d_sig < opts.outer_tol && score_norm < opts.score_tol {
            break;
        }
    }
    let psi_inv_const = cholesky_with_jitter(&psi)?;
    let log_det_psi = 2.0 * (0..q).map(|i| psi_inv_const.0.l()[(i, i)].ln()).sum::<f64>();
    let loglik = obj - ranges.len() as f64 * (0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_psi);
    Ok(MultilevelFit {
        columns: design.columns.clone(),
        theta,
        psi,
        sigma2,
        b_hats: ranges.iter().zip(b).map(|((id, _), bb)| (*id, bb)).collect(),
        loglik,
        n_gq_used: rule.n_gq,
        outer_iterations: iterations,
        score_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn rows_from(w: Vec<Vec<f64>>, y: Vec<u8>) -> Vec<DesignRow> {
        w.into_iter()
            .zip(y)
            .enumerate()
            .map(|(i, (w, y))| DesignRow {
                subject_id: 0,
                t: i as f64,
                y,
                log_pi: 0.0,
                w,
            })
            .collect()
    }

    /// Rare-event random-intercept data: `n` subjects with `m` rows each.
    pub(crate) fn ri_design(n: usize, m: usize, theta: [f64; 2], psi: f64, seed: u64) -> Design {
        let mut r = rng::from_seed(seed);
        let mut rows = Vec::new();
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut r);
            let b = psi.sqrt() * z;
            for j in 0..m {
                let x: f64 = StandardNormal.sample(&mut r);
                let p = expit(theta[0] + theta[1] * x + b);
                let y = u8::from(r.random::<f64>() < p);
                rows.push(DesignRow {
                    subject_id: i as u64,
                    t: j as f64,
                    y,
                    log_pi: 0.0,
                    w: vec![1.0, x],
                });
            }
        }
        let mut d = Design::unpenalized(vec!["intercept".into(), "x".into()], rows);
        d.canonicalize();
        d
    }

    #[test]
    fn gauss_hermite_matches_published_five_point_rule() {
        let r = QuadratureRule::gauss_hermite(5).unwrap();
        let nodes = [-2.020_182_870_456_086, -0.958_572_464_613_818_5, 0.0, 0.958_572_464_613_818_5, 2.020_182_870_456_086];
        let weights = [0.019_953_242_059_045_91, 0.393_619_323_152_241_2, 0.945_308_720_482_941_9, 0.393_619_323_152_241_2, 0.019_953_242_059_045_91];
        for i in 0..5 {
            assert_relative_eq!(r.nodes[i], nodes[i], epsilon = 1e-13);
            assert_relative_eq!(r.weights[i], weights[i], epsilon = 1e-13);
        }
        assert!(QuadratureRule::gauss_hermite(0).is_err());
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let r = QuadratureRule::gauss_hermite(10).unwrap();
        // ∫ x^4 e^{-x²} = 3 sqrt(pi) / 4.
        let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(m4, 0.75 * std::f64::consts::PI.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn quadratic_g_is_integrated_exactly() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mode = [0.4, -1.0];
        let g = |b: &[f64]| {
            let d = DVector::from_vec(vec![b[0] - mode[0], b[1] - mode[1]]);
            1.5 - 0.5 * (d.transpose() * &h * &d)[(0, 0)]
        };
        let exact = 1.5 + (2.0 * std::f64::consts::PI).ln() - 0.5 * h.determinant().ln();
        for n in [1, 2, 5] {
            let rule = QuadratureRule::gauss_hermite(n).unwrap();
            let got = agq_integral(g, &mode, &h, &rule).unwrap();
            assert!((got - exact).abs() < 1e-12, "{n}: {got} vs {exact}");
        }
    }

    #[test]
    fn blup_is_zero_when_stationary_at_origin() {
        // One event and one non-event at eta = 0: residuals cancel.
        let rows = rows_from(vec![vec![1.0], vec![1.0]], vec![1, 0]);
        let z = vec![vec![1.0], vec![1.0]];
        let psi = DMatrix::from_element(1, 1, 2.0);
        let b = newton_blup(&rows, &z, &[0.0], &psi, None).unwrap();
        assert!(b.b[0].abs() < 1e-14);
    }

    #[test]
    fn blup_matches_golden_section() {
        let rows = rows_from(vec![vec![0.3]], vec![1]);
        let z = vec![vec![1.7]];
        let psi = DMatrix::from_element(1, 1, 0.8);
        let theta = [-1.2];
        let bl = newton_blup(&rows, &z, &theta, &psi, None).unwrap();
        let psi_inv = DMatrix::from_element(1, 1, 1.0 / 0.8);
        let f = |b: f64| -g_value(&rows, &z, &theta, &psi_inv, &[b]);
        let (mut a, mut c) = (-10.0, 10.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = c - phi * (c - a);
            let x2 = a + phi * (c - a);
            if f(x1) < f(x2) {
                c = x2;
            } else {
                a = x1;
            }
        }
        assert_relative_eq!(bl.b[0], 0.5 * (a + c), epsilon = 1e-8);
    }

    #[test]
    fn tiny_psi_shrinks_blup_to_zero() {
        let rows = rows_from(vec![vec![1.0]; 5], vec![1, 1, 1, 1, 0]);
        let z = vec![vec![1.0]; 5];
        let psi = DMatrix::from_element(1, 1, 1e-8);
        let b = newton_blup(&rows, &z, &[-2.0], &psi, None).unwrap();
        assert!(b.b[0].abs() < 1e-7);
    }

    #[test]
    fn one_node_is_laplace() {
        let d = ri_design(1, 30, [-2.0, 0.7], 1.0, 3);
        let z = vec![vec![1.0]; d.rows.len()];
        let psi = DMatrix::from_element(1, 1, 0.7);
        let theta = [-2.1, 0.6];
        let rule = QuadratureRule::gauss_hermite(1).unwrap();
        let agq = agq_marginal_loglik(&d.rows, &z, &theta, &psi, &rule).unwrap();
        let bl = newton_blup(&d.rows, &z, &theta, &psi, None).unwrap();
        let psi_inv = DMatrix::from_element(1, 1, 1.0 / 0.7);
        let g = g_value(&d.rows, &z, &theta, &psi_inv, &bl.b);
        let laplace = g + 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * bl.neg_hessian[(0, 0)].ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * 0.7f64.ln();
        assert!((agq - laplace).abs() < 1e-8);
    }

    #[test]
    fn marginal_is_invariant_to_row_order() {
        let d = ri_design(1, 20, [-1.5, 0.5], 1.0, 4);
        let z = vec![vec![1.0]; d.rows.len()];
        let psi = DMatrix::from_element(1, 1, 0.5);
        let rule = QuadratureRule::gauss_hermite(7).unwrap();
        let a = agq_marginal_loglik(&d.rows, &z, &[-1.4, 0.4], &psi, &rule).unwrap();
        let mut rev = d.rows.clone();
        rev.reverse();
        let b = agq_marginal_loglik(&rev, &z, &[-1.4, 0.4], &psi, &rule).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn theta_score_and_hessian_match_finite_differences() {
        let d = ri_design(1, 25, [-1.0, 0.8], 1.0, 5);
        let z = vec![vec![1.0]; d.rows.len()];
        let psi = DMatrix::from_element(1, 1, 0.9);
        let psi_inv = DMatrix::from_element(1, 1, 1.0 / 0.9);
        let rule = QuadratureRule::gauss_hermite(5).unwrap();
        let theta = [-0.9, 0.7];
        let bl = newton_blup(&d.rows, &z, &theta, &psi, None).unwrap();
        let (nodes, lw, _) = adaptive_nodes(&bl.b, &bl.neg_hessian, &rule).unwrap();
        let t = subject_theta_terms(&d.rows, &z, &theta, &psi_inv, &nodes, &lw);
        assert_relative_eq!(t.omega.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(t.omega.iter().all(|&w| w >= 0.0));
        let f = |th: &[f64]| subject_theta_terms(&d.rows, &z, th, &psi_inv, &nodes, &lw).log_integral;
        let h = 1e-5;
        for j in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[j] += h;
            tm[j] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert_relative_eq!(t.score[j], fd, max_relative = 1e-6);
            let sp = subject_theta_terms(&d.rows, &z, &tp, &psi_inv, &nodes, &lw).score;
            let sm = subject_theta_terms(&d.rows, &z, &tm, &psi_inv, &nodes, &lw).score;
            for k in 0..2 {
                assert_relative_eq!(t.hessian[(k, j)], (sp[k] - sm[k]) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn q_zero_reduces_to_fixed_effects_fit() {
        let d = ri_design(10, 30, [-1.0, 0.5], 0.0, 6);
        let spec = RandomEffectSpec {
            z_map: ZMap::Columns(vec![]),
            psi_init: 0.1,
        };
        let rule = QuadratureRule::gauss_hermite(3).unwrap();
        let m = fit_multilevel(&d, &spec, &rule, &MultilevelOptions::default()).unwrap();
        let f = fit_alternating(&d, &FitOptions::default()).unwrap();
        assert_eq!(m.theta, f.theta);
        assert_eq!(m.psi.nrows(), 0);
    }

    #[test]
    fn random_intercept_fit_recovers_heterogeneity() {
        let d = ri_design(80, 60, [-1.5, 0.6], 1.0, 7);
        let spec = RandomEffectSpec {
            z_map: ZMap::Intercept,
            psi_init: 0.1,
        };
        let rule = QuadratureRule::gauss_hermite(7).unwrap();
        let m = fit_multilevel(&d, &spec, &rule, &MultilevelOptions::default()).unwrap();
        assert!(m.score_norm < 1e-6, "{}", m.score_norm);
        assert!((m.theta[1] - 0.6).abs() < 0.15, "{:?}", m.theta);
        assert!(m.psi[(0, 0)] > 0.4 && m.psi[(0, 0)] < 2.0, "{}", m.psi);
        let mut buf = Vec::new();
        m.write_blups_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 81);
    }

    #[test]
    fn single_subject_is_rejected() {
        let d = ri_design(1, 10, [-1.0, 0.5], 0.0, 8);
        let spec = RandomEffectSpec {
            z_map: ZMap::Intercept,
            psi_init: 0.1,
        };
        let rule = QuadratureRule::gauss_hermite(3).unwrap();
        assert!(fit_multilevel(&d, &spec, &rule, &MultilevelOptions::default()).is_err());
    }
}
