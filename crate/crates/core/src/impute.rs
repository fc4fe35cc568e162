//! Conditional-Gaussian multiple imputation of partially observed windows and
//! bootstrap-then-impute inference.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::{Dataset, SubjectData};
use crate::design::{FunctionalBlock, StreamTerm};
use crate::error::{Error, Result};
use crate::fit::{fit_alternating, BetaCurve, FitResult};
use crate::fpca::{FpcaModel, WindowedHistory};
use crate::linalg::{quad_form, sym_eigen_desc, symmetrize};
use crate::pipeline::{build_terms, design_from_windows, prepare, PipelineConfig};
use crate::rng::{self, Rng};

/// Law of the missing coordinates of a window given the observed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLaw {
    /// Lag indices of the missing coordinates.
    pub missing: Vec<usize>,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Ridge added to the observed block, zero if none was needed.
    pub ridge: f64,
}

impl ConditionalLaw {
    pub fn is_degenerate(&self) -> bool {
        self.missing.is_empty()
    }

    /// One draw of the missing coordinates.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.missing.len();
        if n == 0 {
            return Vec::new();
        }
        let (vals, vecs) = sym_eigen_desc(&self.cov);
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = self.mean.clone();
        for (k, &lam) in vals.iter().enumerate() {
            if lam <= 0.0 {
                continue;
            }
            let c = lam.sqrt() * z[k];
            for (i, o) in out.iter_mut().enumerate() {
                *o += c * vecs[(i, k)];
            }
        }
        out
    }
}

/// Condition the masked coordinates of `window` on the observed ones under
/// `N(mean, cov)`.
pub fn conditional_law(window: &WindowedHistory, mean: &[f64], cov: &DMatrix<f64>) -> Result<ConditionalLaw> {
    let m = window.values.len();
    if mean.len() != m || cov.nrows() != m || cov.ncols() != m || window.mask.len() != m {
        return Err(Error::mismatch("window, mean and covariance sizes differ"));
    }
    let missing: Vec<usize> = (0..m).filter(|&i| window.mask[i]).collect();
    let observed: Vec<usize> = (0..m).filter(|&i| !window.mask[i]).collect();
    if observed.is_empty() {
        return Err(Error::FullyMissing {
            anchor_t: window.anchor_t,
        });
    }
    if missing.is_empty() {
        return Ok(ConditionalLaw {
            missing,
            mean: Vec::new(),
            cov: DMatrix::zeros(0, 0),
            ridge: 0.0,
        });
    }
    let (no, nu) = (observed.len(), missing.len());
    let mut s_oo = DMatrix::from_fn(no, no, |i, j| cov[(observed[i], observed[j])]);
    let s_uo = DMatrix::from_fn(nu, no, |i, j| cov[(missing[i], observed[j])]);
    let s_uu = DMatrix::from_fn(nu, nu, |i, j| cov[(missing[i], missing[j])]);
    let mut ridge = 0.0;
    let chol = match s_oo.clone().cholesky() {
        Some(c) => c,
        None => {
            ridge = 1e-8 * s_oo.trace() / no as f64;
            for i in 0..no {
                s_oo[(i, i)] += ridge;
            }
            s_oo.cholesky().ok_or(Error::IllConditioned { jitter: ridge })?
        }
    };
    let resid = DVector::from_iterator(no, observed.iter().map(|&i| window.values[i] - mean[i]));
    let shift = &s_uo * chol.solve(&resid);
    let cond_mean = missing.iter().enumerate().map(|(k, &i)| mean[i] + shift[k]).collect();
    let cond_cov = symmetrize(&(s_uu - &s_uo * chol.solve(&s_uo.transpose())));
    Ok(ConditionalLaw {
        missing,
        mean: cond_mean,
        cov: cond_cov,
        ridge,
    })
}

/// Label-specific mean on the lag grid and covariance for a window.
fn window_moments<'a>(w: &WindowedHistory, fpca: &'a FpcaModel) -> (Vec<f64>, &'a DMatrix<f64>) {
    let l = fpca.for_label(w.label);
    (l.mean.window(w.anchor_t, &l.cov.s_grid), &l.cov.matrix)
}

/// `n_imp` completions of one subject's windows for one stream. Windows are
/// visited in anchor order; sensor points imputed for an earlier window are
/// reused by every later window that covers them.
pub fn impute_sequential(windows: &[WindowedHistory], fpca: &FpcaModel, n_imp: usize, seed: u64) -> Result<Vec<Vec<WindowedHistory>>> {
    if windows.windows(2).any(|p| p[1].anchor_t < p[0].anchor_t) {
        return Err(Error::invalid("windows must be sorted by anchor time"));
    }
    let mut rng = rng::from_seed(seed);
    let mut out = Vec::with_capacity(n_imp);
    for _ in 0..n_imp {
        let mut filled: HashMap<usize, f64> = HashMap::new();
        let mut done = Vec::with_capacity(windows.len());
        for w in windows {
            let mut w = w.clone();
            for k in 0..w.mask.len() {
                if w.mask[k] {
                    if let Some(v) = w.grid_index(k).and_then(|g| filled.get(&g)) {
                        w.values[k] = *v;
                        w.mask[k] = false;
                    }
                }
            }
            if !w.is_complete() {
                let (mean, cov) = window_moments(&w, fpca);
                let law = conditional_law(&w, &mean, cov)?;
                let draw = law.sample(&mut rng);
                for (&k, v) in law.missing.iter().zip(draw) {
                    w.values[k] = v;
                    w.mask[k] = false;
                    if let Some(g) = w.grid_index(k) {
                        filled.insert(g, v);
                    }
                }
            }
            done.push(w);
        }
        out.push(done);
    }
    Ok(out)
}

/// Completions of every window list, indexed `[imputation][stream][anchor]`.
/// Windows are grouped into runs of equal subject id.
pub fn impute_windows(windows: &[Vec<WindowedHistory>], terms: &[StreamTerm], n_imp: usize, seed: u64) -> Result<Vec<Vec<Vec<WindowedHistory>>>> {
    if windows.len() != terms.len() {
        return Err(Error::mismatch("one window list per stream term required"));
    }
    let mut out = vec![Vec::with_capacity(windows.len()); n_imp];
    for (j, (ws, term)) in windows.iter().zip(terms).enumerate() {
        let mut runs = Vec::new();
        let mut start = 0;
        while start < ws.len() {
            let id = ws[start].subject_id;
            let len = ws[start..].iter().take_while(|w| w.subject_id == id).count();
            runs.push(start..start + len);
            start += len;
        }
        let parts: Vec<Vec<Vec<WindowedHistory>>> = runs
            .par_iter()
            .map(|r| {
                let ws = &ws[r.clone()];
                if ws.iter().all(WindowedHistory::is_complete) {
                    return Ok(vec![ws.to_vec(); n_imp]);
                }
                let mut g = rng::stream(seed, &[j as u64, ws[0].subject_id]);
                impute_sequential(ws, &term.fpca, n_imp, rng::child_seed(&mut g))
            })
            .collect::<Result<_>>()?;
        for (i, o) in out.iter_mut().enumerate() {
            o.push(parts.iter().flat_map(|p| p[i].iter().cloned()).collect());
        }
    }
    Ok(out)
}

/// Degrees of freedom for the pooled intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfRule {
    /// `B - 1`.
    BootstrapMinusOne,
    /// Normal quantiles.
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootMiConfig {
    pub b: usize,
    pub m: usize,
    pub df: DfRule,
    /// Largest tolerated fraction of failed bootstrap replicates.
    pub max_dropped: f64,
}

impl Default for BootMiConfig {
    fn default() -> Self {
        BootMiConfig {
            b: 20,
            m: 2,
            df: DfRule::BootstrapMinusOne,
            max_dropped: 0.1,
        }
    }
}

/// Between and within mean squares and the pooled covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub point: Vec<f64>,
    pub msw: DMatrix<f64>,
    pub msb: DMatrix<f64>,
    pub sigma_bm: DMatrix<f64>,
    /// The raw combination had negative eigenvalues and was clipped.
    pub floored: bool,
}

/// Pool `estimates[b][m]`.
pub fn pool_boot_mi(estimates: &[Vec<Vec<f64>>]) -> Result<Pooled> {
    let b = estimates.len();
    if b < 2 {
        return Err(Error::invalid("need at least two bootstrap replicates"));
    }
    let m = estimates[0].len();
    if m < 2 {
        return Err(Error::invalid("need at least two imputations"));
    }
    let p = estimates[0][0].len();
    if estimates.iter().any(|e| e.len() != m || e.iter().any(|t| t.len() != p)) {
        return Err(Error::mismatch("ragged bootstrap estimates"));
    }
    let means: Vec<DVector<f64>> = estimates
        .iter()
        .map(|e| e.iter().fold(DVector::zeros(p), |acc, t| acc + DVector::from_column_slice(t)) / m as f64)
        .collect();
    let point = means.iter().fold(DVector::zeros(p), |acc, t| acc + t) / b as f64;
    let mut msw = DMatrix::zeros(p, p);
    let mut msb = DMatrix::zeros(p, p);
    for (e, mb) in estimates.iter().zip(&means) {
        for t in e {
            let d = DVector::from_column_slice(t) - mb;
            msw += &d * d.transpose();
        }
        let d = mb - &point;
        msb += (&d * d.transpose()) * m as f64;
    }
    msw /= (b * (m - 1)) as f64;
    msb /= (b - 1) as f64;
    let raw = symmetrize(&(&msb * ((b + 1) as f64 / (b * m) as f64) - &msw / m as f64));
    let (vals, vecs) = sym_eigen_desc(&raw);
    let floored = vals.iter().any(|&v| v < 0.0);
    let sigma_bm = if floored {
        let mut s = DMatrix::zeros(p, p);
        for (k, &v) in vals.iter().enumerate() {
            if v > 0.0 {
                let c = vecs.column(k);
                s += v * c * c.transpose();
            }
        }
        symmetrize(&s)
    } else {
        raw
    };
    Ok(Pooled {
        point: point.iter().copied().collect(),
        msw,
        msb,
        sigma_bm,
        floored,
    })
}

/// Diagnostics of the fits inside one bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateDiagnostics {
    pub index: usize,
    pub error: Option<String>,
    pub outer_iterations: Vec<usize>,
    pub grad_norms: Vec<f64>,
    pub separation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootMIResult {
    /// Bootstrap replicates kept.
    pub b: usize,
    pub m: usize,
    pub columns: Vec<String>,
    pub blocks: Vec<FunctionalBlock>,
    pub point: Vec<f64>,
    pub msw: DMatrix<f64>,
    pub msb: DMatrix<f64>,
    pub sigma_bm: DMatrix<f64>,
    pub floored: bool,
    pub df: f64,
    pub dropped: usize,
    pub replicates: Vec<ReplicateDiagnostics>,
}

impl BootMIResult {
    fn quantile(&self, level: f64) -> f64 {
        let q = 0.5 + 0.5 * level;
        if self.df.is_finite() {
            StudentsT::new(0.0, 1.0, self.df).map_or(f64::NAN, |d| d.inverse_cdf(q))
        } else {
            Normal::standard().inverse_cdf(q)
        }
    }

    /// Pointwise intervals for block `k` at confidence `level`.
    pub fn beta_curve(&self, k: usize, t_grid: &[f64], level: f64) -> BetaCurve {
        let blk = &self.blocks[k];
        let r = blk.range();
        let coef = &self.point[r.clone()];
        let cov = self.sigma_bm.view((r.start, r.start), (r.len(), r.len())).clone_owned();
        let z = self.quantile(level);
        let mut out = BetaCurve {
            t: t_grid.to_vec(),
            estimate: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            significant: Vec::new(),
        };
        for &t in t_grid {
            let phi = blk.basis.eval(t);
            let est: f64 = phi.iter().zip(coef).map(|(a, b)| a * b).sum();
            let se = quad_form(&cov, &phi).max(0.0).sqrt();
            out.estimate.push(est);
            out.lower.push(est - z * se);
            out.upper.push(est + z * se);
            out.significant.push(est - z * se > 0.0 || est + z * se < 0.0);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Subjects drawn with replacement and renumbered `0..n` so duplicates stay
/// distinct.
pub fn resample_subjects(ds: &Dataset, rng: &mut Rng) -> Dataset {
    let n = ds.subjects.len();
    let subjects = (0..n)
        .map(|i| {
            let src = &ds.subjects[rng.random_range(0..n)];
            relabel(src, i as u64)
        })
        .collect();
    Dataset { subjects }
}

fn relabel(s: &SubjectData, id: u64) -> SubjectData {
    let mut s = s.clone();
    s.id = id;
    s.events.subject_id = id;
    s.samples.subject_id = id;
    s
}

type ReplicateOutput = (Vec<Vec<f64>>, Vec<String>, Vec<FunctionalBlock>);

fn run_boot_replicate(ds: &Dataset, pipeline: &PipelineConfig, m: usize, seed: u64, diag: &mut ReplicateDiagnostics) -> Result<ReplicateOutput> {
    let mut g = rng::stream(seed, &[diag.index as u64]);
    let boot = resample_subjects(ds, &mut g);
    let prep = prepare(&boot, None, pipeline)?;
    let terms = build_terms(&prep, pipeline)?;
    let imputed = impute_windows(&prep.windows, &terms, m, rng::child_seed(&mut g))?;
    let mut thetas = Vec::with_capacity(m);
    let mut layout = None;
    for windows in &imputed {
        let design = design_from_windows(&boot, &prep, windows, &terms, pipeline)?;
        let fit = fit_alternating(&design, &pipeline.fit)?;
        diag.outer_iterations.push(fit.convergence.outer_iterations);
        diag.grad_norms.push(fit.convergence.grad_norm);
        diag.separation |= fit.convergence.separation;
        thetas.push(fit.theta);
        layout.get_or_insert((fit.columns, fit.blocks));
    }
    let (columns, blocks) = layout.ok_or_else(|| Error::invalid("no imputations"))?;
    Ok((thetas, columns, blocks))
}

/// Fits of `m` completions of the original sample, FPCA estimated once.
pub fn mi_fits(ds: &Dataset, pipeline: &PipelineConfig, m: usize, seed: u64) -> Result<Vec<FitResult>> {
    if m == 0 {
        return Err(Error::invalid("need at least one imputation"));
    }
    let prep = prepare(ds, None, pipeline)?;
    let terms = build_terms(&prep, pipeline)?;
    impute_windows(&prep.windows, &terms, m, seed)?
        .iter()
        .map(|w| fit_alternating(&design_from_windows(ds, &prep, w, &terms, pipeline)?, &pipeline.fit))
        .collect()
}

/// Bootstrap subjects, re-estimate the FPCA, impute each bootstrap sample
/// `m` times, fit every completion and pool.
pub fn boot_mi(ds: &Dataset, pipeline: &PipelineConfig, cfg: &BootMiConfig, seed: u64) -> Result<BootMIResult> {
    if cfg.b < 2 || cfg.m < 2 {
        return Err(Error::invalid("boot-MI needs B >= 2 and M >= 2"));
    }
    let results: Vec<(ReplicateDiagnostics, Option<ReplicateOutput>)> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let mut diag = ReplicateDiagnostics {
                index: b,
                error: None,
                outer_iterations: Vec::new(),
                grad_norms: Vec::new(),
                separation: false,
            };
            match run_boot_replicate(ds, pipeline, cfg.m, seed, &mut diag) {
                Ok(out) => (diag, Some(out)),
                Err(e) => {
                    log::warn!("bootstrap replicate {b} dropped: {e}");
                    diag.error = Some(e.to_string());
                    (diag, None)
                }
            }
        })
        .collect();
    let dropped = results.iter().filter(|r| r.1.is_none()).count();
    if dropped as f64 > cfg.max_dropped * cfg.b as f64 {
        return Err(Error::TooManyFailures {
            dropped,
            total: cfg.b,
        });
    }
    let mut estimates = Vec::new();
    let mut layout = None;
    let mut replicates = Vec::with_capacity(cfg.b);
    for (diag, out) in results {
        if let Some((thetas, columns, blocks)) = out {
            match &layout {
                None => layout = Some((columns, blocks)),
                Some((c, _)) if *c != columns => return Err(Error::mismatch("bootstrap fits have different columns")),
                Some(_) => {}
            }
            estimates.push(thetas);
        }
        replicates.push(diag);
    }
    let (columns, blocks) = layout.ok_or(Error::TooManyFailures {
        dropped,
        total: cfg.b,
    })?;
    let pooled = pool_boot_mi(&estimates)?;
    if pooled.floored {
        log::warn!("boot-MI covariance had negative eigenvalues; clipped to PSD");
    }
    let b = estimates.len();
    Ok(BootMIResult {
        b,
        m: cfg.m,
        columns,
        blocks,
        point: pooled.point,
        msw: pooled.msw,
        msb: pooled.msb,
        sigma_bm: pooled.sigma_bm,
        floored: pooled.floored,
        df: match cfg.df {
            DfRule::BootstrapMinusOne => (b - 1) as f64,
            DfRule::Infinite => f64::INFINITY,
        },
        dropped,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{simulate_dataset, SimConfig};
    use crate::fpca::{FpcaConfig, MarginalCov, WindowSpec};
    use crate::gp_sim::MaternParams;
    use approx::assert_relative_eq;

    fn window(values: Vec<f64>, mask: Vec<bool>) -> WindowedHistory {
        WindowedHistory {
            subject_id: 0,
            anchor_t: 100.0,
            label: 0,
            anchor_index: 200,
            stride: 1,
            values,
            mask,
        }
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::from_seed(seed);
        let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut r));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn bivariate_conditioning() {
        let rho: f64 = 0.6;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let w = window(vec![1.5, 0.0], vec![false, true]);
        let law = conditional_law(&w, &[0.2, -0.3], &cov).unwrap();
        assert_eq!(law.missing, vec![1]);
        assert_relative_eq!(law.mean[0], -0.3 + rho * (1.5 - 0.2), epsilon = 1e-14);
        assert_relative_eq!(law.cov[(0, 0)], 1.0 - rho * rho, epsilon = 1e-14);
    }

    #[test]
    fn matches_block_precision_oracle() {
        for seed in 0..20 {
            let cov = random_spd(5, seed);
            let mut r = rng::from_seed(seed + 100);
            let mean: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut r)).collect();
            let values: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut r)).collect();
            let i = r.random_range(0..5);
            let j = (i + 1 + r.random_range(0..4)) % 5;
            let mut mask = vec![false; 5];
            mask[i] = true;
            mask[j] = true;
            let law = conditional_law(&window(values.clone(), mask), &mean, &cov).unwrap();
            // Precision blocks: cov = Q_uu^-1, mean = mu_u - Q_uu^-1 Q_uo (x_o - mu_o).
            let q = cov.clone().try_inverse().unwrap();
            let u = &law.missing;
            let o: Vec<usize> = (0..5).filter(|k| !u.contains(k)).collect();
            let quu = DMatrix::from_fn(2, 2, |a, b| q[(u[a], u[b])]);
            let quo = DMatrix::from_fn(2, 3, |a, b| q[(u[a], o[b])]);
            let quu_inv = quu.try_inverse().unwrap();
            let d = DVector::from_iterator(3, o.iter().map(|&k| values[k] - mean[k]));
            let shift = -(&quu_inv * quo * d);
            for a in 0..2 {
                assert!((law.mean[a] - (mean[u[a]] + shift[a])).abs() < 1e-10);
                for b in 0..2 {
                    assert!((law.cov[(a, b)] - quu_inv[(a, b)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn degenerate_and_fully_missing_windows() {
        let cov = random_spd(3, 1);
        let law = conditional_law(&window(vec![1.0, 2.0, 3.0], vec![false; 3]), &[0.0; 3], &cov).unwrap();
        assert!(law.is_degenerate());
        let err = conditional_law(&window(vec![0.0; 3], vec![true; 3]), &[0.0; 3], &cov).unwrap_err();
        assert!(matches!(err, Error::FullyMissing { .. }));
    }

    #[test]
    fn uncorrelated_observation_leaves_marginal_law() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.3, 0.0, 0.3, 1.5]);
        let law = conditional_law(&window(vec![5.0, 0.0, 0.0], vec![false, true, true]), &[1.0, -1.0, 0.5], &cov).unwrap();
        assert_eq!(law.mean, vec![-1.0, 0.5]);
        assert_eq!(law.cov, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.5]));
    }

    #[test]
    fn singular_observed_block_gets_ridge() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0]);
        let law = conditional_law(&window(vec![1.0, 1.0, 0.0], vec![false, false, true]), &[0.0; 3], &cov).unwrap();
        assert!(law.ridge > 0.0);
        assert!(law.mean[0].is_finite());
    }

    fn toy_fpca(m: usize) -> FpcaModel {
        let spec = WindowSpec::new((m - 1) as f64, 1.0, 200).unwrap();
        let params = MaternParams::new(0.5, 1.0, 5.0).unwrap();
        let cfg = FpcaConfig::known(params, m - 1);
        crate::fpca::fit_fpca(&[], &spec, &cfg).unwrap()
    }

    fn lagged(anchor_index: usize, m: usize, path: &[f64], miss: &[bool]) -> WindowedHistory {
        WindowedHistory {
            subject_id: 3,
            anchor_t: anchor_index as f64,
            label: 0,
            anchor_index,
            stride: 1,
            values: (0..m).map(|k| path[anchor_index - k]).collect(),
            mask: (0..m).map(|k| miss[anchor_index - k]).collect(),
        }
    }

    #[test]
    fn overlapping_windows_share_imputed_points() {
        let m = 6;
        let fpca = toy_fpca(m);
        let path: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut miss = vec![false; 20];
        miss[8] = true;
        miss[10] = true;
        let ws = vec![lagged(10, m, &path, &miss), lagged(12, m, &path, &miss), lagged(12, m, &path, &miss)];
        let imps = impute_sequential(&ws, &fpca, 3, 9).unwrap();
        for imp in &imps {
            assert!(imp.iter().all(WindowedHistory::is_complete));
            // Grid point 8 is lag 2 of the first window and lag 4 of the others.
            assert_eq!(imp[0].values[2], imp[1].values[4]);
            assert_eq!(imp[1].values, imp[2].values);
            // Observed values untouched, bitwise.
            for (w, orig) in imp.iter().zip(&ws) {
                for k in 0..m {
                    if !orig.mask[k] {
                        assert_eq!(w.values[k].to_bits(), orig.values[k].to_bits());
                    }
                }
            }
        }
        assert_ne!(imps[0][0].values[2], imps[1][0].values[2]);
    }

    #[test]
    fn non_overlapping_windows_are_independent_draws() {
        let m = 4;
        let fpca = toy_fpca(m);
        let path: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        let mut miss = vec![false; 30];
        miss[9] = true;
        miss[19] = true;
        let ws = vec![lagged(10, m, &path, &miss), lagged(20, m, &path, &miss)];
        let imp = impute_sequential(&ws, &fpca, 1, 4).unwrap();
        // Same law for each, since the observed neighbours are identical up to a shift.
        let l1 = conditional_law(&ws[0], &[0.0; 4], &fpca.labels[0].cov.matrix).unwrap();
        let l2 = conditional_law(&ws[1], &[0.0; 4], &fpca.labels[0].cov.matrix).unwrap();
        assert_eq!(l1.cov, l2.cov);
        assert!(imp[0][0].is_complete() && imp[0][1].is_complete());
    }

    #[test]
    fn imputation_mean_matches_conditional_mean() {
        let m = 5;
        let fpca = toy_fpca(m);
        let path: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1, 1.2, 0.4];
        let miss = vec![false, false, true, false, true, false];
        let w = lagged(5, m, &path, &miss);
        let law = conditional_law(&w, &[0.0; 5], &fpca.labels[0].cov.matrix).unwrap();
        let n = 10_000;
        let imps = impute_sequential(std::slice::from_ref(&w), &fpca, n, 17).unwrap();
        for (a, &k) in law.missing.iter().enumerate() {
            let xs: Vec<f64> = imps.iter().map(|i| i[0].values[k]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let se = (law.cov[(a, a)] / n as f64).sqrt();
            assert!((mean - law.mean[a]).abs() < 3.0 * se, "{mean} vs {}", law.mean[a]);
        }
    }

    #[test]
    fn pooling_arithmetic_on_fixed_inputs() {
        let est = vec![vec![vec![1.0, 0.0], vec![3.0, 2.0]], vec![vec![2.0, 1.0], vec![6.0, 1.0]]];
        let p = pool_boot_mi(&est).unwrap();
        // Replicate means (2, 1) and (4, 1); point (3, 1).
        assert_eq!(p.point, vec![3.0, 1.0]);
        // Within: deviations (-1,-1),(1,1),(-2,0),(2,0) over B(M-1) = 2.
        assert_eq!(p.msw, DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 1.0]));
        // Between: M * [(−1,0),(1,0)] outer sums over B-1 = 1.
        assert_eq!(p.msb, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]));
        // (3/4) MSB - MSW/2 = [[0.5, -0.5], [-0.5, -0.5]]: indefinite, floored.
        assert!(p.floored);
        let (vals, _) = sym_eigen_desc(&p.sigma_bm);
        assert!(vals.iter().all(|&v| v >= -1e-12));
        assert_eq!(p.sigma_bm, p.sigma_bm.transpose());
    }

    #[test]
    fn pooling_without_flooring_is_exact() {
        let est = vec![vec![vec![1.0], vec![1.0]], vec![vec![3.0], vec![3.0]], vec![vec![5.0], vec![5.0]]];
        let p = pool_boot_mi(&est).unwrap();
        assert_eq!(p.msw[(0, 0)], 0.0);
        assert_eq!(p.msb[(0, 0)], 8.0);
        assert_eq!(p.sigma_bm[(0, 0)], 4.0 / 6.0 * 8.0);
        assert!(!p.floored);
        assert!(pool_boot_mi(&est[..1]).is_err());
    }

    #[test]
    fn complete_data_has_zero_within_variance() {
        let sim = SimConfig {
            n_days: 30,
            seed: 5,
            ..SimConfig::default()
        };
        let ds = simulate_dataset(&sim).unwrap();
        let pipeline = PipelineConfig {
            k_b: 6,
            fpca: FpcaConfig::known(sim.matern, 35),
            ..PipelineConfig::default()
        };
        let cfg = BootMiConfig {
            b: 3,
            m: 2,
            ..BootMiConfig::default()
        };
        let r = boot_mi(&ds, &pipeline, &cfg, 11).unwrap();
        assert_eq!(r.msw.amax(), 0.0);
        assert_eq!(r.b, 3);
        assert_eq!(r.dropped, 0);
        assert_eq!(r.df, 2.0);
        let again = boot_mi(&ds, &pipeline, &cfg, 11).unwrap();
        assert_eq!(r.point, again.point);
        let json = r.to_json().unwrap();
        let fits = mi_fits(&ds, &pipeline, 2, 3).unwrap();
        let plain = crate::pipeline::fit_dataset(&ds, None, &pipeline).unwrap();
        assert_eq!(fits[0].theta, plain.fit.theta);
        assert_eq!(fits[1].theta, plain.fit.theta);
        assert!(json.contains("\"replicates\""));
    }

    #[test]
    fn bad_counts_are_rejected() {
        let ds = Dataset { subjects: vec![] };
        let cfg = BootMiConfig {
            b: 1,
            ..BootMiConfig::default()
        };
        assert!(boot_mi(&ds, &PipelineConfig::default(), &cfg, 0).is_err());
    }

    #[test]
    fn known_cov_is_used_for_moments() {
        let fpca = toy_fpca(4);
        let w = window(vec![0.0; 4], vec![false; 4]);
        let (mean, cov) = window_moments(&w, &fpca);
        assert_eq!(mean, vec![0.0; 4]);
        let direct = MarginalCov::from_matern(&fpca.spec, &MaternParams::new(0.5, 1.0, 5.0).unwrap(), 0);
        assert_eq!(*cov, direct.matrix);
    }
}
