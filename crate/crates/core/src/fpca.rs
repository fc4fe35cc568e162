//! Windowed histories, marginal covariance estimation and functional
//! principal components.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::{difference_penalty, BSplineBasis};
use crate::error::{Error, Result};
use crate::gp_sim::{matern_at_distance, MaternParams, Padding, SensorPath};
use crate::linalg::{cholesky_with_jitter, project_psd, sym_eigen_desc, symmetrize, trapezoid_weights};

/// Relative threshold below which eigenvalues are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Lag grid of a window, aligned with the sensor grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Nominal window length.
    pub delta: f64,
    /// Sensor grid step.
    pub step: f64,
    /// Sensor points between consecutive lag points.
    pub stride: usize,
    /// Number of lag points.
    pub m: usize,
}

impl WindowSpec {
    /// Lags `0, stride*step, ...` up to the largest multiple not exceeding
    /// `delta`, thinned so there are at most `max_points` of them.
    pub fn new(delta: f64, step: f64, max_points: usize) -> Result<Self> {
        if !(delta > 0.0) || !(step > 0.0) {
            return Err(Error::invalid("window length and grid step must be positive"));
        }
        if max_points < 2 {
            return Err(Error::invalid("a window needs at least two lag points"));
        }
        let full = (delta / step + 1e-9).floor() as usize;
        if full == 0 {
            return Err(Error::invalid(format!(
                "window length {delta} is shorter than the grid step {step}"
            )));
        }
        let stride = if full + 1 <= max_points {
            1
        } else {
            full.div_ceil(max_points - 1)
        };
        let m = full / stride + 1;
        Ok(WindowSpec {
            delta,
            step,
            stride,
            m,
        })
    }

    /// Window length actually covered by the lag grid.
    pub fn effective_delta(&self) -> f64 {
        (self.m - 1) as f64 * self.stride as f64 * self.step
    }

    pub fn s_grid(&self) -> Vec<f64> {
        (0..self.m)
            .map(|k| (k * self.stride) as f64 * self.step)
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.s_grid())
    }
}

/// `X(t, s) = x(t - s)` on the lag grid for one anchor and one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedHistory {
    pub subject_id: u64,
    pub anchor_t: f64,
    pub label: u8,
    /// Sensor-grid index of lag 0.
    pub anchor_index: usize,
    pub stride: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl WindowedHistory {
    pub fn is_complete(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Sensor-grid index of lag `k`, if it lies on the path.
    pub fn grid_index(&self, k: usize) -> Option<usize> {
        self.anchor_index.checked_sub(k * self.stride)
    }
}

/// Windows for labelled anchors. Lag 0 is the sensor point at the start of
/// the grid step containing the anchor.
pub fn extract_windows(
    path: &SensorPath,
    stream: usize,
    subject_id: u64,
    anchors: &[(f64, u8)],
    spec: &WindowSpec,
    padding: Padding,
) -> Result<Vec<WindowedHistory>> {
    if stream >= path.n_streams() {
        return Err(Error::invalid(format!("stream {stream} not present")));
    }
    if (path.step() - spec.step).abs() > 1e-9 * spec.step {
        return Err(Error::mismatch("window spec step differs from sensor grid"));
    }
    let x = path.values(stream);
    let miss = path.missing(stream);
    anchors
        .iter()
        .map(|&(t, label)| {
            let i0 = path.step_index(t)?;
            let reach = (spec.m - 1) * spec.stride;
            if i0 < reach && padding == Padding::Restrict {
                return Err(Error::OutOfRange {
                    t: t - spec.effective_delta(),
                    lo: path.start(),
                    hi: path.end(),
                });
            }
            let mut values = Vec::with_capacity(spec.m);
            let mut mask = Vec::with_capacity(spec.m);
            for k in 0..spec.m {
                match i0.checked_sub(k * spec.stride) {
                    Some(i) => {
                        values.push(x[i]);
                        mask.push(miss[i]);
                    }
                    None => {
                        values.push(0.0);
                        mask.push(false);
                    }
                }
            }
            Ok(WindowedHistory {
                subject_id,
                anchor_t: t,
                label,
                anchor_index: i0,
                stride: spec.stride,
                values,
                mask,
            })
        })
        .collect()
}

/// Tensor-product penalized spline fit of `mu(t, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpline {
    pub basis_t: BSplineBasis,
    pub basis_s: BSplineBasis,
    pub coef: Vec<f64>,
    pub lambda_t: f64,
    pub lambda_s: f64,
}

impl TensorSpline {
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        let (it, vt) = self.basis_t.eval_sparse(t);
        let (is, vs) = self.basis_s.eval_sparse(s);
        let ks = self.basis_s.len();
        let mut acc = 0.0;
        for (a, bt) in vt.iter().enumerate() {
            for (b, bs) in vs.iter().enumerate() {
                acc += bt * bs * self.coef[(it + a) * ks + is + b];
            }
        }
        acc
    }
}

/// Mean of `X(t, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSurface {
    Zero,
    Spline(TensorSpline),
}

impl MeanSurface {
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match self {
            MeanSurface::Zero => 0.0,
            MeanSurface::Spline(sp) => sp.eval(t, s),
        }
    }

    /// Mean at an anchor on the lag grid.
    pub fn window(&self, t: f64, s_grid: &[f64]) -> Vec<f64> {
        s_grid.iter().map(|&s| self.eval(t, s)).collect()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MeanSurface::Zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanConfig {
    pub k_t: usize,
    pub k_s: usize,
}

impl Default for MeanConfig {
    fn default() -> Self {
        MeanConfig { k_t: 8, k_s: 8 }
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Penalized tensor B-spline estimate of the mean surface from the windows
/// carrying `label`. Smoothing parameters are chosen by GCV with windows as
/// the sampling unit; a rank-deficient design falls back to a coarser basis
/// in `t`.
pub fn estimate_mean(
    windows: &[WindowedHistory],
    spec: &WindowSpec,
    label: u8,
    cfg: &MeanConfig,
) -> Result<MeanSurface> {
    let ws: Vec<&WindowedHistory> = windows.iter().filter(|w| w.label == label).collect();
    if ws.len() < 2 {
        return Err(Error::invalid(format!(
            "mean estimation needs at least 2 windows with label {label}, got {}",
            ws.len()
        )));
    }
    let s_grid = spec.s_grid();
    let t_lo = ws.iter().map(|w| w.anchor_t).fold(f64::INFINITY, f64::min);
    let t_hi = ws.iter().map(|w| w.anchor_t).fold(f64::NEG_INFINITY, f64::max);
    let k_s = cfg.k_s.min(spec.m).max(1);
    let mut k_t = if t_hi - t_lo > 0.0 { cfg.k_t.max(1) } else { 1 };
    loop {
        match fit_tensor(&ws, &s_grid, t_lo, t_hi, k_t, k_s)? {
            Some(sp) => return Ok(MeanSurface::Spline(sp)),
            None => {
                let next = if k_t > 4 { 4 } else { 1 };
                if k_t == 1 {
                    return Err(Error::DegenerateDesign(
                        "mean surface design is rank deficient even with a constant basis in t".into(),
                    ));
                }
                warn!("mean surface design rank deficient with K_t = {k_t}; retrying with K_t = {next}");
                k_t = next;
            }
        }
    }
}

fn fit_tensor(
    ws: &[&WindowedHistory],
    s_grid: &[f64],
    t_lo: f64,
    t_hi: f64,
    k_t: usize,
    k_s: usize,
) -> Result<Option<TensorSpline>> {
    let delta = *s_grid.last().unwrap();
    let bt = BSplineBasis::new(t_lo, t_hi, k_t);
    let bs = BSplineBasis::new(0.0, delta, k_s);
    let p = k_t * k_s;
    let s_vals: Vec<(usize, Vec<f64>)> = s_grid.iter().map(|&s| bs.eval_sparse(s)).collect();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut yty = 0.0;
    let mut n_obs = 0usize;
    let mut idx = Vec::with_capacity(16);
    let mut val = Vec::with_capacity(16);
    for w in ws {
        let (it, vt) = bt.eval_sparse(w.anchor_t);
        for (r, (is, vs)) in s_vals.iter().enumerate() {
            if w.mask[r] {
                continue;
            }
            let y = w.values[r];
            idx.clear();
            val.clear();
            for (a, x_t) in vt.iter().enumerate() {
                for (b, x_s) in vs.iter().enumerate() {
                    idx.push((it + a) * k_s + is + b);
                    val.push(x_t * x_s);
                }
            }
            for (u, &i) in idx.iter().enumerate() {
                xty[i] += val[u] * y;
                for (v, &j) in idx.iter().enumerate() {
                    xtx[(i, j)] += val[u] * val[v];
                }
            }
            yty += y * y;
            n_obs += 1;
        }
    }
    if n_obs < p {
        return Ok(None);
    }
    let pt = kron(&difference_penalty(k_t), &DMatrix::identity(k_s, k_s));
    let ps = kron(&DMatrix::identity(k_t, k_t), &difference_penalty(k_s));

    // Rank check on the data part restricted to the penalty null space.
    let scale = xtx.trace() / p as f64;
    let probe = &xtx + (&pt + &ps) * (1e-6 * scale);
    let (vals, _) = sym_eigen_desc(&probe);
    if vals[p - 1] <= 1e-10 * vals[0] {
        return Ok(None);
    }

    let grid_t = if k_t >= 3 { log_grid(-6.0, 4.0, 11) } else { vec![0.0] };
    let grid_s = if k_s >= 3 { log_grid(-6.0, 4.0, 11) } else { vec![0.0] };
    // Points within a window are strongly dependent, so the number of windows
    // is the effective sample size in the GCV denominator.
    let n_w = ws.len() as f64;
    let n = n_obs as f64;
    let mut best: Option<(f64, f64, f64, DVector<f64>)> = None;
    for &lt in &grid_t {
        for &ls in &grid_s {
            let a = &xtx + (&pt * (lt * scale)) + (&ps * (ls * scale));
            let (chol, _) = match cholesky_with_jitter(&a) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let beta = chol.solve(&xty);
            let rss = (yty - 2.0 * beta.dot(&xty) + beta.dot(&(&xtx * &beta))).max(0.0);
            let edf = chol.solve(&xtx).trace();
            let denom = (1.0 - edf / n_w).max(1e-3);
            let gcv = rss / n / (denom * denom);
            if best.as_ref().map_or(true, |b| gcv < b.0) {
                best = Some((gcv, lt, ls, beta));
            }
        }
    }
    let Some((_, lt, ls, beta)) = best else {
        return Ok(None);
    };
    Ok(Some(TensorSpline {
        basis_t: bt,
        basis_s: bs,
        coef: beta.iter().copied().collect(),
        lambda_t: lt * scale,
        lambda_s: ls * scale,
    }))
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Covariance of `X(t, ·)` on the lag grid for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCov {
    pub s_grid: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub label: u8,
}

impl MarginalCov {
    /// Known Matérn covariance at the window lags.
    pub fn from_matern(spec: &WindowSpec, params: &MaternParams, label: u8) -> Self {
        let s = spec.s_grid();
        let m = s.len();
        let matrix = DMatrix::from_fn(m, m, |i, j| matern_at_distance((s[i] - s[j]).abs(), params));
        MarginalCov {
            s_grid: s,
            matrix,
            label,
        }
    }
}

/// Pooled sample covariance of the centred windows carrying `label`, each
/// entry averaged over the windows where both lags are observed.
pub fn pooled_cov(
    windows: &[WindowedHistory],
    spec: &WindowSpec,
    mean: &MeanSurface,
    label: u8,
) -> Result<MarginalCov> {
    let s_grid = spec.s_grid();
    let m = s_grid.len();
    let mut sum = DMatrix::<f64>::zeros(m, m);
    let mut count = DMatrix::<f64>::zeros(m, m);
    let mut n = 0usize;
    let mut centred = vec![0.0; m];
    for w in windows.iter().filter(|w| w.label == label) {
        if w.values.len() != m {
            return Err(Error::mismatch("window length differs from lag grid"));
        }
        for r in 0..m {
            centred[r] = if w.mask[r] {
                0.0
            } else {
                w.values[r] - mean.eval(w.anchor_t, s_grid[r])
            };
        }
        for j in 0..m {
            if w.mask[j] {
                continue;
            }
            for i in 0..m {
                if w.mask[i] {
                    continue;
                }
                sum[(i, j)] += centred[i] * centred[j];
                count[(i, j)] += 1.0;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("no windows with label {label}")));
    }
    let matrix = DMatrix::from_fn(m, m, |i, j| {
        if count[(i, j)] > 0.0 {
            sum[(i, j)] / count[(i, j)]
        } else {
            0.0
        }
    });
    Ok(MarginalCov {
        s_grid,
        matrix: symmetrize(&matrix),
        label,
    })
}

/// Smooth the full covariance matrix with `S C S`, `S = (I + lambda D'D)^-1`
/// (second differences), then clip eigenvalues below `EIGEN_FLOOR * max` to
/// zero. `lambda = None` selects the smoothing parameter by GCV.
pub fn smooth_and_project(cov: &MarginalCov, lambda: Option<f64>) -> MarginalCov {
    let m = cov.matrix.nrows();
    let pen = difference_penalty(m);
    let (e, u) = sym_eigen_desc(&pen);
    let y = u.transpose() * &cov.matrix * &u;
    let lambda = lambda.unwrap_or_else(|| gcv_lambda(&e, &y));
    let s: Vec<f64> = e.iter().map(|&ei| 1.0 / (1.0 + lambda * ei.max(0.0))).collect();
    let fitted = DMatrix::from_fn(m, m, |i, j| s[i] * s[j] * y[(i, j)]);
    let smoothed = &u * fitted * u.transpose();
    let (proj, clipped) = project_psd(&symmetrize(&smoothed), EIGEN_FLOOR);
    if clipped > 0 {
        log::debug!("covariance projection clipped {clipped} directions");
    }
    MarginalCov {
        s_grid: cov.s_grid.clone(),
        matrix: proj,
        label: cov.label,
    }
}

fn gcv_lambda(e: &[f64], y: &DMatrix<f64>) -> f64 {
    let m = e.len();
    let n = (m * m) as f64;
    let mut best = (f64::INFINITY, 0.0);
    for lam in std::iter::once(0.0).chain(log_grid(-6.0, 6.0, 49)) {
        let s: Vec<f64> = e.iter().map(|&ei| 1.0 / (1.0 + lam * ei.max(0.0))).collect();
        let mut rss = 0.0;
        for j in 0..m {
            for i in 0..m {
                let r = (1.0 - s[i] * s[j]) * y[(i, j)];
                rss += r * r;
            }
        }
        let tr: f64 = s.iter().sum::<f64>().powi(2);
        let denom = 1.0 - tr / n;
        if denom <= 1e-12 {
            continue;
        }
        let gcv = rss / (denom * denom);
        if gcv < best.0 {
            best = (gcv, lam);
        }
    }
    best.1
}

/// Leading eigenpairs of the covariance operator under trapezoid quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub s_grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Column `k` holds `psi_k` on the lag grid.
    pub eigenfunctions: DMatrix<f64>,
}

impl EigenSystem {
    pub fn k_x(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn psi(&self, k: usize) -> Vec<f64> {
        self.eigenfunctions.column(k).iter().copied().collect()
    }

    /// `sum_k lambda_k psi_k psi_k'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let m = self.s_grid.len();
        let mut out = DMatrix::zeros(m, m);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let p = self.eigenfunctions.column(k);
            out += lam * p * p.transpose();
        }
        out
    }
}

/// Top `k_x` eigenpairs of `W^{1/2} C W^{1/2}`, mapped back with
/// `psi = v / sqrt(w)` so that `sum_r w_r psi_k(s_r)^2 = 1`.
pub fn eigensystem(cov: &MarginalCov, k_x: usize) -> Result<EigenSystem> {
    let m = cov.s_grid.len();
    if k_x == 0 || k_x > m {
        return Err(Error::invalid(format!(
            "K_x = {k_x} must lie in 1..={m} (lag grid size)"
        )));
    }
    let w = trapezoid_weights(&cov.s_grid);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |i, j| sw[i] * cov.matrix[(i, j)] * sw[j]);
    let (vals, vecs) = sym_eigen_desc(&a);
    let top = vals[0].max(0.0);
    let mut eigenvalues = Vec::with_capacity(k_x);
    let mut eigenfunctions = DMatrix::zeros(m, k_x);
    for k in 0..k_x {
        let lam = vals[k];
        eigenvalues.push(if lam <= EIGEN_FLOOR * top || lam < 0.0 {
            0.0
        } else {
            lam
        });
        for r in 0..m {
            eigenfunctions[(r, k)] = vecs[(r, k)] / sw[r];
        }
    }
    Ok(EigenSystem {
        s_grid: cov.s_grid.clone(),
        weights: w,
        eigenvalues,
        eigenfunctions,
    })
}

/// Quadrature scores `c_k = sum_r w_r (x_r - mu_r) psi_k(s_r)`.
pub fn scores(window: &WindowedHistory, es: &EigenSystem, mean: &MeanSurface) -> Result<Vec<f64>> {
    if !window.is_complete() {
        return Err(Error::MissingData(format!(
            "window at t={} has masked entries; impute before computing scores",
            window.anchor_t
        )));
    }
    let centred: Vec<f64> = if mean.is_zero() {
        window.values.clone()
    } else {
        window
            .values
            .iter()
            .zip(&es.s_grid)
            .map(|(x, &s)| x - mean.eval(window.anchor_t, s))
            .collect()
    };
    Ok(scores_centred(&centred, es))
}

pub(crate) fn scores_centred(centred: &[f64], es: &EigenSystem) -> Vec<f64> {
    let wx: Vec<f64> = centred.iter().zip(&es.weights).map(|(x, w)| x * w).collect();
    (0..es.k_x())
        .map(|k| {
            let col = es.eigenfunctions.column(k);
            wx.iter().zip(col.iter()).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// How the covariance of each label is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CovSource {
    /// Matérn covariance assumed known (simulation setting).
    Known(MaternParams),
    /// Pooled, smoothed sample covariance; `lambda = None` uses GCV.
    Estimated { lambda: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpcaConfig {
    pub k_x: usize,
    pub cov: CovSource,
    /// Skip mean estimation and take `mu = 0`.
    pub known_mean_zero: bool,
    pub mean: MeanConfig,
    /// Estimate one system from both labels instead of one per label.
    pub pooled_labels: bool,
}

impl FpcaConfig {
    pub fn known(params: MaternParams, k_x: usize) -> Self {
        FpcaConfig {
            k_x,
            cov: CovSource::Known(params),
            known_mean_zero: true,
            mean: MeanConfig::default(),
            pooled_labels: false,
        }
    }

    pub fn estimated(k_x: usize) -> Self {
        FpcaConfig {
            k_x,
            cov: CovSource::Estimated { lambda: None },
            known_mean_zero: false,
            mean: MeanConfig::default(),
            pooled_labels: false,
        }
    }
}

/// Mean, covariance and eigensystem for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFpca {
    pub mean: MeanSurface,
    pub cov: MarginalCov,
    pub eigen: EigenSystem,
}

/// Label-specific functional principal components for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub spec: WindowSpec,
    /// Index 0 for sampled times, 1 for event times.
    pub labels: [LabelFpca; 2],
}

impl FpcaModel {
    pub fn for_label(&self, label: u8) -> &LabelFpca {
        &self.labels[usize::from(label.min(1))]
    }

    pub fn k_x(&self) -> usize {
        self.labels[0].eigen.k_x()
    }

    /// Scores of a complete window against its label's system.
    pub fn scores(&self, w: &WindowedHistory) -> Result<Vec<f64>> {
        let l = self.for_label(w.label);
        scores(w, &l.eigen, &l.mean)
    }
}

/// Fit the per-label FPCA from complete or partially observed windows.
pub fn fit_fpca(windows: &[WindowedHistory], spec: &WindowSpec, cfg: &FpcaConfig) -> Result<FpcaModel> {
    let k_x = cfg.k_x.min(spec.m - 1).max(1);
    let fit_label = |label: u8| -> Result<LabelFpca> {
        match cfg.cov {
            CovSource::Known(params) => {
                let cov = MarginalCov::from_matern(spec, &params, label);
                let eigen = eigensystem(&cov, k_x)?;
                Ok(LabelFpca {
                    mean: MeanSurface::Zero,
                    cov,
                    eigen,
                })
            }
            CovSource::Estimated { lambda } => {
                let relabelled: Vec<WindowedHistory>;
                let (ws, lab): (&[WindowedHistory], u8) = if cfg.pooled_labels {
                    relabelled = windows
                        .iter()
                        .map(|w| WindowedHistory {
                            label: 0,
                            ..w.clone()
                        })
                        .collect();
                    (&relabelled, 0)
                } else {
                    (windows, label)
                };
                let mean = if cfg.known_mean_zero {
                    MeanSurface::Zero
                } else {
                    estimate_mean(ws, spec, lab, &cfg.mean)?
                };
                let mut raw = pooled_cov(ws, spec, &mean, lab)?;
                raw.label = label;
                let cov = smooth_and_project(&raw, lambda);
                let eigen = eigensystem(&cov, k_x)?;
                Ok(LabelFpca { mean, cov, eigen })
            }
        }
    };
    let l0 = fit_label(0)?;
    let l1 = if cfg.pooled_labels || matches!(cfg.cov, CovSource::Known(_)) {
        let mut l = l0.clone();
        l.cov.label = 1;
        l
    } else {
        fit_label(1)?
    };
    Ok(FpcaModel {
        spec: *spec,
        labels: [l0, l1],
    })
}
