//! Synthetic sensor trajectories and recurrent events.
//!
//! Sensor paths are Matérn Gaussian processes observed on a regular grid.
//! Events are generated in discrete time: at every at-risk grid step an event
//! occurs with probability `exp(theta0 + ∫ X(t - s) beta(s) ds)`, so `theta0`
//! is a log-probability *per grid step*. An event is stamped at the midpoint of
//! its step, which keeps it away from grid-aligned quantities.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, gl_integrate};
use crate::rng::Rng;

/// Matérn covariance parameters: smoothness `nu`, marginal variance `sigma2`
/// and length-scale `rho` (same units as the grid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub nu: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl MaternParams {
    pub fn new(nu: f64, sigma2: f64, rho: f64) -> Result<Self> {
        let p = MaternParams { nu, sigma2, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.sigma2 > 0.0 && self.rho > 0.0)
            || !(self.nu.is_finite() && self.sigma2.is_finite() && self.rho.is_finite())
        {
            return Err(Error::invalid(format!(
                "Matérn parameters must be positive and finite, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Covariance between the process at `t1` and `t2`.
pub fn matern_cov(t1: f64, t2: f64, p: &MaternParams) -> f64 {
    matern_at_distance((t1 - t2).abs(), p)
}

pub(crate) fn matern_at_distance(d: f64, p: &MaternParams) -> f64 {
    if d == 0.0 {
        return p.sigma2;
    }
    let r = d / p.rho;
    // Closed forms for the half-integer orders.
    if p.nu == 0.5 {
        p.sigma2 * (-r).exp()
    } else if p.nu == 1.5 {
        let x = 3f64.sqrt() * r;
        p.sigma2 * (1.0 + x) * (-x).exp()
    } else if p.nu == 2.5 {
        let x = 5f64.sqrt() * r;
        p.sigma2 * (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_bessel(d, p)
    }
}

/// General-order Matérn through the modified Bessel function of the second kind.
pub(crate) fn matern_bessel(d: f64, p: &MaternParams) -> f64 {
    if d == 0.0 {
        return p.sigma2;
    }
    let x = (2.0 * p.nu).sqrt() * d / p.rho;
    if x > 700.0 {
        return 0.0;
    }
    let log_pref = (1.0 - p.nu) * std::f64::consts::LN_2 - gamma(p.nu).ln() + p.nu * x.ln() - x;
    p.sigma2 * log_pref.exp() * bessel_k_scaled(p.nu, x)
}

/// `exp(x) K_nu(x)` from the integral `∫_0^∞ exp(-x (cosh t - 1)) cosh(nu t) dt`.
///
/// The integrand decays doubly exponentially, so the trapezoid rule converges
/// geometrically in the step size.
pub(crate) fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    let h = 0.01;
    let mut sum = 0.5; // t = 0 term, halved
    let mut k = 1usize;
    loop {
        let t = k as f64 * h;
        let log_term = -x * (t.cosh() - 1.0) + nu.abs() * t;
        let term = (-x * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
        sum += term;
        if log_term < -40.0 && t > 1.0 {
            break;
        }
        k += 1;
        if k > 1_000_000 {
            break;
        }
    }
    sum * h
}

/// A dense sensor trajectory on a regular grid, with one or more streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPath {
    grid: Vec<f64>,
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
}

impl SensorPath {
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>, missing: Vec<Vec<bool>>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::invalid("sensor grid needs at least two points"));
        }
        let step = grid[1] - grid[0];
        if !(step > 0.0) {
            return Err(Error::invalid("sensor grid must be strictly increasing"));
        }
        for w in grid.windows(2) {
            let d = w[1] - w[0];
            if ((d - step) / step).abs() > 1e-9 {
                return Err(Error::invalid("sensor grid spacing is not constant"));
            }
        }
        if values.is_empty() || values.len() != missing.len() {
            return Err(Error::mismatch("streams and masks must pair up"));
        }
        for (v, m) in values.iter().zip(&missing) {
            if v.len() != grid.len() || m.len() != grid.len() {
                return Err(Error::mismatch(format!(
                    "stream length {} / mask length {} vs grid length {}",
                    v.len(),
                    m.len(),
                    grid.len()
                )));
            }
        }
        Ok(SensorPath {
            grid,
            values,
            missing,
        })
    }

    /// Fully observed single-stream path.
    pub fn single(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        SensorPath::new(grid, vec![values], vec![vec![false; n]])
    }

    /// Regular grid `start + i * step`, `i = 0..n`.
    pub fn regular_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| start + i as f64 * step).collect()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.grid[0]
    }

    pub fn step(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }

    /// End of the observation window: the last grid step extends one step
    /// past the last grid point.
    pub fn end(&self) -> f64 {
        self.grid[self.grid.len() - 1] + self.step()
    }

    pub fn n_streams(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self, stream: usize) -> &[f64] {
        &self.values[stream]
    }

    pub fn missing(&self, stream: usize) -> &[bool] {
        &self.missing[stream]
    }

    pub fn set_missing(&mut self, stream: usize, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.grid.len() {
            return Err(Error::mismatch("mask length differs from grid"));
        }
        self.missing[stream] = mask;
        Ok(())
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|m| m.iter().any(|&b| b))
    }

    /// Append another stream observed on the same grid.
    pub fn push_stream(&mut self, values: Vec<f64>, missing: Vec<bool>) -> Result<()> {
        if values.len() != self.grid.len() || missing.len() != self.grid.len() {
            return Err(Error::mismatch("new stream length differs from grid"));
        }
        self.values.push(values);
        self.missing.push(missing);
        Ok(())
    }

    /// Index of the grid step containing `t` (the step `[t_i, t_i + step)`).
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let step = self.step();
        let pos = (t - self.start()) / step;
        // Tolerate round-off for times sitting on a grid point.
        let idx = (pos + 1e-9).floor();
        if idx < 0.0 || idx >= self.grid.len() as f64 {
            return Err(Error::OutOfRange {
                t,
                lo: self.start(),
                hi: self.end(),
            });
        }
        Ok(idx as usize)
    }

    /// Piecewise-linear interpolant of a stream, zero outside the grid when
    /// `zero_pad` is set.
    pub(crate) fn interpolate(&self, stream: usize, u: f64, zero_pad: bool) -> Result<f64> {
        let n = self.grid.len();
        let step = self.step();
        let pos = (u - self.start()) / step;
        if pos < -1e-9 || pos > (n - 1) as f64 + 1e-9 {
            if zero_pad && pos < 0.0 {
                return Ok(0.0);
            }
            return Err(Error::OutOfRange {
                t: u,
                lo: self.start(),
                hi: self.grid[n - 1],
            });
        }
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        let v = &self.values[stream];
        Ok(v[i] * (1.0 - frac) + v[i + 1] * frac)
    }
}

/// Shape of the true coefficient function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    /// `beta0 + exp(-beta1 s)`
    ExpDecay,
    /// `beta1 sin(2 pi s / delta - pi / 2)`
    Sine,
}

/// True coefficient function, identically zero beyond the window `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueBeta {
    pub kind: BetaKind,
    pub beta0: f64,
    pub beta1: f64,
    pub delta: f64,
}

impl TrueBeta {
    pub fn new(kind: BetaKind, beta0: f64, beta1: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid("beta window delta must be positive"));
        }
        Ok(TrueBeta {
            kind,
            beta0,
            beta1,
            delta,
        })
    }

    /// Identically zero function on `[0, delta]`.
    pub fn zero(delta: f64) -> Self {
        TrueBeta {
            kind: BetaKind::ExpDecay,
            beta0: -1.0,
            beta1: 0.0,
            delta,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        true_beta_eval(self, s)
    }

    /// `∫_0^upper beta(s)^2 ds` by Gauss-Legendre on a fine partition.
    pub fn squared_norm(&self) -> f64 {
        let pieces = 256;
        let h = self.delta / pieces as f64;
        (0..pieces)
            .map(|k| {
                let a = k as f64 * h;
                gl_integrate(a, a + h, |s| self.eval(s).powi(2))
            })
            .sum()
    }
}

pub fn true_beta_eval(beta: &TrueBeta, s: f64) -> f64 {
    if s > beta.delta || s < 0.0 {
        return 0.0;
    }
    match beta.kind {
        BetaKind::ExpDecay => beta.beta0 + (-beta.beta1 * s).exp(),
        BetaKind::Sine => {
            beta.beta1
                * (2.0 * std::f64::consts::PI * s / beta.delta - std::f64::consts::FRAC_PI_2).sin()
        }
    }
}

/// Observed recurrent events for one subject.
///
/// The subject is at risk on `(entry, tau]`; all event times lie inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSet {
    pub subject_id: u64,
    pub times: Vec<f64>,
    pub entry: f64,
    pub tau: f64,
}

impl EventSet {
    pub fn new(subject_id: u64, times: Vec<f64>, entry: f64, tau: f64) -> Result<Self> {
        if !(tau > entry) {
            return Err(Error::invalid("censoring time must exceed entry time"));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("event times must be strictly increasing"));
            }
        }
        if let (Some(&first), Some(&last)) = (times.first(), times.last()) {
            if first <= entry || last > tau {
                return Err(Error::invalid("event times must lie in (entry, tau]"));
            }
        }
        Ok(EventSet {
            subject_id,
            times,
            entry,
            tau,
        })
    }

    /// `N(t-)`: number of events strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.times.partition_point(|&u| u < t)
    }

    pub fn last_before(&self, t: f64) -> Option<f64> {
        let k = self.count_before(t);
        if k == 0 {
            None
        } else {
            Some(self.times[k - 1])
        }
    }

    pub fn at_risk(&self, t: f64) -> bool {
        t > self.entry && t <= self.tau
    }
}

/// Draws Matérn GP paths on a fixed grid, reusing one factorization.
#[derive(Debug, Clone)]
pub struct GpSampler {
    grid: Vec<f64>,
    chol_lower: DMatrix<f64>,
    pub jitter: f64,
}

impl GpSampler {
    pub fn new(grid: &[f64], params: &MaternParams) -> Result<Self> {
        params.validate()?;
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "GP grid must be strictly increasing with at least two points",
            ));
        }
        let n = grid.len();
        let cov = DMatrix::from_fn(n, n, |i, j| matern_cov(grid[i], grid[j], params));
        let (chol, jitter) = cholesky_with_jitter(&cov)?;
        Ok(GpSampler {
            grid: grid.to_vec(),
            chol_lower: chol.unpack(),
            jitter,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// One draw `L z` with `z ~ N(0, I)`.
    pub fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.grid.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let zj = z[j];
            let col = self.chol_lower.column(j);
            for i in j..n {
                out[i] += col[i] * zj;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut Rng) -> SensorPath {
        let values = self.draw(rng);
        SensorPath::single(self.grid.clone(), values).expect("grid validated at construction")
    }
}

/// Draw a zero-mean Matérn GP path on `grid`.
pub fn sample_gp(grid: &[f64], params: &MaternParams, rng: &mut Rng) -> Result<SensorPath> {
    Ok(GpSampler::new(grid, params)?.sample(rng))
}

/// How windows reaching before the start of the path are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Anchors need a full window; earlier times are not at risk.
    #[default]
    Restrict,
    /// The path is taken as zero before its first grid point.
    Zero,
}

/// `∫_0^delta X(t - s) beta(s) ds` with `X` the linear interpolant of the
/// stream, integrated exactly per interpolation segment (8-point Gauss-Legendre).
pub fn window_integral(
    path: &SensorPath,
    stream: usize,
    beta: &TrueBeta,
    t: f64,
    padding: Padding,
) -> Result<f64> {
    let n = path.len();
    let last = path.grid()[n - 1];
    if t > last + 1e-9 * path.step() {
        return Err(Error::OutOfRange {
            t,
            lo: path.start(),
            hi: last,
        });
    }
    if padding == Padding::Restrict && t - beta.delta < path.start() - 1e-9 * path.step() {
        return Err(Error::OutOfRange {
            t: t - beta.delta,
            lo: path.start(),
            hi: last,
        });
    }
    let zero_pad = padding == Padding::Zero;
    // Breakpoints in s where t - s hits a grid point.
    let step = path.step();
    let mut cuts = vec![0.0];
    let first_k = ((t - path.start()) / step + 1e-12).floor();
    let mut g = path.start() + first_k * step;
    if (t - g).abs() < 1e-12 * step.max(1.0) {
        g -= step;
    }
    while t - g < beta.delta {
        if g < path.start() - 1e-9 * step {
            break;
        }
        let s = t - g;
        if s > 0.0 {
            cuts.push(s);
        }
        g -= step;
    }
    if zero_pad && t - beta.delta < path.start() {
        let s0 = t - path.start();
        if s0 > 0.0 && s0 < beta.delta && cuts.last().map_or(true, |&c| c < s0) {
            cuts.push(s0);
        }
    }
    cuts.push(beta.delta);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mut err = None;
        total += gl_integrate(a, b, |s| match path.interpolate(stream, t - s, zero_pad) {
            Ok(x) => x * beta.eval(s),
            Err(e) => {
                err = Some(e);
                0.0
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(total)
}

/// Hazard at `t`: `exp(theta0 + ∫_0^Δ X(t - s) beta(s) ds)` on stream 0, as a
/// rate per grid step. Requires a full window inside the path.
pub fn hazard_eval(path: &SensorPath, beta: &TrueBeta, theta0: f64, t: f64) -> Result<f64> {
    if t < path.start() || t > path.end() {
        return Err(Error::OutOfRange {
            t,
            lo: path.start(),
            hi: path.end(),
        });
    }
    let integral = window_integral(path, 0, beta, t, Padding::Restrict)?;
    Ok((theta0 + integral).exp())
}

/// Precomputed weights `a_k` with `∫_0^Δ X(t_i - s) beta(s) ds = Σ_k a_k x_{i-k}`
/// for grid-aligned anchors and a piecewise-linear path.
#[derive(Debug, Clone)]
pub struct WindowKernel {
    weights: Vec<f64>,
}

impl WindowKernel {
    pub fn new(beta: &TrueBeta, step: f64) -> Self {
        let n_full = (beta.delta / step + 1e-9).floor() as usize;
        let mut weights = vec![0.0; n_full + 2];
        for k in 0..=n_full {
            let a = k as f64 * step;
            let b = ((k + 1) as f64 * step).min(beta.delta);
            if b <= a {
                continue;
            }
            // Hat functions of nodes k and k+1 restricted to [a, b].
            weights[k] += gl_integrate(a, b, |s| (1.0 - (s - a) / step) * beta.eval(s));
            weights[k + 1] += gl_integrate(a, b, |s| ((s - a) / step) * beta.eval(s));
        }
        while weights.len() > 1 && *weights.last().unwrap() == 0.0 {
            weights.pop();
        }
        WindowKernel { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of grid points before the anchor that the window touches.
    pub fn reach(&self) -> usize {
        self.weights.len() - 1
    }

    /// Integral at grid index `i`; `None` if the window leaves the path and
    /// padding is `Restrict`.
    pub fn apply(&self, values: &[f64], i: usize, padding: Padding) -> Option<f64> {
        let mut acc = 0.0;
        for (k, &a) in self.weights.iter().enumerate() {
            if k > i {
                if padding == Padding::Restrict && a != 0.0 {
                    return None;
                }
                continue;
            }
            acc += a * values[i - k];
        }
        Some(acc)
    }
}

/// Full specification of the data-generating hazard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    pub beta: TrueBeta,
    /// Log event probability per grid step at zero covariate.
    pub theta0: f64,
    pub padding: Padding,
    /// Start of the at-risk period; defaults to `beta.delta` past the path start.
    pub risk_start: Option<f64>,
}

impl HazardModel {
    pub fn new(beta: TrueBeta, theta0: f64) -> Self {
        HazardModel {
            beta,
            theta0,
            padding: Padding::Restrict,
            risk_start: None,
        }
    }

    pub fn entry(&self, path: &SensorPath) -> f64 {
        match (self.risk_start, self.padding) {
            (Some(t), _) => t,
            (None, Padding::Restrict) => path.start() + self.beta.delta,
            (None, Padding::Zero) => path.start(),
        }
    }

    /// Per-step event probabilities for every grid step (0 when not at risk).
    pub fn step_hazards(&self, path: &SensorPath) -> Result<Vec<f64>> {
        let kernel = WindowKernel::new(&self.beta, path.step());
        let entry = self.entry(path);
        let values = path.values(0);
        let step = path.step();
        let mut out = vec![0.0; path.len()];
        for (i, t) in path.grid().iter().enumerate() {
            if *t < entry - 1e-9 * step {
                continue;
            }
            let integral = match kernel.apply(values, i, self.padding) {
                Some(v) => v,
                None => continue,
            };
            let h = (self.theta0 + integral).exp();
            if h > 1.0 {
                return Err(Error::HazardTooLarge { t: *t, value: h });
            }
            out[i] = h;
        }
        Ok(out)
    }

    pub fn generate_events(
        &self,
        path: &SensorPath,
        subject_id: u64,
        rng: &mut Rng,
    ) -> Result<EventSet> {
        let hazards = self.step_hazards(path)?;
        let step = path.step();
        let mut times = Vec::new();
        for (i, &h) in hazards.iter().enumerate() {
            // Always consume one uniform per step so streams stay aligned.
            let u: f64 = rng.random();
            if h > 0.0 && u < h {
                times.push(path.grid()[i] + 0.5 * step);
            }
        }
        let entry = self.entry(path);
        EventSet::new(subject_id, times, entry, path.end())
    }
}

/// Bernoulli-per-step event generation under the hazard of `beta`, `theta0`.
pub fn generate_events(
    path: &SensorPath,
    beta: &TrueBeta,
    theta0: f64,
    subject_id: u64,
    rng: &mut Rng,
) -> Result<EventSet> {
    HazardModel::new(*beta, theta0).generate_events(path, subject_id, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn p(nu: f64, s2: f64, rho: f64) -> MaternParams {
        MaternParams::new(nu, s2, rho).unwrap()
    }

    #[test]
    fn matern_diagonal_is_marginal_variance() {
        assert_eq!(matern_cov(0.3, 0.3, &p(0.5, 1.0, 0.3)), 1.0);
    }

    #[test]
    fn matern_exponential_case() {
        let v = matern_cov(0.0, 0.3, &p(0.5, 1.0, 0.3));
        assert_relative_eq!(v, 0.367_879_441_171_442_3, max_relative = 1e-14);
    }

    #[test]
    fn matern_bessel_path_matches_high_precision_oracle() {
        // Frozen from an arbitrary-precision evaluation of the Bessel form.
        let cases = [
            (0.15, 1.5, 2.0, 0.3, 1.569_775_307_914_901_3),
            (0.15, 0.8, 2.0, 0.3, 1.391_533_158_571_229_3),
            (0.05, 2.2, 1.5, 0.4, 1.479_049_867_806_210_4),
            (0.3, 0.5, 1.0, 0.3, 0.367_879_441_171_442_3),
        ];
        for (d, nu, s2, rho, expected) in cases {
            let v = matern_bessel(d, &p(nu, s2, rho));
            assert_relative_eq!(v, expected, max_relative = 1e-10);
        }
        assert_relative_eq!(
            matern_cov(0.0, 0.15, &p(1.5, 2.0, 0.3)),
            1.569_775_307_914_901_3,
            max_relative = 1e-12
        );
    }

    #[test]
    fn invalid_matern_rejected() {
        assert!(MaternParams::new(0.0, 1.0, 1.0).is_err());
        assert!(MaternParams::new(0.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn tiny_variance_gives_flat_path() {
        let grid = SensorPath::regular_grid(0.0, 0.01, 50);
        let path = sample_gp(&grid, &p(0.5, 1e-30, 0.3), &mut rng::from_seed(3)).unwrap();
        assert!(path.values(0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_path() {
        let grid = SensorPath::regular_grid(0.0, 0.01, 80);
        let a = sample_gp(&grid, &p(0.5, 1.0, 0.3), &mut rng::from_seed(9)).unwrap();
        let b = sample_gp(&grid, &p(0.5, 1.0, 0.3), &mut rng::from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_shapes() {
        let sine = TrueBeta::new(BetaKind::Sine, 0.0, 2.5, 30.0).unwrap();
        assert_relative_eq!(sine.eval(15.0), 2.5, max_relative = 1e-14);
        assert_eq!(sine.eval(60.0), 0.0);
        let exp = TrueBeta::new(BetaKind::ExpDecay, 0.7, 0.2, 30.0).unwrap();
        assert_relative_eq!(exp.eval(0.0), 1.7);
    }

    #[test]
    fn hazard_with_zero_beta_is_baseline() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 1000);
        let path = sample_gp(&grid, &p(0.5, 1.0, 216.0), &mut rng::from_seed(1)).unwrap();
        let beta = TrueBeta::zero(30.0);
        for t in [40.0, 100.0, 700.0] {
            let h = hazard_eval(&path, &beta, (5.0f64 / 1000.0).ln(), t).unwrap();
            assert_relative_eq!(h, 0.005, max_relative = 1e-12);
        }
    }

    #[test]
    fn hazard_constant_path_constant_beta() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 200);
        let path = SensorPath::single(grid, vec![1.0; 200]).unwrap();
        let beta = TrueBeta::new(BetaKind::ExpDecay, 0.2, 0.0, 30.0).unwrap(); // 0.2 + 1
        let h = hazard_eval(&path, &beta, -5.0, 100.3).unwrap();
        assert_relative_eq!(h, (-5.0f64 + 1.2 * 30.0).exp(), max_relative = 1e-12);
    }

    #[test]
    fn hazard_outside_support_errors() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 200);
        let path = SensorPath::single(grid, vec![0.0; 200]).unwrap();
        let beta = TrueBeta::zero(30.0);
        assert!(matches!(
            hazard_eval(&path, &beta, -5.0, 10.0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(hazard_eval(&path, &beta, -5.0, 1e4).is_err());
    }

    #[test]
    fn kernel_matches_segmentwise_integral() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 400);
        let path = sample_gp(&grid, &p(0.5, 1.0, 216.0), &mut rng::from_seed(5)).unwrap();
        for beta in [
            TrueBeta::new(BetaKind::Sine, 0.0, 0.8, 30.0).unwrap(),
            TrueBeta::new(BetaKind::ExpDecay, 0.3, 0.1, 32.0).unwrap(),
        ] {
            let kernel = WindowKernel::new(&beta, path.step());
            for i in [60usize, 123, 399] {
                let fast = kernel.apply(path.values(0), i, Padding::Restrict).unwrap();
                let slow =
                    window_integral(&path, 0, &beta, path.grid()[i], Padding::Restrict).unwrap();
                assert_relative_eq!(fast, slow, max_relative = 1e-11, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn baseline_event_rate_and_no_events_at_zero_rate() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 1000);
        let path = SensorPath::single(grid, vec![0.0; 1000]).unwrap();
        let beta = TrueBeta::zero(30.0);
        let ev = generate_events(&path, &beta, f64::NEG_INFINITY, 0, &mut rng::from_seed(1)).unwrap();
        assert!(ev.times.is_empty());
        let a = generate_events(&path, &beta, -5.3, 0, &mut rng::from_seed(2)).unwrap();
        let b = generate_events(&path, &beta, -5.3, 0, &mut rng::from_seed(2)).unwrap();
        assert_eq!(a, b);
        // Midpoint stamping keeps events off the grid.
        for t in &a.times {
            let frac = (t / 0.72).fract();
            assert!((frac - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn oversized_hazard_is_refused() {
        let grid = SensorPath::regular_grid(0.0, 0.72, 100);
        let path = SensorPath::single(grid, vec![0.0; 100]).unwrap();
        let beta = TrueBeta::zero(10.0);
        assert!(matches!(
            generate_events(&path, &beta, 0.5, 0, &mut rng::from_seed(1)),
            Err(Error::HazardTooLarge { .. })
        ));
    }
}
