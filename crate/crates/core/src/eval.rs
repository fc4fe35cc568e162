//! Error metrics and simulation experiment drivers.

use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{simulate_dataset, SimConfig};
use crate::design::DesignRow;
use crate::error::{Error, Result};
use crate::fit::{fit_estimating, poisson_type_fit, WeightScheme};
use crate::gp_sim::{BetaKind, GpSampler, SensorPath, TrueBeta};
use crate::pipeline::{fit_dataset, thin_dataset, PipelineConfig};
use crate::rng;
use crate::subsample::{draw_samples, ht_estimator, wp_estimator, SampleSet, SamplingDesign};

/// Midpoint quadrature on `[0, upper]` whose cells never straddle a
/// breakpoint, so piecewise-smooth curves with jumps at the breakpoints are
/// integrated without smearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadGrid {
    pub nodes: Vec<f64>,
    pub widths: Vec<f64>,
}

impl QuadGrid {
    pub fn new(upper: f64, h: f64, breakpoints: &[f64]) -> Result<Self> {
        if !(upper > 0.0 && h > 0.0) {
            return Err(Error::invalid("quadrature needs positive upper limit and step"));
        }
        let n = (upper / h).ceil() as usize;
        let mut edges: Vec<f64> = (0..=n).map(|k| (k as f64 * h).min(upper)).collect();
        edges.extend(breakpoints.iter().copied().filter(|&b| b > 0.0 && b < upper));
        edges.sort_by(f64::total_cmp);
        edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * upper);
        let nodes = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
        let widths = edges.windows(2).map(|e| e[1] - e[0]).collect();
        Ok(QuadGrid { nodes, widths })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.widths).map(|(v, w)| v * w).sum()
    }

    /// Integral over the cells lying inside `[0, limit]`.
    pub fn integrate_to(&self, f: &[f64], limit: f64) -> f64 {
        f.iter()
            .zip(self.nodes.iter().zip(&self.widths))
            .filter(|(_, (x, _))| **x < limit)
            .map(|(v, (_, w))| v * w)
            .sum()
    }

    pub fn truth(&self, beta: &TrueBeta) -> Vec<f64> {
        self.nodes.iter().map(|&s| beta.eval(s)).collect()
    }
}

/// MISE and its decomposition. When normalized, every field is divided by
/// the integrated squared truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MiseComponents {
    pub mise: f64,
    pub variance: f64,
    pub squared_bias: f64,
}

fn check_curves(curves: &[Vec<f64>], grid: &QuadGrid) -> Result<()> {
    if curves.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::mismatch("curve does not match the quadrature grid"));
    }
    Ok(())
}

fn norm_of(truth: &TrueBeta, normalize: bool) -> f64 {
    let n = truth.squared_norm();
    if normalize && n > 0.0 {
        n
    } else {
        1.0
    }
}

/// Pointwise replicate mean.
pub fn mean_curve(curves: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len];
    for c in curves {
        for (a, v) in m.iter_mut().zip(c) {
            *a += v;
        }
    }
    let r = curves.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= r);
    m
}

/// Per-replicate integrated squared deviation from the replicate mean.
pub fn variance_terms(curves: &[Vec<f64>], grid: &QuadGrid) -> Vec<f64> {
    let mean = mean_curve(curves, grid.len());
    curves
        .iter()
        .map(|c| {
            let d: Vec<f64> = c.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).collect();
            grid.integrate(&d)
        })
        .collect()
}

pub fn mise(curves: &[Vec<f64>], truth: &TrueBeta, grid: &QuadGrid, normalize: bool) -> Result<MiseComponents> {
    check_curves(curves, grid)?;
    if curves.is_empty() {
        return Ok(MiseComponents::default());
    }
    let scale = norm_of(truth, normalize);
    let b = grid.truth(truth);
    let r = curves.len() as f64;
    let ise: f64 = curves
        .iter()
        .map(|c| {
            let d: Vec<f64> = c.iter().zip(&b).map(|(a, t)| (a - t).powi(2)).collect();
            grid.integrate(&d)
        })
        .sum::<f64>()
        / r;
    let variance = variance_terms(curves, grid).iter().sum::<f64>() / r;
    let mean = mean_curve(curves, grid.len());
    let bias: Vec<f64> = mean.iter().zip(&b).map(|(m, t)| (m - t).powi(2)).collect();
    Ok(MiseComponents {
        mise: ise / scale,
        variance: variance / scale,
        squared_bias: grid.integrate(&bias) / scale,
    })
}

/// Mean integrated squared difference between paired replicates.
pub fn subsampling_variance(
    curves: &[Vec<f64>],
    base: &[Vec<f64>],
    truth: &TrueBeta,
    grid: &QuadGrid,
    normalize: bool,
) -> Result<f64> {
    check_curves(curves, grid)?;
    check_curves(base, grid)?;
    if curves.len() != base.len() {
        return Err(Error::mismatch("subsampling variance needs paired replicates"));
    }
    if curves.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = curves
        .iter()
        .zip(base)
        .map(|(c, b)| {
            let d: Vec<f64> = c.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
            grid.integrate(&d)
        })
        .sum();
    Ok(total / curves.len() as f64 / norm_of(truth, normalize))
}

/// `(Δ/Δ̃) mean_i ∫_0^Δ̃ (β̂_i − β)²` with `Δ̃ = min(Δ, Δ*)`.
pub fn partial_mise(
    curves: &[Vec<f64>],
    truth: &TrueBeta,
    delta_fit: f64,
    delta_true: f64,
    grid: &QuadGrid,
    normalize: bool,
) -> Result<f64> {
    check_curves(curves, grid)?;
    if !(delta_fit > 0.0 && delta_true > 0.0) {
        return Err(Error::invalid("window lengths must be positive"));
    }
    if curves.is_empty() {
        return Ok(0.0);
    }
    let tilde = delta_fit.min(delta_true);
    let b = grid.truth(truth);
    let total: f64 = curves
        .iter()
        .map(|c| {
            let d: Vec<f64> = c.iter().zip(&b).map(|(a, t)| (a - t).powi(2)).collect();
            grid.integrate_to(&d, tilde)
        })
        .sum();
    Ok(delta_fit / tilde * total / curves.len() as f64 / norm_of(truth, normalize))
}

/// One row of the computation/efficiency trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub sensor_hz: f64,
    pub c: f64,
    /// Data reduction for each intensity bound, in input order.
    pub reduction: Vec<u64>,
    pub efficiency: f64,
}

/// Measurements per hour divided by expected subsamples per hour (`c·H`),
/// rounded to the nearest integer, and the efficiency bound `c/(c+1)`
/// rounded to three decimals. Bounds are events per hour.
pub fn efficiency_table(c_values: &[f64], sensor_hz: &[f64], bounds: &[f64]) -> Result<Vec<EfficiencyRow>> {
    if c_values.iter().chain(sensor_hz).chain(bounds).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("efficiency table inputs must be positive"));
    }
    let mut out = Vec::new();
    for &hz in sensor_hz {
        for &c in c_values {
            let per_hour = hz * 3600.0;
            out.push(EfficiencyRow {
                sensor_hz: hz,
                c,
                reduction: bounds.iter().map(|&h| (per_hour / (c * h)).round() as u64).collect(),
                efficiency: (1000.0 * c / (c + 1.0)).round() / 1000.0,
            });
        }
    }
    Ok(out)
}

/// Desk-scale simulation study: simulate, sample at the base rate, thin to
/// the slower rates, fit every (rate, window) cell and summarize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    /// Expected hours between sampled non-event times, base rate first.
    pub rates: Vec<f64>,
    /// Window lengths used for fitting, in minutes.
    pub deltas: Vec<f64>,
    pub pipeline: PipelineConfig,
    /// Quadrature cell width in minutes.
    pub quad_step: f64,
    /// Integration runs to `upper_factor · max(Δ)`.
    pub upper_factor: f64,
    pub normalize: bool,
    pub keep_curves: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        ExperimentConfig {
            pipeline: PipelineConfig {
                fpca: crate::fpca::FpcaConfig::known(sim.matern, 35),
                ..PipelineConfig::default()
            },
            sim,
            replicates: 100,
            rates: vec![0.5, 1.0, 2.0, 4.0],
            deltas: vec![30.0],
            quad_step: 1.0 / 16.0,
            upper_factor: 1.25,
            normalize: true,
            keep_curves: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.rates.is_empty() || self.deltas.is_empty() {
            return Err(Error::invalid("at least one rate and one window length required"));
        }
        if self.rates.iter().any(|&r| !(r >= self.rates[0])) {
            return Err(Error::invalid("the first rate must be the fastest (smallest gap)"));
        }
        if self.deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::invalid("window lengths must be positive"));
        }
        Ok(())
    }

    fn max_delta(&self) -> f64 {
        self.deltas.iter().copied().fold(self.sim.beta.delta, f64::max)
    }

    pub fn quad_grid(&self) -> Result<QuadGrid> {
        let step = self.sim.step();
        let mut bps = vec![self.sim.beta.delta];
        for &d in &self.deltas {
            bps.push(d);
            let spec = crate::fpca::WindowSpec::new(d, step, self.pipeline.max_lag_points)?;
            bps.push(spec.effective_delta());
        }
        QuadGrid::new(self.upper_factor * self.max_delta(), self.quad_step, &bps)
    }
}

/// Named experiment configurations at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Sine `β`, window 30, all four rates.
    Table2Sine,
    /// Exponential `β`, window 30, all four rates.
    Table2Exp,
    /// Sine `β` with true window 32, fitted with windows 26 to 37.
    Table3,
    /// As `Table3` with exponential `β`.
    AppendixC,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Table2Sine, Preset::Table2Exp, Preset::Table3, Preset::AppendixC];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table2Sine => "table2-sine",
            Preset::Table2Exp => "table2-exp",
            Preset::Table3 => "table3",
            Preset::AppendixC => "appendixC",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(name))
    }

    pub fn config(self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        let exp = |c: &mut ExperimentConfig| {
            c.sim.beta.kind = BetaKind::ExpDecay;
            c.sim.beta.beta0 = 0.0;
            c.sim.beta.beta1 = 1.0;
        };
        match self {
            Preset::Table2Sine => {}
            Preset::Table2Exp => exp(&mut cfg),
            Preset::Table3 | Preset::AppendixC => {
                if self == Preset::AppendixC {
                    exp(&mut cfg);
                }
                cfg.sim.beta.delta = 32.0;
                cfg.deltas = vec![26.0, 29.0, 32.0, 35.0, 37.0];
            }
        }
        cfg
    }
}

/// Summary of one (rate, window) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiseReport {
    pub rate: f64,
    pub delta: f64,
    pub mise: f64,
    pub variance: f64,
    pub squared_bias: f64,
    pub subsampling_variance: f64,
    pub partial_mise: f64,
    /// Mean wall time per fit.
    pub runtime_secs: f64,
    /// Monte Carlo standard error of `variance`.
    pub variance_se: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<MiseReport>,
    pub failed: usize,
    pub grid: QuadGrid,
    /// `curves[cell][replicate]` on `grid`, when requested.
    pub curves: Option<Vec<Vec<Vec<f64>>>>,
}

impl ExperimentReport {
    pub fn cell(&self, rate: f64, delta: f64) -> Option<&MiseReport> {
        self.cells.iter().find(|c| c.rate == rate && c.delta == delta)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "rate",
            "delta",
            "mise",
            "variance",
            "squared_bias",
            "subsampling_variance",
            "partial_mise",
            "variance_se",
            "replicates",
        ])?;
        for c in &self.cells {
            wr.write_record([
                format!("{:?}", c.rate),
                format!("{:?}", c.delta),
                format!("{:?}", c.mise),
                format!("{:?}", c.variance),
                format!("{:?}", c.squared_bias),
                format!("{:?}", c.subsampling_variance),
                format!("{:?}", c.partial_mise),
                format!("{:?}", c.variance_se),
                c.replicates.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Runtimes are kept apart from the metrics so metric files are reproducible.
    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["rate", "delta", "runtime_secs"])?;
        for c in &self.cells {
            wr.write_record([format!("{:?}", c.rate), format!("{:?}", c.delta), format!("{:?}", c.runtime_secs)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

const THIN_STREAM: u64 = 1 << 40;

struct ReplicateOut {
    curves: Vec<Vec<f64>>,
    secs: Vec<f64>,
}

fn run_replicate(cfg: &ExperimentConfig, grid: &QuadGrid, seed: u64, r: usize) -> Result<ReplicateOut> {
    let rep_seed = rng::child_seed(&mut rng::stream(seed, &[r as u64]));
    let sim = SimConfig {
        seed: rep_seed,
        sample_rate: 1.0 / (60.0 * cfg.rates[0]),
        risk_start: Some(cfg.sim.risk_start.unwrap_or(0.0).max(cfg.max_delta())),
        ..cfg.sim.clone()
    };
    let ds = simulate_dataset(&sim)?;
    let keep: Vec<f64> = cfg.rates.iter().map(|&r| cfg.rates[0] / r).collect();
    let per_rate = thin_dataset(&ds, &keep, &mut rng::stream(rep_seed, &[THIN_STREAM]))?;
    let mut curves = Vec::new();
    let mut secs = Vec::new();
    for samples in &per_rate {
        for &delta in &cfg.deltas {
            let pcfg = PipelineConfig {
                delta,
                ..cfg.pipeline.clone()
            };
            let start = Instant::now();
            let pf = fit_dataset(&ds, Some(samples), &pcfg)?;
            secs.push(start.elapsed().as_secs_f64());
            let basis = &pf.fit.blocks[0].basis;
            let b = pf.fit.block_coef(0);
            curves.push(grid.nodes.iter().map(|&s| basis.curve(b, s)).collect());
        }
    }
    Ok(ReplicateOut { curves, secs })
}

fn sample_se(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (s2 / n as f64).sqrt()
}

/// Run the study. Replicates whose fits fail are logged and dropped from
/// every cell so that cells stay paired.
pub fn replicate_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let grid = cfg.quad_grid()?;
    let outs: Vec<Result<ReplicateOut>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &grid, seed, r))
        .collect();
    let mut ok = Vec::new();
    let mut failed = 0;
    for (r, o) in outs.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failed += 1;
            }
        }
    }
    let n_cells = cfg.rates.len() * cfg.deltas.len();
    let cell_curves: Vec<Vec<Vec<f64>>> = (0..n_cells)
        .map(|c| ok.iter().map(|o| o.curves[c].clone()).collect())
        .collect();
    let mut cells = summarize_cells(cfg, &grid, &cell_curves)?;
    for (c, cell) in cells.iter_mut().enumerate() {
        let secs: Vec<f64> = ok.iter().map(|o| o.secs[c]).collect();
        cell.runtime_secs = if secs.is_empty() { 0.0 } else { secs.iter().sum::<f64>() / secs.len() as f64 };
    }
    Ok(ExperimentReport {
        cells,
        failed,
        grid,
        curves: cfg.keep_curves.then_some(cell_curves),
    })
}

/// Metrics of every (rate, window) cell from `curves[cell][replicate]`,
/// cells ordered rate-major. Runtimes are left at zero.
pub fn summarize_cells(cfg: &ExperimentConfig, grid: &QuadGrid, cell_curves: &[Vec<Vec<f64>>]) -> Result<Vec<MiseReport>> {
    let n_cells = cfg.rates.len() * cfg.deltas.len();
    if cell_curves.len() != n_cells {
        return Err(Error::mismatch(format!("expected {n_cells} cells, got {}", cell_curves.len())));
    }
    let truth = &cfg.sim.beta;
    let scale = norm_of(truth, cfg.normalize);
    let mut cells = Vec::with_capacity(n_cells);
    for (j, &rate) in cfg.rates.iter().enumerate() {
        for (d, &delta) in cfg.deltas.iter().enumerate() {
            let curves = &cell_curves[j * cfg.deltas.len() + d];
            let m = mise(curves, truth, grid, cfg.normalize)?;
            let base = &cell_curves[d];
            let vt: Vec<f64> = variance_terms(curves, grid).iter().map(|v| v / scale).collect();
            cells.push(MiseReport {
                rate,
                delta,
                mise: m.mise,
                variance: m.variance,
                squared_bias: m.squared_bias,
                subsampling_variance: subsampling_variance(curves, base, truth, grid, cfg.normalize)?,
                partial_mise: partial_mise(curves, truth, delta, truth.delta, grid, cfg.normalize)?,
                runtime_secs: 0.0,
                variance_se: sample_se(&vt),
                replicates: curves.len(),
            });
        }
    }
    Ok(cells)
}

/// `rate,delta,replicate,node,s,beta_hat` rows, one per quadrature node.
pub fn write_curves_csv<W: Write>(w: W, cfg: &ExperimentConfig, grid: &QuadGrid, cell_curves: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["rate", "delta", "replicate", "node", "s", "beta_hat"])?;
    for (j, &rate) in cfg.rates.iter().enumerate() {
        for (d, &delta) in cfg.deltas.iter().enumerate() {
            for (r, curve) in cell_curves[j * cfg.deltas.len() + d].iter().enumerate() {
                for (k, v) in curve.iter().enumerate() {
                    wr.write_record([
                        format!("{rate:?}"),
                        format!("{delta:?}"),
                        r.to_string(),
                        k.to_string(),
                        format!("{:?}", grid.nodes[k]),
                        format!("{v:?}"),
                    ])?;
                }
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// Inverse of [`write_curves_csv`].
pub fn read_curves_csv<R: std::io::Read>(r: R, cfg: &ExperimentConfig, grid: &QuadGrid) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_cells = cfg.rates.len() * cfg.deltas.len();
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_cells];
    let mut rd = csv::Reader::from_reader(r);
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad curve field {i}")))
        };
        let (rate, delta) = (field(0)?, field(1)?);
        let (rep, node) = (field(2)? as usize, field(3)? as usize);
        let j = cfg.rates.iter().position(|&x| x == rate);
        let d = cfg.deltas.iter().position(|&x| x == delta);
        let (Some(j), Some(d)) = (j, d) else {
            return Err(Error::mismatch(format!("cell ({rate}, {delta}) not in the configuration")));
        };
        let cell = &mut out[j * cfg.deltas.len() + d];
        if rep == cell.len() {
            cell.push(Vec::with_capacity(grid.len()));
        }
        let curve = cell.get_mut(rep).filter(|c| c.len() == node).ok_or_else(|| Error::invalid("curves must be listed in order"))?;
        curve.push(field(5)?);
    }
    if out.iter().flatten().any(|c| c.len() != grid.len()) {
        return Err(Error::mismatch("curve length differs from the quadrature grid"));
    }
    Ok(out)
}

/// Fixed sensor paths with the log-linear hazard
/// `h(t) = exp(θ0 + θ1 x(t))` per minute, `x` read at the grid step holding `t`.
#[derive(Debug, Clone)]
pub struct ScalarScenario {
    pub paths: Vec<SensorPath>,
    pub theta: [f64; 2],
}

impl ScalarScenario {
    pub fn simulate(n_days: usize, sim: &SimConfig, theta: [f64; 2], seed: u64) -> Result<Self> {
        let grid = SensorPath::regular_grid(0.0, sim.step(), sim.n_grid);
        let sampler = GpSampler::new(&grid, &sim.matern)?;
        let paths = (0..n_days)
            .map(|d| sampler.sample(&mut rng::stream(seed, &[d as u64])))
            .collect();
        Ok(ScalarScenario { paths, theta })
    }

    fn x_at(path: &SensorPath, t: f64) -> f64 {
        let i = ((t / path.step()).floor() as usize).min(path.len() - 1);
        path.values(0)[i]
    }

    pub fn hazard(&self, path: &SensorPath, t: f64) -> f64 {
        (self.theta[0] + self.theta[1] * Self::x_at(path, t)).exp()
    }

    fn hazard_at(&self, path: &SensorPath, i: usize) -> f64 {
        (self.theta[0] + self.theta[1] * path.values(0)[i]).exp()
    }

    pub fn features(path: &SensorPath, t: f64) -> [f64; 2] {
        [1.0, Self::x_at(path, t)]
    }

    /// Exact Poisson events under the piecewise-constant hazard.
    pub fn events(&self, path: &SensorPath, rng: &mut rng::Rng) -> Result<Vec<f64>> {
        let dt = path.step();
        let mut out = Vec::new();
        for (i, &t0) in path.grid().iter().enumerate() {
            let mean = self.hazard_at(path, i) * dt;
            let n = Poisson::new(mean).map_err(|e| Error::invalid(e.to_string()))?.sample(rng) as usize;
            let mut ts: Vec<f64> = (0..n).map(|_| t0 + dt * rng.random::<f64>()).collect();
            ts.sort_by(f64::total_cmp);
            out.extend(ts);
        }
        Ok(out)
    }

    /// `∫ ∂h/∂θ dt` over all paths.
    pub fn gradient_integral(&self) -> [f64; 2] {
        let mut acc = [0.0; 2];
        for p in &self.paths {
            for (i, &x) in p.values(0).iter().enumerate() {
                let h = self.hazard_at(p, i) * p.step();
                acc[0] += h;
                acc[1] += h * x;
            }
        }
        acc
    }

    fn dh(&self, path: &SensorPath, t: f64) -> Vec<f64> {
        let h = self.hazard(path, t);
        Self::features(path, t).iter().map(|f| h * f).collect()
    }

    fn rows(path: &SensorPath, events: &[f64], samples: &SampleSet) -> Vec<DesignRow> {
        let row = |t: f64, y: u8, pi: f64| DesignRow {
            subject_id: 0,
            t,
            y,
            log_pi: pi.ln(),
            w: Self::features(path, t).to_vec(),
        };
        let mut rows: Vec<DesignRow> = samples
            .times
            .iter()
            .zip(&samples.pi_values)
            .map(|(&t, &pi)| row(t, 0, pi))
            .collect();
        rows.extend(events.iter().map(|&t| row(t, 1, f64::NAN)));
        rows
    }
}

/// Monte Carlo mean and standard error per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

fn summarize(draws: &[Vec<f64>]) -> McSummary {
    let p = draws.first().map_or(0, Vec::len);
    let n = draws.len() as f64;
    let mut mean = vec![0.0; p];
    for d in draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / n;
        }
    }
    let se = (0..p)
        .map(|j| {
            let s2 = draws.iter().map(|d| (d[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (s2 / n).sqrt()
        })
        .collect();
    McSummary { mean, se }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub truth: Vec<f64>,
    pub ht: McSummary,
    pub wp: McSummary,
}

/// Redraw designs (and, for the superposition estimator, events) on one
/// fixed day and compare both estimators with `∫ ∂h/∂θ dt`.
pub fn design_unbiasedness(
    scenario: &ScalarScenario,
    rate: f64,
    redraws: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    let path = scenario.paths.first().ok_or_else(|| Error::invalid("scenario has no paths"))?;
    let design = SamplingDesign::constant(rate)?;
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..redraws)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &[r as u64]);
            let events = scenario.events(path, &mut g)?;
            let samples = draw_samples(&design, 0, path.start(), path.end(), None, &events, &mut g)?;
            let ht = ht_estimator(&samples, 2, |t| scenario.dh(path, t));
            let ev = crate::gp_sim::EventSet::new(0, events, path.start(), path.end())?;
            let pis = vec![rate; ev.times.len()];
            let wp = wp_estimator(&samples, &ev, &pis, 2, |t| scenario.dh(path, t), |t| scenario.hazard(path, t))?;
            Ok((ht, wp))
        })
        .collect::<Result<_>>()?;
    let single = ScalarScenario {
        paths: vec![path.clone()],
        theta: scenario.theta,
    };
    let (ht, wp): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
    Ok(UnbiasednessReport {
        truth: single.gradient_integral().to_vec(),
        ht: summarize(&ht),
        wp: summarize(&wp),
    })
}

/// Replicate estimates of θ for paired estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEstimates {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl PairedEstimates {
    /// Sample variances of component `k` and the standard error of their
    /// difference from the paired squared deviations.
    pub fn variance_comparison(&self, k: usize) -> (f64, f64, f64) {
        let a: Vec<f64> = self.first.iter().map(|v| v[k]).collect();
        let b: Vec<f64> = self.second.iter().map(|v| v[k]).collect();
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let da: Vec<f64> = a.iter().map(|x| (x - ma).powi(2) * n / (n - 1.0)).collect();
        let db: Vec<f64> = b.iter().map(|x| (x - mb).powi(2) * n / (n - 1.0)).collect();
        let va = da.iter().sum::<f64>() / n;
        let vb = db.iter().sum::<f64>() / n;
        let diff: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        (va, vb, sample_se(&diff))
    }
}

/// Waagepetersen-weighted (first) and Horvitz-Thompson (second) estimates on
/// the same events and the same constant-rate design in each replicate.
pub fn weighting_comparison(scenario: &ScalarScenario, rate: f64, replicates: usize, seed: u64) -> Result<PairedEstimates> {
    let design = SamplingDesign::constant(rate)?;
    let fits: Vec<(Vec<f64>, Vec<f64>)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rows = Vec::new();
            for (d, path) in scenario.paths.iter().enumerate() {
                let mut g = rng::stream(seed, &[r as u64, d as u64]);
                let events = scenario.events(path, &mut g)?;
                let samples = draw_samples(&design, 0, path.start(), path.end(), None, &events, &mut g)?;
                let mut day_rows = ScalarScenario::rows(path, &events, &samples);
                for row in day_rows.iter_mut().filter(|r| r.y == 1) {
                    row.log_pi = rate.ln();
                }
                rows.extend(day_rows);
            }
            let wp = fit_estimating(&rows, 2, WeightScheme::Waagepetersen)?;
            let ht = fit_estimating(&rows, 2, WeightScheme::HorvitzThompson)?;
            Ok((wp, ht))
        })
        .collect::<Result<_>>()?;
    let (first, second) = fits.into_iter().unzip();
    Ok(PairedEstimates { first, second })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyStudy {
    pub c: Vec<f64>,
    /// Subsampled-design estimates per `c`, then the full-likelihood estimates.
    pub subsampled: Vec<Vec<Vec<f64>>>,
    pub full: Vec<Vec<f64>>,
}

impl EfficiencyStudy {
    /// `var(θ̂_k under c) / var(full θ̂_k)` for each `c`.
    pub fn variance_ratios(&self, k: usize) -> Vec<f64> {
        let var = |v: &[Vec<f64>]| {
            let n = v.len() as f64;
            let m = v.iter().map(|x| x[k]).sum::<f64>() / n;
            v.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
        };
        let vf = var(&self.full);
        self.subsampled.iter().map(|s| var(s) / vf).collect()
    }
}

/// Proportional designs `π = c·h(t; θ)` against the dense-grid full likelihood
/// on the same events.
pub fn efficiency_experiment(scenario: &ScalarScenario, c_values: &[f64], replicates: usize, seed: u64) -> Result<EfficiencyStudy> {
    let (mut h_lo, mut h_hi) = (f64::INFINITY, 0.0f64);
    for p in &scenario.paths {
        for i in 0..p.len() {
            let h = scenario.hazard_at(p, i);
            h_lo = h_lo.min(h);
            h_hi = h_hi.max(h);
        }
    }
    let designs = c_values
        .iter()
        .map(|&c| SamplingDesign::proportional(c, 0.5 * c * h_lo, 1.01 * c * h_hi))
        .collect::<Result<Vec<_>>>()?;
    let per_rep: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut all_events = Vec::new();
            let mut rows_by_c: Vec<Vec<DesignRow>> = vec![Vec::new(); designs.len()];
            for (d, path) in scenario.paths.iter().enumerate() {
                let mut g = rng::stream(seed, &[r as u64, d as u64]);
                let events = scenario.events(path, &mut g)?;
                let hz = |t: f64| scenario.hazard(path, t);
                for (k, design) in designs.iter().enumerate() {
                    let samples = draw_samples(design, 0, path.start(), path.end(), Some(&hz), &events, &mut g)?;
                    let mut rows = ScalarScenario::rows(path, &events, &samples);
                    for row in rows.iter_mut().filter(|r| r.y == 1) {
                        row.log_pi = design.intensity(row.t, Some(hz(row.t)))?.ln();
                    }
                    rows_by_c[k].extend(rows);
                }
                all_events.push((d, events));
            }
            let sub = rows_by_c
                .iter()
                .map(|rows| fit_estimating(rows, 2, WeightScheme::Waagepetersen))
                .collect::<Result<Vec<_>>>()?;
            let ev_w: Vec<Vec<f64>> = all_events
                .iter()
                .flat_map(|(d, ev)| ev.iter().map(|&t| ScalarScenario::features(&scenario.paths[*d], t).to_vec()))
                .collect();
            let terms_w: Vec<(Vec<f64>, f64)> = scenario
                .paths
                .iter()
                .flat_map(|p| p.values(0).iter().map(move |&x| (vec![1.0, x], p.step())))
                .collect();
            let ev_ref: Vec<&[f64]> = ev_w.iter().map(Vec::as_slice).collect();
            let terms_ref: Vec<(&[f64], f64)> = terms_w.iter().map(|(w, m)| (w.as_slice(), *m)).collect();
            let full = poisson_type_fit(&ev_ref, &terms_ref, 2)?;
            Ok((sub, full))
        })
        .collect::<Result<_>>()?;
    let mut subsampled = vec![Vec::with_capacity(replicates); c_values.len()];
    let mut full = Vec::with_capacity(replicates);
    for (sub, f) in per_rep {
        for (k, s) in sub.into_iter().enumerate() {
            subsampled[k].push(s);
        }
        full.push(f);
    }
    Ok(EfficiencyStudy {
        c: c_values.to_vec(),
        subsampled,
        full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_sim::BetaKind;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn sine(delta: f64) -> TrueBeta {
        TrueBeta::new(BetaKind::Sine, 0.0, 1.0, delta).unwrap()
    }

    #[test]
    fn quad_grid_respects_breakpoints() {
        let g = QuadGrid::new(10.0, 0.3, &[2.95, 7.0]).unwrap();
        assert_relative_eq!(g.widths.iter().sum::<f64>(), 10.0, epsilon = 1e-12);
        let ones = vec![1.0; g.len()];
        assert_relative_eq!(g.integrate_to(&ones, 2.95), 2.95, epsilon = 1e-12);
        assert_relative_eq!(g.integrate_to(&ones, 7.0), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_curves_have_zero_error() {
        let t = sine(30.0);
        let g = QuadGrid::new(37.5, 1.0 / 16.0, &[30.0]).unwrap();
        let c = vec![g.truth(&t); 5];
        let m = mise(&c, &t, &g, true).unwrap();
        assert_eq!(m.mise, 0.0);
        assert_eq!(partial_mise(&c, &t, 30.0, 30.0, &g, true).unwrap(), 0.0);
        assert_eq!(subsampling_variance(&c, &c, &t, &g, true).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_integrates_to_c2_delta() {
        let t = sine(30.0);
        let g = QuadGrid::new(37.5, 1.0 / 16.0, &[30.0]).unwrap();
        let c = 0.3;
        let curve: Vec<f64> = g.nodes.iter().map(|&s| t.eval(s) + if s < 30.0 { c } else { 0.0 }).collect();
        let m = mise(&[curve], &t, &g, false).unwrap();
        assert_relative_eq!(m.mise, c * c * 30.0, epsilon = 1e-10);
    }

    #[test]
    fn decomposition_identity_on_random_curves() {
        let t = sine(30.0);
        let g = QuadGrid::new(37.5, 0.25, &[30.0]).unwrap();
        let mut r = rng::from_seed(11);
        for _ in 0..20 {
            let curves: Vec<Vec<f64>> = (0..7)
                .map(|_| g.nodes.iter().map(|_| StandardNormal.sample(&mut r)).collect())
                .collect();
            let m = mise(&curves, &t, &g, true).unwrap();
            assert!((m.mise - m.variance - m.squared_bias).abs() < 1e-10);
            assert!(m.variance >= 0.0 && m.squared_bias >= 0.0);
        }
    }

    #[test]
    fn subsampling_variance_matches_direct_sum() {
        let t = sine(30.0);
        let g = QuadGrid::new(37.5, 0.5, &[]).unwrap();
        let mut r = rng::from_seed(12);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| g.nodes.iter().map(|_| StandardNormal.sample(&mut r)).collect())
                .collect()
        };
        let (a, b) = (draw(), draw());
        let mut direct = 0.0;
        for i in 0..4 {
            for k in 0..g.len() {
                direct += (a[i][k] - b[i][k]).powi(2) * g.widths[k];
            }
        }
        let got = subsampling_variance(&a, &b, &t, &g, false).unwrap();
        assert_relative_eq!(got, direct / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_mise_matches_direct_formula() {
        let t = sine(32.0);
        let g = QuadGrid::new(46.25, 1.0 / 16.0, &[26.0, 32.0]).unwrap();
        // Curve equal to 1 everywhere on [0, 26]: error (1 - β)² integrated there.
        let curve: Vec<f64> = g.nodes.iter().map(|&s| if s < 26.0 { 1.0 } else { 0.0 }).collect();
        let pm = partial_mise(&[curve], &t, 26.0, 32.0, &g, false).unwrap();
        let direct = crate::linalg::gl_integrate(0.0, 26.0, |s| (1.0 - t.eval(s)).powi(2));
        let mut fine = 0.0;
        let n = 2600;
        for k in 0..n {
            let s = (k as f64 + 0.5) * 26.0 / n as f64;
            fine += (1.0 - t.eval(s)).powi(2) * 26.0 / n as f64;
        }
        assert_relative_eq!(pm, fine, max_relative = 1e-4);
        assert_relative_eq!(pm, direct, max_relative = 1e-3);
    }

    #[test]
    fn partial_equals_full_at_true_window() {
        let t = sine(32.0);
        let g = QuadGrid::new(46.25, 1.0 / 16.0, &[31.68, 32.0]).unwrap();
        let mut r = rng::from_seed(13);
        let curves: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                g.nodes
                    .iter()
                    .map(|&s| if s < 31.68 { StandardNormal.sample(&mut r) } else { 0.0 })
                    .collect()
            })
            .collect();
        let m = mise(&curves, &t, &g, true).unwrap();
        let p = partial_mise(&curves, &t, 32.0, 32.0, &g, true).unwrap();
        assert!((m.mise - p).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let t = sine(30.0);
        let g = QuadGrid::new(37.5, 1.0, &[]).unwrap();
        assert!(mise(&[vec![0.0; 3]], &t, &g, true).is_err());
    }

    #[test]
    fn efficiency_table_rows() {
        let t = efficiency_table(&[10.0, 100.0], &[4.0, 32.0], &[1.0, 10.0]).unwrap();
        assert_eq!(t[0].reduction, vec![1440, 144]);
        assert_eq!(t[0].efficiency, 0.909);
        assert_eq!(t[3].reduction[1], 115);
        assert_eq!(t[3].efficiency, 0.990);
        assert_eq!(efficiency_table(&[1.0], &[4.0], &[1.0]).unwrap()[0].efficiency, 0.5);
    }

    #[test]
    fn zero_replicates_give_empty_report() {
        let cfg = ExperimentConfig {
            replicates: 0,
            ..ExperimentConfig::default()
        };
        let r = replicate_experiment(&cfg, 1).unwrap();
        assert_eq!(r.failed, 0);
        assert!(r.cells.iter().all(|c| c.replicates == 0 && c.mise == 0.0));
    }

    #[test]
    fn small_experiment_is_deterministic_and_ordered() {
        let mut cfg = ExperimentConfig {
            replicates: 3,
            keep_curves: true,
            ..ExperimentConfig::default()
        };
        cfg.sim.n_days = 20;
        cfg.pipeline.k_b = 8;
        let a = replicate_experiment(&cfg, 5).unwrap();
        let b = replicate_experiment(&cfg, 5).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.cells.len(), 4);
        assert_eq!(a.cells[0].subsampling_variance, 0.0);
        for c in &a.cells {
            assert!((c.mise - c.variance - c.squared_bias).abs() < 1e-10);
        }
        let curves = a.curves.as_ref().unwrap();
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &cfg, &a.grid, curves).unwrap();
        let back = read_curves_csv(buf.as_slice(), &cfg, &a.grid).unwrap();
        assert_eq!(&back, curves);
        let cells = summarize_cells(&cfg, &a.grid, &back).unwrap();
        for (x, y) in cells.iter().zip(&a.cells) {
            assert_eq!(x.mise, y.mise);
            assert_eq!(x.partial_mise, y.partial_mise);
        }
    }

    #[test]
    fn scalar_events_have_the_right_rate() {
        let sim = SimConfig::default();
        let theta = [(5.0f64 / 720.0).ln(), 0.0];
        let sc = ScalarScenario::simulate(1, &sim, theta, 1).unwrap();
        let mut g = rng::from_seed(2);
        let n: usize = (0..400).map(|_| sc.events(&sc.paths[0], &mut g).unwrap().len()).sum();
        let mean = n as f64 / 400.0;
        assert!((mean - 5.0).abs() < 3.0 * (5.0f64 / 400.0).sqrt(), "{mean}");
    }

    #[test]
    fn presets_round_trip_by_name() {
        for p in Preset::ALL {
            assert_eq!(Preset::from_name(p.name()), Some(p));
            p.config().validate().unwrap();
        }
        assert_eq!(Preset::from_name("table9"), None);
        assert_eq!(Preset::Table3.config().sim.beta.delta, 32.0);
    }

}
