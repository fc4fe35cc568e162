//! Spline basis for the coefficient function, cross matrices and the rows of
//! the logistic design.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};
use crate::fpca::{EigenSystem, FpcaModel, MeanSurface, WindowSpec, WindowedHistory};
use crate::gp_sim::EventSet;

/// Truncated-power cubic basis `1, u, u^2, (u - k_j)^3_+` on `u = s / delta`.
///
/// `delta` is the support of the fitted curve; the basis vanishes beyond it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub k_b: usize,
    pub delta: f64,
    /// Knots in `u` units, strictly inside `(0, 1)`.
    pub knots: Vec<f64>,
}

/// Basis with `k_b` functions and equally spaced interior knots on `[0, delta]`.
pub fn build_basis(k_b: usize, delta: f64, k_x: usize) -> Result<SplineBasis> {
    if k_b < 4 {
        return Err(Error::invalid(format!("K_b = {k_b} must be at least 4")));
    }
    if k_b > k_x {
        return Err(Error::Identifiability { k_b, k_x });
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("basis support must be positive"));
    }
    let n_knots = k_b - 3;
    let knots = (1..=n_knots)
        .map(|j| j as f64 / (n_knots + 1) as f64)
        .collect();
    Ok(SplineBasis { k_b, delta, knots })
}

impl SplineBasis {
    /// Index of the first penalized coefficient within the block.
    pub const FIRST_PENALIZED: usize = 3;

    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k_b];
        self.eval_into(s, &mut out);
        out
    }

    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        if s < 0.0 || s > self.delta * (1.0 + 1e-12) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let u = s / self.delta;
        out[0] = 1.0;
        out[1] = u;
        out[2] = u * u;
        for (j, &k) in self.knots.iter().enumerate() {
            let d = u - k;
            out[3 + j] = if d > 0.0 { d * d * d } else { 0.0 };
        }
    }

    /// `beta(s) = phi(s) b`.
    pub fn curve(&self, b: &[f64], s: f64) -> f64 {
        self.eval(s).iter().zip(b).map(|(p, c)| p * c).sum()
    }

    /// `Phi` with rows `phi(s_r)`.
    pub fn matrix(&self, s_grid: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(s_grid.len(), self.k_b);
        let mut row = vec![0.0; self.k_b];
        for (r, &s) in s_grid.iter().enumerate() {
            self.eval_into(s, &mut row);
            for (l, v) in row.iter().enumerate() {
                m[(r, l)] = *v;
            }
        }
        m
    }
}

/// `J[k, l] = ∫ psi_k phi_l` by trapezoid quadrature on the lag grid.
pub fn cross_matrix(es: &EigenSystem, basis: &SplineBasis) -> DMatrix<f64> {
    let phi = basis.matrix(&es.s_grid);
    let m = es.s_grid.len();
    let mut wphi = phi;
    for r in 0..m {
        for l in 0..basis.k_b {
            wphi[(r, l)] *= es.weights[r];
        }
    }
    es.eigenfunctions.transpose() * wphi
}

/// `M_t[l] = ∫ mu(t, s) phi_l(s) ds` on the lag grid.
pub fn mean_integrals(mean: &MeanSurface, t: f64, es: &EigenSystem, basis: &SplineBasis) -> Vec<f64> {
    let mut out = vec![0.0; basis.k_b];
    if mean.is_zero() {
        return out;
    }
    let mut row = vec![0.0; basis.k_b];
    for (r, &s) in es.s_grid.iter().enumerate() {
        let mu = mean.eval(t, s) * es.weights[r];
        basis.eval_into(s, &mut row);
        for (o, p) in out.iter_mut().zip(&row) {
            *o += mu * p;
        }
    }
    out
}

/// Per-label operators mapping a window to `M_t + c(t)' J`.
#[derive(Debug, Clone)]
struct LabelMap {
    /// `diag(w) Psi J`, so that `c' J = x_centred' proj`.
    proj: DMatrix<f64>,
    mean: MeanSurface,
    es: EigenSystem,
}

/// One functional covariate stream in the design.
#[derive(Debug, Clone)]
pub struct StreamTerm {
    pub stream: usize,
    pub fpca: FpcaModel,
    pub basis: SplineBasis,
    maps: [LabelMap; 2],
}

impl StreamTerm {
    pub fn new(stream: usize, fpca: FpcaModel, basis: SplineBasis) -> Result<Self> {
        let k_x = fpca.k_x();
        if basis.k_b > k_x {
            return Err(Error::Identifiability { k_b: basis.k_b, k_x });
        }
        let build = |label: u8| {
            let l = fpca.for_label(label);
            let j = cross_matrix(&l.eigen, &basis);
            let mut proj = &l.eigen.eigenfunctions * j;
            for r in 0..proj.nrows() {
                let w = l.eigen.weights[r];
                for c in 0..proj.ncols() {
                    proj[(r, c)] *= w;
                }
            }
            LabelMap {
                proj,
                mean: l.mean.clone(),
                es: l.eigen.clone(),
            }
        };
        let maps = [build(0), build(1)];
        Ok(StreamTerm {
            stream,
            fpca,
            basis,
            maps,
        })
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.fpca.spec
    }

    /// `M_t + c(t)' J` for a complete window.
    pub fn functional_block(&self, w: &WindowedHistory) -> Result<Vec<f64>> {
        if !w.is_complete() {
            return Err(Error::MissingData(format!(
                "window at t={} (subject {}) has missing values; run imputation first",
                w.anchor_t, w.subject_id
            )));
        }
        let map = &self.maps[usize::from(w.label.min(1))];
        let m = map.proj.nrows();
        if w.values.len() != m {
            return Err(Error::mismatch("window length differs from the lag grid"));
        }
        let k_b = self.basis.k_b;
        let mut out = mean_integrals(&map.mean, w.anchor_t, &map.es, &self.basis);
        for r in 0..m {
            let x = if map.mean.is_zero() {
                w.values[r]
            } else {
                w.values[r] - map.mean.eval(w.anchor_t, map.es.s_grid[r])
            };
            if x == 0.0 {
                continue;
            }
            for l in 0..k_b {
                out[l] += x * map.proj[(r, l)];
            }
        }
        Ok(out)
    }
}

/// History features `g_t(H^N)` and the baseline `Z_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub intercept: bool,
    /// B-spline in study time for the log baseline: `(n_basis, lo, hi)`.
    /// The first function is dropped when an intercept is present.
    pub baseline_spline: Option<(usize, f64, f64)>,
    pub time: bool,
    pub count: bool,
    pub time_since_last: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            intercept: true,
            baseline_spline: None,
            time: false,
            count: false,
            time_since_last: false,
        }
    }
}

impl FeatureSpec {
    pub fn names(&self) -> Vec<String> {
        let mut n = Vec::new();
        if self.intercept {
            n.push("intercept".to_string());
        }
        if let Some((k, _, _)) = self.baseline_spline {
            let skip = usize::from(self.intercept);
            for j in skip..k {
                n.push(format!("baseline_{j}"));
            }
        }
        if self.time {
            n.push("time".into());
        }
        if self.count {
            n.push("count".into());
        }
        if self.time_since_last {
            n.push("time_since_last".into());
        }
        n
    }

    pub fn len(&self) -> usize {
        self.names().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, t: f64, events: Option<&EventSet>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        if self.intercept {
            out.push(1.0);
        }
        if let Some((k, lo, hi)) = self.baseline_spline {
            let b = BSplineBasis::new(lo, hi, k).eval_dense(t);
            let skip = usize::from(self.intercept);
            out.extend_from_slice(&b[skip..]);
        }
        if self.time {
            out.push(t);
        }
        if self.count {
            out.push(events.map_or(0, |e| e.count_before(t)) as f64);
        }
        if self.time_since_last {
            let since = match events {
                Some(e) => t - e.last_before(t).unwrap_or(e.entry),
                None => 0.0,
            };
            out.push(since);
        }
        out
    }
}

/// One anchor of the design: an event (`y = 1`) or a sampled time (`y = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub subject_id: u64,
    pub t: f64,
    pub y: u8,
    pub log_pi: f64,
}

/// Row of the logistic design with covariates `W` and offset `log pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub subject_id: u64,
    pub t: f64,
    pub y: u8,
    pub log_pi: f64,
    pub w: Vec<f64>,
}

/// Coefficients sharing one penalty variance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PenaltyGroup {
    pub indices: Vec<usize>,
}

/// Column range of one stream's spline coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalBlock {
    pub stream: usize,
    pub start: usize,
    pub basis: SplineBasis,
}

impl FunctionalBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.basis.k_b
    }
}

/// Rows plus the column layout needed to penalize and interpret a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub columns: Vec<String>,
    pub rows: Vec<DesignRow>,
    pub groups: Vec<PenaltyGroup>,
    pub blocks: Vec<FunctionalBlock>,
}

impl Design {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Design without a penalty, for plain (unpenalized) logistic fits.
    pub fn unpenalized(columns: Vec<String>, rows: Vec<DesignRow>) -> Self {
        Design {
            columns,
            rows,
            groups: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Canonical order: by subject, then time, then label.
    pub fn canonicalize(&mut self) {
        self.rows.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then(a.t.total_cmp(&b.t))
                .then(a.y.cmp(&b.y))
        });
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.n_cols();
        for r in &self.rows {
            if r.w.len() != p {
                return Err(Error::mismatch(format!(
                    "row at t={} has {} covariates, expected {p}",
                    r.t,
                    r.w.len()
                )));
            }
            if !r.log_pi.is_finite() || r.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite entry in row at t={}", r.t)));
            }
            if r.y > 1 {
                return Err(Error::invalid("labels must be 0 or 1"));
            }
        }
        for g in &self.groups {
            if g.indices.iter().any(|&i| i >= p) {
                return Err(Error::mismatch("penalty index beyond design width"));
            }
        }
        Ok(())
    }

    /// Write `subject_id,t,y,log_pi,w_1..w_p`. Floats use the shortest
    /// representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec![
            "subject_id".to_string(),
            "t".into(),
            "y".into(),
            "log_pi".into(),
        ];
        header.extend((1..=self.n_cols()).map(|j| format!("w_{j}")));
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.subject_id.to_string(),
                format!("{:?}", r.t),
                r.y.to_string(),
                format!("{:?}", r.log_pi),
            ];
            rec.extend(r.w.iter().map(|v| format!("{v:?}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read rows written by [`Design::write_csv`]; the column layout comes
    /// from `layout` (columns, groups, blocks), whose rows are ignored.
    pub fn read_csv<R: Read>(r: R, layout: &Design) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let p = rd.headers()?.len().saturating_sub(4);
        if p != layout.n_cols() {
            return Err(Error::mismatch(format!(
                "design file has {p} covariates, layout expects {}",
                layout.n_cols()
            )));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad number '{}': {e}", &rec[i])))
            };
            rows.push(DesignRow {
                subject_id: rec[0]
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad subject id: {e}")))?,
                t: parse(1)?,
                y: rec[2]
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad label: {e}")))?,
                log_pi: parse(3)?,
                w: (4..4 + p).map(parse).collect::<Result<_>>()?,
            });
        }
        let d = Design {
            columns: layout.columns.clone(),
            rows,
            groups: layout.groups.clone(),
            blocks: layout.blocks.clone(),
        };
        d.validate()?;
        Ok(d)
    }

    /// Column layout only.
    pub fn layout(&self) -> Design {
        Design {
            columns: self.columns.clone(),
            rows: Vec::new(),
            groups: self.groups.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

/// Column names and penalty structure for the given features and streams.
pub fn design_layout(features: &FeatureSpec, terms: &[StreamTerm]) -> Design {
    let mut columns = features.names();
    let mut groups = Vec::new();
    let mut blocks = Vec::new();
    for term in terms {
        let start = columns.len();
        for l in 0..term.basis.k_b {
            columns.push(format!("b{}_{l}", term.stream));
        }
        groups.push(PenaltyGroup {
            indices: (start + SplineBasis::FIRST_PENALIZED..start + term.basis.k_b).collect(),
        });
        blocks.push(FunctionalBlock {
            stream: term.stream,
            start,
            basis: term.basis.clone(),
        });
    }
    Design {
        columns,
        rows: Vec::new(),
        groups,
        blocks,
    }
}

/// Build one row per anchor from its (complete) windows, one per stream term.
///
/// `windows[j][i]` is the window of anchor `i` for `terms[j]`.
pub fn build_design(
    anchors: &[Anchor],
    windows: &[Vec<WindowedHistory>],
    terms: &[StreamTerm],
    features: &FeatureSpec,
    events: &dyn Fn(u64) -> Option<EventSet>,
) -> Result<Design> {
    if windows.len() != terms.len() {
        return Err(Error::mismatch("one window list per stream term required"));
    }
    for ws in windows {
        if ws.len() != anchors.len() {
            return Err(Error::mismatch("one window per anchor required"));
        }
    }
    let mut design = design_layout(features, terms);
    let mut cache: Option<(u64, Option<EventSet>)> = None;
    for (i, a) in anchors.iter().enumerate() {
        if cache.as_ref().map(|c| c.0) != Some(a.subject_id) {
            cache = Some((a.subject_id, events(a.subject_id)));
        }
        let ev = cache.as_ref().and_then(|c| c.1.as_ref());
        let mut w = features.eval(a.t, ev);
        for (term, ws) in terms.iter().zip(windows) {
            let win = &ws[i];
            if win.label != a.y || win.subject_id != a.subject_id {
                return Err(Error::mismatch("window does not belong to its anchor"));
            }
            w.extend(term.functional_block(win)?);
        }
        design.rows.push(DesignRow {
            subject_id: a.subject_id,
            t: a.t,
            y: a.y,
            log_pi: a.log_pi,
            w,
        });
    }
    design.canonicalize();
    design.validate()?;
    Ok(design)
}
