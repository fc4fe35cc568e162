//! Glue from a dataset to a fitted model: anchors, windows, FPCA, design, fit.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::design::{build_basis, build_design, Anchor, Design, FeatureSpec, StreamTerm};
use crate::error::{Error, Result};
use crate::fit::{fit_alternating, FitOptions, FitResult};
use crate::fpca::{extract_windows, fit_fpca, FpcaConfig, WindowSpec, WindowedHistory};
use crate::gp_sim::Padding;
use crate::rng::Rng;
use crate::subsample::{nested_thin, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Window length in minutes.
    pub delta: f64,
    pub max_lag_points: usize,
    pub k_b: usize,
    pub fpca: FpcaConfig,
    pub features: FeatureSpec,
    pub fit: FitOptions,
    pub padding: Padding,
    /// Sensor streams entering the model as functional terms.
    pub streams: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            delta: 30.0,
            max_lag_points: 64,
            k_b: 35,
            fpca: FpcaConfig::estimated(35),
            features: FeatureSpec::default(),
            fit: FitOptions::default(),
            padding: Padding::Restrict,
            streams: vec![0],
        }
    }
}

/// Anchors with their windows, one list per stream.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: WindowSpec,
    pub anchors: Vec<Anchor>,
    pub windows: Vec<Vec<WindowedHistory>>,
}

/// A subject's sampled times together with the design intensity in force at
/// each of its event times.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub samples: SampleSet,
    pub event_pi: Vec<f64>,
}

/// Nested thinning of every subject's samples; `out[j][i]` is subject `i`
/// under `keep_probs[j]`, with event intensities scaled alike.
pub fn thin_dataset(ds: &Dataset, keep_probs: &[f64], rng: &mut Rng) -> Result<Vec<Vec<SubjectDesign>>> {
    let mut out: Vec<Vec<SubjectDesign>> = vec![Vec::with_capacity(ds.subjects.len()); keep_probs.len()];
    for s in &ds.subjects {
        for (j, set) in nested_thin(&s.samples, keep_probs, rng)?.into_iter().enumerate() {
            out[j].push(SubjectDesign {
                samples: set,
                event_pi: s.event_pi.iter().map(|p| p * keep_probs[j]).collect(),
            });
        }
    }
    Ok(out)
}

/// Events (label 1) and sampled times (label 0) of every subject, in
/// subject/time order. `designs` overrides the dataset's own sample sets.
pub fn collect_anchors(ds: &Dataset, designs: Option<&[SubjectDesign]>) -> Result<Vec<Anchor>> {
    if let Some(s) = designs {
        if s.len() != ds.subjects.len() {
            return Err(Error::mismatch("one sample set per subject required"));
        }
    }
    let mut out = Vec::new();
    for (i, subj) in ds.subjects.iter().enumerate() {
        let (ss, ev_pi) = designs.map_or((&subj.samples, &subj.event_pi), |s| (&s[i].samples, &s[i].event_pi));
        if ss.subject_id != subj.id || ev_pi.len() != subj.events.times.len() {
            return Err(Error::mismatch("design belongs to another subject"));
        }
        let mut a: Vec<Anchor> = subj
            .events
            .times
            .iter()
            .zip(ev_pi)
            .map(|(&t, &pi)| Anchor {
                subject_id: subj.id,
                t,
                y: 1,
                log_pi: pi.ln(),
            })
            .chain(ss.times.iter().zip(&ss.pi_values).map(|(&t, &pi)| Anchor {
                subject_id: subj.id,
                t,
                y: 0,
                log_pi: pi.ln(),
            }))
            .collect();
        a.sort_by(|x, y| x.t.total_cmp(&y.t).then(x.y.cmp(&y.y)));
        out.extend(a);
    }
    Ok(out)
}

pub fn prepare(ds: &Dataset, designs: Option<&[SubjectDesign]>, cfg: &PipelineConfig) -> Result<Prepared> {
    let step = ds
        .subjects
        .first()
        .map(|s| s.path.step())
        .ok_or_else(|| Error::invalid("dataset has no subjects"))?;
    let spec = WindowSpec::new(cfg.delta, step, cfg.max_lag_points)?;
    let anchors = collect_anchors(ds, designs)?;
    let mut windows = Vec::with_capacity(cfg.streams.len());
    for &stream in &cfg.streams {
        let mut ws = Vec::with_capacity(anchors.len());
        let mut start = 0;
        for subj in &ds.subjects {
            let n = anchors[start..].iter().take_while(|a| a.subject_id == subj.id).count();
            let pts: Vec<(f64, u8)> = anchors[start..start + n].iter().map(|a| (a.t, a.y)).collect();
            ws.extend(extract_windows(&subj.path, stream, subj.id, &pts, &spec, cfg.padding)?);
            start += n;
        }
        if start != anchors.len() {
            return Err(Error::invalid("subject ids must be unique"));
        }
        windows.push(ws);
    }
    Ok(Prepared { spec, anchors, windows })
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub terms: Vec<StreamTerm>,
    pub design: Design,
    pub fit: FitResult,
}

/// FPCA and spline basis per stream. Windows may be partially observed.
pub fn build_terms(prep: &Prepared, cfg: &PipelineConfig) -> Result<Vec<StreamTerm>> {
    let mut terms = Vec::with_capacity(cfg.streams.len());
    for (j, &stream) in cfg.streams.iter().enumerate() {
        let fpca = fit_fpca(&prep.windows[j], &prep.spec, &cfg.fpca)?;
        let k_b = cfg.k_b.min(fpca.k_x());
        if k_b < cfg.k_b {
            log::info!("K_b reduced from {} to {k_b} by the number of components", cfg.k_b);
        }
        let basis = build_basis(k_b, prep.spec.effective_delta(), fpca.k_x())?;
        terms.push(StreamTerm::new(stream, fpca, basis)?);
    }
    Ok(terms)
}

/// Design from the prepared anchors and a set of complete windows.
pub fn design_from_windows(ds: &Dataset, prep: &Prepared, windows: &[Vec<WindowedHistory>], terms: &[StreamTerm], cfg: &PipelineConfig) -> Result<Design> {
    let events = |id: u64| ds.subject(id).map(|s| s.events.clone());
    build_design(&prep.anchors, windows, terms, &cfg.features, &events)
}

/// FPCA per stream followed by design construction (windows must be complete).
pub fn build_terms_and_design(ds: &Dataset, prep: &Prepared, cfg: &PipelineConfig) -> Result<(Vec<StreamTerm>, Design)> {
    let terms = build_terms(prep, cfg)?;
    let design = design_from_windows(ds, prep, &prep.windows, &terms, cfg)?;
    Ok((terms, design))
}

pub fn fit_prepared(ds: &Dataset, prep: &Prepared, cfg: &PipelineConfig) -> Result<PipelineFit> {
    let (terms, design) = build_terms_and_design(ds, prep, cfg)?;
    let fit = fit_alternating(&design, &cfg.fit)?;
    Ok(PipelineFit { terms, design, fit })
}

pub fn fit_dataset(ds: &Dataset, designs: Option<&[SubjectDesign]>, cfg: &PipelineConfig) -> Result<PipelineFit> {
    let prep = prepare(ds, designs, cfg)?;
    fit_prepared(ds, &prep, cfg)
}
