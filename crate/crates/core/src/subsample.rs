//! Poisson subsampling of non-event times and design-unbiased estimators of
//! the cumulative-hazard gradient.

use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_sim::EventSet;
use crate::rng::Rng;

/// Sampling intensity family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// `pi(t) = rate`.
    ConstantRate,
    /// `pi(t) = max(L, c h(t))` for a pilot hazard `h`.
    ProportionalToHazard,
}

/// Inhomogeneous Poisson sampling design with intensity bounds `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingDesign {
    pub kind: DesignKind,
    pub rate_or_c: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SamplingDesign {
    pub fn constant(rate: f64) -> Result<Self> {
        let d = SamplingDesign {
            kind: DesignKind::ConstantRate,
            rate_or_c: rate,
            lower: rate,
            upper: rate,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn proportional(c: f64, lower: f64, upper: f64) -> Result<Self> {
        let d = SamplingDesign {
            kind: DesignKind::ProportionalToHazard,
            rate_or_c: c,
            lower,
            upper,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_or_c > 0.0 && self.rate_or_c.is_finite()) {
            return Err(Error::invalid("sampling rate / constant must be positive"));
        }
        if !(self.lower > 0.0 && self.upper.is_finite() && self.lower <= self.upper) {
            return Err(Error::invalid(format!(
                "intensity bounds must satisfy 0 < L <= U < inf, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.kind == DesignKind::ConstantRate
            && (self.rate_or_c < self.lower || self.rate_or_c > self.upper)
        {
            return Err(Error::invalid("constant rate lies outside its bounds"));
        }
        Ok(())
    }

    /// Intensity at `t` given the pilot hazard value `h` (ignored for the
    /// constant design).
    pub fn intensity(&self, t: f64, h: Option<f64>) -> Result<f64> {
        match self.kind {
            DesignKind::ConstantRate => Ok(self.rate_or_c),
            DesignKind::ProportionalToHazard => {
                let h = h.ok_or_else(|| {
                    Error::invalid("proportional design requires a pilot hazard")
                })?;
                let pi = (self.rate_or_c * h).max(self.lower);
                if pi > self.upper {
                    return Err(Error::BoundViolation {
                        t,
                        value: pi,
                        lower: self.lower,
                        upper: self.upper,
                    });
                }
                Ok(pi)
            }
        }
    }
}

/// Sampled non-event times with the intensity in force when each was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub subject_id: u64,
    pub times: Vec<f64>,
    pub pi_values: Vec<f64>,
}

impl SampleSet {
    pub fn empty(subject_id: u64) -> Self {
        SampleSet {
            subject_id,
            times: Vec::new(),
            pi_values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

const COINCIDENCE_TOL: f64 = 1e-12;

fn coincides(t: f64, avoid: &[f64]) -> bool {
    let k = avoid.partition_point(|&u| u < t - COINCIDENCE_TOL);
    k < avoid.len() && (avoid[k] - t).abs() <= COINCIDENCE_TOL
}

/// Draw sampling times on `(entry, tau]`.
///
/// The constant design uses exponential inter-arrival times; the proportional
/// design thins a rate-`U` homogeneous process. Candidates falling within
/// `1e-12` of a time in `avoid` (sorted event times) are discarded and drawing
/// continues, which leaves the law of the process unchanged.
pub fn draw_samples(
    design: &SamplingDesign,
    subject_id: u64,
    entry: f64,
    tau: f64,
    hazard: Option<&dyn Fn(f64) -> f64>,
    avoid: &[f64],
    rng: &mut Rng,
) -> Result<SampleSet> {
    design.validate()?;
    if !(tau >= entry) {
        return Err(Error::invalid("sampling window must satisfy entry <= tau"));
    }
    if design.kind == DesignKind::ProportionalToHazard && hazard.is_none() {
        return Err(Error::invalid("proportional design requires a pilot hazard"));
    }
    let envelope = match design.kind {
        DesignKind::ConstantRate => design.rate_or_c,
        DesignKind::ProportionalToHazard => design.upper,
    };
    let gap = Exp::new(envelope).map_err(|e| Error::invalid(e.to_string()))?;
    let mut times = Vec::new();
    let mut pi_values = Vec::new();
    let mut t = entry;
    loop {
        t += gap.sample(rng);
        if t > tau {
            break;
        }
        let pi = match design.kind {
            DesignKind::ConstantRate => design.rate_or_c,
            DesignKind::ProportionalToHazard => {
                let h = hazard.expect("checked above")(t);
                let pi = design.intensity(t, Some(h))?;
                let u: f64 = rng.random();
                if u * envelope >= pi {
                    continue;
                }
                pi
            }
        };
        if coincides(t, avoid) {
            continue;
        }
        times.push(t);
        pi_values.push(pi);
    }
    Ok(SampleSet {
        subject_id,
        times,
        pi_values,
    })
}

/// Independent Bernoulli retention with probability `keep_prob`; the retained
/// intensities are scaled by `keep_prob`.
pub fn thin(samples: &SampleSet, keep_prob: f64, rng: &mut Rng) -> Result<SampleSet> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid("keep probability must lie in (0, 1]"));
    }
    let mut out = SampleSet::empty(samples.subject_id);
    for (&t, &pi) in samples.times.iter().zip(&samples.pi_values) {
        let u: f64 = rng.random();
        if u < keep_prob {
            out.times.push(t);
            out.pi_values.push(pi * keep_prob);
        }
    }
    Ok(out)
}

/// Nested thinning with a single uniform per point: the set at level `j`
/// keeps the points with `u < keep_probs[j]`, so sets are nested whenever the
/// probabilities decrease.
pub fn nested_thin(
    samples: &SampleSet,
    keep_probs: &[f64],
    rng: &mut Rng,
) -> Result<Vec<SampleSet>> {
    if keep_probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid("keep probabilities must lie in (0, 1]"));
    }
    let u: Vec<f64> = (0..samples.len()).map(|_| rng.random()).collect();
    Ok(keep_probs
        .iter()
        .map(|&p| {
            let mut out = SampleSet::empty(samples.subject_id);
            for (i, (&t, &pi)) in samples.times.iter().zip(&samples.pi_values).enumerate() {
                if u[i] < p {
                    out.times.push(t);
                    out.pi_values.push(pi * p);
                }
            }
            out
        })
        .collect())
}

/// Superposition weight `pi / (pi + h)`.
pub fn weight(pi: f64, h: f64) -> f64 {
    pi / (pi + h)
}

/// Horvitz-Thompson estimator `Σ_{u ∈ D} dh(u) / pi(u)` of the cumulative-hazard
/// gradient.
pub fn ht_estimator(
    samples: &SampleSet,
    dim: usize,
    mut dh: impl FnMut(f64) -> Vec<f64>,
) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for (&t, &pi) in samples.times.iter().zip(&samples.pi_values) {
        let g = dh(t);
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi / pi;
        }
    }
    acc
}

/// Superposition estimator `Σ_{u ∈ T ∪ D} dh(u) / (pi(u) + h(u))`.
///
/// `event_pi` holds the design intensity at each event time.
pub fn wp_estimator(
    samples: &SampleSet,
    events: &EventSet,
    event_pi: &[f64],
    dim: usize,
    mut dh: impl FnMut(f64) -> Vec<f64>,
    mut h: impl FnMut(f64) -> f64,
) -> Result<Vec<f64>> {
    if event_pi.len() != events.times.len() {
        return Err(Error::mismatch("one intensity per event time required"));
    }
    let mut acc = vec![0.0; dim];
    let points = samples
        .times
        .iter()
        .zip(&samples.pi_values)
        .chain(events.times.iter().zip(event_pi));
    for (&t, &pi) in points {
        let denom = pi + h(t);
        for (a, gi) in acc.iter_mut().zip(dh(t)) {
            *a += gi / denom;
        }
    }
    Ok(acc)
}
