//! Simulated user-day datasets and their on-disk format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_sim::{BetaKind, EventSet, GpSampler, HazardModel, MaternParams, SensorPath, TrueBeta};
use crate::rng;
use crate::subsample::{draw_samples, SampleSet, SamplingDesign};

/// Minutes in a simulated day.
pub const DAY_MINUTES: f64 = 720.0;
/// Sensor grid points per day.
pub const GRID_POINTS: usize = 1000;

/// Parameters of the simulation: one subject is one user-day observed on a
/// regular grid, time measured in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub day_minutes: f64,
    pub n_grid: usize,
    pub matern: MaternParams,
    pub beta: TrueBeta,
    /// Log event probability per grid step at zero covariate.
    pub theta0: f64,
    pub n_days: usize,
    /// Sampling intensity per minute (1/30: one sample per half hour).
    pub sample_rate: f64,
    /// Start of the at-risk period; defaults to the true window length.
    pub risk_start: Option<f64>,
    /// Probability that a sensor value is missing completely at random.
    pub missing_rate: f64,
    /// Additional covariate streams, independent of the hazard.
    pub extra_streams: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            day_minutes: DAY_MINUTES,
            n_grid: GRID_POINTS,
            matern: MaternParams {
                nu: 0.5,
                sigma2: 1.0,
                rho: 0.3 * DAY_MINUTES,
            },
            beta: TrueBeta {
                kind: BetaKind::Sine,
                beta0: 0.0,
                beta1: 0.4,
                delta: 30.0,
            },
            theta0: (5.0f64 / 1000.0).ln(),
            n_days: 100,
            sample_rate: 1.0 / 30.0,
            risk_start: None,
            missing_rate: 0.0,
            extra_streams: 0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn step(&self) -> f64 {
        self.day_minutes / self.n_grid as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.matern.validate()?;
        if !(self.day_minutes > 0.0) || self.n_grid < 2 {
            return Err(Error::invalid("day length and grid size must be positive"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid("missing rate must lie in [0, 1)"));
        }
        if !(self.beta.delta > 0.0) || self.beta.delta >= self.day_minutes {
            return Err(Error::invalid("window length must lie inside the day"));
        }
        if let Some(r) = self.risk_start {
            if !(r >= 0.0 && r < self.day_minutes) {
                return Err(Error::invalid("risk start must lie inside the day"));
            }
        }
        Ok(())
    }

    pub fn hazard_model(&self) -> HazardModel {
        let mut m = HazardModel::new(self.beta, self.theta0);
        m.risk_start = self.risk_start;
        m
    }
}

/// One user-day: sensor path, events and sampled non-event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: u64,
    pub path: SensorPath,
    pub events: EventSet,
    /// Design intensity at each event time.
    pub event_pi: Vec<f64>,
    pub samples: SampleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn n_events(&self) -> usize {
        self.subjects.iter().map(|s| s.events.times.len()).sum()
    }

    pub fn n_samples(&self) -> usize {
        self.subjects.iter().map(|s| s.samples.len()).sum()
    }

    pub fn subject(&self, id: u64) -> Option<&SubjectData> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

/// Simulate one user-day from its own random stream.
pub fn simulate_subject(cfg: &SimConfig, sampler: &GpSampler, id: u64) -> Result<SubjectData> {
    let mut r = rng::stream(cfg.seed, &[id]);
    let mut path = sampler.sample(&mut r);
    for _ in 0..cfg.extra_streams {
        let v = sampler.draw(&mut r);
        path.push_stream(v, vec![false; cfg.n_grid])?;
    }
    let model = cfg.hazard_model();
    let events = model.generate_events(&path, id, &mut r)?;
    let design = SamplingDesign::constant(cfg.sample_rate)?;
    let samples = draw_samples(&design, id, events.entry, events.tau, None, &events.times, &mut r)?;
    if cfg.missing_rate > 0.0 {
        for stream in 0..path.n_streams() {
            let mask: Vec<bool> = (0..cfg.n_grid).map(|_| r.random::<f64>() < cfg.missing_rate).collect();
            path.set_missing(stream, mask)?;
        }
    }
    let event_pi = vec![cfg.sample_rate; events.times.len()];
    Ok(SubjectData {
        id,
        path,
        events,
        event_pi,
        samples,
    })
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = SensorPath::regular_grid(0.0, cfg.step(), cfg.n_grid);
    let sampler = GpSampler::new(&grid, &cfg.matern)?;
    let subjects = (0..cfg.n_days as u64)
        .map(|id| simulate_subject(cfg, &sampler, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { subjects })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubjectMeta {
    id: u64,
    entry: f64,
    tau: f64,
}

/// Sidecar describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub grid_start: f64,
    pub grid_step: f64,
    pub grid_points: usize,
    pub n_streams: usize,
    subjects: Vec<SubjectMeta>,
    /// Simulation parameters when the data were simulated.
    pub config: Option<SimConfig>,
}

pub const SCHEMA_VERSION: u32 = 1;

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::invalid(format!("bad number '{s}': {e}")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse::<u64>()
        .map_err(|e| Error::invalid(format!("bad integer '{s}': {e}")))
}

impl Dataset {
    /// `subject_id,t,x_1..x_L,mask_1..mask_L`, one row per grid point.
    pub fn write_sensor_csv<W: Write>(&self, w: W, n_streams: usize) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["subject_id".to_string(), "t".into()];
        header.extend((1..=n_streams).map(|l| format!("x_{l}")));
        header.extend((1..=n_streams).map(|l| format!("mask_{l}")));
        wr.write_record(&header)?;
        for s in &self.subjects {
            for (i, &t) in s.path.grid().iter().enumerate() {
                let mut rec = vec![s.id.to_string(), fmt(t)];
                rec.extend((0..n_streams).map(|l| fmt(s.path.values(l)[i])));
                rec.extend((0..n_streams).map(|l| u8::from(s.path.missing(l)[i]).to_string()));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// `subject_id,t,y,log_pi` for events (`y = 1`) and sampled times (`y = 0`),
    /// sorted by subject then time.
    pub fn write_points_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["subject_id", "t", "y", "log_pi"])?;
        for s in &self.subjects {
            let mut pts: Vec<(f64, u8, f64)> = s
                .events
                .times
                .iter()
                .zip(&s.event_pi)
                .map(|(&t, &pi)| (t, 1, pi))
                .chain(s.samples.times.iter().zip(&s.samples.pi_values).map(|(&t, &pi)| (t, 0, pi)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (t, y, pi) in pts {
                wr.write_record([s.id.to_string(), fmt(t), y.to_string(), fmt(pi.ln())])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn manifest(&self, config: Option<&SimConfig>) -> Manifest {
        let first = self.subjects.first();
        Manifest {
            schema_version: SCHEMA_VERSION,
            grid_start: first.map_or(0.0, |s| s.path.start()),
            grid_step: first.map_or_else(|| config.map_or(1.0, |c| c.step()), |s| s.path.step()),
            grid_points: first.map_or_else(|| config.map_or(0, |c| c.n_grid), |s| s.path.len()),
            n_streams: first.map_or_else(|| config.map_or(1, |c| 1 + c.extra_streams), |s| s.path.n_streams()),
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectMeta {
                    id: s.id,
                    entry: s.events.entry,
                    tau: s.events.tau,
                })
                .collect(),
            config: config.cloned(),
        }
    }

    /// Write `sensor.csv`, `points.csv` and `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, config: Option<&SimConfig>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let m = self.manifest(config);
        self.write_sensor_csv(fs::File::create(dir.join("sensor.csv"))?, m.n_streams)?;
        self.write_points_csv(fs::File::create(dir.join("points.csv"))?)?;
        let mut f = fs::File::create(dir.join("manifest.json"))?;
        f.write_all(serde_json::to_string_pretty(&m)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<(Dataset, Manifest)> {
        let manifest: Manifest = serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
        let ds = Dataset::read_parts(
            fs::File::open(dir.join("sensor.csv"))?,
            fs::File::open(dir.join("points.csv"))?,
            &manifest,
        )?;
        Ok((ds, manifest))
    }

    pub fn read_parts<R1: Read, R2: Read>(sensor: R1, points: R2, manifest: &Manifest) -> Result<Dataset> {
        let l = manifest.n_streams;
        let n = manifest.grid_points;
        let mut rd = csv::Reader::from_reader(sensor);
        if rd.headers()?.len() != 2 + 2 * l {
            return Err(Error::mismatch("sensor.csv column count does not match manifest"));
        }
        let mut paths: Vec<(u64, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<bool>>)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let id = parse_u64(&rec[0])?;
            if paths.last().map(|p| p.0) != Some(id) {
                paths.push((id, Vec::with_capacity(n), vec![Vec::with_capacity(n); l], vec![Vec::with_capacity(n); l]));
            }
            let p = paths.last_mut().unwrap();
            p.1.push(parse_f64(&rec[1])?);
            for s in 0..l {
                p.2[s].push(parse_f64(&rec[2 + s])?);
                p.3[s].push(&rec[2 + l + s] == "1");
            }
        }
        let mut rd = csv::Reader::from_reader(points);
        let mut pts: Vec<(u64, f64, u8, f64)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let y: u8 = match &rec[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::invalid(format!("label must be 0 or 1, got '{other}'"))),
            };
            pts.push((parse_u64(&rec[0])?, parse_f64(&rec[1])?, y, parse_f64(&rec[3])?));
        }
        let mut subjects = Vec::with_capacity(paths.len());
        for (id, grid, values, missing) in paths {
            let meta = manifest
                .subjects
                .iter()
                .find(|m| m.id == id)
                .ok_or_else(|| Error::invalid(format!("subject {id} missing from manifest")))?;
            let path = SensorPath::new(grid, values, missing)?;
            let mut ev = Vec::new();
            let mut ev_pi = Vec::new();
            let mut samples = SampleSet::empty(id);
            for &(sid, t, y, lp) in pts.iter().filter(|p| p.0 == id) {
                debug_assert_eq!(sid, id);
                if y == 1 {
                    ev.push(t);
                    ev_pi.push(lp.exp());
                } else {
                    samples.times.push(t);
                    samples.pi_values.push(lp.exp());
                }
            }
            let events = EventSet::new(id, ev, meta.entry, meta.tau)?;
            subjects.push(SubjectData {
                id,
                path,
                events,
                event_pi: ev_pi,
                samples,
            });
        }
        Ok(Dataset { subjects })
    }
}
