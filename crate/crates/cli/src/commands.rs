use std::fs;
use std::path::Path;

use recsub_core::dataset::{simulate_dataset, Dataset, SCHEMA_VERSION};
use recsub_core::design::Design;
use recsub_core::eval::{
    efficiency_table, read_curves_csv, replicate_experiment, summarize_cells, write_curves_csv, ExperimentConfig, ExperimentReport, Preset,
};
use recsub_core::fit::{fit_alternating, FitResult};
use recsub_core::impute::{boot_mi, conditional_law, mi_fits};
use recsub_core::mixed::{fit_multilevel, QuadratureRule};
use recsub_core::pipeline::{build_terms, fit_dataset, prepare, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, DiagnoseArgs, EvalArgs, FitArgs, ReplicateArgs, SimulateArgs};

const GIT_DESCRIBE: &str = env!("RECSUB_GIT_DESCRIBE");

/// Provenance written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest<T> {
    schema_version: u32,
    command: String,
    version: String,
    git_describe: String,
    seed: Option<u64>,
    config: T,
}

fn manifest<T: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: &T) -> Result<(), CliError> {
    let m = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        git_describe: GIT_DESCRIBE.into(),
        seed,
        config,
    };
    write_json(&dir.join("run.json"), &m)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    Ok(fs::File::create(path)?)
}

pub fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<(), CliError> {
    let mut sim = cfg.sim.clone();
    sim.seed = cfg.seed(a.seed)?;
    if let Some(d) = a.days {
        sim.n_days = d;
    }
    if let Some(r) = a.missing_rate {
        sim.missing_rate = r;
    }
    sim.validate()?;
    let ds = simulate_dataset(&sim)?;
    ds.write_dir(&a.out, Some(&sim))?;
    manifest(&a.out, "simulate", Some(sim.seed), &sim)?;
    let days = ds.subjects.len().max(1) as f64;
    eprintln!(
        "{} user-days, {} events ({:.2}/day), {} sampled times",
        ds.subjects.len(),
        ds.n_events(),
        ds.n_events() as f64 / days,
        ds.n_samples()
    );
    Ok(())
}

fn lag_grid(fit: &FitResult) -> Vec<f64> {
    let upper = fit.blocks.first().map_or(0.0, |b| b.basis.delta);
    (0..=120).map(|i| upper * i as f64 / 120.0).collect()
}

fn write_fit(dir: &Path, fit: &FitResult) -> Result<(), CliError> {
    fs::write(dir.join("fit.json"), fit.to_json()? + "\n")?;
    if !fit.blocks.is_empty() {
        fit.beta_curve(0, &lag_grid(fit)).write_csv(create(&dir.join("beta.csv"))?)?;
    }
    Ok(())
}

fn write_design(dir: &Path, design: &Design) -> Result<(), CliError> {
    design.write_csv(create(&dir.join("design.csv"))?)?;
    write_json(&dir.join("layout.json"), &design.layout())
}

#[derive(Serialize)]
struct ImputedFit<'a> {
    columns: &'a [String],
    /// Average over imputations of the original sample.
    theta: Vec<f64>,
    imputations: usize,
}

pub fn fit(cfg: &RunConfig, a: &FitArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out)?;
    let mut pipeline: PipelineConfig = cfg.pipeline.clone();
    if let Some(d) = a.delta {
        pipeline.delta = d;
    }
    if let Some(dir) = &a.design {
        let layout: Design = serde_json::from_reader(fs::File::open(dir.join("layout.json"))?)?;
        let design = Design::read_csv(fs::File::open(dir.join("design.csv"))?, &layout)?;
        let fit = fit_alternating(&design, &pipeline.fit)?;
        write_fit(&a.out, &fit)?;
        return manifest(&a.out, "fit", None, &pipeline);
    }
    let data = a.data.as_deref().ok_or_else(|| CliError::Config("--data or --design is required".into()))?;
    let (ds, _) = Dataset::read_dir(data)?;
    let mut seed = None;
    if a.impute {
        let s = cfg.seed(a.seed)?;
        seed = Some(s);
        let fits = mi_fits(&ds, &pipeline, cfg.boot_mi.m, s)?;
        let p = fits[0].theta.len();
        let theta: Vec<f64> = (0..p).map(|j| fits.iter().map(|f| f.theta[j]).sum::<f64>() / fits.len() as f64).collect();
        write_json(
            &a.out.join("imputed_fit.json"),
            &ImputedFit {
                columns: &fits[0].columns,
                theta: theta.clone(),
                imputations: fits.len(),
            },
        )?;
        let boot = boot_mi(&ds, &pipeline, &cfg.boot_mi, s)?;
        fs::write(a.out.join("bootmi.json"), boot.to_json()? + "\n")?;
        let mut centred = boot;
        centred.point = theta;
        let grid = lag_grid(&fits[0]);
        centred.beta_curve(0, &grid, 0.95).write_csv(create(&a.out.join("beta.csv"))?)?;
    } else {
        let pf = fit_dataset(&ds, None, &pipeline)?;
        write_fit(&a.out, &pf.fit)?;
        write_design(&a.out, &pf.design)?;
    }
    if a.multilevel {
        let pf = fit_dataset(&ds, None, &pipeline)?;
        let rule = QuadratureRule::gauss_hermite(cfg.multilevel.n_gq)?;
        let mut opts = cfg.multilevel.clone();
        opts.fit = pipeline.fit.clone();
        let ml = fit_multilevel(&pf.design, &cfg.random_effect, &rule, &opts)?;
        write_json(&a.out.join("multilevel.json"), &ml)?;
        ml.write_blups_csv(create(&a.out.join("blups.csv"))?)?;
    }
    manifest(&a.out, "fit", seed, cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyManifest {
    preset: Option<String>,
    failed: usize,
    experiment: ExperimentConfig,
}

fn write_table1(dir: &Path) -> Result<(), CliError> {
    let bounds = [0.5, 1.0, 3.0, 5.0, 10.0];
    let rows = efficiency_table(&[5.0, 10.0, 100.0], &[4.0, 32.0], &bounds)?;
    let mut out = String::from("sensor_hz,c");
    for b in bounds {
        out.push_str(&format!(",bound_{b}"));
    }
    out.push_str(",efficiency\n");
    for r in &rows {
        out.push_str(&format!("{},{}", r.sensor_hz, r.c));
        for v in &r.reduction {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{:.3}\n", r.efficiency));
    }
    fs::write(dir.join("table1.csv"), out)?;
    Ok(())
}

pub fn replicate(cfg: &RunConfig, a: &ReplicateArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out)?;
    if a.preset.as_deref().is_some_and(|p| p.eq_ignore_ascii_case("table1")) {
        write_table1(&a.out)?;
        return manifest(&a.out, "replicate", None, &"table1");
    }
    let mut exp = if a.from_config {
        cfg.experiment
            .clone()
            .ok_or_else(|| CliError::Config("--from-config needs an [experiment] table".into()))?
    } else {
        let name = a.preset.as_deref().unwrap_or_default();
        Preset::from_name(name)
            .ok_or_else(|| CliError::Config(format!("unknown preset '{name}'")))?
            .config()
    };
    if let Some(r) = a.replicates {
        exp.replicates = r;
    }
    if let Some(d) = a.days {
        exp.sim.n_days = d;
    }
    if let Some(k) = a.k_b {
        exp.pipeline.k_b = k;
    }
    exp.keep_curves |= a.keep_curves;
    exp.validate()?;
    let seed = cfg.seed(a.seed)?;
    eprintln!(
        "running {} replicates x {} user-days, {} cells",
        exp.replicates,
        exp.sim.n_days,
        exp.rates.len() * exp.deltas.len()
    );
    let report = replicate_experiment(&exp, seed)?;
    if report.failed > 0 {
        eprintln!("{} of {} replicates failed and were excluded", report.failed, exp.replicates);
    }
    report.write_csv(create(&a.out.join("mise.csv"))?)?;
    report.write_timing_csv(create(&a.out.join("timing.csv"))?)?;
    if let Some(curves) = &report.curves {
        write_curves_csv(create(&a.out.join("curves.csv"))?, &exp, &report.grid, curves)?;
    }
    manifest(
        &a.out,
        "replicate",
        Some(seed),
        &StudyManifest {
            preset: a.preset.clone(),
            failed: report.failed,
            experiment: exp,
        },
    )
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let run: RunManifest<StudyManifest> = serde_json::from_reader(fs::File::open(a.run.join("run.json"))?)?;
    let mut exp = run.config.experiment;
    if a.raw {
        exp.normalize = false;
    }
    let grid = exp.quad_grid()?;
    let curves = read_curves_csv(fs::File::open(a.run.join("curves.csv"))?, &exp, &grid)?;
    let cells = summarize_cells(&exp, &grid, &curves)?;
    fs::create_dir_all(&a.out)?;
    let report = ExperimentReport {
        cells,
        failed: run.config.failed,
        grid,
        curves: None,
    };
    report.write_csv(create(&a.out.join("mise.csv"))?)?;
    manifest(&a.out, "eval", run.seed, &exp)
}

#[derive(Debug, Default, Serialize)]
struct StreamDiagnostics {
    stream: usize,
    windows: usize,
    incomplete: usize,
    fully_missing: usize,
    missing_fraction: f64,
    /// Windows whose observed block needed a ridge.
    ridged: usize,
    /// Mean conditional variance of the missing values.
    mean_conditional_variance: f64,
}

pub fn impute_diagnose(cfg: &RunConfig, a: &DiagnoseArgs) -> Result<(), CliError> {
    let (ds, _) = Dataset::read_dir(&a.data)?;
    let mut pipeline = cfg.pipeline.clone();
    if let Some(d) = a.delta {
        pipeline.delta = d;
    }
    let prep = prepare(&ds, None, &pipeline)?;
    let terms = build_terms(&prep, &pipeline)?;
    let mut out = Vec::new();
    for (ws, term) in prep.windows.iter().zip(&terms) {
        let mut d = StreamDiagnostics {
            stream: term.stream,
            windows: ws.len(),
            ..StreamDiagnostics::default()
        };
        let (mut n_missing, mut n_total, mut var_sum) = (0usize, 0usize, 0.0);
        for w in ws {
            let k = w.mask.iter().filter(|&&m| m).count();
            n_missing += k;
            n_total += w.mask.len();
            if k == 0 {
                continue;
            }
            d.incomplete += 1;
            if k == w.mask.len() {
                d.fully_missing += 1;
                continue;
            }
            let l = term.fpca.for_label(w.label);
            let law = conditional_law(w, &l.mean.window(w.anchor_t, &l.cov.s_grid), &l.cov.matrix)?;
            if law.ridge > 0.0 {
                d.ridged += 1;
            }
            var_sum += law.cov.diagonal().sum();
        }
        d.missing_fraction = if n_total == 0 { 0.0 } else { n_missing as f64 / n_total as f64 };
        d.mean_conditional_variance = if n_missing == 0 { 0.0 } else { var_sum / n_missing as f64 };
        out.push(d);
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("diagnose.json"), &out)?;
    manifest(&a.out, "impute-diagnose", None, &pipeline)?;
    for d in &out {
        eprintln!(
            "stream {}: {} of {} windows incomplete, {} fully missing",
            d.stream, d.incomplete, d.windows, d.fully_missing
        );
    }
    Ok(())
}
