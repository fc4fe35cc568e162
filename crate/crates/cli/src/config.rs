use std::path::Path;

use recsub_core::dataset::SimConfig;
use recsub_core::eval::ExperimentConfig;
use recsub_core::impute::BootMiConfig;
use recsub_core::mixed::{MultilevelOptions, RandomEffectSpec};
use recsub_core::pipeline::PipelineConfig;
use recsub_core::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command may read from the TOML config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    /// Replaces the preset of `replicate` when given.
    pub experiment: Option<ExperimentConfig>,
    pub random_effect: RandomEffectSpec,
    pub multilevel: MultilevelOptions,
    pub boot_mi: BootMiConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate()?;
        check_pipeline(&self.pipeline)?;
        if let Some(exp) = &self.experiment {
            exp.validate()?;
            check_pipeline(&exp.pipeline)?;
            if exp.rates.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::InvalidParameter("rates must be positive".into()).into());
            }
        }
        if self.boot_mi.b < 2 || self.boot_mi.m < 2 {
            return Err(Error::InvalidParameter("boot-MI needs b >= 2 and m >= 2".into()).into());
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Seed from the command line, else from the file; stochastic commands
    /// refuse to run without one.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        flag.or(self.seed)
            .ok_or_else(|| CliError::Config("a seed is required (--seed or `seed` in the config)".into()))
    }
}

fn check_pipeline(p: &PipelineConfig) -> Result<(), CliError> {
    if !(p.delta > 0.0) {
        return Err(Error::InvalidParameter("window length must be positive".into()).into());
    }
    if p.k_b > p.fpca.k_x {
        return Err(Error::Identifiability {
            k_b: p.k_b,
            k_x: p.fpca.k_x,
        }
        .into());
    }
    Ok(())
}
