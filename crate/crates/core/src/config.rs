//! Experiment configuration: one self-describing TOML file drives dataset
//! generation, both pipeline phases, and evaluation. Every field has a
//! default except the scenario itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dism::{DismConfig, ThresholdSpec};
use crate::error::{Error, Result};
use crate::fed::DctoConfig;
use crate::node::Penalties;
use crate::synth::ScenarioSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DismSettings {
    #[serde(default = "default_t_s")]
    pub t_s: usize,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Fixed threshold override; absent means null-calibrated.
    #[serde(default)]
    pub delta_hard: Option<f64>,
    #[serde(default)]
    pub delta_local: Option<f64>,
    #[serde(default = "default_ridge")]
    pub ridge_scale: f64,
    #[serde(default = "default_calib_draws")]
    pub calib_draws: usize,
    #[serde(default = "default_calib_quantile")]
    pub calib_quantile: f64,
}

fn default_t_s() -> usize {
    1
}
fn default_h() -> usize {
    32
}
fn default_sigma() -> f64 {
    1.0
}
fn default_ridge() -> f64 {
    1e-3
}
fn default_calib_draws() -> usize {
    200
}
fn default_calib_quantile() -> f64 {
    0.95
}

impl Default for DismSettings {
    fn default() -> Self {
        DismSettings {
            t_s: default_t_s(),
            h: default_h(),
            sigma: default_sigma(),
            delta_hard: None,
            delta_local: None,
            ridge_scale: default_ridge(),
            calib_draws: default_calib_draws(),
            calib_quantile: default_calib_quantile(),
        }
    }
}

impl DismSettings {
    pub fn to_config(&self, seed: u64) -> DismConfig {
        let spec = |o: Option<f64>| o.map_or(ThresholdSpec::Calibrated, ThresholdSpec::Fixed);
        DismConfig {
            t_s: self.t_s,
            h: self.h,
            sigma: self.sigma,
            delta_hard: spec(self.delta_hard),
            delta_local: spec(self.delta_local),
            ridge_scale: self.ridge_scale,
            calib_draws: self.calib_draws,
            calib_quantile: self.calib_quantile,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DctoSettings {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda_w")]
    pub lambda_w: f64,
    #[serde(default = "default_lambda_a")]
    pub lambda_a: f64,
    #[serde(default = "default_lambda_dag")]
    pub lambda_dag: f64,
    #[serde(default = "default_latent")]
    pub latent: usize,
    /// Encoder warm-up window; defaults to lag + 1.
    #[serde(default)]
    pub w_enc: Option<usize>,
}

fn default_rounds() -> usize {
    20
}
fn default_epochs() -> usize {
    5
}
fn default_eta() -> f64 {
    1e-2
}
fn default_lambda_w() -> f64 {
    1e-2
}
fn default_lambda_a() -> f64 {
    1e-2
}
fn default_lambda_dag() -> f64 {
    1.0
}
fn default_latent() -> usize {
    16
}

impl Default for DctoSettings {
    fn default() -> Self {
        DctoSettings {
            rounds: default_rounds(),
            epochs: default_epochs(),
            eta: default_eta(),
            lambda_w: default_lambda_w(),
            lambda_a: default_lambda_a(),
            lambda_dag: default_lambda_dag(),
            latent: default_latent(),
            w_enc: None,
        }
    }
}

impl DctoSettings {
    pub fn to_config(&self, seed: u64) -> DctoConfig {
        DctoConfig {
            rounds: self.rounds,
            epochs: self.epochs,
            eta: self.eta,
            penalties: Penalties {
                lambda_w: self.lambda_w,
                lambda_a: self.lambda_a,
                lambda_dag: self.lambda_dag,
            },
            latent: self.latent,
            w_enc: self.w_enc,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    #[serde(default = "default_shd_threshold")]
    pub shd_threshold: f64,
}

fn default_shd_threshold() -> f64 {
    0.1
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            shd_threshold: default_shd_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub dism: DismSettings,
    #[serde(default)]
    pub dcto: DctoSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.dism.t_s == 0 {
            return Err(Error::config("dism.t_s must be >= 1"));
        }
        if self.dism.h < 2 {
            return Err(Error::config("dism.h must be >= 2"));
        }
        if self.dism.sigma <= 0.0 {
            return Err(Error::config("dism.sigma must be positive"));
        }
        if !(0.0..1.0).contains(&self.dism.calib_quantile) {
            return Err(Error::config("dism.calib_quantile must lie in (0, 1)"));
        }
        if self.dcto.rounds == 0 || self.dcto.epochs == 0 {
            return Err(Error::config("dcto.rounds and dcto.epochs must be >= 1"));
        }
        if self.dcto.eta < 0.0 {
            return Err(Error::config("dcto.eta must be nonnegative"));
        }
        if self.dcto.latent == 0 {
            return Err(Error::config("dcto.latent must be >= 1"));
        }
        if let Some(w) = self.dcto.w_enc {
            if w == 0 || w > self.scenario.steps {
                return Err(Error::config("dcto.w_enc out of range"));
            }
        }
        if self.eval.shd_threshold < 0.0 {
            return Err(Error::config("eval.shd_threshold must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [scenario]
        vars = 4
        steps = 30
        lag = 1
        clients = 2
        samples_per_client = 100
        sparsity = 0.4
        dynamics = "sinusoid"
        seed = 5
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dism.t_s, 1);
        assert_eq!(cfg.dism.h, 32);
        assert_eq!(cfg.dcto.rounds, 20);
        assert_eq!(cfg.dcto.latent, 16);
        assert!(cfg.dism.delta_hard.is_none());
        assert_eq!(cfg.eval.shd_threshold, 0.1);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.scenario.vars, 4);
        assert_eq!(back.dcto.eta, cfg.dcto.eta);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.dcto.eta = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.dism.t_s = 0;
        assert!(cfg.validate().is_err());
    }
}
