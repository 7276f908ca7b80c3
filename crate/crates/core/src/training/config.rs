use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::elbo::{LabelReading, TrainingMode};
use crate::mixture::GAUSSIAN_LIMIT_NU;
use crate::network::{Activation, MlpConfig};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stepsize: f64,
    pub sigma_jitter_sq: f64,
    pub latent_dim: usize,
    pub components: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub log_std_bound: f64,
    /// Average encoder log-std right after initialization.
    pub init_log_std: f64,
    /// Average decoder log-std right after initialization, relative to the
    /// log standard deviation of each observed dimension.
    pub init_decoder_log_std: f64,
    pub l1_coeff: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Reparameterization samples per observation.
    pub samples: usize,
    /// Update steps that use fixed warm-start assignments.
    pub warm_start_iters: usize,
    pub seed: u64,
    pub mode: TrainingMode,
    pub label_reading: LabelReading,
    pub nu_init: f64,
    pub train_dof: bool,
    pub detach_gamma: bool,
    pub q_uz_entropy: bool,
    pub max_grad_norm: f64,
    pub gmm_max_iters: usize,
    pub eig_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stepsize: 1e-3,
            sigma_jitter_sq: 0.01,
            latent_dim: 2,
            components: 5,
            hidden_layers: vec![512, 512],
            activation: Activation::Relu,
            log_std_bound: 7.0,
            init_log_std: -2.0,
            init_decoder_log_std: 0.0,
            l1_coeff: 0.0,
            epochs: 100,
            batch_size: 128,
            samples: 1,
            warm_start_iters: 15,
            seed: 0,
            mode: TrainingMode::Unsupervised,
            label_reading: LabelReading::Weights,
            nu_init: 5.0,
            train_dof: true,
            detach_gamma: false,
            q_uz_entropy: false,
            max_grad_norm: 1.0,
            gmm_max_iters: 50,
            eig_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    /// Parses a TOML document; every unrecognized key is reported.
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let table: toml::Table = s.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        let known = toml::Table::try_from(TrainConfig::default()).expect("config serializes");
        let unknown: Vec<String> = table.keys().filter(|k| !known.contains_key(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(TrainError::UnknownKeys(unknown));
        }
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The Gaussian-mixture baseline: degrees of freedom frozen at the Gaussian limit.
    pub fn gaussian_baseline(mut self) -> Self {
        self.train_dof = false;
        self.nu_init = GAUSSIAN_LIMIT_NU;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return bad("stepsize must be positive");
        }
        if !(self.sigma_jitter_sq > 0.0 && self.sigma_jitter_sq.is_finite()) {
            return bad("sigma_jitter_sq must be positive");
        }
        if self.latent_dim == 0 || self.components == 0 || self.batch_size == 0 || self.samples == 0 {
            return bad("latent_dim, components, batch_size and samples must be at least 1");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(self.l1_coeff >= 0.0 && self.l1_coeff.is_finite()) {
            return bad("l1_coeff must be nonnegative");
        }
        if !(self.nu_init > 2.0 && self.nu_init.is_finite()) {
            return bad("nu_init must exceed 2");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if !(self.log_std_bound > 0.0) {
            return bad("log_std_bound must be positive");
        }
        if !(self.init_log_std.abs() < self.log_std_bound && self.init_decoder_log_std.abs() < self.log_std_bound) {
            return bad("init_log_std must lie inside the log-std bound");
        }
        if !(self.eig_floor > 0.0) {
            return bad("eig_floor must be positive");
        }
        Ok(())
    }

    pub fn encoder_config(&self, obs_dim: usize) -> MlpConfig {
        let mut dims = vec![obs_dim];
        dims.extend(&self.hidden_layers);
        dims.push(self.latent_dim);
        MlpConfig {
            layer_dims: dims,
            activation: self.activation,
            log_std_bound: self.log_std_bound,
        }
    }

    pub fn decoder_config(&self, obs_dim: usize) -> MlpConfig {
        self.encoder_config(obs_dim).reversed()
    }
}
