//! The optimization loop: warm start, mini-batch updates with Adam and
//! gradient clipping, checkpointing and evaluation.

mod config;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{confusion_matrix, match_clusters_to_classes, Dataset};
use crate::distributions::sample_standard_normal;
use crate::elbo::{loss_batch, CrossEntropyWeights, ElboError, LossOptions, TrainingMode, TvaeModel};
use crate::mixture::{
    gmm_em_fit, gmm_from_labels, materialize_params, GmmOptions, MixtureError, PosteriorStats, SmmRawParams,
};
use crate::network::{encoder_forward, Mlp, NetworkError};
use crate::tensor::{Tensor, TensorError};

pub use config::TrainConfig;
pub use optim::{adam_step, clip_grad_norm, global_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("labels required but the dataset has none")]
    MissingLabels,
    #[error("{classes} classes but only {components} components")]
    LabelMismatch { classes: usize, components: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {term}")]
    NonFinite { epoch: usize, batch: usize, term: String },
    #[error("after step {step}: {detail}")]
    Invariant { step: u64, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Elbo(#[from] ElboError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// Numerical breakdowns, as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Invariant { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NotPositiveDefinite { .. })
                | TrainError::Elbo(ElboError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Elbo(ElboError::Mixture(MixtureError::NonFinite { .. }))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub error_rate: Option<f64>,
    pub mean_nu: f64,
    #[serde(skip)]
    pub wallclock_secs: f64,
}

/// Complete training state, enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub obs_dim: usize,
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub warm_labels: Option<Vec<usize>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<TvaeModel, TrainError> {
        Ok(TvaeModel::from_named(
            &self.params,
            self.config.encoder_config(self.obs_dim),
            self.config.decoder_config(self.obs_dim),
            self.config.sigma_jitter_sq,
        )?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("version").and_then(|v| v.as_u64()) {
            Some(ver) if ver == CHECKPOINT_VERSION as u64 => {}
            Some(ver) => return Err(TrainError::Checkpoint(format!("unsupported version {ver}"))),
            None => return Err(TrainError::Checkpoint("missing version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(v)?;
        ck.config.validate()?;
        ck.model()?;
        Ok(ck)
    }
}

/// Result of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub error_rate: f64,
    /// `confusion[cluster][class]`
    pub confusion: Tensor,
    /// Class assigned to each cluster.
    pub permutation: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Most responsible component per row, from the encoder's posterior.
pub fn predict(model: &TvaeModel, o: &Tensor) -> Result<Vec<usize>, TrainError> {
    let enc = encoder_forward(o, &model.encoder)?;
    let params = materialize_params(&model.mixture)?;
    Ok(PosteriorStats::compute(&enc, &params)?.hard_assignments())
}

/// Error rate of `predictions` against `truth`; with `matched`, clusters are
/// first mapped to classes by optimal assignment.
pub fn score(predictions: &[usize], truth: &[usize], k: usize, matched: bool) -> Result<Evaluation, TrainError> {
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    if classes > k {
        return Err(TrainError::LabelMismatch { classes, components: k });
    }
    let confusion = confusion_matrix(predictions, truth, k);
    let permutation = if matched {
        match_clusters_to_classes(&confusion).permutation
    } else {
        (0..k).collect()
    };
    let wrong = predictions.iter().zip(truth).filter(|(p, t)| permutation[**p] != **t).count();
    Ok(Evaluation {
        error_rate: if truth.is_empty() { 0.0 } else { wrong as f64 / truth.len() as f64 },
        confusion,
        permutation,
        predictions: predictions.to_vec(),
    })
}

pub fn evaluate(model: &TvaeModel, ds: &Dataset, matched: bool) -> Result<Evaluation, TrainError> {
    let truth = ds.labels.as_ref().ok_or(TrainError::MissingLabels)?;
    score(&predict(model, &ds.observations)?, truth, model.components(), matched)
}

/// Stateful trainer over one dataset.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TvaeModel,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub warm_labels: Option<Vec<usize>>,
    labeled_rows: Option<Vec<usize>>,
}

impl Trainer {
    /// Initializes networks, then the latent mixture from the encoder means:
    /// per-class moments when the run starts supervised, otherwise GMM-EM.
    pub fn new(ds: &Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if ds.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let supervised_start = config.mode.is_supervised_at(0);
        if config.mode != TrainingMode::Unsupervised && ds.labels.is_none() {
            return Err(TrainError::MissingLabels);
        }
        if let Some(classes) = ds.labels.as_ref().map(|_| ds.num_classes()) {
            if supervised_start && classes > config.components {
                return Err(TrainError::LabelMismatch { classes, components: config.components });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = ds.dim();
        let mut encoder = Mlp::init(config.encoder_config(l), &mut rng)?;
        encoder.calibrate_heads(&ds.observations, true, &vec![config.init_log_std; config.latent_dim])?;
        let mut decoder = Mlp::init(config.decoder_config(l), &mut rng)?;
        let means = encoder_forward(&ds.observations, &encoder)?.mu_x;
        let scales: Vec<f64> = column_log_std(&ds.observations)
            .into_iter()
            .map(|s| s + config.init_decoder_log_std)
            .collect();
        decoder.calibrate_heads(&means, false, &scales)?;

        let (fit, warm_labels) = if supervised_start {
            let labels = ds.labels.as_ref().expect("checked above");
            (gmm_from_labels(&means, labels, config.components)?, Some(labels.clone()))
        } else {
            let opts = GmmOptions {
                max_iters: config.gmm_max_iters,
                ..Default::default()
            };
            let fit = gmm_em_fit(&means, config.components, &mut rng, &opts)?;
            let labels = fit.hard_assignments();
            (fit, Some(labels))
        };
        let mixture: SmmRawParams = fit.to_raw_params(config.sigma_jitter_sq, config.nu_init, config.eig_floor)?;
        let model = TvaeModel {
            encoder,
            decoder,
            mixture,
        };
        Ok(Self {
            config,
            model,
            adam: AdamState::default(),
            rng,
            epoch: 0,
            step: 0,
            warm_labels,
            labeled_rows: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        Ok(Self {
            model: ck.model()?,
            config: ck.config,
            adam: ck.adam,
            rng: ck.rng,
            epoch: ck.epoch,
            step: ck.step,
            warm_labels: ck.warm_labels,
            labeled_rows: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            obs_dim: self.model.encoder.config.input_dim(),
            params: self.model.named(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            warm_labels: self.warm_labels.clone(),
        }
    }

    /// Restricts supervised epochs to the given rows; by default every row is labeled.
    pub fn set_labeled_rows(&mut self, mut rows: Vec<usize>) {
        rows.sort_unstable();
        self.labeled_rows = Some(rows);
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            l1_coeff: self.config.l1_coeff,
            detach_gamma: self.config.detach_gamma,
            train_dof: self.config.train_dof,
            label_reading: self.config.label_reading,
            q_uz_entropy: self.config.q_uz_entropy,
        }
    }

    /// One update on the rows `batch`. Returns the loss before the update.
    pub fn step_on(&mut self, ds: &Dataset, batch: &[usize], supervised: bool, batch_no: usize) -> Result<f64, TrainError> {
        let o = ds.observations.select_rows(batch);
        let eps = sample_standard_normal(&mut self.rng, &[self.config.samples * batch.len(), self.config.latent_dim]);
        let fixed: Option<Vec<usize>> = if supervised {
            let labels = ds.labels.as_ref().ok_or(TrainError::MissingLabels)?;
            Some(batch.iter().map(|&i| labels[i]).collect())
        } else if self.step < self.config.warm_start_iters as u64 {
            self.warm_labels.as_ref().map(|w| batch.iter().map(|&i| w[i]).collect())
        } else {
            None
        };
        let weights = match &fixed {
            Some(l) => CrossEntropyWeights::Fixed(l),
            None => CrossEntropyWeights::Responsibilities,
        };
        let diag = |term: String| TrainError::NonFinite {
            epoch: self.epoch + 1,
            batch: batch_no,
            term,
        };
        let graph = match loss_batch(&self.model, &o, &eps, weights, &self.loss_options()) {
            Ok(g) => g,
            Err(ElboError::Tensor(TensorError::NonFinite { op })) => return Err(diag(op.to_string())),
            Err(ElboError::Mixture(MixtureError::NonFinite { term, n, k })) => {
                return Err(diag(format!("{term} (row {n}, component {k})")))
            }
            Err(e) => return Err(e.into()),
        };
        let (loss, grads) = graph.gradients()?;
        if !loss.is_finite() {
            return Err(diag("loss".into()));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(diag(format!("gradient of {name}")));
        }
        let (grads, _) = clip_grad_norm(grads, self.config.max_grad_norm);
        let mut params = self.model.named();
        adam_step(&mut params, &grads, &mut self.adam, self.config.stepsize);
        self.step += 1;
        let next = TvaeModel::from_named(
            &params,
            self.model.encoder.config.clone(),
            self.model.decoder.config.clone(),
            self.config.sigma_jitter_sq,
        )?;
        let invariant = |e: &dyn std::fmt::Display| TrainError::Invariant {
            step: self.step,
            detail: e.to_string(),
        };
        materialize_params(&next.mixture)
            .and_then(|p| p.check_invariants())
            .map_err(|e| invariant(&e))?;
        self.model = next;
        Ok(loss)
    }

    /// One pass over the data in a fresh random order.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochMetrics, TrainError> {
        let started = Instant::now();
        let supervised = self.config.mode.is_supervised_at(self.epoch);
        let mut rows: Vec<usize> = match (&self.labeled_rows, supervised) {
            (Some(r), true) => r.clone(),
            _ => (0..ds.len()).collect(),
        };
        rows.shuffle(&mut self.rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in rows.chunks(self.config.batch_size).enumerate() {
            let loss = self.step_on(ds, batch, supervised, b)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        self.epoch += 1;
        let error_rate = match &ds.labels {
            Some(_) if ds.num_classes() <= self.model.components() => {
                Some(evaluate(&self.model, ds, !supervised)?.error_rate)
            }
            _ => None,
        };
        let nu = materialize_params(&self.model.mixture)?.nu;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            loss: total / count.max(1) as f64,
            error_rate,
            mean_nu: nu.iter().sum::<f64>() / nu.len() as f64,
            wallclock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.6} error {:?} mean nu {:.3}",
            metrics.epoch,
            metrics.loss,
            metrics.error_rate,
            metrics.mean_nu
        );
        Ok(metrics)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Full run: initialization, warm start, then `cfg.epochs` epochs.
pub fn train(ds: &Dataset, cfg: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(ds, cfg)?;
    let mut metrics = Vec::with_capacity(t.config.epochs);
    while t.epoch < t.config.epochs {
        metrics.push(t.run_epoch(ds)?);
    }
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics,
    })
}

/// `epoch,loss,error_rate,mean_nu` rows; floats with 17 significant digits.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,error_rate,mean_nu\n");
    for m in metrics {
        let err = m.error_rate.map(|e| format!("{e:.16e}")).unwrap_or_default();
        s.push_str(&format!("{},{:.16e},{},{:.16e}\n", m.epoch, m.loss, err, m.mean_nu));
    }
    s
}

pub fn timings_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,wallclock_secs\n");
    for m in metrics {
        s.push_str(&format!("{},{:.6}\n", m.epoch, m.wallclock_secs));
    }
    s
}

/// Log of each column's standard deviation, floored for constant columns.
fn column_log_std(x: &Tensor) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
            let var = (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            0.5 * var.max(1e-12).ln()
        })
        .collect()
}

/// Fresh stream derived from a parent seed, for independent runs.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(parent);
    r.set_stream(index.wrapping_add(1));
    r.gen()
}
