//! Per-observation lower bound and the batch loss `J`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::LN_2PI;
use crate::mixture::{self, MixtureError, PosteriorVars, SmmRawParams};
use crate::network::{Mlp, MlpConfig, NetworkError};
use crate::tensor::{GradientMap, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElboError {
    #[error("supervised loss needs a label for every row")]
    MissingLabels,
    #[error("label {label} out of range for {k} components")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Unsupervised,
    Supervised,
    /// Supervised for the first `supervised_epochs` epochs, unsupervised after.
    SemiSupervised { supervised_epochs: usize },
}

impl TrainingMode {
    pub fn is_supervised_at(&self, epoch: usize) -> bool {
        match self {
            TrainingMode::Unsupervised => false,
            TrainingMode::Supervised => true,
            TrainingMode::SemiSupervised { supervised_epochs } => epoch < *supervised_epochs,
        }
    }
}

/// How labels enter the cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelReading {
    /// One-hot labels replace the weights `γ_nk` in `Σ_k γ_nk ln ρ_nk`.
    #[default]
    Weights,
    /// Smoothed one-hot labels replace `ρ_nk`: `Σ_k γ_nk ln y_nk`.
    Scores,
}

/// Smoothing mass used by [`LabelReading::Scores`].
pub const LABEL_SMOOTHING: f64 = 1e-3;

/// Components of the lower bound for one observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub enc_entropy: f64,
    pub cross_entropy: f64,
    pub total: f64,
    /// Entropy of `q(u, z)`, which the objective leaves out; reported only.
    pub q_uz_entropy: f64,
}

/// Weights in the cross-entropy term.
#[derive(Debug, Clone, Copy)]
pub enum CrossEntropyWeights<'a> {
    /// Responsibilities `γ` from the current posterior.
    Responsibilities,
    /// Externally fixed class assignments, one per row.
    Fixed(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub l1_coeff: f64,
    pub detach_gamma: bool,
    pub train_dof: bool,
    pub label_reading: LabelReading,
    /// Adds the entropy of `q(u, z)` that the objective otherwise leaves out.
    pub q_uz_entropy: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            l1_coeff: 0.0,
            detach_gamma: false,
            train_dof: true,
            label_reading: LabelReading::Weights,
            q_uz_entropy: false,
        }
    }
}

/// Encoder, decoder and latent mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct TvaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub mixture: SmmRawParams,
}

impl TvaeModel {
    pub fn latent_dim(&self) -> usize {
        self.encoder.config.output_dim()
    }

    pub fn components(&self) -> usize {
        self.mixture.components()
    }

    /// Freshly initialized networks around the given mixture.
    pub fn init<R: Rng + ?Sized>(
        encoder: MlpConfig,
        decoder: MlpConfig,
        mixture: SmmRawParams,
        rng: &mut R,
    ) -> Result<Self, ElboError> {
        if encoder.output_dim() != mixture.latent_dim()
            || decoder.input_dim() != mixture.latent_dim()
            || decoder.output_dim() != encoder.input_dim()
        {
            return Err(ElboError::Shape(format!(
                "encoder {:?}, decoder {:?} and latent dimension {} do not chain",
                encoder.layer_dims,
                decoder.layer_dims,
                mixture.latent_dim()
            )));
        }
        Ok(Self {
            encoder: Mlp::init(encoder, rng)?,
            decoder: Mlp::init(decoder, rng)?,
            mixture,
        })
    }

    /// Every parameter by name (`encoder.*`, `decoder.*`, `mixture.*`).
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self.encoder.named("encoder").into_iter().collect();
        out.extend(self.decoder.named("decoder"));
        out.extend(self.mixture.named());
        out
    }

    pub fn from_named(
        named: &BTreeMap<String, Tensor>,
        encoder: MlpConfig,
        decoder: MlpConfig,
        sigma_jitter_sq: f64,
    ) -> Result<Self, ElboError> {
        Ok(Self {
            encoder: Mlp::from_named(encoder, "encoder", named)?,
            decoder: Mlp::from_named(decoder, "decoder", named)?,
            mixture: SmmRawParams::from_named(named, sigma_jitter_sq)?,
        })
    }
}

/// Per-observation bound terms on the graph, each `N×1`.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub recon: Var,
    pub enc_entropy: Var,
    pub cross_entropy: Var,
    pub total: Var,
}

/// A recorded loss together with the intermediate handles.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub elbo: ElboVars,
    pub posterior: PosteriorVars,
    pub enc_mu: Var,
    pub enc_log_std: Var,
    pub penalty: Option<Var>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }

    pub fn gradients(&self) -> Result<(f64, GradientMap), ElboError> {
        Ok(self.graph.evaluate_and_grad(self.loss)?)
    }

    pub fn penalty_value(&self) -> f64 {
        self.penalty.map_or(0.0, |p| self.graph.value(p).item())
    }

    pub fn breakdown(&self) -> Vec<ElboBreakdown> {
        let g = &self.graph;
        let (recon, ent, ce, tot) = (
            g.value(self.elbo.recon),
            g.value(self.elbo.enc_entropy),
            g.value(self.elbo.cross_entropy),
            g.value(self.elbo.total),
        );
        let q = q_uz_entropy(
            g.value(self.posterior.gamma),
            g.value(self.posterior.alpha),
            g.value(self.posterior.beta),
        );
        (0..recon.len())
            .map(|n| ElboBreakdown {
                recon: recon.data()[n],
                enc_entropy: ent.data()[n],
                cross_entropy: ce.data()[n],
                total: tot.data()[n],
                q_uz_entropy: q[n],
            })
            .collect()
    }
}

/// `Σ_k γ_nk H(Gamma(α_k, β_nk)) − Σ_k γ_nk ln γ_nk`.
fn q_uz_entropy(gamma: &Tensor, alpha: &Tensor, beta: &Tensor) -> Vec<f64> {
    use crate::distributions::{gamma_entropy, GammaDist};
    (0..gamma.rows())
        .map(|n| {
            (0..gamma.cols())
                .map(|k| {
                    let w = gamma.get(n, k);
                    if w == 0.0 {
                        return 0.0;
                    }
                    let h = gamma_entropy(&GammaDist {
                        shape_alpha: alpha.data()[k],
                        rate_beta: beta.get(n, k).max(mixture::BETA_FLOOR),
                    })
                    .unwrap_or(f64::NAN);
                    w * (h - w.ln())
                })
                .sum()
        })
        .collect()
}

/// `(1/T) Σ_t ln N(o_n | μ_{n,t}, diag σ²_{n,t})` as an `N×1` column.
pub fn reconstruction_vars(g: &mut Graph, o: Var, dec_mu: Var, dec_log_std: Var) -> Result<Var, ElboError> {
    let (n, l) = g.shape(o);
    let (rows, cols) = g.shape(dec_mu);
    if cols != l || n == 0 || rows % n != 0 {
        return Err(ElboError::Shape(format!(
            "decoder output {rows}x{cols} does not tile observations {n}x{l}"
        )));
    }
    let t = rows / n;
    let o_t = if t == 1 { o } else { g.concat_rows(&vec![o; t])? };
    let diff = g.sub(o_t, dec_mu)?;
    let neg_ls = g.neg(dec_log_std)?;
    let inv_std = g.exp(neg_ls)?;
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z)?;
    let half_z2 = g.scale(z2, 0.5)?;
    let per = g.add(half_z2, dec_log_std)?;
    let per = g.sum_cols(per)?;
    let per = g.neg(per)?;
    let per = g.add_scalar(per, -0.5 * l as f64 * LN_2PI)?;
    let grid = g.reshape(per, t, n)?;
    let summed = g.sum_rows(grid)?;
    let avg = g.scale(summed, 1.0 / t as f64)?;
    Ok(g.transpose(avg)?)
}

/// Value-level reconstruction term; decoder rows are ordered `t·N + n`.
pub fn reconstruction_term(o: &Tensor, dec: &crate::network::DecoderStats) -> Result<Vec<f64>, ElboError> {
    let mut g = Graph::new();
    let ov = g.constant(o.clone());
    let mu = g.constant(dec.mu_o.clone());
    let ls = g.constant(dec.log_std_o.clone());
    let r = reconstruction_vars(&mut g, ov, mu, ls)?;
    Ok(g.value(r).data().to_vec())
}

fn one_hot(labels: &[usize], k: usize, on: f64, off: f64) -> Result<Tensor, ElboError> {
    let mut t = Tensor::filled(&[labels.len(), k], off);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(ElboError::LabelOutOfRange { label: l, k });
        }
        t.set(i, l, on);
    }
    Ok(t)
}

/// Bound terms from encoder outputs, decoder outputs and posterior handles.
#[allow(clippy::too_many_arguments)]
pub fn elbo_vars(
    g: &mut Graph,
    o: Var,
    enc_log_std: Var,
    dec_mu: Var,
    dec_log_std: Var,
    post: &PosteriorVars,
    weights: CrossEntropyWeights<'_>,
    opts: &LossOptions,
) -> Result<ElboVars, ElboError> {
    let recon = reconstruction_vars(g, o, dec_mu, dec_log_std)?;
    let d = g.shape(enc_log_std).1;
    let ls_sum = g.sum_cols(enc_log_std)?;
    let enc_entropy = g.add_scalar(ls_sum, 0.5 * d as f64 * (LN_2PI + 1.0))?;

    let (n, k) = g.shape(post.log_rho);
    let gamma = if opts.detach_gamma { g.detach(post.gamma) } else { post.gamma };
    let weighted = match (weights, opts.label_reading) {
        (CrossEntropyWeights::Responsibilities, _) => g.mul(gamma, post.log_rho)?,
        (CrossEntropyWeights::Fixed(labels), LabelReading::Weights) => {
            if labels.len() != n {
                return Err(ElboError::MissingLabels);
            }
            let w = g.constant(one_hot(labels, k, 1.0, 0.0)?);
            g.mul(w, post.log_rho)?
        }
        (CrossEntropyWeights::Fixed(labels), LabelReading::Scores) => {
            if labels.len() != n {
                return Err(ElboError::MissingLabels);
            }
            let off = LABEL_SMOOTHING / k as f64;
            let y = one_hot(labels, k, 1.0 - LABEL_SMOOTHING + off, off)?.map(f64::ln);
            let y = g.constant(y);
            g.mul(gamma, y)?
        }
    };
    let mut cross_entropy = g.sum_cols(weighted)?;
    if opts.q_uz_entropy {
        let h_gamma = mixture::gamma_entropy_var(g, post.alpha, post.beta)?;
        let log_gamma = g.log_softmax_rows(post.log_qz)?;
        let w = match weights {
            CrossEntropyWeights::Responsibilities => gamma,
            CrossEntropyWeights::Fixed(_) => post.gamma,
        };
        let inner = g.sub(h_gamma, log_gamma)?;
        let wh = g.mul(w, inner)?;
        let extra = g.sum_cols(wh)?;
        cross_entropy = g.add(cross_entropy, extra)?;
    }
    let total = g.add(recon, enc_entropy)?;
    let total = g.add(total, cross_entropy)?;
    Ok(ElboVars {
        recon,
        enc_entropy,
        cross_entropy,
        total,
    })
}

/// Records `J = −mean(ELBO) + λ Σ(|W| + |b|)` for a batch `o` (`N×L`) with
/// frozen reparameterization noise `eps` (`(T·N)×D`). The penalty covers
/// encoder and decoder weights only.
pub fn loss_batch(
    model: &TvaeModel,
    o: &Tensor,
    eps: &Tensor,
    weights: CrossEntropyWeights<'_>,
    opts: &LossOptions,
) -> Result<LossGraph, ElboError> {
    let n = o.rows();
    if n == 0 {
        return Err(ElboError::Shape("empty batch".into()));
    }
    let mut g = Graph::new();
    let enc_vars = model.encoder.register(&mut g, "encoder");
    let dec_vars = model.decoder.register(&mut g, "decoder");
    let raw = model.mixture.register(&mut g, opts.train_dof);
    let smm = mixture::materialize_vars(&mut g, &raw, model.mixture.sigma_jitter_sq)?;

    let ov = g.constant(o.clone());
    let (enc_mu, enc_log_std) = model.encoder.forward_vars(&mut g, &enc_vars, ov)?;
    let ev = g.constant(eps.clone());
    let x = crate::network::reparameterize_vars(&mut g, enc_mu, enc_log_std, ev)?;
    let (dec_mu, dec_log_std) = model.decoder.forward_vars(&mut g, &dec_vars, x)?;
    let posterior = mixture::posterior_vars(&mut g, enc_mu, enc_log_std, &smm)?;
    let elbo = elbo_vars(&mut g, ov, enc_log_std, dec_mu, dec_log_std, &posterior, weights, opts)?;

    let total = g.sum(elbo.total);
    let mut loss = g.scale(total, -1.0 / n as f64)?;
    let mut penalty = None;
    if opts.l1_coeff != 0.0 {
        let mut terms = Vec::new();
        for v in enc_vars.all().into_iter().chain(dec_vars.all()) {
            let a = g.abs(v)?;
            terms.push(g.sum(a));
        }
        let stacked = g.concat_cols(&terms)?;
        let s = g.sum(stacked);
        let p = g.scale(s, opts.l1_coeff)?;
        loss = g.add(loss, p)?;
        penalty = Some(p);
    }
    Ok(LossGraph {
        graph: g,
        loss,
        elbo,
        posterior,
        enc_mu,
        enc_log_std,
        penalty,
    })
}

/// Bound terms per observation for fixed noise; no penalty.
pub fn elbo_per_observation(
    model: &TvaeModel,
    o: &Tensor,
    eps: &Tensor,
    weights: CrossEntropyWeights<'_>,
    opts: &LossOptions,
) -> Result<Vec<ElboBreakdown>, ElboError> {
    let opts = LossOptions { l1_coeff: 0.0, ..*opts };
    Ok(loss_batch(model, o, eps, weights, &opts)?.breakdown())
}

/// Parameter groups reported by [`gradient_check`].
pub const PARAM_GROUPS: [&str; 6] = ["encoder", "decoder", "m", "n", "mu", "C"];

pub fn param_group(name: &str) -> &'static str {
    match name {
        _ if name.starts_with("encoder.") => "encoder",
        _ if name.starts_with("decoder.") => "decoder",
        "mixture.m" => "m",
        "mixture.n" => "n",
        "mixture.mu" => "mu",
        _ => "C",
    }
}

/// Worst finite-difference disagreement within one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: &'static str,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Denominator floor of the relative error `|a − f| / max(|a|, |f|, floor)`.
pub const GRADCHECK_REL_FLOOR: f64 = 1e-6;

/// Central differences of `loss_batch` against the recorded gradients, for
/// every trainable entry. `corrupt` perturbs one analytic entry, so callers
/// can confirm the check catches it.
pub fn gradient_check(
    model: &TvaeModel,
    o: &Tensor,
    eps: &Tensor,
    weights: CrossEntropyWeights<'_>,
    opts: &LossOptions,
    h: f64,
    corrupt: bool,
) -> Result<Vec<GroupCheck>, ElboError> {
    let (_, mut grads) = loss_batch(model, o, eps, weights, opts)?.gradients()?;
    if corrupt {
        if let Some(t) = grads.get_mut("encoder.layer0.w") {
            t.data_mut()[0] += 1.0;
        }
    }
    let base = model.named();
    let (enc, dec, sigma) = (model.encoder.config.clone(), model.decoder.config.clone(), model.mixture.sigma_jitter_sq);
    let eval = |named: &BTreeMap<String, Tensor>| -> Result<f64, ElboError> {
        let m = TvaeModel::from_named(named, enc.clone(), dec.clone(), sigma)?;
        Ok(loss_batch(&m, o, eps, weights, opts)?.value())
    };
    let mut out: Vec<GroupCheck> = PARAM_GROUPS
        .iter()
        .map(|g| GroupCheck { group: g, entries: 0, max_rel_err: 0.0, max_abs_err: 0.0 })
        .collect();
    for (name, analytic) in &grads {
        let slot = out.iter_mut().find(|c| c.group == param_group(name)).expect("known group");
        for i in 0..analytic.len() {
            let mut named = base.clone();
            let x = named[name].data()[i];
            named.get_mut(name).unwrap().data_mut()[i] = x + h;
            let plus = eval(&named)?;
            named.get_mut(name).unwrap().data_mut()[i] = x - h;
            let minus = eval(&named)?;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - fd).abs();
            let rel = abs / a.abs().max(fd.abs()).max(GRADCHECK_REL_FLOOR);
            slot.entries += 1;
            slot.max_abs_err = slot.max_abs_err.max(abs);
            slot.max_rel_err = slot.max_rel_err.max(rel);
        }
    }
    Ok(out)
}
