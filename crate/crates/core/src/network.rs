//! Encoder and decoder networks: a fully connected trunk followed by two
//! parallel affine heads for the Gaussian mean and log standard deviation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("{0}")]
    Config(String),
    #[error("missing or misshapen parameter {0}")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

fn default_log_std_bound() -> f64 {
    7.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input, hidden..., output widths.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Symmetric clamp applied to the log-std head.
    #[serde(default = "default_log_std_bound")]
    pub log_std_bound: f64,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Self {
        Self {
            layer_dims,
            activation,
            log_std_bound: default_log_std_bound(),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.layer_dims.len() < 2 {
            return Err(NetworkError::Config("an MLP needs at least input and output widths".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(NetworkError::Config(format!("layer widths must be positive: {:?}", self.layer_dims)));
        }
        if !(self.log_std_bound > 0.0) {
            return Err(NetworkError::Config("log_std_bound must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    /// The mirrored configuration, e.g. `L-H-D` → `D-H-L`.
    pub fn reversed(&self) -> Self {
        let mut dims = self.layer_dims.clone();
        dims.reverse();
        Self { layer_dims: dims, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `in × out`
    pub w: Tensor,
    /// `1 × out`
    pub b: Tensor,
}

impl Affine {
    fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Trunk plus two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub trunk: Vec<Affine>,
    pub head_mu: Affine,
    pub head_log_std: Affine,
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    trunk: Vec<(Var, Var)>,
    head_mu: (Var, Var),
    head_log_std: (Var, Var),
}

impl MlpVars {
    /// Every weight and bias handle.
    pub fn all(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain([&self.head_mu, &self.head_log_std])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Per-observation parameters of `q(x|o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStats {
    /// `N×D`
    pub mu_x: Tensor,
    /// `N×D`
    pub log_std_x: Tensor,
}

/// Per-sample parameters of `p(o|x)`; row `t·N + n` holds sample `t` of observation `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStats {
    /// `(T·N)×L`
    pub mu_o: Tensor,
    /// `(T·N)×L`
    pub log_std_o: Tensor,
}

impl Mlp {
    fn build(config: MlpConfig, mut make: impl FnMut(usize, usize) -> Affine) -> Result<Self, NetworkError> {
        config.validate()?;
        let dims = &config.layer_dims;
        let trunk = dims.windows(2).take(dims.len() - 2).map(|w| make(w[0], w[1])).collect();
        let last_in = dims[dims.len() - 2];
        let out = config.output_dim();
        let head_mu = make(last_in, out);
        let head_log_std = make(last_in, out);
        Ok(Self { config, trunk, head_mu, head_log_std })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self, NetworkError> {
        Self::build(config, |i, o| Affine::glorot(rng, i, o))
    }

    pub fn zeros(config: MlpConfig) -> Result<Self, NetworkError> {
        Self::build(config, Affine::zeros)
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Affine)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, a)| (format!("layer{i}"), a))
            .chain([("mu".to_string(), &self.head_mu), ("log_std".to_string(), &self.head_log_std)])
    }

    /// Data-dependent head initialization: optionally rescales the mean head
    /// so the outputs on `x` have zero mean and unit variance per dimension,
    /// and shifts the log-std biases so the average log-std of output `j`
    /// equals `log_std[j]`.
    pub fn calibrate_heads(&mut self, x: &Tensor, standardize: bool, log_std: &[f64]) -> Result<(), NetworkError> {
        let (mu, ls) = self.forward_values(x)?;
        let (n, d) = (mu.rows() as f64, mu.cols());
        if log_std.len() != d {
            return Err(NetworkError::Config(format!("{} log-std targets for {d} outputs", log_std.len())));
        }
        for j in 0..d {
            let col: Vec<f64> = (0..mu.rows()).map(|i| mu.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let (mean, s) = match standardize {
                true if var > 1e-24 => (mean, var.sqrt()),
                true => (mean, 1.0),
                false => (0.0, 1.0),
            };
            for i in 0..self.head_mu.w.rows() {
                let w = self.head_mu.w.get(i, j);
                self.head_mu.w.set(i, j, w / s);
            }
            let b = self.head_mu.b.get(0, j);
            self.head_mu.b.set(0, j, (b - mean) / s);
            let shift = log_std[j] - (0..ls.rows()).map(|i| ls.get(i, j)).sum::<f64>() / n;
            let b = self.head_log_std.b.get(0, j);
            self.head_log_std.b.set(0, j, b + shift);
        }
        Ok(())
    }

    /// `(name, tensor)` for every weight and bias under `prefix`.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, a) in self.layers() {
            out.push((format!("{prefix}.{name}.w"), a.w.clone()));
            out.push((format!("{prefix}.{name}.b"), a.b.clone()));
        }
        out
    }

    /// Rebuilds from a name → tensor map produced by [`Mlp::named`].
    pub fn from_named(config: MlpConfig, prefix: &str, named: &BTreeMap<String, Tensor>) -> Result<Self, NetworkError> {
        let template = Self::zeros(config)?;
        let mut out = template.clone();
        let mut slots: Vec<&mut Affine> = out.trunk.iter_mut().collect();
        slots.push(&mut out.head_mu);
        slots.push(&mut out.head_log_std);
        for ((name, tpl), slot) in template.layers().zip(slots) {
            for (suffix, target, shape) in [("w", &mut slot.w, tpl.w.shape()), ("b", &mut slot.b, tpl.b.shape())] {
                let key = format!("{prefix}.{name}.{suffix}");
                match named.get(&key) {
                    Some(t) if t.shape() == shape => *target = t.clone(),
                    _ => return Err(NetworkError::Parameter(key)),
                }
            }
        }
        Ok(out)
    }

    fn place(&self, g: &mut Graph, prefix: Option<&str>) -> MlpVars {
        let mut put = |name: String, t: &Tensor| match prefix {
            Some(p) => g.param(format!("{p}.{name}"), t.clone()),
            None => g.constant(t.clone()),
        };
        let mut pair = |name: &str, a: &Affine| (put(format!("{name}.w"), &a.w), put(format!("{name}.b"), &a.b));
        let trunk = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, a)| pair(&format!("layer{i}"), a))
            .collect();
        let head_mu = pair("mu", &self.head_mu);
        let head_log_std = pair("log_std", &self.head_log_std);
        MlpVars { trunk, head_mu, head_log_std }
    }

    /// Registers all weights as trainable parameters named `prefix.*`.
    pub fn register(&self, g: &mut Graph, prefix: &str) -> MlpVars {
        self.place(g, Some(prefix))
    }

    pub fn constants(&self, g: &mut Graph) -> MlpVars {
        self.place(g, None)
    }

    /// Returns `(mean, clamped log-std)` for the rows of `x`.
    pub fn forward_vars(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<(Var, Var), NetworkError> {
        let (_, cols) = g.shape(x);
        if cols != self.config.input_dim() {
            return Err(NetworkError::Config(format!(
                "input has {cols} columns, network expects {}",
                self.config.input_dim()
            )));
        }
        let mut h = x;
        for (w, b) in &vars.trunk {
            let z = g.matmul(h, *w)?;
            let z = g.add(z, *b)?;
            h = match self.config.activation {
                Activation::Relu => g.relu(z)?,
                Activation::Tanh => g.tanh(z)?,
            };
        }
        let mu = g.matmul(h, vars.head_mu.0)?;
        let mu = g.add(mu, vars.head_mu.1)?;
        let ls = g.matmul(h, vars.head_log_std.0)?;
        let ls = g.add(ls, vars.head_log_std.1)?;
        let bound = self.config.log_std_bound;
        let ls = g.clamp(ls, -bound, bound)?;
        Ok((mu, ls))
    }

    fn forward_values(&self, x: &Tensor) -> Result<(Tensor, Tensor), NetworkError> {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let xv = g.constant(x.clone());
        let (mu, ls) = self.forward_vars(&mut g, &vars, xv)?;
        Ok((g.value(mu).clone(), g.value(ls).clone()))
    }
}

/// Encoder pass on observations `o` (`N×L`).
pub fn encoder_forward(o: &Tensor, encoder: &Mlp) -> Result<EncoderStats, NetworkError> {
    let (mu_x, log_std_x) = encoder.forward_values(o)?;
    Ok(EncoderStats { mu_x, log_std_x })
}

/// Decoder pass on stacked latent samples `x` (`(T·N)×D`).
pub fn decoder_forward(x: &Tensor, decoder: &Mlp) -> Result<DecoderStats, NetworkError> {
    let (mu_o, log_std_o) = decoder.forward_values(x)?;
    Ok(DecoderStats { mu_o, log_std_o })
}

/// `x_{n,t} = μ_n + exp(log σ_n) ⊙ ε_{n,t}` on the graph, with `eps` of shape
/// `(T·N)×D` in sample-major order.
pub fn reparameterize_vars(g: &mut Graph, mu: Var, log_std: Var, eps: Var) -> Result<Var, NetworkError> {
    let (n, d) = g.shape(mu);
    let (rows, cols) = g.shape(eps);
    if cols != d || n == 0 || rows % n != 0 {
        return Err(NetworkError::Config(format!(
            "noise of shape {rows}x{cols} does not tile {n}x{d} encoder outputs"
        )));
    }
    let t = rows / n;
    let std = g.exp(log_std)?;
    let (mu_t, std_t) = if t == 1 {
        (mu, std)
    } else {
        (g.concat_rows(&vec![mu; t])?, g.concat_rows(&vec![std; t])?)
    };
    let scaled = g.mul(std_t, eps)?;
    Ok(g.add(mu_t, scaled)?)
}

/// Value-level reparameterization.
pub fn reparameterize(enc: &EncoderStats, eps: &Tensor) -> Result<Tensor, NetworkError> {
    let mut g = Graph::new();
    let mu = g.constant(enc.mu_x.clone());
    let ls = g.constant(enc.log_std_x.clone());
    let e = g.constant(eps.clone());
    let x = reparameterize_vars(&mut g, mu, ls, e)?;
    Ok(g.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::sample_standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_max_rel_err(mlp: &Mlp, x: &Tensor) -> f64 {
        // loss = Σ (mu² + sin-free weighting of log_std)
        let weight = Tensor::matrix(
            x.rows(),
            mlp.config.output_dim(),
            (0..x.rows() * mlp.config.output_dim()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect(),
        );
        let loss_of = |m: &Mlp| -> (f64, crate::tensor::GradientMap) {
            let mut g = Graph::new();
            let vars = m.register(&mut g, "net");
            let xv = g.constant(x.clone());
            let (mu, ls) = m.forward_vars(&mut g, &vars, xv).unwrap();
            let sq = g.square(mu).unwrap();
            let wc = g.constant(weight.clone());
            let wl = g.mul(ls, wc).unwrap();
            let s = g.add(sq, wl).unwrap();
            let l = g.sum(s);
            g.evaluate_and_grad(l).unwrap()
        };
        let (_, grads) = loss_of(mlp);
        let named: BTreeMap<String, Tensor> = mlp.named("net").into_iter().collect();
        let mut worst: f64 = 0.0;
        for (name, t) in &named {
            for e in 0..t.len() {
                let mut plus = named.clone();
                plus.get_mut(name).unwrap().data_mut()[e] += 1e-5;
                let mut minus = named.clone();
                minus.get_mut(name).unwrap().data_mut()[e] -= 1e-5;
                let fp = loss_of(&Mlp::from_named(mlp.config.clone(), "net", &plus).unwrap()).0;
                let fm = loss_of(&Mlp::from_named(mlp.config.clone(), "net", &minus).unwrap()).0;
                let fd = (fp - fm) / 2e-5;
                let an = grads[name].data()[e];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
        worst
    }

    #[test]
    fn zero_network_outputs_standard_normal() {
        let enc = Mlp::zeros(MlpConfig::new(vec![3, 4, 2], Activation::Tanh)).unwrap();
        let o = Tensor::matrix(5, 3, (0..15).map(|v| v as f64).collect());
        let s = encoder_forward(&o, &enc).unwrap();
        assert!(s.mu_x.data().iter().all(|v| *v == 0.0));
        assert!(s.log_std_x.data().iter().all(|v| *v == 0.0));
        let dec = Mlp::zeros(MlpConfig::new(vec![2, 4, 3], Activation::Relu)).unwrap();
        let d = decoder_forward(&s.mu_x, &dec).unwrap();
        assert_eq!(d.mu_o.shape(), &[5, 3]);
        assert!(d.mu_o.data().iter().all(|v| *v == 0.0));
        assert!(d.log_std_o.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Tanh, Activation::Relu] {
            let mut mlp = Mlp::init(MlpConfig::new(vec![3, 4, 2], act), &mut rng).unwrap();
            mlp.trunk[0].b = Tensor::row(vec![0.1, -0.2, 0.3, 0.05]);
            let x = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let err = fd_max_rel_err(&mlp, &x);
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(MlpConfig::new(vec![2, 5, 3, 4], Activation::Tanh), &mut rng).unwrap();
        let x = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!(fd_max_rel_err(&mlp, &x) < 1e-4);
    }

    #[test]
    fn identical_rows_identical_outputs_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(MlpConfig::new(vec![3, 6, 2], Activation::Relu), &mut rng).unwrap();
        let row = vec![0.3, -0.7, 1.1];
        let o = Tensor::from_rows(&[row.clone(), row.clone(), row]);
        let s = encoder_forward(&o, &mlp).unwrap();
        assert_eq!(s.mu_x.row_slice(0), s.mu_x.row_slice(2));
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let perm = [3, 1, 0, 2];
        let a = decoder_forward(&x, &mlp).unwrap();
        let b = decoder_forward(&x.select_rows(&perm), &mlp).unwrap();
        assert_eq!(a.mu_o.select_rows(&perm), b.mu_o);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut mlp = Mlp::zeros(MlpConfig::new(vec![1, 1], Activation::Tanh)).unwrap();
        mlp.head_log_std.b = Tensor::row(vec![20.0]);
        let s = encoder_forward(&Tensor::scalar(0.0), &mlp).unwrap();
        assert_eq!(s.log_std_x.item(), 7.0);
    }

    #[test]
    fn reparameterize_cases() {
        let enc = EncoderStats {
            mu_x: Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]),
            log_std_x: Tensor::zeros(&[2, 2]),
        };
        let x = reparameterize(&enc, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(x, enc.mu_x);
        let x = reparameterize(&enc, &Tensor::filled(&[4, 2], 1.0)).unwrap();
        assert_eq!(x.row_slice(3), &[0.0, 1.5]);
        assert!(reparameterize(&enc, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn reparameterized_samples_have_target_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderStats {
            mu_x: Tensor::row(vec![1.5]),
            log_std_x: Tensor::row(vec![0.4f64.ln()]),
        };
        let t = 100_000;
        let eps = sample_standard_normal(&mut rng, &[t, 1]);
        let x = reparameterize(&enc, &eps).unwrap();
        let mean = x.sum() / t as f64;
        let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
        assert!((mean - 1.5).abs() < 0.015);
        assert!((std - 0.4).abs() < 0.004);
    }

    #[test]
    fn named_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MlpConfig::new(vec![4, 8, 8, 2], Activation::Relu);
        let mlp = Mlp::init(cfg.clone(), &mut rng).unwrap();
        let named: BTreeMap<String, Tensor> = mlp.named("encoder").into_iter().collect();
        assert_eq!(named.len(), 8);
        assert_eq!(Mlp::from_named(cfg.clone(), "encoder", &named).unwrap(), mlp);
        assert!(Mlp::from_named(cfg, "decoder", &named).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(vec![3], Activation::Relu).validate().is_err());
        assert!(MlpConfig::new(vec![3, 0, 2], Activation::Relu).validate().is_err());
        assert_eq!(MlpConfig::new(vec![200, 110, 20], Activation::Tanh).reversed().layer_dims, vec![20, 110, 200]);
    }

    #[test]
    fn calibrated_heads_standardize_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut net = Mlp::init(MlpConfig::new(vec![3, 16, 2], Activation::Relu), &mut rng).unwrap();
        let x = Tensor::matrix(50, 3, (0..150).map(|_| rng.gen_range(-2.0..2.0)).collect());
        net.calibrate_heads(&x, true, &[-2.0; 2]).unwrap();
        let (mu, ls) = net.forward_values(&x).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..50).map(|i| mu.get(i, j)).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
            assert!(((0..50).map(|i| ls.get(i, j)).sum::<f64>() / 50.0 + 2.0).abs() < 1e-12);
        }
    }
}
