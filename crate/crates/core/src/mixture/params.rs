use serde::{Deserialize, Serialize};

use super::MixtureError;
use crate::tensor::{Graph, Tensor, Var};

/// Offset in the degrees-of-freedom floor `ν > 2 + ε`.
pub const NU_EPSILON: f64 = 1e-3;
pub const NU_FLOOR: f64 = 2.0 + NU_EPSILON;
/// Degrees of freedom used for the Gaussian-limit baseline.
pub const GAUSSIAN_LIMIT_NU: f64 = 1e6;

/// Unconstrained mixture variables.
///
/// `c_strict` holds the strictly-lower entries of each `C_k` row-major
/// (`K × D(D-1)/2`), `c_logdiag` the log of its diagonal (`K × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmmRawParams {
    pub m: Tensor,
    pub n: Tensor,
    pub mu: Tensor,
    pub c_strict: Tensor,
    pub c_logdiag: Tensor,
    pub sigma_jitter_sq: f64,
}

/// Constrained mixture parameters `{π, ν, μ, Σ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmmParams {
    pub pi: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu: Tensor,
    /// Lower Cholesky factor of each `Σ_k`.
    pub sigma_chol: Vec<Tensor>,
    pub log_det_sigma: Vec<f64>,
}

/// Graph handles of the unconstrained variables.
#[derive(Debug, Clone, Copy)]
pub struct SmmRawVars {
    pub m: Var,
    pub n: Var,
    pub mu: Var,
    pub c_strict: Var,
    pub c_logdiag: Var,
}

/// Graph handles of the constrained parameters.
#[derive(Debug, Clone)]
pub struct SmmVars {
    /// `1×K`
    pub log_pi: Var,
    /// `1×K`
    pub nu: Var,
    /// `K×D`
    pub mu: Var,
    /// `D×D` each
    pub sigma_chol: Vec<Var>,
    /// `1×K`
    pub log_det_sigma: Var,
}

/// Pre-activation `n` whose floored softplus gives `nu`.
pub fn nu_to_preactivation(nu: f64) -> f64 {
    assert!(nu > NU_FLOOR, "nu must exceed {NU_FLOOR}");
    // n = c + ln(exp(ν - c) - 1)
    let t = nu - NU_FLOOR;
    NU_FLOOR + t + (-(-t).exp_m1()).ln()
}

impl SmmRawParams {
    pub fn components(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }

    /// Uniform weights, `ν_k = nu` and `C_k = I`, so `Σ_k = (1 + σ²) I`.
    pub fn isotropic(mu: Tensor, nu: f64, sigma_jitter_sq: f64) -> Self {
        let (k, d) = (mu.rows(), mu.cols());
        Self {
            m: Tensor::zeros(&[1, k]),
            n: Tensor::filled(&[1, k], nu_to_preactivation(nu)),
            mu,
            c_strict: Tensor::zeros(&[k, d * d.saturating_sub(1) / 2]),
            c_logdiag: Tensor::zeros(&[k, d]),
            sigma_jitter_sq,
        }
    }

    pub fn validate(&self) -> Result<(), MixtureError> {
        let (k, d) = (self.components(), self.latent_dim());
        let expect = |name: &str, t: &Tensor, r: usize, c: usize| {
            if t.rows() == r && t.cols() == c {
                Ok(())
            } else {
                Err(MixtureError::Shape(format!(
                    "{name}: expected {r}x{c}, got {:?}",
                    t.shape()
                )))
            }
        };
        expect("m", &self.m, 1, k)?;
        expect("n", &self.n, 1, k)?;
        expect("c_strict", &self.c_strict, k, d * d.saturating_sub(1) / 2)?;
        expect("c_logdiag", &self.c_logdiag, k, d)?;
        if !(self.sigma_jitter_sq > 0.0) {
            return Err(MixtureError::Shape(format!(
                "sigma_jitter_sq must be positive, got {}",
                self.sigma_jitter_sq
            )));
        }
        Ok(())
    }

    /// Registers the variables on `g` as trainable parameters named
    /// `mixture.*`. With `train_dof = false` the pre-activations `n` enter as a constant.
    pub fn register(&self, g: &mut Graph, train_dof: bool) -> SmmRawVars {
        let n = if train_dof {
            g.param("mixture.n", self.n.clone())
        } else {
            g.constant(self.n.clone())
        };
        SmmRawVars {
            m: g.param("mixture.m", self.m.clone()),
            n,
            mu: g.param("mixture.mu", self.mu.clone()),
            c_strict: g.param("mixture.c_strict", self.c_strict.clone()),
            c_logdiag: g.param("mixture.c_logdiag", self.c_logdiag.clone()),
        }
    }

    /// Registers the variables as constants.
    pub fn constants(&self, g: &mut Graph) -> SmmRawVars {
        SmmRawVars {
            m: g.constant(self.m.clone()),
            n: g.constant(self.n.clone()),
            mu: g.constant(self.mu.clone()),
            c_strict: g.constant(self.c_strict.clone()),
            c_logdiag: g.constant(self.c_logdiag.clone()),
        }
    }

    /// Looks up `mixture.*` entries in a name → tensor map.
    pub fn from_named(
        named: &std::collections::BTreeMap<String, Tensor>,
        sigma_jitter_sq: f64,
    ) -> Result<Self, MixtureError> {
        let get = |k: &str| {
            named
                .get(&format!("mixture.{k}"))
                .cloned()
                .ok_or_else(|| MixtureError::Shape(format!("missing parameter mixture.{k}")))
        };
        let raw = Self {
            m: get("m")?,
            n: get("n")?,
            mu: get("mu")?,
            c_strict: get("c_strict")?,
            c_logdiag: get("c_logdiag")?,
            sigma_jitter_sq,
        };
        raw.validate()?;
        Ok(raw)
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        vec![
            ("mixture.m".into(), self.m.clone()),
            ("mixture.n".into(), self.n.clone()),
            ("mixture.mu".into(), self.mu.clone()),
            ("mixture.c_strict".into(), self.c_strict.clone()),
            ("mixture.c_logdiag".into(), self.c_logdiag.clone()),
        ]
    }
}

/// `π = softmax(m)`, `ν = ln(eⁿ + e^{2+ε})`, `Σ_k = C_k C_kᵀ + σ² I` on the graph.
pub fn materialize_vars(
    g: &mut Graph,
    raw: &SmmRawVars,
    sigma_jitter_sq: f64,
) -> Result<SmmVars, MixtureError> {
    let log_pi = g.log_softmax_rows(raw.m)?;
    // ln(eⁿ + eᶜ) = c + softplus(n - c)
    let shifted = g.add_scalar(raw.n, -NU_FLOOR)?;
    let sp = g.softplus(shifted)?;
    let nu = g.add_scalar(sp, NU_FLOOR)?;

    let (k, d) = g.shape(raw.mu);
    let jitter = g.constant(Tensor::identity(d).map(|v| v * sigma_jitter_sq));
    let mut sigma_chol = Vec::with_capacity(k);
    let mut log_dets = Vec::with_capacity(k);
    for j in 0..k {
        let strict = g.row(raw.c_strict, j)?;
        let logdiag = g.row(raw.c_logdiag, j)?;
        let c = g.assemble_tril(strict, logdiag)?;
        let ct = g.transpose(c)?;
        let cct = g.matmul(c, ct)?;
        let sigma = g.add(cct, jitter)?;
        let l = g.cholesky(sigma)?;
        let diag = g.diag(l)?;
        let ln_diag = g.log(diag)?;
        let half = g.sum(ln_diag);
        log_dets.push(g.scale(half, 2.0)?);
        sigma_chol.push(l);
    }
    let log_det_sigma = g.concat_cols(&log_dets)?;
    Ok(SmmVars {
        log_pi,
        nu,
        mu: raw.mu,
        sigma_chol,
        log_det_sigma,
    })
}

/// Value-level materialization.
pub fn materialize_params(raw: &SmmRawParams) -> Result<SmmParams, MixtureError> {
    raw.validate()?;
    let mut g = Graph::new();
    let vars = raw.constants(&mut g);
    let m = materialize_vars(&mut g, &vars, raw.sigma_jitter_sq)?;
    let pi = g.value(m.log_pi).data().iter().map(|v| v.exp()).collect();
    Ok(SmmParams {
        pi,
        nu: g.value(m.nu).data().to_vec(),
        mu: g.value(m.mu).clone(),
        sigma_chol: m.sigma_chol.iter().map(|v| g.value(*v).clone()).collect(),
        log_det_sigma: g.value(m.log_det_sigma).data().to_vec(),
    })
}

impl SmmParams {
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }

    /// `Σ_k` reassembled from its factor.
    pub fn sigma(&self, k: usize) -> Tensor {
        let l = &self.sigma_chol[k];
        l.matmul(&l.transpose()).expect("square factor")
    }

    /// Checks `Σπ = 1`, `ν > 2` and positive Cholesky diagonals.
    pub fn check_invariants(&self) -> Result<(), MixtureError> {
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MixtureError::Invariant(format!("mixing weights sum to {total}")));
        }
        if let Some((k, nu)) = self.nu.iter().enumerate().find(|(_, v)| !(**v > 2.0)) {
            return Err(MixtureError::Invariant(format!("nu[{k}] = {nu} is not above 2")));
        }
        for (k, l) in self.sigma_chol.iter().enumerate() {
            if (0..l.rows()).any(|i| !(l.get(i, i) > 0.0)) {
                return Err(MixtureError::Invariant(format!("cholesky factor {k} has non-positive diagonal")));
            }
        }
        Ok(())
    }

    /// Places the parameters on `g` as constants.
    pub fn to_graph(&self, g: &mut Graph) -> Result<SmmVars, MixtureError> {
        let log_pi = g.constant(Tensor::row(self.pi.iter().map(|p| p.ln()).collect()));
        let nu = g.constant(Tensor::row(self.nu.clone()));
        let mu = g.constant(self.mu.clone());
        let sigma_chol = self.sigma_chol.iter().map(|l| g.constant(l.clone())).collect();
        let log_det_sigma = g.constant(Tensor::row(self.log_det_sigma.clone()));
        Ok(SmmVars {
            log_pi,
            nu,
            mu,
            sigma_chol,
            log_det_sigma,
        })
    }
}
