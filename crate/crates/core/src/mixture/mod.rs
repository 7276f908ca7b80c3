//! Student-t mixture in latent space: constrained parameterization, the
//! closed-form variational posterior, generative sampling and a Gaussian
//! mixture EM fitter for warm starts.

mod gmm;
mod params;
mod posterior;

use rand::Rng;
use thiserror::Error;

use crate::distributions::{sample_categorical, sample_gamma, standard_normal, DistributionError, GammaDist};
use crate::tensor::{Tensor, TensorError};

pub use gmm::{gmm_em_fit, gmm_from_labels, GmmFit, GmmOptions};
pub use params::{
    materialize_params, materialize_vars, nu_to_preactivation, SmmParams, SmmRawParams, SmmRawVars, SmmVars,
    GAUSSIAN_LIMIT_NU, NU_EPSILON, NU_FLOOR,
};
pub use posterior::{
    argmax_rows, compute_alpha, compute_beta, compute_log_qz, compute_log_rho, gamma_entropy_var, posterior_vars,
    responsibilities, PosteriorStats, PosteriorVars, BETA_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("{0}")]
    Shape(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite {term} at observation {n}, component {k}")]
    NonFinite { term: &'static str, n: usize, k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// Draws from the generative model of the latent mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSample {
    pub labels: Vec<usize>,
    pub scales: Vec<f64>,
    /// `count × D`
    pub latents: Tensor,
}

/// `z ~ Cat(π)`, `u ~ Gamma(ν_z/2, ν_z/2)`, `x ~ N(μ_z, Σ_z / u)`.
pub fn sample_generative<R: Rng + ?Sized>(
    rng: &mut R,
    params: &SmmParams,
    count: usize,
) -> Result<GenerativeSample, MixtureError> {
    let d = params.latent_dim();
    let mut labels = Vec::with_capacity(count);
    let mut scales = Vec::with_capacity(count);
    let mut latents = Vec::with_capacity(count * d);
    let mut eps = vec![0.0; d];
    for _ in 0..count {
        let z = sample_categorical(rng, &params.pi)?;
        let half = params.nu[z] / 2.0;
        let u = sample_gamma(rng, &GammaDist { shape_alpha: half, rate_beta: half })?;
        eps.iter_mut().for_each(|e| *e = standard_normal(rng));
        let l = &params.sigma_chol[z];
        let scale = u.sqrt().recip();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l.get(i, j) * eps[j];
            }
            latents.push(params.mu.get(z, i) + scale * acc);
        }
        labels.push(z);
        scales.push(u);
    }
    Ok(GenerativeSample {
        labels,
        scales,
        latents: Tensor::matrix(count, d, latents),
    })
}
