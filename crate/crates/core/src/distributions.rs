//! Densities, entropies and samplers: diagonal Gaussian, Gamma, categorical
//! and the multivariate Student-t.
//!
//! Everything here works on plain `f64` slices. The differentiable versions
//! used inside the loss live in [`crate::mixture`] and [`crate::elbo`].

use rand::Rng;
use thiserror::Error;

use crate::tensor::{digamma, lgamma, linalg, Tensor, TensorError};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Domain(String),
    #[error("weights do not form a probability simplex: {0}")]
    InvalidSimplex(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_dim(expected: usize, got: usize) -> Result<(), DistributionError> {
    if expected == got {
        Ok(())
    } else {
        Err(DistributionError::DimMismatch { expected, got })
    }
}

/// Independent Gaussians parameterized by mean and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, DistributionError> {
        check_dim(mean.len(), log_std.len())?;
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(DistributionError::Domain("log_std must be finite".into()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Gamma distribution with shape `alpha` and rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaDist {
    pub shape_alpha: f64,
    pub rate_beta: f64,
}

impl GammaDist {
    pub fn new(shape_alpha: f64, rate_beta: f64) -> Result<Self, DistributionError> {
        if !(shape_alpha > 0.0 && shape_alpha.is_finite() && rate_beta > 0.0 && rate_beta.is_finite()) {
            return Err(DistributionError::Domain(format!(
                "gamma parameters must be positive, got alpha={shape_alpha}, beta={rate_beta}"
            )));
        }
        Ok(Self { shape_alpha, rate_beta })
    }

    pub fn mean(&self) -> f64 {
        self.shape_alpha / self.rate_beta
    }

    /// `E[ln u] = ψ(α) − ln β`.
    pub fn mean_log(&self) -> f64 {
        digamma(self.shape_alpha).expect("validated shape") - self.rate_beta.ln()
    }

    pub fn log_pdf(&self, u: f64) -> f64 {
        let (a, b) = (self.shape_alpha, self.rate_beta);
        a * b.ln() - lgamma(a).expect("validated shape") + (a - 1.0) * u.ln() - b * u
    }
}

/// Multivariate Student-t with location `mean`, scale matrix `scale` and
/// `dof_nu` degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentT {
    pub mean: Vec<f64>,
    pub scale: Tensor,
    pub dof_nu: f64,
    chol: Vec<f64>,
}

impl StudentT {
    pub fn new(mean: Vec<f64>, scale: Tensor, dof_nu: f64) -> Result<Self, DistributionError> {
        let d = mean.len();
        check_dim(d, scale.rows())?;
        check_dim(d, scale.cols())?;
        for i in 0..d {
            for j in 0..i {
                if (scale.get(i, j) - scale.get(j, i)).abs() > 1e-12 {
                    return Err(DistributionError::Domain("scale matrix is not symmetric".into()));
                }
            }
        }
        if !(dof_nu > 0.0) {
            return Err(DistributionError::Domain(format!("dof must be positive, got {dof_nu}")));
        }
        let chol = linalg::cholesky(scale.data(), d)?;
        Ok(Self { mean, scale, dof_nu, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Lower Cholesky factor of the scale matrix (row-major).
    pub fn cholesky(&self) -> &[f64] {
        &self.chol
    }
}

pub fn gaussian_diag_log_pdf(x: &[f64], g: &DiagGaussian) -> Result<f64, DistributionError> {
    check_dim(g.dim(), x.len())?;
    let mut acc = -0.5 * g.dim() as f64 * LN_2PI;
    for ((xi, m), ls) in x.iter().zip(&g.mean).zip(&g.log_std) {
        let z = (xi - m) * (-ls).exp();
        acc -= ls + 0.5 * z * z;
    }
    Ok(acc)
}

/// `D/2·ln(2πe) + Σ log_std`.
pub fn gaussian_diag_entropy(g: &DiagGaussian) -> f64 {
    0.5 * g.dim() as f64 * (LN_2PI + 1.0) + g.log_std.iter().sum::<f64>()
}

/// Full-covariance Gaussian log-density given the Cholesky factor of the covariance.
pub fn gaussian_log_pdf_chol(x: &[f64], mean: &[f64], chol: &[f64]) -> f64 {
    let d = mean.len();
    let q = linalg::mahalanobis_sq(chol, d, x, mean);
    -0.5 * (d as f64 * LN_2PI + linalg::log_det_from_cholesky(chol, d) + q)
}

/// `α − ln β + ln Γ(α) + (1 − α) ψ(α)`.
pub fn gamma_entropy(d: &GammaDist) -> Result<f64, DistributionError> {
    let d = GammaDist::new(d.shape_alpha, d.rate_beta)?;
    let a = d.shape_alpha;
    Ok(a - d.rate_beta.ln() + lgamma(a)? + (1.0 - a) * digamma(a)?)
}

pub fn student_t_log_pdf(x: &[f64], s: &StudentT) -> Result<f64, DistributionError> {
    let d = s.dim();
    check_dim(d, x.len())?;
    let df = d as f64;
    let nu = s.dof_nu;
    let delta = linalg::mahalanobis_sq(&s.chol, d, x, &s.mean);
    Ok(lgamma(0.5 * (nu + df))? - lgamma(0.5 * nu)?
        - 0.5 * df * (nu * std::f64::consts::PI).ln()
        - 0.5 * linalg::log_det_from_cholesky(&s.chol, d)
        - 0.5 * (nu + df) * (delta / nu).ln_1p())
}

/// One standard normal draw (Box-Muller, cosine branch).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let (z, _) = box_muller(rng);
    z
}

fn box_muller<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // 1 - U lies in (0, 1], keeping the log finite
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Tensor of i.i.d. standard normal entries.
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let (a, b) = box_muller(rng);
        data.push(a);
        data.push(b);
    }
    data.truncate(n);
    Tensor::new(shape.to_vec(), data).expect("buffer sized from shape")
}

/// Draw from `Gamma(α, rate β)` by Marsaglia-Tsang.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, d: &GammaDist) -> Result<f64, DistributionError> {
    let d = GammaDist::new(d.shape_alpha, d.rate_beta)?;
    Ok(gamma_unit(rng, d.shape_alpha) / d.rate_beta)
}

fn gamma_unit<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    if alpha < 1.0 {
        // Γ(α) = Γ(α+1) · U^(1/α)
        let u: f64 = 1.0 - rng.gen::<f64>();
        return gamma_unit(rng, alpha + 1.0) * u.powf(1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.gen();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Index `k` with probability `weights[k]`.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize, DistributionError> {
    if weights.is_empty() {
        return Err(DistributionError::InvalidSimplex("empty weight vector".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(DistributionError::InvalidSimplex(format!("negative or non-finite weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DistributionError::InvalidSimplex(format!("weights sum to {total}")));
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = k;
            if u < acc {
                return Ok(k);
            }
        }
    }
    Ok(last)
}
