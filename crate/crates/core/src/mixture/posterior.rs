use super::params::{SmmParams, SmmVars};
use super::MixtureError;
use crate::distributions::LN_2PI;
use crate::network::EncoderStats;
use crate::tensor::{Graph, Tensor, Var};

/// Lower clamp on `β_nk` before taking its log.
pub const BETA_FLOOR: f64 = 1e-30;

/// Graph handles of the per-(n,k) posterior statistics.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    /// `1×K`
    pub alpha: Var,
    /// `N×K`
    pub beta: Var,
    /// `N×K`, unnormalized per row
    pub log_qz: Var,
    /// `N×K`, rows sum to one
    pub gamma: Var,
    /// `N×K`
    pub log_rho: Var,
}

/// Value-level posterior statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub alpha: Vec<f64>,
    pub beta: Tensor,
    pub log_qz: Tensor,
    pub gamma: Tensor,
    pub log_rho: Tensor,
}

/// `α_k = (ν_k + D)/2`.
pub fn compute_alpha(g: &mut Graph, smm: &SmmVars, d: usize) -> Result<Var, MixtureError> {
    if d == 0 {
        return Err(MixtureError::Shape("latent dimension must be at least 1".into()));
    }
    let shifted = g.add_scalar(smm.nu, d as f64)?;
    Ok(g.scale(shifted, 0.5)?)
}

/// `β_nk = ½[ν_k + Tr(Σ_n Σ_k⁻¹) + (μ_n − μ_k)ᵀ Σ_k⁻¹ (μ_n − μ_k)]`, with `Σ_n`
/// the diagonal encoder covariance. Both quadratic terms go through `L_k⁻¹`.
pub fn compute_beta(
    g: &mut Graph,
    enc_mu: Var,
    enc_log_std: Var,
    smm: &SmmVars,
) -> Result<Var, MixtureError> {
    let (n, d) = g.shape(enc_mu);
    let k = smm.sigma_chol.len();
    if g.shape(smm.mu) != (k, d) || g.shape(enc_log_std) != (n, d) {
        return Err(MixtureError::Shape(format!(
            "encoder {n}x{d} does not match {k} components of dimension {}",
            g.shape(smm.mu).1
        )));
    }
    let two_log_std = g.scale(enc_log_std, 2.0)?;
    let var = g.exp(two_log_std)?;
    let eye = g.constant(Tensor::identity(d));
    let nu_col = g.transpose(smm.nu)?;
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let linv = g.tri_solve(smm.sigma_chol[j], eye)?;
        // diag(Σ⁻¹) = column sums of (L⁻¹)²
        let linv_sq = g.square(linv)?;
        let prec_diag = g.sum_rows(linv_sq)?;
        let prec_diag_t = g.transpose(prec_diag)?;
        let trace = g.matmul(var, prec_diag_t)?;
        let mu_k = g.row(smm.mu, j)?;
        let diff = g.sub(enc_mu, mu_k)?;
        let linv_t = g.transpose(linv)?;
        let proj = g.matmul(diff, linv_t)?;
        let proj_sq = g.square(proj)?;
        let mahal = g.sum_cols(proj_sq)?;
        let nu_k = g.row(nu_col, j)?;
        let s = g.add(trace, mahal)?;
        let s = g.add(s, nu_k)?;
        cols.push(g.scale(s, 0.5)?);
    }
    Ok(g.concat_cols(&cols)?)
}

/// `ln π + (ν/2) ln(ν/2) − ln Γ(ν/2) − ½ ln det Σ + ln Γ(α) − α ln β`.
pub fn compute_log_qz(
    g: &mut Graph,
    smm: &SmmVars,
    alpha: Var,
    beta: Var,
) -> Result<Var, MixtureError> {
    let bv = g.value(beta);
    let k = bv.cols();
    for (idx, v) in bv.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(MixtureError::NonFinite {
                term: "beta",
                n: idx / k,
                k: idx % k,
            });
        }
    }
    let hits = bv.data().iter().filter(|v| **v < BETA_FLOOR).count();
    if hits > 0 {
        log::warn!("beta fell below {BETA_FLOOR:e} in {hits} entries; clamped");
    }
    let half_nu = g.scale(smm.nu, 0.5)?;
    let ln_half_nu = g.log(half_nu)?;
    let t1 = g.mul(half_nu, ln_half_nu)?;
    let t2 = g.lgamma(half_nu)?;
    let t3 = g.scale(smm.log_det_sigma, 0.5)?;
    let t4 = g.lgamma(alpha)?;
    let row = g.add(smm.log_pi, t1)?;
    let row = g.sub(row, t2)?;
    let row = g.sub(row, t3)?;
    let row = g.add(row, t4)?;
    let beta_c = g.clamp(beta, BETA_FLOOR, f64::INFINITY)?;
    let ln_beta = g.log(beta_c)?;
    let a_ln_b = g.mul(alpha, ln_beta)?;
    Ok(g.sub(row, a_ln_b)?)
}

/// Row-wise softmax of the class scores.
pub fn responsibilities(g: &mut Graph, log_qz: Var) -> Result<Var, MixtureError> {
    Ok(g.softmax_rows(log_qz)?)
}

/// Entropy of `Gamma(α_k, β_nk)` for every (n,k).
pub fn gamma_entropy_var(g: &mut Graph, alpha: Var, beta: Var) -> Result<Var, MixtureError> {
    let beta_c = g.clamp(beta, BETA_FLOOR, f64::INFINITY)?;
    let ln_beta = g.log(beta_c)?;
    let lg = g.lgamma(alpha)?;
    let dg = g.digamma(alpha)?;
    let one_minus = g.scale(alpha, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let t = g.mul(one_minus, dg)?;
    let row = g.add(alpha, lg)?;
    let row = g.add(row, t)?;
    Ok(g.sub(row, ln_beta)?)
}

/// `ln ρ_nk = ln q(z_nk=1) − H(Gamma(α_k, β_nk)) − (D/2) ln 2π`.
pub fn compute_log_rho(
    g: &mut Graph,
    log_qz: Var,
    alpha: Var,
    beta: Var,
    d: usize,
) -> Result<Var, MixtureError> {
    if d == 0 {
        return Err(MixtureError::Shape("latent dimension must be at least 1".into()));
    }
    let h = gamma_entropy_var(g, alpha, beta)?;
    let r = g.sub(log_qz, h)?;
    Ok(g.add_scalar(r, -0.5 * d as f64 * LN_2PI)?)
}

/// All posterior statistics for encoder outputs `(enc_mu, enc_log_std)`.
pub fn posterior_vars(
    g: &mut Graph,
    enc_mu: Var,
    enc_log_std: Var,
    smm: &SmmVars,
) -> Result<PosteriorVars, MixtureError> {
    let d = g.shape(enc_mu).1;
    let alpha = compute_alpha(g, smm, d)?;
    let beta = compute_beta(g, enc_mu, enc_log_std, smm)?;
    let log_qz = compute_log_qz(g, smm, alpha, beta)?;
    let gamma = responsibilities(g, log_qz)?;
    let log_rho = compute_log_rho(g, log_qz, alpha, beta, d)?;
    Ok(PosteriorVars {
        alpha,
        beta,
        log_qz,
        gamma,
        log_rho,
    })
}

impl PosteriorStats {
    pub fn compute(enc: &EncoderStats, params: &SmmParams) -> Result<Self, MixtureError> {
        let mut g = Graph::new();
        let smm = params.to_graph(&mut g)?;
        let mu = g.constant(enc.mu_x.clone());
        let ls = g.constant(enc.log_std_x.clone());
        let p = posterior_vars(&mut g, mu, ls, &smm)?;
        Ok(Self {
            alpha: g.value(p.alpha).data().to_vec(),
            beta: g.value(p.beta).clone(),
            log_qz: g.value(p.log_qz).clone(),
            gamma: g.value(p.gamma).clone(),
            log_rho: g.value(p.log_rho).clone(),
        })
    }

    /// Most responsible component per row; ties go to the lowest index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        argmax_rows(&self.gamma)
    }
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row_slice(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
