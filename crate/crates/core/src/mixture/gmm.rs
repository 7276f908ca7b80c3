//! Expectation-maximization for a full-covariance Gaussian mixture, used to
//! initialize the latent mixture before training.

use rand::Rng;

use super::params::{nu_to_preactivation, SmmRawParams};
use super::MixtureError;
use crate::distributions::LN_2PI;
use crate::tensor::{linalg, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Diagonal jitter added when a fitted covariance fails to factor.
    pub fallback_jitter: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            fallback_jitter: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    /// `K×D`
    pub means: Tensor,
    /// `D×D` each
    pub covariances: Vec<Tensor>,
    /// `N×K` responsibilities of the final E-step
    pub responsibilities: Tensor,
    /// Mean log-likelihood after each E-step
    pub log_likelihood: Vec<f64>,
    pub reseeded: usize,
}

impl GmmFit {
    /// Most responsible component per row; ties go to the lowest index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        super::posterior::argmax_rows(&self.responsibilities)
    }

    /// Unconstrained tVAE mixture variables: `m = ln π`, `ν_k = nu_init` and
    /// `C_k` the Cholesky factor of `cov_k − σ² I` with eigenvalues floored at `eig_floor`.
    pub fn to_raw_params(&self, sigma_jitter_sq: f64, nu_init: f64, eig_floor: f64) -> Result<SmmRawParams, MixtureError> {
        let (k, d) = (self.means.rows(), self.means.cols());
        let m = Tensor::row(self.weights.iter().map(|w| w.max(1e-12).ln()).collect());
        let n = Tensor::filled(&[1, k], nu_to_preactivation(nu_init));
        let mut c_strict = Vec::with_capacity(k * d * d.saturating_sub(1) / 2);
        let mut c_logdiag = Vec::with_capacity(k * d);
        for cov in &self.covariances {
            let mut shifted = nalgebra::DMatrix::from_row_slice(d, d, cov.data());
            for i in 0..d {
                shifted[(i, i)] -= sigma_jitter_sq;
            }
            let eig = nalgebra::SymmetricEigen::new(shifted);
            let floored = eig.eigenvalues.map(|v| v.max(eig_floor));
            let rebuilt = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
            let mut flat = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    flat.push(0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]));
                }
            }
            let l = linalg::cholesky(&flat, d)?;
            for i in 0..d {
                for j in 0..i {
                    c_strict.push(l[i * d + j]);
                }
            }
            for i in 0..d {
                c_logdiag.push(l[i * d + i].ln());
            }
        }
        let raw = SmmRawParams {
            m,
            n,
            mu: self.means.clone(),
            c_strict: Tensor::matrix(k, d * d.saturating_sub(1) / 2, c_strict),
            c_logdiag: Tensor::matrix(k, d, c_logdiag),
            sigma_jitter_sq,
        };
        raw.validate()?;
        Ok(raw)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
fn seed_means<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = data.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(data.row_slice(i), data.row_slice(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in best.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(data.row_slice(i), data.row_slice(next)));
        }
    }
    data.select_rows(&chosen)
}

fn covariance(data: &Tensor, weights: &[f64], mean: &[f64]) -> Vec<f64> {
    let d = data.cols();
    let total: f64 = weights.iter().sum();
    let mut cov = vec![0.0; d * d];
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let row = data.row_slice(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..=a {
                cov[a * d + b] += w * da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            cov[a * d + b] /= total;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    cov
}

fn factor_with_fallback(cov: &mut [f64], d: usize, jitter: f64) -> Vec<f64> {
    let mut added = 0.0;
    loop {
        match linalg::cholesky(cov, d) {
            Ok(l) => return l,
            Err(_) => {
                let step = if added == 0.0 { jitter } else { added };
                for i in 0..d {
                    cov[i * d + i] += step;
                }
                added += step;
            }
        }
    }
}

/// Single M-step from known assignments: class frequencies, means and
/// covariances. Empty classes fall back to the global moments.
pub fn gmm_from_labels(data: &Tensor, labels: &[usize], k: usize) -> Result<GmmFit, MixtureError> {
    let (n, d) = (data.rows(), data.cols());
    if labels.len() != n || n == 0 {
        return Err(MixtureError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(MixtureError::Shape(format!("label {bad} out of range for {k} components")));
    }
    let uniform = vec![1.0; n];
    let global_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64).collect();
    let global_cov = covariance(data, &uniform, &global_mean);
    let mut resp = Tensor::zeros(&[n, k]);
    for (i, &l) in labels.iter().enumerate() {
        resp.set(i, l, 1.0);
    }
    let mut weights = Vec::with_capacity(k);
    let mut means = Tensor::zeros(&[k, d]);
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        let w: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let nk: f64 = w.iter().sum();
        weights.push(nk / n as f64);
        let (mean, cov) = if nk == 0.0 {
            (global_mean.clone(), global_cov.clone())
        } else {
            let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| w[i] * data.get(i, c)).sum::<f64>() / nk).collect();
            let cov = covariance(data, &w, &mean);
            (mean, cov)
        };
        for (c, v) in mean.iter().enumerate() {
            means.set(j, c, *v);
        }
        covariances.push(Tensor::matrix(d, d, cov));
    }
    Ok(GmmFit {
        weights,
        means,
        covariances,
        responsibilities: resp,
        log_likelihood: vec![],
        reseeded: 0,
    })
}

/// Fits a `k`-component Gaussian mixture to the rows of `data` (`N×D`).
pub fn gmm_em_fit<R: Rng + ?Sized>(
    data: &Tensor,
    k: usize,
    rng: &mut R,
    opts: &GmmOptions,
) -> Result<GmmFit, MixtureError> {
    let (n, d) = (data.rows(), data.cols());
    if k == 0 || n < k {
        return Err(MixtureError::Shape(format!("need at least {k} rows for {k} components, got {n}")));
    }
    if !data.is_finite() {
        return Err(MixtureError::Shape("data contains non-finite values".into()));
    }
    let uniform = vec![1.0; n];
    let global_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64).collect();
    let global_cov = covariance(data, &uniform, &global_mean);

    let mut means = seed_means(data, k, rng);
    let mut covs: Vec<Vec<f64>> = vec![global_cov.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = Tensor::zeros(&[n, k]);
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeded = 0;

    for _ in 0..opts.max_iters.max(1) {
        // E-step
        let chols: Vec<Vec<f64>> = covs
            .iter_mut()
            .map(|c| factor_with_fallback(c, d, opts.fallback_jitter))
            .collect();
        let log_dets: Vec<f64> = chols.iter().map(|l| linalg::log_det_from_cholesky(l, d)).collect();
        let mut ll = 0.0;
        for i in 0..n {
            let x = data.row_slice(i);
            let mut logs = vec![0.0; k];
            for j in 0..k {
                let q = linalg::mahalanobis_sq(&chols[j], d, x, means.row_slice(j));
                logs[j] = weights[j].ln() - 0.5 * (d as f64 * LN_2PI + log_dets[j] + q);
            }
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + z.ln();
            for j in 0..k {
                resp.set(i, j, (logs[j] - m).exp() / z);
            }
        }
        ll /= n as f64;
        let converged = trace.last().is_some_and(|prev| ll - prev < opts.tol);
        trace.push(ll);
        if converged {
            break;
        }
        // M-step
        for j in 0..k {
            let w: Vec<f64> = (0..n).map(|i| resp.get(i, j)).collect();
            let nk: f64 = w.iter().sum();
            if nk < 1e-8 * n as f64 {
                let pick = rng.gen_range(0..n);
                let row = data.row_slice(pick).to_vec();
                for (c, v) in row.iter().enumerate() {
                    means.set(j, c, *v);
                }
                covs[j] = global_cov.clone();
                weights[j] = 1.0 / k as f64;
                reseeded += 1;
                continue;
            }
            let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| w[i] * data.get(i, c)).sum::<f64>() / nk).collect();
            covs[j] = covariance(data, &w, &mean);
            for (c, v) in mean.iter().enumerate() {
                means.set(j, c, *v);
            }
            weights[j] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }

    Ok(GmmFit {
        weights,
        means,
        covariances: covs.into_iter().map(|c| Tensor::matrix(d, d, c)).collect(),
        responsibilities: resp,
        log_likelihood: trace,
        reseeded,
    })
}
