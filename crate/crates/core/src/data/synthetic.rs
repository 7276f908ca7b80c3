use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::distributions::{sample_gamma, standard_normal, GammaDist};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinwheelConfig {
    pub arms: usize,
    pub points_per_arm: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    pub rate: f64,
}

impl Default for PinwheelConfig {
    fn default() -> Self {
        Self {
            arms: 5,
            points_per_arm: 400,
            radial_std: 0.3,
            tangential_std: 0.05,
            rate: 0.25,
        }
    }
}

/// Noisy spiral arms: each point starts as `(1 + r, t)` with Gaussian `r, t`
/// and is rotated by its arm's base angle plus `rate · exp(1 + r)`.
/// Rows are grouped by arm.
pub fn gen_pinwheel<R: Rng + ?Sized>(rng: &mut R, cfg: &PinwheelConfig) -> Result<Dataset, DataError> {
    if cfg.arms < 2 {
        return Err(DataError::Invalid(format!("need at least 2 arms, got {}", cfg.arms)));
    }
    if !(cfg.radial_std >= 0.0 && cfg.tangential_std >= 0.0 && cfg.rate.is_finite()) {
        return Err(DataError::Invalid("pinwheel noise must be nonnegative and finite".into()));
    }
    let n = cfg.arms * cfg.points_per_arm;
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for arm in 0..cfg.arms {
        let base = 2.0 * PI * arm as f64 / cfg.arms as f64;
        for _ in 0..cfg.points_per_arm {
            let r = 1.0 + cfg.radial_std * standard_normal(rng);
            let t = cfg.tangential_std * standard_normal(rng);
            let angle = base + cfg.rate * r.exp();
            let (s, c) = angle.sin_cos();
            values.push(r * c - t * s);
            values.push(r * s + t * c);
            labels.push(arm);
        }
    }
    Dataset::new(Tensor::matrix(n, 2, values), Some(labels), "pinwheel")
}

/// Heavy-tailed stand-in for a labeled attribution corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub classes: usize,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub per_class_min: usize,
    pub per_class_max: usize,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Standard deviation of class centres in latent space.
    pub separation: f64,
    /// Weight of the `tanh` part of the latent-to-observation map.
    pub nonlinearity: f64,
    pub noise_std: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            classes: 30,
            obs_dim: 200,
            latent_dim: 10,
            per_class_min: 503,
            per_class_max: 1000,
            nu_min: 3.0,
            nu_max: 10.0,
            separation: 3.0,
            nonlinearity: 0.5,
            noise_std: 0.05,
        }
    }
}

/// Per class: centre `c_k ~ N(0, s² I)`, `u ~ Gamma(ν_k/2, ν_k/2)`,
/// `x = c_k + ε/√u`; then `o = x A + λ tanh(x B) + η` with fixed random
/// `A, B` (entries `N(0, 1/d)`) and Gaussian noise `η`.
pub fn gen_surrogate_attribution<R: Rng + ?Sized>(rng: &mut R, cfg: &SurrogateConfig) -> Result<Dataset, DataError> {
    let SurrogateConfig { classes: k, obs_dim: l, latent_dim: d, .. } = *cfg;
    if k == 0 || l == 0 || d == 0 {
        return Err(DataError::Invalid("classes, obs_dim and latent_dim must be positive".into()));
    }
    if cfg.per_class_min == 0 || cfg.per_class_min > cfg.per_class_max {
        return Err(DataError::Invalid("need 1 ≤ per_class_min ≤ per_class_max".into()));
    }
    if !(cfg.nu_min > 0.0 && cfg.nu_min <= cfg.nu_max) {
        return Err(DataError::Invalid("need 0 < nu_min ≤ nu_max".into()));
    }
    let w = 1.0 / (d as f64).sqrt();
    let mut gauss = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * standard_normal(rng)).collect() };
    let a = Tensor::matrix(d, l, gauss(d * l, w));
    let b = Tensor::matrix(d, l, gauss(d * l, w));
    let centres = gauss(k * d, cfg.separation);

    let mut latents = Vec::new();
    let mut labels = Vec::new();
    for class in 0..k {
        let count = rng.gen_range(cfg.per_class_min..=cfg.per_class_max);
        let nu = if cfg.nu_min == cfg.nu_max { cfg.nu_min } else { rng.gen_range(cfg.nu_min..=cfg.nu_max) };
        let half = nu / 2.0;
        for _ in 0..count {
            let u = sample_gamma(rng, &GammaDist { shape_alpha: half, rate_beta: half })
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            let s = u.sqrt().recip();
            for j in 0..d {
                latents.push(centres[class * d + j] + s * standard_normal(rng));
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let x = Tensor::matrix(n, d, latents);
    let lin = x.matmul(&a).map_err(|e| DataError::Invalid(e.to_string()))?;
    let nonlin = x.matmul(&b).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut obs = Vec::with_capacity(n * l);
    for (p, q) in lin.data().iter().zip(nonlin.data()) {
        obs.push(p + cfg.nonlinearity * q.tanh() + cfg.noise_std * standard_normal(rng));
    }
    Dataset::new(Tensor::matrix(n, l, obs), Some(labels), "surrogate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pinwheel_defaults() {
        let ds = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(1), &PinwheelConfig::default()).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes(), 5);
        let again = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(1), &PinwheelConfig::default()).unwrap();
        assert_eq!(ds, again);
        assert!(gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(1), &PinwheelConfig { arms: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn unwarped_pinwheel_is_rays() {
        let cfg = PinwheelConfig {
            arms: 4,
            points_per_arm: 50,
            tangential_std: 0.0,
            rate: 0.0,
            ..Default::default()
        };
        let ds = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(2), &cfg).unwrap();
        for i in 0..ds.len() {
            let (x, y) = (ds.observations.get(i, 0), ds.observations.get(i, 1));
            let arm = ds.labels.as_ref().unwrap()[i] as f64;
            let want = PI / 2.0 * arm;
            let got = y.atan2(x);
            let diff = (got - want).rem_euclid(2.0 * PI);
            // radius may be negative for extreme noise, flipping the ray
            assert!(diff.min(2.0 * PI - diff) < 1e-12 || (diff - PI).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn surrogate_counts_and_labels() {
        let cfg = SurrogateConfig {
            classes: 4,
            obs_dim: 12,
            per_class_min: 20,
            per_class_max: 30,
            ..Default::default()
        };
        let ds = gen_surrogate_attribution(&mut ChaCha8Rng::seed_from_u64(3), &cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for k in 0..4 {
            let c = labels.iter().filter(|l| **l == k).count();
            assert!((20..=30).contains(&c));
        }
        assert_eq!(ds.dim(), 12);
        let one = gen_surrogate_attribution(&mut ChaCha8Rng::seed_from_u64(3), &SurrogateConfig { classes: 1, ..cfg }).unwrap();
        assert!(one.labels.unwrap().iter().all(|l| *l == 0));
    }

    fn excess_kurtosis(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2) - 3.0
    }

    #[test]
    fn gaussian_limit_passes_kurtosis_screen() {
        let base = SurrogateConfig {
            classes: 2,
            obs_dim: 8,
            latent_dim: 4,
            per_class_min: 20_000,
            per_class_max: 20_000,
            nonlinearity: 0.1,
            ..Default::default()
        };
        let check = |nu: f64| -> f64 {
            let cfg = SurrogateConfig { nu_min: nu, nu_max: nu, ..base };
            let ds = gen_surrogate_attribution(&mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
            let rows: Vec<usize> = (0..20_000).collect();
            let class0 = ds.subset(&rows);
            (0..8)
                .map(|j| excess_kurtosis(&(0..20_000).map(|i| class0.observations.get(i, j)).collect::<Vec<_>>()).abs())
                .fold(0.0, f64::max)
        };
        assert!(check(1e6) < 0.15);
        assert!(check(5.0) > 1.0);
    }
}
