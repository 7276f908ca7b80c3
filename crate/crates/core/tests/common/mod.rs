#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_W: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GAUSS_W: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = KRONROD_W[7] * fc;
    let mut g = GAUSS_W[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        k += KRONROD_W[i] * s;
        if i % 2 == 1 {
            g += GAUSS_W[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) on `[a, b]`, bisecting the worst interval
/// until the summed error estimate drops below `tol · |I|`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..5000 {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if err <= tol * total.abs() {
            break;
        }
        let worst = (0..parts.len())
            .max_by(|&i, &j| parts[i].2 .1.total_cmp(&parts[j].2 .1))
            .unwrap();
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// `ln ∫_0^∞ exp(log_f(u)) du`, integrated over `s = ln u` with the peak
/// factored out so nothing underflows.
pub fn log_integral_over_u<F: Fn(f64) -> f64>(log_f: F) -> f64 {
    let log_g = |s: f64| log_f(s.exp()) + s;
    let grid: Vec<f64> = (0..=4000).map(|i| -60.0 + 0.03 * i as f64).collect();
    let peak = grid.iter().map(|&s| log_g(s)).fold(f64::NEG_INFINITY, f64::max);
    let live: Vec<f64> = grid.iter().copied().filter(|&s| log_g(s) - peak > -60.0).collect();
    let (lo, hi) = (live[0] - 0.5, live[live.len() - 1] + 0.5);
    peak + integrate(|s| (log_g(s) - peak).exp(), lo, hi, 1e-13).ln()
}

pub fn gamma_log_pdf(u: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * u.ln() - rate * u
}

pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&sol))
}

/// `ln ∫ N(x | μ, Σ/u) Gamma(u | ν/2, ν/2) du`.
pub fn student_t_by_quadrature(x: &DVector<f64>, mean: &DVector<f64>, scale: &DMatrix<f64>, nu: f64) -> f64 {
    log_integral_over_u(|u| gaussian_log_pdf(x, mean, &(scale / u)) + gamma_log_pdf(u, nu / 2.0, nu / 2.0))
}

/// `ln π + ln ∫ Gamma(u | ν/2, ν/2) exp(E_q[ln N(x | μ, Σ/u)]) du` for
/// `q = N(m, S)`, dropping the `(2π)^{-D/2}` shared by every component.
pub fn class_score_by_quadrature(m: &DVector<f64>, s: &DMatrix<f64>, pi: f64, mean: &DVector<f64>, sigma: &DMatrix<f64>, nu: f64) -> f64 {
    let d = m.len() as f64;
    let inv = sigma.clone().try_inverse().expect("invertible");
    let diff = m - mean;
    let spread = (&inv * s).trace() + diff.dot(&(&inv * &diff));
    let log_det = sigma.determinant().ln();
    pi.ln()
        + log_integral_over_u(|u| {
            gamma_log_pdf(u, nu / 2.0, nu / 2.0) + 0.5 * d * u.ln() - 0.5 * log_det - 0.5 * u * spread
        })
}

pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.2..1.0)
}

/// Gaussian-mixture E-step: `γ_nk ∝ π_k N(x_n | μ_k, Σ_k)`.
pub fn gmm_e_step(x: &[DVector<f64>], pi: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|xn| {
            let logs: Vec<f64> = (0..pi.len()).map(|k| pi[k].ln() + gaussian_log_pdf(xn, &means[k], &covs[k])).collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
            logs.iter().map(|l| (l - top).exp() / z).collect()
        })
        .collect()
}

/// Constrained mixture parameters from dense covariances.
pub fn smm_params(pi: Vec<f64>, nu: Vec<f64>, means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> tvae::mixture::SmmParams {
    use tvae::tensor::Tensor;
    let d = means[0].len();
    let mu = Tensor::matrix(means.len(), d, means.iter().flat_map(|m| m.iter().copied()).collect());
    let chols: Vec<DMatrix<f64>> = covs.iter().map(|c| c.clone().cholesky().expect("positive definite").l()).collect();
    tvae::mixture::SmmParams {
        pi,
        nu,
        mu,
        sigma_chol: chols.iter().map(|l| Tensor::matrix(d, d, l.transpose().iter().copied().collect())).collect(),
        log_det_sigma: chols.iter().map(|l| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()).collect(),
    }
}

pub fn row_vectors(t: &tvae::tensor::Tensor) -> Vec<DVector<f64>> {
    (0..t.rows()).map(|i| DVector::from_row_slice(t.row_slice(i))).collect()
}

#[test]
fn quadrature_recovers_gamma_normalizer() {
    for (a, b) in [(0.7, 2.0), (3.0, 0.5), (50.0, 40.0)] {
        let log_i = log_integral_over_u(|u| gamma_log_pdf(u, a, b));
        assert!(log_i.abs() < 1e-12, "{a} {b}: {log_i}");
    }
}
