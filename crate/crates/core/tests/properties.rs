mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::digamma;

use tvae::data::{gen_pinwheel, kfold_split, Dataset, PinwheelConfig};
use tvae::distributions::{sample_gamma, student_t_log_pdf, GammaDist, StudentT};
use tvae::elbo::TrainingMode;
use tvae::mixture::{materialize_params, PosteriorStats};
use tvae::network::EncoderStats;
use tvae::tensor::Tensor;
use tvae::training::{metrics_csv, train, TrainConfig};

use common::{gaussian_log_pdf, random_spd, smm_params, student_t_by_quadrature};

fn tensor_of(m: &DMatrix<f64>) -> Tensor {
    Tensor::matrix(m.nrows(), m.ncols(), m.transpose().iter().copied().collect())
}

fn small_pinwheel(seed: u64) -> Dataset {
    let cfg = PinwheelConfig { arms: 3, points_per_arm: 30, ..Default::default() };
    gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn student_t_matches_scale_mixture(seed in 0u64..10_000, d in 1usize..=3, nu in 0.3f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let scale = random_spd(&mut rng, d);
        let x = &mean + DVector::from_fn(d, |_, _| rng.gen_range(-6.0..6.0));
        let t = StudentT::new(mean.iter().copied().collect(), tensor_of(&scale), nu).unwrap();
        let lib = student_t_log_pdf(x.as_slice(), &t).unwrap();
        let oracle = student_t_by_quadrature(&x, &mean, &scale, nu);
        prop_assert!((lib - oracle).abs() < 1e-8, "{lib} vs {oracle}");
    }

    #[test]
    fn huge_dof_is_gaussian(seed in 0u64..10_000, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let cov = random_spd(&mut rng, d);
        let x = &mean + DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let t = StudentT::new(mean.iter().copied().collect(), tensor_of(&cov), 1e6).unwrap();
        let lib = student_t_log_pdf(x.as_slice(), &t).unwrap();
        prop_assert!((lib - gaussian_log_pdf(&x, &mean, &cov)).abs() < 1e-3);
    }

    #[test]
    fn scale_posterior_moments(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (2, 2);
        let means: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let covs: Vec<DMatrix<f64>> = (0..k).map(|_| random_spd(&mut rng, d)).collect();
        let nu: Vec<f64> = (0..k).map(|_| rng.gen_range(2.5..20.0)).collect();
        let params = smm_params(vec![0.5, 0.5], nu, &means, &covs);
        let enc = EncoderStats {
            mu_x: Tensor::row((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            log_std_x: Tensor::row((0..d).map(|_| rng.gen_range(-1.0..0.5)).collect()),
        };
        let stats = PosteriorStats::compute(&enc, &params).unwrap();
        for j in 0..k {
            let (a, b) = (stats.alpha[j], stats.beta.get(0, j));
            let dist = GammaDist::new(a, b).unwrap();
            let n = 200_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_gamma(&mut rng, &dist).unwrap()).collect();
            let mean_u = draws.iter().sum::<f64>() / n as f64;
            let mean_log = draws.iter().map(|u| u.ln()).sum::<f64>() / n as f64;
            prop_assert!((mean_u - a / b).abs() < 1e-2 * (a / b).max(1.0), "E[u] {mean_u} vs {}", a / b);
            prop_assert!((mean_log - (digamma(a) - b.ln())).abs() < 1e-2);
        }
    }

    #[test]
    fn splits_partition_rows(labels in prop::collection::vec(0usize..4, 20..120), folds in 1usize..=5, frac in 0.1f64..=1.0, seed in 0u64..1000) {
        let n = labels.len();
        let ds = Dataset::new(Tensor::zeros(&[n, 1]), Some(labels), "p").unwrap();
        let plan = kfold_split(&ds, folds, frac, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut all: Vec<usize> = plan.dev.iter().chain(&plan.test).chain(plan.train_pool().iter()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.unlabeled.iter().all(|r| plan.train_pool().contains(r)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn training_keeps_mixture_valid_and_is_repeatable(
        seed in 0u64..1000,
        components in 1usize..=4,
        latent_dim in 1usize..=3,
        supervised in any::<bool>(),
    ) {
        let ds = small_pinwheel(seed);
        let cfg = TrainConfig {
            components: components.max(if supervised { 3 } else { 1 }),
            latent_dim,
            hidden_layers: vec![16],
            batch_size: 32,
            epochs: 3,
            warm_start_iters: 4,
            mode: if supervised { TrainingMode::Supervised } else { TrainingMode::Unsupervised },
            seed,
            ..Default::default()
        };
        let a = train(&ds, cfg.clone()).unwrap();
        let p = materialize_params(&a.checkpoint.model().unwrap().mixture).unwrap();
        prop_assert!(p.nu.iter().all(|&nu| nu > 2.0 && nu.is_finite()));
        prop_assert!((p.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.pi.iter().all(|&w| w > 0.0));
        for l in &p.sigma_chol {
            let l = DMatrix::from_row_slice(latent_dim, latent_dim, l.data());
            prop_assert!((&l * l.transpose()).cholesky().is_some());
        }
        prop_assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
        let b = train(&ds, cfg).unwrap();
        prop_assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }
}
