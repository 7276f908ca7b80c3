//! Stratified folds with partial labels: semi-supervised training on each
//! fold, scored on the held-out fold.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::data::{gen_surrogate_attribution, kfold_split, SurrogateConfig};
use tvae::elbo::TrainingMode;
use tvae::training::{evaluate, TrainConfig, Trainer};

fn main() -> Result<()> {
    let data_cfg = SurrogateConfig {
        classes: 4,
        obs_dim: 12,
        latent_dim: 3,
        per_class_min: 100,
        per_class_max: 160,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = gen_surrogate_attribution(&mut rng, &data_cfg)?;
    let plan = kfold_split(&ds, 5, 0.5, &mut rng)?;
    let cfg = TrainConfig {
        mode: TrainingMode::SemiSupervised { supervised_epochs: 20 },
        components: 4,
        latent_dim: 3,
        hidden_layers: vec![32, 32],
        epochs: 24,
        stepsize: 3e-3,
        batch_size: 32,
        ..Default::default()
    };

    let mut errors = Vec::new();
    for fold in 0..plan.folds.len() {
        let rows = plan.fold_train(fold);
        let train_ds = ds.subset(&rows);
        let labeled = plan.labeled_positions(&rows);
        let mut t = Trainer::new(&train_ds, TrainConfig { seed: fold as u64, ..cfg.clone() })?;
        t.set_labeled_rows(labeled.clone());
        while t.epoch < cfg.epochs {
            t.run_epoch(&train_ds)?;
        }
        let err = evaluate(&t.model, &ds.subset(plan.fold_valid(fold)), false)?.error_rate;
        println!("fold {fold}: {} train rows, {} labeled, error {:.2}%", rows.len(), labeled.len(), 100.0 * err);
        errors.push(err);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errors.len() - 1) as f64).sqrt();
    println!("error {:.2} ± {:.2} %", 100.0 * mean, 100.0 * sd);
    Ok(())
}
