//! Unsupervised clustering of noisy spiral arms.
//!
//! `cargo run --release --example pinwheel_clustering -- [seed] [epochs]`

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::data::{gen_pinwheel, PinwheelConfig};
use tvae::training::{evaluate, train, TrainConfig};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let epochs: usize = std::env::args().nth(2).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let ds = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(seed), &PinwheelConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        seed,
        init_decoder_log_std: -2.0,
        ..Default::default()
    };
    let out = train(&ds, cfg)?;
    let eval = evaluate(&out.checkpoint.model()?, &ds, true)?;
    println!("matched accuracy {:.4}", 1.0 - eval.error_rate);
    println!("cluster -> arm {:?}", eval.permutation);
    Ok(())
}
