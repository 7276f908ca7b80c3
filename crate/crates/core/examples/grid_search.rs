//! Ranking a small hyperparameter grid by dev error; rerunning skips
//! finished cells.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::cli::grid::cmd_gridsearch;
use tvae::cli::GridArgs;
use tvae::data::{gen_surrogate_attribution, save_csv, SurrogateConfig};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = std::env::temp_dir().join("tvae-grid-example");
    std::fs::create_dir_all(&dir)?;
    let cfg = SurrogateConfig {
        classes: 3,
        obs_dim: 8,
        latent_dim: 2,
        per_class_min: 80,
        per_class_max: 120,
        separation: 5.0,
        ..Default::default()
    };
    let ds = gen_surrogate_attribution(&mut ChaCha8Rng::seed_from_u64(1), &cfg)?;
    save_csv(&ds, dir.join("data.csv"))?;
    std::fs::write(
        dir.join("template.toml"),
        "mode = \"supervised\"\ncomponents = 3\nhidden_layers = [32]\nepochs = 15\nbatch_size = 32\n",
    )?;
    std::fs::write(dir.join("grid.toml"), "stepsize = [0.01, 0.001]\nl1_coeff = [0.0, 0.001]\n")?;

    let args = GridArgs {
        data: dir.join("data.csv"),
        template: Some(dir.join("template.toml")),
        grid: dir.join("grid.toml"),
        seed: 3,
        jobs: 2,
        label_fraction: 1.0,
        out_dir: Some(dir.join("runs")),
    };
    let rows = cmd_gridsearch(&args)?;
    println!("{} cells, results in {}", rows.len(), dir.join("runs/results.csv").display());
    Ok(())
}
