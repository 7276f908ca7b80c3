//! Finite-difference check of every gradient of the training loss.

use anyhow::{bail, Result};
use tvae::cli::{gradcheck_instance, GradcheckArgs, GRADCHECK_TOLERANCE};
use tvae::elbo::{gradient_check, CrossEntropyWeights, LossOptions};

fn main() -> Result<()> {
    let args = GradcheckArgs {
        obs_dim: 5,
        hidden: vec![8, 8],
        latent_dim: 3,
        components: 4,
        rows: 8,
        step: 1e-5,
        seed: 11,
        out: None,
        corrupt: false,
    };
    let (model, o, eps) = gradcheck_instance(&args)?;
    let opts = LossOptions { l1_coeff: 0.01, ..Default::default() };
    for corrupt in [false, true] {
        let report = gradient_check(&model, &o, &eps, CrossEntropyWeights::Responsibilities, &opts, args.step, corrupt)?;
        let worst = report.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
        println!("corrupted: {corrupt:<5}  worst relative error {worst:.2e}");
        for g in &report {
            println!("  {:<8} {:>4} entries  {:.2e}", g.group, g.entries, g.max_rel_err);
        }
        if !corrupt && worst > GRADCHECK_TOLERANCE {
            bail!("analytic gradients disagree with finite differences");
        }
    }
    Ok(())
}
