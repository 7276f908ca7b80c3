//! Fitting a Gaussian mixture with EM and converting it into the initial
//! Student-t mixture variables.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::data::match_clusters_to_classes;
use tvae::data::{confusion_matrix, gen_surrogate_attribution, SurrogateConfig};
use tvae::mixture::{gmm_em_fit, materialize_params, GmmOptions};

fn main() -> Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6);
    let cfg = SurrogateConfig {
        classes: 4,
        obs_dim: 2,
        latent_dim: 2,
        per_class_min: 300,
        per_class_max: 300,
        nu_min: 1e6,
        nu_max: 1e6,
        separation: 4.0,
        nonlinearity: 0.0,
        noise_std: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = gen_surrogate_attribution(&mut rng, &cfg)?;
    let fit = gmm_em_fit(&ds.observations, 4, &mut rng, &GmmOptions::default())?;
    println!("log-likelihood per row: {:?}", fit.log_likelihood.iter().map(|l| (l * 1e3).round() / 1e3).collect::<Vec<_>>());

    let labels = ds.labels.as_ref().unwrap();
    let matching = match_clusters_to_classes(&confusion_matrix(&fit.hard_assignments(), labels, 4));
    println!("agreement with the generating classes: {:.3}", matching.accuracy);

    let raw = fit.to_raw_params(0.01, 5.0, 1e-6)?;
    let smm = materialize_params(&raw)?;
    for k in 0..4 {
        let sigma = smm.sigma(k);
        println!(
            "component {k}: pi {:.3}  nu {:.2}  mean {:?}  diag(Sigma) [{:.3}, {:.3}]",
            smm.pi[k],
            smm.nu[k],
            smm.mu.row_slice(k).iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            sigma.get(0, 0),
            sigma.get(1, 1)
        );
    }
    Ok(())
}
