//! A Student-t as a Gaussian scale mixture: sampling `u ~ Gamma(ν/2, ν/2)`
//! then `x ~ N(μ, Σ/u)` reproduces the closed-form density.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::distributions::{sample_gamma, standard_normal, student_t_log_pdf, GammaDist, StudentT};
use tvae::tensor::Tensor;

fn main() -> Result<()> {
    let nu = 3.0;
    let t = StudentT::new(vec![0.0], Tensor::identity(1), nu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let mix = GammaDist::new(nu / 2.0, nu / 2.0)?;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let u = sample_gamma(&mut rng, &mix)?;
        xs.push(standard_normal(&mut rng) / u.sqrt());
    }

    println!("{:>6} {:>12} {:>12}", "x", "histogram", "density");
    let width = 0.25;
    for i in -8..=8 {
        let centre = i as f64 * 0.5;
        let hits = xs.iter().filter(|x| (**x - centre).abs() < width / 2.0).count();
        let empirical = hits as f64 / (n as f64 * width);
        let exact = student_t_log_pdf(&[centre], &t)?.exp();
        println!("{centre:>6.2} {empirical:>12.5} {exact:>12.5}");
    }
    let tail = xs.iter().filter(|x| x.abs() > 5.0).count() as f64 / n as f64;
    println!("P(|x| > 5): {tail:.4} (a unit Gaussian gives 5.7e-7)");
    Ok(())
}
