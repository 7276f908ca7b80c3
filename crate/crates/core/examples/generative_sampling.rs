//! Fit a model, then draw `z → u → x → o` from it and compare the generated
//! cloud with the data.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvae::cli::write_samples;
use tvae::data::{gen_pinwheel, PinwheelConfig};
use tvae::training::{train, TrainConfig};

fn moments(rows: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64) {
    let v: Vec<(f64, f64)> = rows.collect();
    let n = v.len() as f64;
    let r = v.iter().map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / n;
    let (mx, my) = (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n);
    (mx, my, r)
}

fn main() -> Result<()> {
    let ds = gen_pinwheel(&mut ChaCha8Rng::seed_from_u64(4), &PinwheelConfig::default())?;
    let cfg = TrainConfig { epochs: 20, hidden_layers: vec![128, 128], seed: 4, ..Default::default() };
    let model = train(&ds, cfg)?.checkpoint.model()?;

    let mut buf = Vec::new();
    write_samples(&model, 2000, &mut ChaCha8Rng::seed_from_u64(5), &mut buf)?;
    let text = String::from_utf8(buf)?;
    let generated = text.lines().skip(1).map(|line| {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        (f[4], f[5])
    });
    let data = (0..ds.len()).map(|i| (ds.observations.get(i, 0), ds.observations.get(i, 1)));
    let (dx, dy, dr) = moments(data);
    let (gx, gy, gr) = moments(generated);
    println!("data:      mean ({dx:+.3}, {dy:+.3})  mean radius {dr:.3}");
    println!("generated: mean ({gx:+.3}, {gy:+.3})  mean radius {gr:.3}");
    println!("first rows:\n{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
