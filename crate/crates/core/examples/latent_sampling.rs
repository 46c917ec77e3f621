//! Diagonal Gaussians: closed-form KL and temperature-scaled sampling.

use lyricjam::latent::{self, DiagonalGaussian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lyricjam::Result<()> {
    let q = DiagonalGaussian::new(vec![0.5, -1.0, 2.0], vec![0.8, 1.5, 0.3])?;
    let p = DiagonalGaussian::new(vec![0.0, -0.5, 1.0], vec![1.0, 1.0, 0.5])?;
    println!("KL(q || N(0, I)) = {:.6}", latent::kl_to_standard_normal(&q));
    println!("KL(q || p)       = {:.6}", latent::kl_between(&q, &p)?);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for tau in [0.0, 0.5, 1.0] {
        let n = 20_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| latent::sample(&q, tau, &mut rng)).collect();
        let mean0 = draws.iter().map(|z| z[0]).sum::<f64>() / n as f64;
        let var0 = draws.iter().map(|z| (z[0] - mean0).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!("tau {tau}: first coordinate mean {mean0:.3}, variance {var0:.3} (expected {:.3})", (tau * 0.8f64).powi(2));
    }
    Ok(())
}
