//! Agreement of the three gradient estimators with a closed-form gradient
//! on a concave quadratic fitness.

use espn::es::{self, ESConfig, Estimator, SIGMA_FD};

fn main() -> espn::Result<()> {
    let dim = 30;
    let center: Vec<f64> = (0..dim).map(|j| (j as f64 / dim as f64) - 0.5).collect();
    let weights: Vec<f64> = (0..dim).map(|j| 1.0 + (j % 5) as f64).collect();
    let fitness = |z: &[f32]| -> espn::Result<f64> {
        Ok(-z
            .iter()
            .zip(&center)
            .zip(&weights)
            .map(|((&zi, &ci), &wi)| wi * (zi as f64 - ci).powi(2))
            .sum::<f64>())
    };
    let mu = vec![0.3f32; dim];
    // grad F = -2 w (mu - c), componentwise
    let exact: Vec<f64> = (0..dim).map(|j| -2.0 * weights[j] * (mu[j] as f64 - center[j])).collect();
    let exact_norm = exact.iter().map(|g| g * g).sum::<f64>().sqrt();
    let cosine = |grad: &[f32]| {
        let dot: f64 = grad.iter().zip(&exact).map(|(&g, &x)| g as f64 * x).sum();
        let n: f64 = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        dot / (n * exact_norm)
    };

    let cfg = ESConfig {
        alpha: 1.0,
        sigma: 0.05,
        pop_per_worker: 4096,
        workers: 1,
        estimator: Estimator::Wsr,
        seed: 1,
    };
    let mut pop = es::sample_population(dim, &cfg, 0);
    let mut buf = Vec::new();
    for i in 0..pop.len() {
        pop.candidate_params(&mu, i, &mut buf);
        pop.rewards[i] = fitness(&buf)?;
    }
    let wsr = es::wsr_gradient(&pop, &cfg);
    let nes = es::nes_gradient(&pop, &cfg);
    let fd = es::fd_gradient(&mu, fitness, SIGMA_FD)?;

    println!("closed-form gradient norm {exact_norm:.4}");
    println!("wsr (n={}): cosine {:.5}", wsr.population_size_used, cosine(&wsr.grad));
    println!("nes (n={}): cosine {:.5}", nes.population_size_used, cosine(&nes.grad));
    let fd_err = fd
        .grad
        .iter()
        .zip(&exact)
        .map(|(&g, &x)| (g as f64 - x).powi(2))
        .sum::<f64>()
        .sqrt()
        / exact_norm;
    println!("fd  ({} evals): relative L2 error {fd_err:.2e}", fd.population_size_used);
    Ok(())
}
