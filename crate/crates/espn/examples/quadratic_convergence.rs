//! ES on a toy quadratic: the mean model walks from distance 1 to the
//! optimum using only fitness evaluations.

use espn::es::{self, ESConfig, Estimator};

fn main() -> espn::Result<()> {
    let dim = 20;
    let target: Vec<f32> = (0..dim).map(|j| ((j * 37 + 11) % 19) as f32 / 19.0).collect();
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();

    // start at unit distance from the optimum
    let offset: Vec<f32> = (0..dim).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let scale = 1.0 / norm(&offset) as f32;
    let mut mu: Vec<f32> = target.iter().zip(&offset).map(|(&t, &o)| t + o * scale).collect();

    let cfg = ESConfig {
        alpha: 0.05,
        sigma: 0.05,
        pop_per_worker: 512,
        workers: 1,
        estimator: Estimator::Nes,
        seed: 3,
    };
    let fitness = |z: &[f32]| -> f64 {
        -z.iter().zip(&target).map(|(&zi, &ti)| ((zi - ti) as f64).powi(2)).sum::<f64>()
    };

    let mut buf = Vec::new();
    for step in 0..=200u64 {
        if step % 20 == 0 {
            let d: Vec<f32> = mu.iter().zip(&target).map(|(&m, &t)| m - t).collect();
            println!("step {step:>3}  distance to optimum {:.5}", norm(&d));
        }
        let mut pop = es::sample_population(dim, &cfg, step);
        for i in 0..pop.len() {
            pop.candidate_params(&mu, i, &mut buf);
            pop.rewards[i] = fitness(&buf);
        }
        let grad = es::nes_gradient(&pop, &cfg);
        mu = es::apply_update(&mu, &grad, cfg.alpha)?;
    }
    Ok(())
}
