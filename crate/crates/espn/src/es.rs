//! Population sampling and gradient estimation.
//!
//! Three estimators share one population representation:
//!
//! * WSR — displacements weighted by standardized rewards (the training
//!   estimator),
//! * NES — the Gaussian log-likelihood-trick estimator, kept as a
//!   cross-check oracle,
//! * finite differences — one axis-aligned probe per parameter plus the
//!   unperturbed mean candidate, assembled as per-component forward
//!   differences.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EspnError, Result};
use crate::rng::{self, stream};

/// Reward standard deviations below this carry no direction information;
/// the estimators return a zero gradient flagged as degenerate instead of
/// dividing by them.
pub const REWARD_STD_GUARD: f64 = 1e-8;

/// Default finite-difference probe size.
pub const SIGMA_FD: f32 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Wsr,
    FiniteDiff,
    Nes,
}

impl std::str::FromStr for Estimator {
    type Err = EspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsr" => Ok(Estimator::Wsr),
            "finite_diff" | "fd" => Ok(Estimator::FiniteDiff),
            "nes" => Ok(Estimator::Nes),
            other => Err(EspnError::Config(format!(
                "unknown estimator '{other}' (expected wsr|finite_diff|nes)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ESConfig {
    /// Step size applied to the gradient estimate.
    pub alpha: f32,
    /// Standard deviation of the Gaussian displacement per parameter.
    pub sigma: f32,
    pub pop_per_worker: usize,
    pub workers: usize,
    pub estimator: Estimator,
    pub seed: u64,
}

impl ESConfig {
    /// Total population size n = pop_per_worker * workers. For finite
    /// differences the population is forced to D_phi + 1 instead.
    pub fn population_size(&self) -> usize {
        self.pop_per_worker * self.workers
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(EspnError::Config("alpha must be a positive real".into()));
        }
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(EspnError::Config("sigma must be a positive real".into()));
        }
        if self.pop_per_worker == 0 || self.workers == 0 {
            return Err(EspnError::Config(
                "pop_per_worker and workers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How candidate displacements are stored.
#[derive(Debug, Clone)]
pub enum Displacements {
    /// Dense n x D_phi matrix of Gaussian displacements.
    Gaussian(Array2<f32>),
    /// Finite-difference probes: candidate i < D_phi displaces parameter i
    /// by sigma_fd; the last candidate is the unperturbed mean model. Kept
    /// implicit because the dense matrix would be D_phi^2 floats.
    AxisAligned { dim: usize, sigma_fd: f32 },
}

/// A sampled population with per-candidate rewards (NaN until evaluated).
#[derive(Debug, Clone)]
pub struct Population {
    pub displacements: Displacements,
    pub candidate_seeds: Vec<u64>,
    pub rewards: Vec<f64>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn dim(&self) -> usize {
        match &self.displacements {
            Displacements::Gaussian(m) => m.ncols(),
            Displacements::AxisAligned { dim, .. } => *dim,
        }
    }

    /// Writes candidate i's parameters (mu + displacement) into `out`.
    pub fn candidate_params(&self, mu: &[f32], i: usize, out: &mut Vec<f32>) {
        out.clear();
        out.extend_from_slice(mu);
        match &self.displacements {
            Displacements::Gaussian(m) => {
                for (o, &e) in out.iter_mut().zip(m.row(i)) {
                    *o += e;
                }
            }
            Displacements::AxisAligned { dim, sigma_fd } => {
                if i < *dim {
                    out[i] += sigma_fd;
                }
            }
        }
    }

    pub fn rewards_filled(&self) -> bool {
        self.rewards.iter().all(|r| r.is_finite())
    }

    fn gaussian(&self) -> &Array2<f32> {
        match &self.displacements {
            Displacements::Gaussian(m) => m,
            Displacements::AxisAligned { .. } => {
                panic!("estimator needs a Gaussian population, got finite-difference probes")
            }
        }
    }
}

/// Reward statistics attached to each gradient estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: Vec<f32>,
    pub estimator: Estimator,
    pub population_size_used: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// True when the reward spread underflowed the guard and the gradient
    /// was zeroed.
    pub degenerate: bool,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Samples the Gaussian population for one step. Candidate i's displacement
/// row comes from the stream keyed by (seed, step, i), so it is identical
/// no matter how candidates are later sharded across workers.
pub fn sample_population(mu_len: usize, cfg: &ESConfig, step_index: u64) -> Population {
    let n = cfg.population_size();
    match cfg.estimator {
        Estimator::FiniteDiff => {
            let n = mu_len + 1;
            Population {
                displacements: Displacements::AxisAligned {
                    dim: mu_len,
                    sigma_fd: SIGMA_FD,
                },
                candidate_seeds: (0..n as u64).collect(),
                rewards: vec![f64::NAN; n],
            }
        }
        Estimator::Wsr | Estimator::Nes => {
            let mut m = Array2::<f32>::zeros((n, mu_len));
            let mut seeds = Vec::with_capacity(n);
            for i in 0..n {
                let key = [cfg.seed, step_index, i as u64, stream::POPULATION];
                seeds.push(i as u64);
                let mut r = rng::stream_rng(&key);
                for e in m.row_mut(i) {
                    *e = r.sample::<f32, _>(StandardNormal) * cfg.sigma;
                }
            }
            Population {
                displacements: Displacements::Gaussian(m),
                candidate_seeds: seeds,
                rewards: vec![f64::NAN; n],
            }
        }
    }
}

fn reward_stats(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// WSR over an explicit (displacements, rewards) pair. Candidate
/// contributions are summed in index order so results are bit-stable.
pub fn wsr_from_parts(displacements: ArrayView2<'_, f32>, rewards: &[f64]) -> GradientEstimate {
    assert_eq!(displacements.nrows(), rewards.len());
    assert!(rewards.iter().all(|r| r.is_finite()), "rewards must be filled");
    let n = rewards.len();
    let dim = displacements.ncols();
    let (mean, std) = reward_stats(rewards);
    if std < REWARD_STD_GUARD {
        return GradientEstimate {
            grad: vec![0.0; dim],
            estimator: Estimator::Wsr,
            population_size_used: n,
            reward_mean: mean,
            reward_std: std,
            degenerate: true,
        };
    }
    let mut acc = vec![0.0f64; dim];
    for (row, &r) in displacements.rows().into_iter().zip(rewards) {
        let s = (r - mean) / std;
        for (a, &e) in acc.iter_mut().zip(row) {
            *a += s * e as f64;
        }
    }
    let inv_n = 1.0 / n as f64;
    GradientEstimate {
        grad: acc.iter().map(|&a| (a * inv_n) as f32).collect(),
        estimator: Estimator::Wsr,
        population_size_used: n,
        reward_mean: mean,
        reward_std: std,
        degenerate: false,
    }
}

/// The paper's estimator: grad = (1/n) sum_i ((F_i - mean) / std) * eps_i.
pub fn wsr_gradient(pop: &Population, _cfg: &ESConfig) -> GradientEstimate {
    wsr_from_parts(pop.gaussian().view(), &pop.rewards)
}

/// Log-likelihood-trick estimator for the isotropic Gaussian search
/// distribution: grad = (1/n) sum_i F_i * eps_i / sigma^2.
pub fn nes_gradient(pop: &Population, cfg: &ESConfig) -> GradientEstimate {
    let m = pop.gaussian();
    assert!(pop.rewards_filled(), "rewards must be filled");
    let n = pop.len();
    let dim = pop.dim();
    let (mean, std) = reward_stats(&pop.rewards);
    let inv_s2 = 1.0 / (cfg.sigma as f64 * cfg.sigma as f64);
    let mut acc = vec![0.0f64; dim];
    for (row, &r) in m.rows().into_iter().zip(&pop.rewards) {
        for (a, &e) in acc.iter_mut().zip(row) {
            *a += r * e as f64;
        }
    }
    let scale = inv_s2 / n as f64;
    GradientEstimate {
        grad: acc.iter().map(|&a| (a * scale) as f32).collect(),
        estimator: Estimator::Nes,
        population_size_used: n,
        reward_mean: mean,
        reward_std: std,
        degenerate: false,
    }
}

/// Assembles the finite-difference gradient from an evaluated axis-probe
/// population: component j = (F(mu + sigma_fd e_j) - F(mu)) / sigma_fd,
/// the mean candidate being the last. Differences are per-component
/// (no 1/n factor).
pub fn fd_from_population(pop: &Population) -> Result<GradientEstimate> {
    let (dim, sigma_fd) = match pop.displacements {
        Displacements::AxisAligned { dim, sigma_fd } => (dim, sigma_fd),
        Displacements::Gaussian(_) => panic!("finite differences need axis-aligned probes"),
    };
    if let Some(j) = pop.rewards.iter().position(|r| !r.is_finite()) {
        return Err(EspnError::NonFiniteFitness { param_index: j.min(dim) });
    }
    let f_mean_model = pop.rewards[dim];
    let inv = 1.0 / sigma_fd as f64;
    let grad: Vec<f32> = (0..dim)
        .map(|j| ((pop.rewards[j] - f_mean_model) * inv) as f32)
        .collect();
    let (mean, std) = reward_stats(&pop.rewards);
    Ok(GradientEstimate {
        grad,
        estimator: Estimator::FiniteDiff,
        population_size_used: dim + 1,
        reward_mean: mean,
        reward_std: std,
        degenerate: false,
    })
}

/// Finite differences against an arbitrary fitness callback: evaluates
/// D_phi + 1 candidates (each parameter nudged by sigma_fd, plus the
/// unperturbed mean model).
pub fn fd_gradient<F>(mu: &[f32], mut fitness: F, sigma_fd: f32) -> Result<GradientEstimate>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    assert!(sigma_fd > 0.0);
    let mut pop = Population {
        displacements: Displacements::AxisAligned {
            dim: mu.len(),
            sigma_fd,
        },
        candidate_seeds: (0..mu.len() as u64 + 1).collect(),
        rewards: vec![f64::NAN; mu.len() + 1],
    };
    let mut probe = mu.to_vec();
    let f0 = fitness(&probe)?;
    if !f0.is_finite() {
        return Err(EspnError::NonFiniteFitness { param_index: mu.len() });
    }
    pop.rewards[mu.len()] = f0;
    for j in 0..mu.len() {
        probe[j] = mu[j] + sigma_fd;
        let fj = fitness(&probe)?;
        probe[j] = mu[j];
        if !fj.is_finite() {
            return Err(EspnError::NonFiniteFitness { param_index: j });
        }
        pop.rewards[j] = fj;
    }
    fd_from_population(&pop)
}

/// mu' = mu + alpha * grad. Gradients estimate the fitness ascent
/// direction (fitness = -loss), so this is descent on the loss. Returns
/// the new vector; on a non-finite result the caller's mu is untouched.
pub fn apply_update(mu: &[f32], grad: &GradientEstimate, alpha: f32) -> Result<Vec<f32>> {
    assert_eq!(mu.len(), grad.grad.len());
    let next: Vec<f32> = mu
        .iter()
        .zip(&grad.grad)
        .map(|(&m, &g)| m + alpha * g)
        .collect();
    if !next.iter().all(|v| v.is_finite()) {
        return Err(EspnError::NonFiniteUpdate);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn cfg(n: usize, sigma: f32, seed: u64) -> ESConfig {
        ESConfig {
            alpha: 0.05,
            sigma,
            pop_per_worker: n,
            workers: 1,
            estimator: Estimator::Wsr,
            seed,
        }
    }

    fn fill_rewards<F: Fn(&[f32]) -> f64>(pop: &mut Population, mu: &[f32], f: F) {
        let mut buf = Vec::new();
        for i in 0..pop.len() {
            pop.candidate_params(mu, i, &mut buf);
            pop.rewards[i] = f(&buf);
        }
    }

    #[test]
    fn wsr_two_candidate_hand_case() {
        // eps1 = +e, eps2 = -e, rewards (1, -1): mean 0, std 1 -> grad = e
        let e = [0.3f32, -0.7, 1.1];
        let m = array![[0.3f32, -0.7, 1.1], [-0.3, 0.7, -1.1]];
        let est = wsr_from_parts(m.view(), &[1.0, -1.0]);
        // independent scalar recomputation
        for j in 0..3 {
            let expected = 0.5 * ((1.0) * e[j] as f64 + (-1.0) * (-e[j] as f64));
            assert_abs_diff_eq!(est.grad[j] as f64, expected, epsilon = 1e-7);
            assert_abs_diff_eq!(est.grad[j], e[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn wsr_zero_variance_is_flagged_zero() {
        let c = cfg(8, 0.1, 5);
        let mut pop = sample_population(4, &c, 0);
        pop.rewards.fill(3.25);
        let est = wsr_gradient(&pop, &c);
        assert!(est.degenerate);
        assert!(est.grad.iter().all(|&g| g == 0.0));
        assert!(est.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn wsr_linear_fitness_recovers_direction() {
        let dim = 10;
        let a: Vec<f32> = (0..dim).map(|j| (j as f32 - 4.5) * 0.2).collect();
        let c = cfg(10_000, 0.1, 7);
        let mu = vec![0.0f32; dim];
        let mut pop = sample_population(dim, &c, 0);
        fill_rewards(&mut pop, &mu, |z| {
            z.iter().zip(&a).map(|(&zi, &ai)| zi as f64 * ai as f64).sum()
        });
        let est = wsr_gradient(&pop, &c);
        let dot: f64 = est.grad.iter().zip(&a).map(|(&g, &ai)| g as f64 * ai as f64).sum();
        let na: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let cos = dot / (est.norm() * na);
        assert!(cos > 0.99, "cosine {cos}");
    }

    #[test]
    fn wsr_affine_reward_invariance() {
        let c = cfg(64, 0.05, 11);
        let mu = vec![0.0f32; 30];
        let mut pop = sample_population(30, &c, 3);
        fill_rewards(&mut pop, &mu, |z| {
            -z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
        });
        let base = wsr_gradient(&pop, &c);
        let mut scaled = pop.clone();
        for r in &mut scaled.rewards {
            *r = 3.7 * *r + 42.0;
        }
        let est = wsr_gradient(&scaled, &c);
        let diff: f64 = base
            .grad
            .iter()
            .zip(&est.grad)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff / base.norm() < 1e-6, "relative diff {}", diff / base.norm());
    }

    #[test]
    fn nes_single_term() {
        // n=1, F=1, eps=e, sigma=1 -> grad = e
        let m = array![[0.5f32, -1.5]];
        let pop = Population {
            displacements: Displacements::Gaussian(m),
            candidate_seeds: vec![0],
            rewards: vec![1.0],
        };
        let c = cfg(1, 1.0, 0);
        let est = nes_gradient(&pop, &c);
        assert_abs_diff_eq!(est.grad[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(est.grad[1], -1.5, epsilon = 1e-7);
    }

    #[test]
    fn nes_linear_fitness_within_three_standard_errors() {
        let dim = 6;
        let a: Vec<f32> = vec![0.8, -0.3, 0.1, 0.0, -1.2, 0.5];
        let c = cfg(100_000, 0.2, 13);
        let mu = vec![0.0f32; dim];
        let mut pop = sample_population(dim, &c, 0);
        fill_rewards(&mut pop, &mu, |z| {
            z.iter().zip(&a).map(|(&zi, &ai)| zi as f64 * ai as f64).sum()
        });
        let est = nes_gradient(&pop, &c);
        let m = pop.gaussian();
        let inv_s2 = 1.0 / (0.2f64 * 0.2);
        for j in 0..dim {
            // empirical standard error of the per-candidate terms
            let terms: Vec<f64> = m
                .rows()
                .into_iter()
                .zip(&pop.rewards)
                .map(|(row, &r)| r * row[j] as f64 * inv_s2)
                .collect();
            let mean = terms.iter().sum::<f64>() / terms.len() as f64;
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / terms.len() as f64;
            let se = (var / terms.len() as f64).sqrt();
            assert!(
                (est.grad[j] as f64 - a[j] as f64).abs() <= 3.0 * se,
                "component {j}: {} vs {} (se {se})",
                est.grad[j],
                a[j]
            );
        }
    }

    #[test]
    fn nes_constant_fitness_has_small_gradient() {
        let dim = 8;
        let c = cfg(100_000, 0.1, 17);
        let mut pop = sample_population(dim, &c, 0);
        pop.rewards.fill(2.5);
        let est = nes_gradient(&pop, &c);
        // E[grad] = 0; per-component SE = |F| * sigma / (sigma^2 sqrt(n))
        let se = 2.5 / (0.1 * (100_000f64).sqrt());
        for &g in &est.grad {
            assert!((g as f64).abs() < 3.0 * se, "{g} exceeds 3 SE {se}");
        }
    }

    #[test]
    fn fd_quadratic_hand_case() {
        // F(z) = -||z||^2, mu = (1, 0)
        let mu = [1.0f32, 0.0];
        let est = fd_gradient(
            &mu,
            |z| Ok(-z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()),
            0.001,
        )
        .unwrap();
        assert_abs_diff_eq!(est.grad[0] as f64, -2.001, epsilon = 1e-3);
        assert_abs_diff_eq!(est.grad[1] as f64, -0.001, epsilon = 1e-3);
        assert_eq!(est.population_size_used, 3);
    }

    #[test]
    fn fd_affine_fitness_is_exact() {
        let a = [0.25f32, -0.5, 2.0];
        let mu = [0.1f32, 0.2, -0.3];
        let est = fd_gradient(
            &mu,
            |z| {
                Ok(z.iter()
                    .zip(&a)
                    .map(|(&zi, &ai)| zi as f64 * ai as f64)
                    .sum::<f64>()
                    + 1.5)
            },
            0.001,
        )
        .unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(est.grad[j] as f64, a[j] as f64, epsilon = 1e-4);
        }
    }

    #[test]
    fn fd_non_finite_probe_names_parameter() {
        let mu = [0.0f32, 0.0];
        let err = fd_gradient(
            &mu,
            |z| {
                if z[1] != 0.0 {
                    Ok(f64::NAN)
                } else {
                    Ok(0.0)
                }
            },
            0.001,
        );
        assert!(matches!(err, Err(EspnError::NonFiniteFitness { param_index: 1 })));
    }

    #[test]
    fn apply_update_identity_and_unit_step() {
        let mu = vec![1.0f32, -2.0, 3.0];
        let grad = GradientEstimate {
            grad: vec![0.5, 0.5, -0.5],
            estimator: Estimator::Wsr,
            population_size_used: 2,
            reward_mean: 0.0,
            reward_std: 1.0,
            degenerate: false,
        };
        assert_eq!(apply_update(&mu, &grad, 0.0).unwrap(), mu);
        let zero = vec![0.0f32; 3];
        assert_eq!(apply_update(&zero, &grad, 1.0).unwrap(), grad.grad);
    }

    #[test]
    fn apply_update_rejects_non_finite() {
        let grad = GradientEstimate {
            grad: vec![f32::INFINITY],
            estimator: Estimator::Wsr,
            population_size_used: 1,
            reward_mean: 0.0,
            reward_std: 1.0,
            degenerate: false,
        };
        assert!(matches!(
            apply_update(&[0.0], &grad, 1.0),
            Err(EspnError::NonFiniteUpdate)
        ));
    }

    #[test]
    fn population_sampling_statistics_and_purity() {
        let c = cfg(100, 0.01, 23);
        let pop = sample_population(10_000, &c, 0);
        let m = pop.gaussian();
        let n = (m.nrows() * m.ncols()) as f64;
        let mean: f64 = m.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = m.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.05, "sample std {std}");
        // mu is never touched by sampling: candidate params are mu + eps
        let mu = vec![1.0f32; 10_000];
        let mut buf = Vec::new();
        pop.candidate_params(&mu, 3, &mut buf);
        assert!(mu.iter().all(|&v| v == 1.0));
        assert_ne!(buf, mu);
    }

    #[test]
    fn candidate_rows_independent_of_worker_count() {
        let one = ESConfig {
            workers: 1,
            pop_per_worker: 8,
            ..cfg(0, 0.02, 31)
        };
        let eight = ESConfig {
            workers: 8,
            pop_per_worker: 1,
            ..one
        };
        let a = sample_population(16, &one, 5);
        let b = sample_population(16, &eight, 5);
        assert_eq!(a.gaussian(), b.gaussian());
    }

    #[test]
    fn estimator_determinism() {
        let c = cfg(32, 0.05, 41);
        let mu = vec![0.5f32; 12];
        let run = || {
            let mut pop = sample_population(12, &c, 9);
            fill_rewards(&mut pop, &mu, |z| {
                -z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
            });
            wsr_gradient(&pop, &c).grad
        };
        assert_eq!(run(), run());
    }
}
