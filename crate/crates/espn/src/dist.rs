//! Sharded population evaluation and gradient reduction.
//!
//! Workers are simulated evaluation units inside one process: candidate i
//! belongs to worker floor(i / pop_per_worker), every candidate of a step
//! evaluates the same fitness (same episode), and the only cross-worker
//! communication is the reduction.
//!
//! Two reduction modes exist. `grad_allreduce` has each worker compute a
//! gradient estimate over its own shard (local reward mean and std, no
//! reward exchange) and averages the per-worker gradients — the AllReduce
//! protocol. `reward_allgather` gathers all rewards and computes one
//! global estimate, the resampling-free reward-exchange baseline; in this
//! mode the distributed layer is numerically identical to running the
//! estimator single-threaded on the full population.

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EspnError, Result};
use crate::es::{
    self, Displacements, ESConfig, Estimator, GradientEstimate, Population,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    GradAllreduce,
    RewardAllgather,
}

impl std::str::FromStr for ReduceMode {
    type Err = EspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad_allreduce" => Ok(ReduceMode::GradAllreduce),
            "reward_allgather" => Ok(ReduceMode::RewardAllgather),
            other => Err(EspnError::Config(format!(
                "unknown reduce mode '{other}' (expected grad_allreduce|reward_allgather)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorkerPool {
    pub workers: usize,
    pub pop_per_worker: usize,
    pub reduce_mode: ReduceMode,
}

impl WorkerPool {
    pub fn from_config(cfg: &ESConfig, reduce_mode: ReduceMode) -> Self {
        WorkerPool {
            workers: cfg.workers,
            pop_per_worker: cfg.pop_per_worker,
            reduce_mode,
        }
    }

    pub fn owner_of(&self, candidate: usize) -> usize {
        candidate / self.pop_per_worker
    }

    pub fn population_size(&self) -> usize {
        self.workers * self.pop_per_worker
    }
}

/// Samples the step's population and evaluates every candidate's fitness,
/// sharded across the pool. Any worker failure aborts the whole step with
/// the smallest failing candidate index; no partial gradients escape.
pub fn evaluate_sharded<F>(
    mu: &[f32],
    cfg: &ESConfig,
    step_index: u64,
    pool: &WorkerPool,
    fitness: F,
) -> Result<Population>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    let mut pop = es::sample_population(mu.len(), cfg, step_index);
    evaluate_population(mu, &mut pop, pool, &fitness)?;
    Ok(pop)
}

/// Fills the rewards of an already-sampled population.
pub fn evaluate_population<F>(
    mu: &[f32],
    pop: &mut Population,
    pool: &WorkerPool,
    fitness: &F,
) -> Result<()>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    let n = pop.len();
    // contiguous shards; the last may be short when n is not a multiple
    // (finite differences forces n = D_phi + 1)
    let shard = if n % pool.workers == 0 {
        n / pool.workers
    } else {
        n.div_ceil(pool.workers)
    };
    let pop_ref = &*pop;
    let results: Vec<Result<Vec<f64>>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(shard)
        .map(|indices| {
            let mut buf = Vec::with_capacity(mu.len());
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                pop_ref.candidate_params(mu, i, &mut buf);
                let r = fitness(&buf).map_err(|e| EspnError::WorkerFailure {
                    candidate: i,
                    source: Box::new(e),
                })?;
                out.push(r);
            }
            Ok(out)
        })
        .collect();
    let mut rewards = Vec::with_capacity(n);
    for res in results {
        rewards.extend(res?);
    }
    pop.rewards = rewards;
    Ok(())
}

/// Reduces an evaluated population to one gradient estimate according to
/// the pool's mode. Finite-difference populations always assemble
/// globally: the unperturbed mean candidate lives on a single shard, so
/// per-shard statistics are not defined for them.
pub fn reduce_gradients(pool: &WorkerPool, pop: &Population, cfg: &ESConfig) -> Result<ReducedGradient> {
    if matches!(pop.displacements, Displacements::AxisAligned { .. }) {
        let grad = es::fd_from_population(pop)?;
        return Ok(ReducedGradient {
            reduced: grad,
            per_worker: None,
        });
    }
    match pool.reduce_mode {
        ReduceMode::RewardAllgather => {
            let reduced = global_estimate(pop, cfg);
            Ok(ReducedGradient {
                reduced,
                per_worker: None,
            })
        }
        ReduceMode::GradAllreduce => {
            let m = match &pop.displacements {
                Displacements::Gaussian(m) => m,
                Displacements::AxisAligned { .. } => unreachable!(),
            };
            let n = pop.len();
            assert_eq!(
                n,
                pool.population_size(),
                "grad_allreduce requires equal shards"
            );
            let ppw = pool.pop_per_worker;
            let dim = pop.dim();
            let mut locals = Vec::with_capacity(pool.workers);
            for w in 0..pool.workers {
                let rows = m.slice(s![w * ppw..(w + 1) * ppw, ..]);
                let rewards = &pop.rewards[w * ppw..(w + 1) * ppw];
                let local = match cfg.estimator {
                    Estimator::Wsr => es::wsr_from_parts(rows, rewards),
                    Estimator::Nes => {
                        let sub = Population {
                            displacements: Displacements::Gaussian(rows.to_owned()),
                            candidate_seeds: pop.candidate_seeds[w * ppw..(w + 1) * ppw].to_vec(),
                            rewards: rewards.to_vec(),
                        };
                        es::nes_gradient(&sub, cfg)
                    }
                    Estimator::FiniteDiff => unreachable!(),
                };
                locals.push(local);
            }
            // AllReduce: mean of the per-worker gradients, accumulated in
            // fixed worker order
            let mut acc = vec![0.0f64; dim];
            for local in &locals {
                for (a, &g) in acc.iter_mut().zip(&local.grad) {
                    *a += g as f64;
                }
            }
            let inv_w = 1.0 / pool.workers as f64;
            let (mean, std) = {
                let n = pop.rewards.len() as f64;
                let mean = pop.rewards.iter().sum::<f64>() / n;
                let var = pop.rewards.iter().map(|&r| (r - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            };
            let reduced = GradientEstimate {
                grad: acc.iter().map(|&a| (a * inv_w) as f32).collect(),
                estimator: cfg.estimator,
                population_size_used: n,
                reward_mean: mean,
                reward_std: std,
                degenerate: locals.iter().all(|l| l.degenerate),
            };
            Ok(ReducedGradient {
                reduced,
                per_worker: Some(locals),
            })
        }
    }
}

fn global_estimate(pop: &Population, cfg: &ESConfig) -> GradientEstimate {
    match cfg.estimator {
        Estimator::Wsr => es::wsr_gradient(pop, cfg),
        Estimator::Nes => es::nes_gradient(pop, cfg),
        Estimator::FiniteDiff => unreachable!("handled by the axis-aligned path"),
    }
}

/// The reduction result: the gradient applied to the mean model, plus the
/// per-worker local gradients in grad_allreduce mode.
#[derive(Debug, Clone)]
pub struct ReducedGradient {
    pub reduced: GradientEstimate,
    pub per_worker: Option<Vec<GradientEstimate>>,
}

/// Deserializes JSON null back to NaN: serde_json writes non-finite floats
/// as null, which skipped steps produce.
fn null_as_nan<'de, D>(d: D) -> std::result::Result<f64, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::Deserialize as _;
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Per-step record emitted by the trainer, one JSON line per step. Full
/// gradient vectors stay in memory; the serialized form carries norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: u64,
    pub epoch: u64,
    #[serde(deserialize_with = "null_as_nan")]
    pub train_loss: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub train_accuracy: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub reward_mean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub reward_std: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub reward_min: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub reward_max: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_worker_grad_norms: Option<Vec<f64>>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub skipped: bool,
}

/// Per-worker sampling FLOP proxy and per-step communication bytes for the
/// three distribution schemes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommCostRow {
    pub scheme: String,
    pub samples_per_worker: u64,
    pub bytes_per_step: u64,
}

/// (a) per-worker gradients + AllReduce, (b) OpenAI-style reward broadcast
/// with full resampling, (c) reward allgather without resampling.
pub fn comm_cost(pool: &WorkerPool, d_phi: u64, n: u64) -> Vec<CommCostRow> {
    let ppw = pool.pop_per_worker as u64;
    vec![
        CommCostRow {
            scheme: "grad_allreduce".into(),
            samples_per_worker: ppw * d_phi,
            bytes_per_step: d_phi * 4,
        },
        CommCostRow {
            scheme: "openai_es_resample".into(),
            samples_per_worker: n * d_phi,
            bytes_per_step: n * 4,
        },
        CommCostRow {
            scheme: "reward_allgather".into(),
            samples_per_worker: ppw * d_phi,
            bytes_per_step: n * 4 + d_phi * 4,
        },
    ]
}
