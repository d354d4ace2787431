//! Episodic training, evaluation and the hyperparameter sweep harness.
//!
//! One step = one training episode: sample the episode, sample the
//! population around the mean model, evaluate candidate fitnesses on the
//! worker pool, reduce to a gradient estimate, step the mean model.
//! Validation and test always run the mean model itself, never a
//! population sample.
//!
//! Every random decision is drawn from a counter-based stream keyed by
//! (run seed, step/epoch index, stream label), so an interrupted run
//! resumed from its last epoch checkpoint replays the remaining steps
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dist::{self, ReduceMode, StepReport, WorkerPool};
use crate::episodes::{self, ClassTable, Split};
use crate::error::{EspnError, Result};
use crate::es::{self, ESConfig, Estimator};
use crate::nncore::EmbeddingNet;
use crate::protonet::{self, Metric};
use crate::rng::{self, stream};

pub const DATA_DIR_ENV: &str = "ESPN_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub es: ESConfig,
    pub reduce_mode: ReduceMode,
    pub channels: usize,
    pub metric: Metric,
    pub train_way: usize,
    pub test_way: usize,
    pub shot: usize,
    pub query: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes_per_epoch: usize,
    pub test_episodes: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// The reference schedule: 200 epochs of 100 training episodes and one
    /// validation episode, tested on 200 episodes at 5-way.
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data/cache"));
        RunConfig {
            es: ESConfig {
                alpha: 1.0,
                sigma: 0.01,
                pop_per_worker: 32,
                workers: 8,
                estimator: Estimator::Wsr,
                seed: 0,
            },
            reduce_mode: ReduceMode::GradAllreduce,
            channels: 16,
            metric: Metric::Euclidean,
            train_way: 5,
            test_way: 5,
            shot: 5,
            query: 15,
            epochs: 200,
            episodes_per_epoch: 100,
            val_episodes_per_epoch: 1,
            test_episodes: 200,
            data_dir,
            out_dir: PathBuf::from("runs/run"),
        }
    }
}

impl RunConfig {
    /// Reads a flat key=value config file ('#' starts a comment line).
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EspnError::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one field by its config-file key. Unknown keys are errors.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| EspnError::Config(format!("{key}={value}: {e}")))
        }
        match key {
            "alpha" => self.es.alpha = num(key, value)?,
            "sigma" => self.es.sigma = num(key, value)?,
            "pop_per_worker" => self.es.pop_per_worker = num(key, value)?,
            "workers" => self.es.workers = num(key, value)?,
            "estimator" => self.es.estimator = value.parse()?,
            "seed" => self.es.seed = num(key, value)?,
            "reduce_mode" => self.reduce_mode = value.parse()?,
            "channels" => self.channels = num(key, value)?,
            "metric" => self.metric = value.parse()?,
            "train_way" => self.train_way = num(key, value)?,
            "test_way" => self.test_way = num(key, value)?,
            "shot" => self.shot = num(key, value)?,
            "query" => self.query = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = num(key, value)?,
            "val_episodes_per_epoch" => self.val_episodes_per_epoch = num(key, value)?,
            "test_episodes" => self.test_episodes = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(EspnError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.es.validate()?;
        if self.train_way < 2 || self.test_way < 2 {
            return Err(EspnError::Config("way must be at least 2".into()));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(EspnError::Config("shot and query must be positive".into()));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.test_episodes == 0 {
            return Err(EspnError::Config(
                "epochs, episodes_per_epoch and test_episodes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepReport),
    Val(ValRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    format_version: u32,
    next_epoch: u64,
    checkpoint: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_params: Vec<f32>,
    /// Step records produced by this call (excludes epochs that were
    /// already complete when resuming).
    pub steps: Vec<StepReport>,
    pub val_history: Vec<ValRecord>,
    pub checkpoint_path: PathBuf,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub total_steps: u64,
    pub skipped_steps: usize,
    pub final_val: Option<ValRecord>,
    pub wall_time_s: f64,
    /// Which counter-based stream each random decision reads, for replay.
    pub seed_ledger: BTreeMap<String, String>,
}

/// Trains the mean model. If `out_dir/state.json` exists the run continues
/// from the recorded epoch checkpoint; otherwise it starts fresh from the
/// seeded initialization.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let wall_start = Instant::now();
    let net = EmbeddingNet::new(cfg.channels)?;
    let train_table = episodes::load_class_table(&cfg.data_dir, Split::Train)?;
    let val_table = episodes::load_class_table(&cfg.data_dir, Split::Validation)?;
    fs::create_dir_all(&cfg.out_dir)?;

    let state_path = cfg.out_dir.join("state.json");
    let (mut mu, start_epoch) = if state_path.exists() {
        let state: TrainState = serde_json::from_reader(BufReader::new(File::open(&state_path)?))
            .map_err(|e| EspnError::Checkpoint(format!("state.json: {e}")))?;
        let (ch, values) = checkpoint::load(&cfg.out_dir.join(&state.checkpoint))?;
        if ch as usize != cfg.channels {
            return Err(EspnError::Checkpoint(format!(
                "checkpoint has {ch} channels, config wants {}",
                cfg.channels
            )));
        }
        log::info!("resuming at epoch {} from {}", state.next_epoch, state.checkpoint);
        (values, state.next_epoch)
    } else {
        (net.init_params(cfg.es.seed).into_values(), 0)
    };
    if mu.len() != net.param_count() {
        return Err(EspnError::ParamSize {
            expected: net.param_count(),
            got: mu.len(),
        });
    }

    let pool = WorkerPool::from_config(&cfg.es, cfg.reduce_mode);
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(cfg.out_dir.join("metrics.jsonl"))?,
    );

    let mut outcome_steps = Vec::new();
    let mut val_history = Vec::new();
    let mut skipped_steps = 0usize;
    let mut checkpoint_path = cfg.out_dir.join(format!("epoch_{:04}.ckpt", start_epoch.max(1) - 1));
    let episodes_per_epoch = cfg.episodes_per_epoch as u64;

    for epoch in start_epoch..cfg.epochs as u64 {
        for i in 0..episodes_per_epoch {
            let step = epoch * episodes_per_epoch + i;
            let t0 = Instant::now();
            let mut ep_rng = rng::stream_rng(&[cfg.es.seed, step, stream::EPISODE]);
            let episode =
                episodes::sample_episode(&train_table, cfg.train_way, cfg.shot, cfg.query, &mut ep_rng)?;

            // mean-model pass for the logged train loss/accuracy
            let (train_loss, train_accuracy) =
                match protonet::episode_loss(&net, &mu, &episode, cfg.metric) {
                    Ok(r) => (r.loss, r.accuracy),
                    Err(e) if is_skippable(&e) => (f64::NAN, f64::NAN),
                    Err(e) => return Err(e),
                };

            let fitness = |params: &[f32]| {
                protonet::episode_loss(&net, params, &episode, cfg.metric).map(|r| r.fitness())
            };

            let mut report = StepReport {
                step_index: step,
                epoch,
                train_loss,
                train_accuracy,
                reward_mean: f64::NAN,
                reward_std: f64::NAN,
                reward_min: f64::NAN,
                reward_max: f64::NAN,
                grad_norm: 0.0,
                per_worker_grad_norms: None,
                wall_time_s: 0.0,
                skipped: false,
            };
            match dist::evaluate_sharded(&mu, &cfg.es, step, &pool, fitness) {
                Ok(pop) => {
                    let red = dist::reduce_gradients(&pool, &pop, &cfg.es)?;
                    report.reward_mean = red.reduced.reward_mean;
                    report.reward_std = red.reduced.reward_std;
                    report.reward_min = pop.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
                    report.reward_max = pop.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    report.grad_norm = red.reduced.norm();
                    report.per_worker_grad_norms = red
                        .per_worker
                        .as_ref()
                        .map(|ws| ws.iter().map(|g| g.norm()).collect());
                    match es::apply_update(&mu, &red.reduced, cfg.es.alpha) {
                        Ok(next) => mu = next,
                        Err(EspnError::NonFiniteUpdate) => report.skipped = true,
                        Err(e) => return Err(e),
                    }
                }
                Err(e) if is_skippable(&e) => report.skipped = true,
                Err(e) => return Err(e),
            }
            if report.skipped {
                skipped_steps += 1;
                log::warn!("step {step}: non-finite fitness or update, mean model retained");
            }
            report.wall_time_s = t0.elapsed().as_secs_f64();
            write_record(&mut metrics, &MetricRecord::Step(report.clone()))?;
            outcome_steps.push(report);
        }

        // validation with the mean model
        let mut vloss = 0.0;
        let mut vacc = 0.0;
        for j in 0..cfg.val_episodes_per_epoch {
            let mut r = rng::stream_rng(&[cfg.es.seed, epoch, j as u64, stream::VAL]);
            let ep = episodes::sample_episode(&val_table, cfg.test_way, cfg.shot, cfg.query, &mut r)?;
            let res = protonet::episode_loss(&net, &mu, &ep, cfg.metric)?;
            vloss += res.loss;
            vacc += res.accuracy;
        }
        let denom = cfg.val_episodes_per_epoch.max(1) as f64;
        let val = ValRecord {
            epoch,
            loss: vloss / denom,
            accuracy: vacc / denom,
        };
        write_record(&mut metrics, &MetricRecord::Val(val.clone()))?;
        val_history.push(val);

        checkpoint_path = cfg.out_dir.join(format!("epoch_{epoch:04}.ckpt"));
        checkpoint::save(&checkpoint_path, cfg.channels as u32, &mu)?;
        let state = TrainState {
            format_version: 1,
            next_epoch: epoch + 1,
            checkpoint: checkpoint_path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        };
        let sf = File::create(&state_path)?;
        serde_json::to_writer_pretty(BufWriter::new(sf), &state)
            .map_err(|e| EspnError::Checkpoint(format!("state.json write: {e}")))?;
    }
    metrics.flush()?;

    let summary = RunSummary {
        config: cfg.clone(),
        total_steps: cfg.epochs as u64 * episodes_per_epoch,
        skipped_steps,
        final_val: val_history.last().cloned(),
        wall_time_s: wall_start.elapsed().as_secs_f64(),
        seed_ledger: seed_ledger(),
    };
    let sf = File::create(cfg.out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(sf), &summary)
        .map_err(|e| EspnError::Checkpoint(format!("summary write: {e}")))?;

    Ok(TrainOutcome {
        final_params: mu,
        steps: outcome_steps,
        val_history,
        checkpoint_path,
        skipped_steps,
    })
}

fn seed_ledger() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("init".into(), "[seed, INIT]".into());
    m.insert("split".into(), "[seed, SPLIT]".into());
    m.insert("train_episode".into(), "[seed, step, EPISODE]".into());
    m.insert("population".into(), "[seed, step, candidate, POPULATION]".into());
    m.insert("val_episode".into(), "[seed, epoch, index, VAL]".into());
    m.insert("test_episode".into(), "[seed, index, EVAL]".into());
    m
}

fn write_record(w: &mut impl IoWrite, rec: &MetricRecord) -> Result<()> {
    let line = serde_json::to_string(rec)
        .map_err(|e| EspnError::Checkpoint(format!("metrics serialization: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

fn is_skippable(e: &EspnError) -> bool {
    match e {
        EspnError::NonFinite { .. }
        | EspnError::NonFiniteFitness { .. }
        | EspnError::NonFiniteUpdate => true,
        EspnError::WorkerFailure { source, .. } => is_skippable(source),
        _ => false,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub episodes: usize,
    pub shot: usize,
    pub way: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation over the per-episode accuracies.
    pub std_accuracy: f64,
    pub mean_loss: f64,
    #[serde(skip)]
    pub per_episode_accuracy: Vec<f64>,
}

/// Runs the mean model over `cfg.test_episodes` episodes of the split.
pub fn evaluate(params: &[f32], cfg: &RunConfig, split: Split) -> Result<EvalReport> {
    let net = EmbeddingNet::new(cfg.channels)?;
    if params.len() != net.param_count() {
        return Err(EspnError::ParamSize {
            expected: net.param_count(),
            got: params.len(),
        });
    }
    let table = episodes::load_class_table(&cfg.data_dir, split)?;
    evaluate_on_table(params, cfg, &table)
}

/// As `evaluate` but against an already-loaded class table.
pub fn evaluate_on_table(params: &[f32], cfg: &RunConfig, table: &ClassTable) -> Result<EvalReport> {
    let net = EmbeddingNet::new(cfg.channels)?;
    let mut accs = Vec::with_capacity(cfg.test_episodes);
    let mut loss_sum = 0.0;
    for e in 0..cfg.test_episodes {
        let mut r = rng::stream_rng(&[cfg.es.seed, e as u64, stream::EVAL]);
        let ep = episodes::sample_episode(table, cfg.test_way, cfg.shot, cfg.query, &mut r)?;
        let res = protonet::episode_loss(&net, params, &ep, cfg.metric)?;
        accs.push(res.accuracy);
        loss_sum += res.loss;
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        split: table.split,
        episodes: cfg.test_episodes,
        shot: cfg.shot,
        way: cfg.test_way,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        mean_loss: loss_sum / n,
        per_episode_accuracy: accs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub overrides: Vec<(String, String)>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Parses a sweep grid: one run per line, whitespace-separated key=value
/// overrides applied on top of the base config.
pub fn parse_grid(text: &str) -> Result<Vec<Vec<(String, String)>>> {
    let mut grid = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                EspnError::Config(format!("grid token '{tok}' is not key=value"))
            })?;
            row.push((k.to_string(), v.to_string()));
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Sequential sweep over config overrides. Individual run failures are
/// recorded in the row and the sweep continues; the table is also written
/// to `base.out_dir/sweep.json`.
pub fn sweep(base: &RunConfig, grid: &[Vec<(String, String)>]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(EspnError::Config("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (index, overrides) in grid.iter().enumerate() {
        let attempt = (|| -> Result<(f64, f64)> {
            let mut cfg = base.clone();
            for (k, v) in overrides {
                cfg.apply_override(k, v)?;
            }
            cfg.out_dir = base.out_dir.join(format!("sweep_{index:02}"));
            let out = train(&cfg)?;
            let rep = evaluate(&out.final_params, &cfg, Split::Test)?;
            Ok((rep.mean_accuracy, rep.std_accuracy))
        })();
        let row = match attempt {
            Ok((mean, std)) => SweepRow {
                index,
                overrides: overrides.clone(),
                mean_accuracy: Some(mean),
                std_accuracy: Some(std),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep run {index} failed: {e}");
                SweepRow {
                    index,
                    overrides: overrides.clone(),
                    mean_accuracy: None,
                    std_accuracy: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    fs::create_dir_all(&base.out_dir)?;
    let f = File::create(base.out_dir.join("sweep.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &rows)
        .map_err(|e| EspnError::Checkpoint(format!("sweep table write: {e}")))?;
    Ok(rows)
}

pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("idx  config                                   accuracy\n");
    for row in rows {
        let cfg: Vec<String> = row.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let result = match (row.mean_accuracy, row.std_accuracy, &row.error) {
            (Some(m), Some(s), _) => format!("{m:.4} +/- {s:.4}"),
            (_, _, Some(e)) => format!("FAILED: {e}"),
            _ => "FAILED".into(),
        };
        out.push_str(&format!("{:<4} {:<40} {}\n", row.index, cfg.join(" "), result));
    }
    out
}

/// Converts the step records of a metrics.jsonl file to CSV. Returns the
/// number of data rows written.
pub fn export_csv(metrics_path: &Path, csv_path: &Path) -> Result<usize> {
    let reader = BufReader::new(File::open(metrics_path)?);
    let mut w = BufWriter::new(File::create(csv_path)?);
    writeln!(
        w,
        "step,epoch,train_loss,train_accuracy,reward_mean,reward_std,grad_norm,wall_time_s,skipped"
    )?;
    let mut rows = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| EspnError::Checkpoint(format!("metrics parse: {e}")))?;
        if rec.get("kind").and_then(|k| k.as_str()) != Some("step") {
            continue;
        }
        let f = |key: &str| {
            rec.get(key)
                .and_then(|v| v.as_f64())
                .map(|v| v.to_string())
                .unwrap_or_else(|| "nan".into())
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            f("step_index"),
            f("epoch"),
            f("train_loss"),
            f("train_accuracy"),
            f("reward_mean"),
            f("reward_std"),
            f("grad_norm"),
            f("wall_time_s"),
            rec.get("skipped").and_then(|v| v.as_bool()).unwrap_or(false)
        )?;
        rows += 1;
    }
    w.flush()?;
    Ok(rows)
}

/// Spearman rank correlation of `values` against time, with a one-sided
/// permutation p-value for negative trend (P[rho_perm <= rho_observed]).
pub fn spearman_trend(values: &[f64], permutations: usize, seed: u64) -> (f64, f64) {
    assert!(values.len() >= 3, "trend test needs at least 3 points");
    let rho = spearman_rho(&ranks(values));
    let mut r = rng::stream_rng(&[seed, 0x5EA2]);
    let mut perm = ranks(values);
    let mut at_most = 1usize; // the identity permutation counts
    for _ in 0..permutations {
        for i in (1..perm.len()).rev() {
            perm.swap(i, rand::Rng::gen_range(&mut r, 0..=i));
        }
        if spearman_rho(&perm) <= rho {
            at_most += 1;
        }
    }
    (rho, at_most as f64 / (permutations + 1) as f64)
}

/// Average ranks, ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of the rank vector against positions 1..n.
fn spearman_rho(rank_values: &[f64]) -> f64 {
    let n = rank_values.len() as f64;
    let time_mean = (n + 1.0) / 2.0;
    let rank_mean = rank_values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den_t = 0.0;
    let mut den_r = 0.0;
    for (i, &r) in rank_values.iter().enumerate() {
        let dt = (i + 1) as f64 - time_mean;
        let dr = r - rank_mean;
        num += dt * dr;
        den_t += dt * dt;
        den_r += dr * dr;
    }
    if den_r == 0.0 {
        return 0.0;
    }
    num / (den_t * den_r).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    /// Tiny prepared dataset: 10 characters -> 40 classes, 20/10/10 split.
    fn tiny_dataset(root: &Path) -> PathBuf {
        let raw = root.join("raw");
        let cache = root.join("cache");
        synth::generate_raw_corpus(&raw, 10, 99, &SynthConfig::default()).unwrap();
        episodes::prepare_dataset_with_splits(&raw, &cache, 7, 10, [20, 10, 10]).unwrap();
        cache
    }

    fn tiny_config(cache: &Path, out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.es.pop_per_worker = 2;
        cfg.es.workers = 2;
        cfg.es.seed = 5;
        cfg.channels = 16;
        cfg.train_way = 3;
        cfg.test_way = 3;
        cfg.shot = 1;
        cfg.query = 2;
        cfg.epochs = 2;
        cfg.episodes_per_epoch = 3;
        cfg.val_episodes_per_epoch = 1;
        cfg.test_episodes = 4;
        cfg.data_dir = cache.to_path_buf();
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn config_file_parse_override_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# comment\nalpha = 0.5\nestimator=nes\nmetric=cosine\nepochs=3\n",
        )
        .unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.es.alpha, 0.5);
        assert_eq!(cfg.es.estimator, Estimator::Nes);
        assert_eq!(cfg.metric, Metric::Cosine);
        assert_eq!(cfg.epochs, 3);
        cfg.apply_override("sigma", "0.25").unwrap();
        assert_eq!(cfg.es.sigma, 0.25);
        assert!(matches!(
            cfg.apply_override("learning_rate", "1"),
            Err(EspnError::Config(_))
        ));
        assert!(matches!(
            cfg.apply_override("alpha", "fast"),
            Err(EspnError::Config(_))
        ));
    }

    #[test]
    fn bad_config_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "alpha 0.5\n").unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(EspnError::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());

        // uninterrupted 2-epoch run
        let cfg_a = tiny_config(&cache, &dir.path().join("a"));
        let out_a = train(&cfg_a).unwrap();

        // identical config, separate out_dir: bit-identical
        let cfg_b = tiny_config(&cache, &dir.path().join("b"));
        let out_b = train(&cfg_b).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out_a.final_params), bits(&out_b.final_params));
        assert_eq!(out_a.steps.len(), out_b.steps.len());
        for (x, y) in out_a.steps.iter().zip(&out_b.steps) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }

        // interrupted run: epoch 0 only, then resume through epoch 1
        let mut cfg_c = tiny_config(&cache, &dir.path().join("c"));
        cfg_c.epochs = 1;
        let part = train(&cfg_c).unwrap();
        assert_eq!(part.steps.len(), 3);
        cfg_c.epochs = 2;
        let rest = train(&cfg_c).unwrap();
        assert_eq!(rest.steps.len(), 3, "resume must not replay finished epochs");
        assert_eq!(bits(&rest.final_params), bits(&out_a.final_params));
        for (x, y) in out_a.steps[3..].iter().zip(&rest.steps) {
            assert_eq!(x.step_index, y.step_index);
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
        assert_eq!(
            out_a.val_history.last().unwrap().accuracy,
            rest.val_history.last().unwrap().accuracy
        );
    }

    #[test]
    fn zero_alpha_is_rejected_but_tiny_alpha_keeps_mu_close() {
        // alpha must be positive by config contract; the no-learning case
        // is exercised through the estimator itself.
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());
        let mut cfg = tiny_config(&cache, &dir.path().join("z"));
        cfg.es.alpha = 0.0;
        assert!(matches!(train(&cfg), Err(EspnError::Config(_))));
    }

    #[test]
    fn evaluate_is_deterministic_and_checks_param_size() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());
        let cfg = tiny_config(&cache, &dir.path().join("e"));
        let net = EmbeddingNet::new(cfg.channels).unwrap();
        let params = net.init_params(3).into_values();
        let a = evaluate(&params, &cfg, Split::Test).unwrap();
        let b = evaluate(&params, &cfg, Split::Test).unwrap();
        assert_eq!(a.mean_accuracy, b.mean_accuracy);
        assert_eq!(a.std_accuracy, b.std_accuracy);
        assert_eq!(a.per_episode_accuracy, b.per_episode_accuracy);
        assert!(matches!(
            evaluate(&params[1..], &cfg, Split::Test),
            Err(EspnError::ParamSize { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_through_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());
        let cfg = tiny_config(&cache, &dir.path().join("t"));
        let out = train(&cfg).unwrap();
        let (ch, loaded) = checkpoint::load(&out.checkpoint_path).unwrap();
        assert_eq!(ch as usize, cfg.channels);
        let direct = evaluate(&out.final_params, &cfg, Split::Test).unwrap();
        let via_ckpt = evaluate(&loaded, &cfg, Split::Test).unwrap();
        assert_eq!(direct.mean_accuracy, via_ckpt.mean_accuracy);
    }

    #[test]
    fn sweep_continues_past_failures_and_emits_all_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());
        let mut base = tiny_config(&cache, &dir.path().join("s"));
        base.epochs = 1;
        base.episodes_per_epoch = 2;
        let grid = parse_grid("alpha=0.5\nno_such_key=1\nsigma=0.02\n").unwrap();
        assert_eq!(grid.len(), 3);
        let rows = sweep(&base, &grid).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].mean_accuracy.is_some());
        assert!(rows[1].error.is_some());
        assert!(rows[2].mean_accuracy.is_some());
        assert!(base.out_dir.join("sweep.json").exists());
        let table = render_sweep_table(&rows);
        assert!(table.contains("FAILED"));
        assert!(sweep(&base, &[]).is_err());
    }

    #[test]
    fn metrics_file_round_trips_and_exports_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cache = tiny_dataset(dir.path());
        let cfg = tiny_config(&cache, &dir.path().join("m"));
        let out = train(&cfg).unwrap();
        let metrics_path = cfg.out_dir.join("metrics.jsonl");
        let text = fs::read_to_string(&metrics_path).unwrap();
        let mut steps = 0;
        let mut vals = 0;
        for line in text.lines() {
            match serde_json::from_str::<MetricRecord>(line).unwrap() {
                MetricRecord::Step(_) => steps += 1,
                MetricRecord::Val(_) => vals += 1,
            }
        }
        assert_eq!(steps, out.steps.len());
        assert_eq!(vals, cfg.epochs);
        let csv_path = cfg.out_dir.join("steps.csv");
        let rows = export_csv(&metrics_path, &csv_path).unwrap();
        assert_eq!(rows, out.steps.len());
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), rows + 1);
        assert!(cfg.out_dir.join("summary.json").exists());
    }

    #[test]
    fn spearman_detects_monotone_trends() {
        let down: Vec<f64> = (0..12).map(|i| 10.0 - i as f64).collect();
        let (rho, p) = spearman_trend(&down, 5000, 1);
        assert!((rho + 1.0).abs() < 1e-12);
        assert!(p < 0.01, "p = {p}");
        let up: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let (rho_up, p_up) = spearman_trend(&up, 5000, 1);
        assert!((rho_up - 1.0).abs() < 1e-12);
        assert!(p_up > 0.9, "p = {p_up}");
        let flat = vec![1.0; 10];
        let (rho_flat, _) = spearman_trend(&flat, 100, 1);
        assert_eq!(rho_flat, 0.0);
    }
}
