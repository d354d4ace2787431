//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; the examples/ directory shows the same entry points as code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use espn::costmodel::{self, CostInputs, BYTES_PER_SCALAR};
use espn::episodes::{self, Split};
use espn::error::{EspnError, Result};
use espn::es::{self, ESConfig, Estimator};
use espn::nncore::EmbeddingNet;
use espn::synth::{self, SynthConfig};
use espn::trainer::{self, RunConfig};
use espn::{checkpoint, rng};

#[derive(Parser)]
#[command(name = "espn", about = "Evolution-strategies training for prototypical networks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic raw image corpus (stand-in for the
    /// handwritten-character archive, same directory shape).
    SynthData {
        /// Output directory for the raw alphabet/character/*.png tree.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1623)]
        characters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ingest a raw image tree into the binary class cache.
    PrepareData {
        /// Raw directory holding alphabet/character/*.png.
        #[arg(long)]
        raw: PathBuf,
        /// Cache directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the train/val/test class split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mean model per a run config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, key=value; repeatable, applied in order.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a grid of config overrides sequentially.
    Sweep {
        /// Grid file: one run per line of whitespace-separated key=value.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check the gradient estimators against a closed-form quadratic.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        dim: usize,
        #[arg(long, default_value_t = 4096)]
        population: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the analytical memory-cost comparison.
    CostModel {
        #[arg(long, default_value_t = 64)]
        channels: u64,
        #[arg(long, default_value_t = 10)]
        way: u64,
        /// Population size P.
        #[arg(long, default_value_t = 64)]
        population: u64,
        /// Task length in inner-loop steps.
        #[arg(long, default_value_t = 1)]
        task_len: u64,
        /// Measured per-step intermediate-tensor bytes; defaults to the
        /// embedding network's activation footprint for one image.
        #[arg(long)]
        g: Option<u64>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| EspnError::Config(format!("override '{ov}' is not key=value")))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, characters, seed } => {
            synth::generate_raw_corpus(&out, characters, seed, &SynthConfig::default())?;
            println!("wrote {characters} characters x 20 images under {}", out.display());
        }
        Command::PrepareData { raw, out, seed } => {
            let (train, val, test) = episodes::prepare_dataset(&raw, &out, seed)?;
            println!(
                "cache ready at {}: {} train / {} val / {} test classes",
                out.display(),
                train.len(),
                val.len(),
                test.len()
            );
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let out = trainer::train(&cfg)?;
            if let Some(v) = out.val_history.last() {
                println!(
                    "final validation: loss {:.4}, accuracy {:.4} (epoch {})",
                    v.loss, v.accuracy, v.epoch
                );
            }
            println!(
                "checkpoint: {} ({} skipped steps)",
                out.checkpoint_path.display(),
                out.skipped_steps
            );
        }
        Command::Eval {
            checkpoint: ckpt,
            split,
            config,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref(), &overrides)?;
            let split: Split = split.parse()?;
            let (channels, params) = checkpoint::load(&ckpt)?;
            cfg.channels = channels as usize;
            let rep = trainer::evaluate(&params, &cfg, split)?;
            println!(
                "{:?} split, {}-way {}-shot over {} episodes: accuracy {:.4} +/- {:.4} (loss {:.4})",
                rep.split, rep.way, rep.shot, rep.episodes, rep.mean_accuracy, rep.std_accuracy, rep.mean_loss
            );
        }
        Command::Sweep { grid, config, overrides } => {
            let base = load_config(config.as_ref(), &overrides)?;
            let text = std::fs::read_to_string(&grid)?;
            let rows = trainer::sweep(&base, &trainer::parse_grid(&text)?)?;
            print!("{}", trainer::render_sweep_table(&rows));
            println!("table written to {}", base.out_dir.join("sweep.json").display());
        }
        Command::GradCheck {
            dim,
            population,
            sigma,
            seed,
        } => {
            grad_check(dim, population, sigma, seed)?;
        }
        Command::CostModel {
            channels,
            way,
            population,
            task_len,
            g,
            json,
        } => {
            let g = match g {
                Some(g) => g,
                None => EmbeddingNet::new(channels as usize)?.activation_bytes(1),
            };
            let net = EmbeddingNet::new(channels as usize)?;
            let inputs = CostInputs {
                g,
                l: task_len,
                d_phi: net.param_count() as u64,
                d_psi: costmodel::protonet_state_size(channels, way),
                p: population,
                bytes_per_scalar: BYTES_PER_SCALAR,
            };
            let report = costmodel::compute_costs(&inputs)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| EspnError::Config(format!("json: {e}")))?
                );
            } else {
                print!("{}", report.render_text());
            }
        }
    }
    Ok(())
}

/// Estimates the gradient of a random concave quadratic with every
/// estimator and reports agreement with the closed form.
fn grad_check(dim: usize, population: usize, sigma: f32, seed: u64) -> Result<()> {
    use rand::Rng;
    let mut r = rng::stream_rng(&[seed, 0x6C]);
    // A = B^T B + I is positive definite; F(z) = -(z-c)^T A (z-c)
    let b: Vec<f64> = (0..dim * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut a = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in 0..dim {
                s += b[k * dim + i] * b[k * dim + j];
            }
            a[i * dim + j] = s / dim as f64;
        }
    }
    let c: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mu: Vec<f32> = (0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let fitness = |z: &[f32]| -> Result<f64> {
        let d: Vec<f64> = z.iter().zip(&c).map(|(&zi, &ci)| zi as f64 - ci).collect();
        let mut q = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                q += d[i] * a[i * dim + j] * d[j];
            }
        }
        Ok(-q)
    };
    // closed form: grad F = -2 A (mu - c)
    let d: Vec<f64> = mu.iter().zip(&c).map(|(&m, &ci)| m as f64 - ci).collect();
    let exact: Vec<f64> = (0..dim)
        .map(|i| -2.0 * (0..dim).map(|j| a[i * dim + j] * d[j]).sum::<f64>())
        .collect();
    let exact_norm = exact.iter().map(|g| g * g).sum::<f64>().sqrt();

    let cos = |est: &[f32]| {
        let dot: f64 = est.iter().zip(&exact).map(|(&e, &x)| e as f64 * x).sum();
        let en: f64 = est.iter().map(|&e| (e as f64).powi(2)).sum::<f64>().sqrt();
        dot / (en * exact_norm)
    };

    let cfg = ESConfig {
        alpha: 1.0,
        sigma,
        pop_per_worker: population,
        workers: 1,
        estimator: Estimator::Wsr,
        seed,
    };
    let mut buf = Vec::new();
    let mut pop = es::sample_population(dim, &cfg, 0);
    for i in 0..pop.len() {
        pop.candidate_params(&mu, i, &mut buf);
        pop.rewards[i] = fitness(&buf)?;
    }
    let wsr = es::wsr_gradient(&pop, &cfg);
    let nes = es::nes_gradient(&pop, &cfg);
    let fd = es::fd_gradient(&mu, fitness, es::SIGMA_FD)?;
    let fd_rel = {
        let diff: f64 = fd
            .grad
            .iter()
            .zip(&exact)
            .map(|(&g, &x)| (g as f64 - x).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / exact_norm
    };
    println!("quadratic grad check: D={dim}, n={population}, sigma={sigma}");
    println!("  wsr  cosine with closed form  {:.6}", cos(&wsr.grad));
    println!("  nes  cosine with closed form  {:.6}", cos(&nes.grad));
    println!("  fd   relative L2 error        {fd_rel:.6e} ({} evaluations)", fd.population_size_used);
    Ok(())
}
