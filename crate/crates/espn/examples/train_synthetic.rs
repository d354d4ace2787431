//! End-to-end few-shot training on a small synthetic corpus, including a
//! checkpoint resume. Scaled down to finish in a few minutes on a laptop;
//! see the README for the full desk-scale configuration.

use espn::episodes::{self, Split};
use espn::synth::{self, SynthConfig};
use espn::trainer::{self, RunConfig};

fn main() -> espn::Result<()> {
    let root = std::env::temp_dir().join("espn_train_example");
    let _ = std::fs::remove_dir_all(&root);
    let raw = root.join("raw");
    let cache = root.join("cache");

    println!("generating 60-character corpus...");
    synth::generate_raw_corpus(&raw, 60, 0, &SynthConfig::default())?;
    episodes::prepare_dataset_with_splits(&raw, &cache, 0, 60, [160, 40, 40])?;

    let mut cfg = RunConfig::default();
    cfg.data_dir = cache;
    cfg.out_dir = root.join("run");
    cfg.es.pop_per_worker = 8;
    cfg.es.workers = 8;
    cfg.train_way = 5;
    cfg.test_way = 5;
    cfg.shot = 5;
    cfg.query = 5;
    cfg.epochs = 2;
    cfg.episodes_per_epoch = 25;
    cfg.test_episodes = 40;

    println!("training {} epochs x {} episodes, n = {}...", cfg.epochs, cfg.episodes_per_epoch, cfg.es.population_size());
    let out = trainer::train(&cfg)?;
    for v in &out.val_history {
        println!("epoch {:>2}  val loss {:.4}  val accuracy {:.4}", v.epoch, v.loss, v.accuracy);
    }

    let report = trainer::evaluate(&out.final_params, &cfg, Split::Test)?;
    println!(
        "test: {:.4} +/- {:.4} over {} episodes",
        report.mean_accuracy, report.std_accuracy, report.episodes
    );

    // training resumes from the last epoch checkpoint recorded in state.json
    cfg.epochs = 3;
    println!("resuming for one more epoch...");
    let more = trainer::train(&cfg)?;
    println!(
        "epoch {:>2}  val accuracy {:.4} (checkpoint {})",
        more.val_history.last().unwrap().epoch,
        more.val_history.last().unwrap().accuracy,
        more.checkpoint_path.display()
    );
    Ok(())
}
