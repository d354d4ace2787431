//! Dataset pipeline end to end on a small synthetic corpus: generate raw
//! glyphs, ingest into the class cache, sample an N-way K-shot episode.

use espn::episodes::{self, Split};
use espn::rng::{self, stream};
use espn::synth::{self, SynthConfig};

fn main() -> espn::Result<()> {
    let root = std::env::temp_dir().join("espn_episode_example");
    let raw = root.join("raw");
    let cache = root.join("cache");
    std::fs::create_dir_all(&root)?;

    // 25 characters -> 100 classes after rotation augmentation
    synth::generate_raw_corpus(&raw, 25, 0, &SynthConfig::default())?;
    let (train, val, test) =
        episodes::prepare_dataset_with_splits(&raw, &cache, 0, 25, [60, 20, 20])?;
    println!(
        "cache at {}: {} train / {} val / {} test classes, 20 images each",
        cache.display(),
        train.len(),
        val.len(),
        test.len()
    );

    let manifest = episodes::read_manifest(&cache)?;
    println!("split seed {} recorded in manifest", manifest.seed);

    let reloaded = episodes::load_class_table(&cache, Split::Train)?;
    let mut r = rng::stream_rng(&[manifest.seed, 0, stream::EPISODE]);
    let ep = episodes::sample_episode(&reloaded, 5, 5, 15, &mut r)?;
    println!(
        "episode: {}-way {}-shot, support batch {:?}, query batch {:?}",
        ep.way,
        ep.shot,
        ep.support.dims(),
        ep.query.dims()
    );
    println!("class ids behind labels 0..{}: {:?}", ep.way, ep.class_ids);
    let ink: f32 = ep.support.data().iter().sum::<f32>() / ep.support.data().len() as f32;
    println!("mean support ink fraction {ink:.3}");
    Ok(())
}
