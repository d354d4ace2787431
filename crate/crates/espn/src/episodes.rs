//! Omniglot-style ingestion, rotation augmentation, class splits and
//! N-way K-shot episode sampling.
//!
//! The raw directory is expected to hold `alphabet/character/*.png`
//! grayscale images, 20 per character (ink dark on light background).
//! Each character yields four classes (0/90/180/270 degree rotations);
//! images are resized to 32x32, inverted so ink is 1 and background 0,
//! and cached one binary file per class.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EspnError, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor4;

pub const IMG_HW: usize = 32;
pub const IMAGES_PER_CLASS: usize = 20;
pub const RAW_CHARACTER_COUNT: usize = 1623;
pub const AUGMENTED_CLASS_COUNT: usize = RAW_CHARACTER_COUNT * 4;
pub const SPLIT_SIZES: [usize; 3] = [4804, 1012, 676];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = EspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(EspnError::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One cached class: 20 images of 32x32 pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct ClassData {
    pub id: u32,
    /// count * 32 * 32, row-major per image.
    pub pixels: Vec<f32>,
    pub count: usize,
}

/// All classes of one split, immutable after preparation.
#[derive(Debug, Clone)]
pub struct ClassTable {
    pub split: Split,
    pub classes: Vec<ClassData>,
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Support and query batches for one N-way K-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_count: usize,
    pub support: Tensor4,
    pub support_labels: Vec<usize>,
    pub query: Tensor4,
    pub query_labels: Vec<usize>,
    /// Cache class-ids behind labels 0..way, for bookkeeping.
    pub class_ids: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub splits: BTreeMap<String, Vec<u32>>,
}

/// Ingests the raw image tree, augments with rotations, splits the 6492
/// classes 4804/1012/676 by `seed` and writes the cache under `out_dir`.
pub fn prepare_dataset(raw_dir: &Path, out_dir: &Path, seed: u64) -> Result<(ClassTable, ClassTable, ClassTable)> {
    prepare_dataset_with_splits(raw_dir, out_dir, seed, RAW_CHARACTER_COUNT, SPLIT_SIZES)
}

/// As `prepare_dataset` but with the character count and split sizes as
/// parameters, for smaller corpora. The splits must cover all classes.
pub fn prepare_dataset_with_splits(
    raw_dir: &Path,
    out_dir: &Path,
    seed: u64,
    character_count: usize,
    split_sizes: [usize; 3],
) -> Result<(ClassTable, ClassTable, ClassTable)> {
    let class_count = character_count * 4;
    if split_sizes.iter().sum::<usize>() != class_count {
        return Err(EspnError::Config(format!(
            "split sizes {split_sizes:?} do not sum to {class_count} classes"
        )));
    }
    let characters = list_characters(raw_dir)?;
    if characters.len() != character_count {
        return Err(EspnError::DatasetIntegrity(format!(
            "expected {character_count} characters under {}, found {}",
            raw_dir.display(),
            characters.len()
        )));
    }

    let mut bad_paths: Vec<String> = Vec::new();
    let mut classes: Vec<ClassData> = Vec::with_capacity(class_count);
    for (char_idx, dir) in characters.iter().enumerate() {
        match load_character(dir) {
            Ok(images) => {
                for rot in 0..4u32 {
                    let mut pixels = Vec::with_capacity(IMAGES_PER_CLASS * IMG_HW * IMG_HW);
                    for img in &images {
                        pixels.extend_from_slice(&rotate90(img, rot as usize));
                    }
                    classes.push(ClassData {
                        id: char_idx as u32 * 4 + rot,
                        pixels,
                        count: IMAGES_PER_CLASS,
                    });
                }
            }
            Err(msg) => bad_paths.push(msg),
        }
    }
    if !bad_paths.is_empty() {
        let count = bad_paths.len();
        bad_paths.truncate(10);
        return Err(EspnError::Ingestion {
            count,
            first_paths: bad_paths,
        });
    }

    // random train/val/test partition of class ids
    let mut ids: Vec<u32> = (0..class_count as u32).collect();
    let mut split_rng = rng::stream_rng(&[seed, stream::SPLIT]);
    for i in (1..ids.len()).rev() {
        ids.swap(i, split_rng.gen_range(0..=i));
    }
    let (train_ids, rest) = ids.split_at(split_sizes[0]);
    let (val_ids, test_ids) = rest.split_at(split_sizes[1]);

    let mut manifest = Manifest {
        seed,
        image_size: IMG_HW,
        splits: BTreeMap::new(),
    };
    let by_id: BTreeMap<u32, &ClassData> = classes.iter().map(|c| (c.id, c)).collect();
    let mut tables = Vec::new();
    for (split, split_ids) in [
        (Split::Train, train_ids),
        (Split::Validation, val_ids),
        (Split::Test, test_ids),
    ] {
        let dir = out_dir.join(split.dir_name());
        fs::create_dir_all(&dir)?;
        let mut sorted: Vec<u32> = split_ids.to_vec();
        sorted.sort_unstable();
        let mut table = ClassTable {
            split,
            classes: Vec::with_capacity(sorted.len()),
        };
        for id in &sorted {
            let class = by_id[id];
            write_class_file(&dir.join(format!("{id}.bin")), class)?;
            table.classes.push((*class).clone());
        }
        manifest.splits.insert(split.dir_name().to_string(), sorted);
        tables.push(table);
    }
    let mf = File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), &manifest)
        .map_err(|e| EspnError::DatasetIntegrity(format!("manifest write: {e}")))?;

    let mut it = tables.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

/// Loads one split back from the cache directory.
pub fn load_class_table(cache_dir: &Path, split: Split) -> Result<ClassTable> {
    let manifest = read_manifest(cache_dir)?;
    let ids = manifest
        .splits
        .get(split.dir_name())
        .ok_or_else(|| EspnError::DatasetIntegrity(format!("manifest has no '{}' split", split.dir_name())))?;
    let dir = cache_dir.join(split.dir_name());
    let mut classes = Vec::with_capacity(ids.len());
    for id in ids {
        classes.push(read_class_file(&dir.join(format!("{id}.bin")))?);
    }
    Ok(ClassTable { split, classes })
}

pub fn read_manifest(cache_dir: &Path) -> Result<Manifest> {
    let f = File::open(cache_dir.join("manifest.json"))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| EspnError::DatasetIntegrity(format!("manifest parse: {e}")))
}

/// Samples one episode: N distinct classes uniformly without replacement,
/// then K+Q distinct images per class (first K to support, rest to query).
pub fn sample_episode<R: Rng>(
    table: &ClassTable,
    way: usize,
    shot: usize,
    query_count: usize,
    rng: &mut R,
) -> Result<Episode> {
    if table.len() < way {
        return Err(EspnError::DatasetIntegrity(format!(
            "table has {} classes, episode needs {way}",
            table.len()
        )));
    }
    let per_class = shot + query_count;
    let min_count = table.classes.iter().map(|c| c.count).min().unwrap_or(0);
    if per_class > min_count {
        return Err(EspnError::EpisodeCapacity {
            requested: per_class,
            available: min_count,
        });
    }
    let class_choice = index_sample(rng, table.len(), way);
    let px = IMG_HW * IMG_HW;
    let mut support = Vec::with_capacity(way * shot * px);
    let mut query = Vec::with_capacity(way * query_count * px);
    let mut class_ids = Vec::with_capacity(way);
    for ci in class_choice.iter() {
        let class = &table.classes[ci];
        class_ids.push(class.id);
        let img_choice = index_sample(rng, class.count, per_class);
        for (j, ii) in img_choice.iter().enumerate() {
            let img = &class.pixels[ii * px..(ii + 1) * px];
            if j < shot {
                support.extend_from_slice(img);
            } else {
                query.extend_from_slice(img);
            }
        }
    }
    let support = Tensor4::from_vec(support, (way * shot, 1, IMG_HW, IMG_HW))?;
    let query = Tensor4::from_vec(query, (way * query_count, 1, IMG_HW, IMG_HW))?;
    let support_labels = (0..way).flat_map(|k| std::iter::repeat(k).take(shot)).collect();
    let query_labels = (0..way)
        .flat_map(|k| std::iter::repeat(k).take(query_count))
        .collect();
    Ok(Episode {
        way,
        shot,
        query_count,
        support,
        support_labels,
        query,
        query_labels,
        class_ids,
    })
}

/// Rotates a 32x32 image by `k` quarter turns (counter-clockwise).
pub fn rotate90(img: &[f32], k: usize) -> Vec<f32> {
    let n = IMG_HW;
    debug_assert_eq!(img.len(), n * n);
    let mut out = img.to_vec();
    for _ in 0..(k % 4) {
        let prev = out.clone();
        for y in 0..n {
            for x in 0..n {
                out[y * n + x] = prev[x * n + (n - 1 - y)];
            }
        }
    }
    out
}

fn list_characters(raw_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let mut alphabets: Vec<PathBuf> = fs::read_dir(raw_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    alphabets.sort();
    for alphabet in alphabets {
        let mut chars: Vec<PathBuf> = fs::read_dir(&alphabet)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        chars.sort();
        dirs.extend(chars);
    }
    Ok(dirs)
}

/// Loads the 20 images of one character, resized to 32x32 and inverted so
/// ink is 1 and background 0. Returns a human-readable message on failure.
fn load_character(dir: &Path) -> std::result::Result<Vec<Vec<f32>>, String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.len() != IMAGES_PER_CLASS {
        return Err(format!(
            "{}: expected {IMAGES_PER_CLASS} images, found {}",
            dir.display(),
            files.len()
        ));
    }
    let mut out = Vec::with_capacity(IMAGES_PER_CLASS);
    for f in &files {
        let img = image::open(f).map_err(|e| format!("{}: {e}", f.display()))?;
        let gray = img.to_luma8();
        let resized = image::imageops::resize(
            &gray,
            IMG_HW as u32,
            IMG_HW as u32,
            image::imageops::FilterType::Triangle,
        );
        // raw images are dark ink on light background; flip to ink = 1
        let pixels: Vec<f32> = resized.pixels().map(|p| 1.0 - p.0[0] as f32 / 255.0).collect();
        out.push(pixels);
    }
    Ok(out)
}

fn write_class_file(path: &Path, class: &ClassData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&class.id.to_le_bytes())?;
    w.write_all(&(class.count as u16).to_le_bytes())?;
    w.write_all(&(IMG_HW as u16).to_le_bytes())?;
    w.write_all(&(IMG_HW as u16).to_le_bytes())?;
    for v in &class.pixels {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_class_file(path: &Path) -> Result<ClassData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b4)?;
    let id = u32::from_le_bytes(b4);
    r.read_exact(&mut b2)?;
    let count = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b2)?;
    let h = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b2)?;
    let w = u16::from_le_bytes(b2) as usize;
    if (h, w) != (IMG_HW, IMG_HW) {
        return Err(EspnError::DatasetIntegrity(format!(
            "{}: cached image size {h}x{w}, expected {IMG_HW}x{IMG_HW}",
            path.display()
        )));
    }
    let mut pixels = vec![0.0f32; count * h * w];
    let mut buf = vec![0u8; count * h * w * 4];
    r.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        pixels[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(ClassData { id, pixels, count })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table(n_classes: usize, imgs: usize) -> ClassTable {
        let px = IMG_HW * IMG_HW;
        let classes = (0..n_classes)
            .map(|c| ClassData {
                id: c as u32,
                pixels: (0..imgs * px).map(|i| ((c * 1000 + i / px) % 97) as f32 / 97.0).collect(),
                count: imgs,
            })
            .collect();
        ClassTable {
            split: Split::Train,
            classes,
        }
    }

    #[test]
    fn episode_counts_5way_1shot() {
        let table = toy_table(30, 20);
        let mut r = rng::stream_rng(&[1, stream::EPISODE]);
        let ep = sample_episode(&table, 5, 1, 15, &mut r).unwrap();
        assert_eq!(ep.support.batch(), 5);
        assert_eq!(ep.query.batch(), 75);
        assert_eq!(ep.support_labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn episode_boundary_uses_every_image() {
        // N=20, K=5, Q=15 consumes all 20 images of each class
        let table = toy_table(25, 20);
        let mut r = rng::stream_rng(&[2, stream::EPISODE]);
        let ep = sample_episode(&table, 20, 5, 15, &mut r).unwrap();
        assert_eq!(ep.support.batch(), 100);
        assert_eq!(ep.query.batch(), 300);
        // support + query of each class is a permutation of all 20 images:
        // check pixel multiset equality for class label 0
        let px = IMG_HW * IMG_HW;
        let cid = ep.class_ids[0] as usize;
        let mut expected: Vec<u32> = table.classes[cid].pixels.iter().map(|v| v.to_bits()).collect();
        let mut got: Vec<u32> = Vec::new();
        for i in 0..5 {
            got.extend(ep.support.data()[i * px..(i + 1) * px].iter().map(|v| v.to_bits()));
        }
        for i in 0..15 {
            got.extend(ep.query.data()[i * px..(i + 1) * px].iter().map(|v| v.to_bits()));
        }
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(expected, got);
    }

    #[test]
    fn capacity_error_when_k_plus_q_exceeds_20() {
        let table = toy_table(10, 20);
        let mut r = rng::stream_rng(&[3, stream::EPISODE]);
        let err = sample_episode(&table, 5, 10, 11, &mut r);
        assert!(matches!(err, Err(EspnError::EpisodeCapacity { .. })));
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let table = toy_table(30, 20);
        let mut r1 = rng::stream_rng(&[4, stream::EPISODE]);
        let mut r2 = rng::stream_rng(&[4, stream::EPISODE]);
        let a = sample_episode(&table, 5, 5, 15, &mut r1).unwrap();
        let b = sample_episode(&table, 5, 5, 15, &mut r2).unwrap();
        assert_eq!(a.class_ids, b.class_ids);
        assert_eq!(a.support.data(), b.support.data());
        assert_eq!(a.query.data(), b.query.data());
    }

    #[test]
    fn rotation_composition() {
        let img: Vec<f32> = (0..IMG_HW * IMG_HW).map(|i| i as f32).collect();
        let twice = rotate90(&rotate90(&img, 1), 1);
        assert_eq!(twice, rotate90(&img, 2));
        assert_eq!(rotate90(&img, 4), img);
    }

    #[test]
    fn class_file_round_trip() {
        let class = ClassData {
            id: 42,
            pixels: (0..2 * IMG_HW * IMG_HW).map(|i| (i as f32).sin().abs()).collect(),
            count: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("42.bin");
        write_class_file(&path, &class).unwrap();
        let back = read_class_file(&path).unwrap();
        assert_eq!(back.id, 42);
        assert_eq!(back.count, 2);
        assert_eq!(back.pixels, class.pixels);
    }
}
