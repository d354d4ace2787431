//! Synthetic stroke-glyph corpus generator.
//!
//! Emits a raw image tree with the exact shape the ingestion pipeline
//! expects (`alphabet_*/character_*/NN.png`, 20 grayscale 105x105 images
//! per character, dark ink on light background) so the full pipeline can
//! be exercised on hosts where the real handwriting corpus is not
//! available.
//!
//! Each glyph is eight short strokes centred on a fixed ring of anchor
//! points. All classes share one global orientation pattern over the
//! anchors; a class is identified only by small per-anchor deviations
//! from that pattern, so classes share coarse ink statistics and are
//! separable only through fine stroke orientation. The global pattern is
//! constructed to be invariant under 90-degree rotation (rotating any
//! glyph yields another glyph from the same distribution), which keeps
//! the corpus homogeneous under the pipeline's rotation augmentation.
//! Ink speckle is added per instance as class-independent clutter.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;

pub const RAW_SIZE: usize = 105;
const SYNTH_STREAM: u64 = 0x10;
const ALPHABETS: usize = 50;

/// Anchor ring in raw-image coordinates. Ordered so that rotating the
/// image by 90 degrees maps anchor `k` onto anchor `k + 2 (mod 8)`.
const RING: [(f32, f32); 8] = [
    (25.0, 25.0),
    (52.5, 25.0),
    (80.0, 25.0),
    (80.0, 52.5),
    (80.0, 80.0),
    (52.5, 80.0),
    (25.0, 80.0),
    (25.0, 52.5),
];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Half-length of each class stroke, pixels.
    pub stroke_half_length: f32,
    /// Max absolute per-anchor deviation of a class's stroke angle from
    /// the shared global pattern, radians. This is the only class signal.
    pub angle_deviation: f32,
    /// Max absolute per-instance, per-stroke angle jitter, radians.
    pub angle_jitter: f32,
    /// Max absolute per-instance translation of the whole glyph, pixels.
    pub translation: f32,
    /// Max absolute per-stroke positional jitter, pixels.
    pub position_jitter: f32,
    /// Per-instance base stroke thickness range, pixels.
    pub thickness_min: f32,
    pub thickness_max: f32,
    /// Half-open range of ink-speckle dots drawn per instance.
    pub speckle_min: usize,
    pub speckle_max: usize,
    /// Speckle dot radius range, pixels.
    pub speckle_radius_min: f32,
    pub speckle_radius_max: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stroke_half_length: 9.0,
            angle_deviation: 0.25,
            angle_jitter: 0.04,
            translation: 1.0,
            position_jitter: 0.5,
            thickness_min: 2.5,
            thickness_max: 5.0,
            speckle_min: 10,
            speckle_max: 30,
            speckle_radius_min: 0.8,
            speckle_radius_max: 1.4,
        }
    }
}

#[derive(Clone, Copy)]
struct Stroke {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    thickness: f32,
}

/// Writes `characters` glyph directories with 20 instance images each.
pub fn generate_raw_corpus(
    out_dir: &Path,
    characters: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<()> {
    let global_angles = global_angles(seed);
    let per_alphabet = characters.div_ceil(ALPHABETS);
    for c in 0..characters {
        let alphabet = c / per_alphabet;
        let dir = out_dir
            .join(format!("alphabet_{alphabet:02}"))
            .join(format!("character_{c:04}"));
        fs::create_dir_all(&dir)?;
        let mut r = rng::stream_rng(&[seed, c as u64, SYNTH_STREAM]);
        let dev = cfg.angle_deviation;
        let class_angles: Vec<f32> = global_angles
            .iter()
            .map(|g| g + r.gen_range(-dev..=dev))
            .collect();
        for i in 0..20 {
            let strokes = instance_strokes(&class_angles, cfg, &mut r);
            let img = render(&strokes);
            write_png(&dir.join(format!("{i:02}.png")), &img)?;
        }
    }
    Ok(())
}

/// Shared orientation pattern over the anchor ring, fixed per corpus
/// seed. Built from two free angles so that the pattern is invariant
/// under 90-degree rotation: anchor `k + 2` carries anchor `k`'s angle
/// plus 90 degrees (stroke orientations live modulo 180 degrees).
fn global_angles(seed: u64) -> [f32; 8] {
    use std::f32::consts::PI;
    let mut r = rng::stream_rng(&[seed, SYNTH_STREAM]);
    let g = [r.gen_range(0.0..PI), r.gen_range(0.0..PI)];
    std::array::from_fn(|k| (g[k % 2] + (k / 2) as f32 * PI / 2.0) % PI)
}

fn instance_strokes(
    class_angles: &[f32],
    cfg: &SynthConfig,
    r: &mut ChaCha8Rng,
) -> Vec<Stroke> {
    let tx = r.gen_range(-cfg.translation..=cfg.translation);
    let ty = r.gen_range(-cfg.translation..=cfg.translation);
    let thickness = r.gen_range(cfg.thickness_min..=cfg.thickness_max);
    let half = cfg.stroke_half_length;
    let (aj, pj) = (cfg.angle_jitter, cfg.position_jitter);
    let mut strokes = Vec::with_capacity(RING.len() + cfg.speckle_max);
    for (&(ax, ay), &angle) in RING.iter().zip(class_angles) {
        let a = angle + r.gen_range(-aj..=aj);
        let (dx, dy) = (half * a.cos(), half * a.sin());
        let cx = ax + tx + r.gen_range(-pj..=pj);
        let cy = ay + ty + r.gen_range(-pj..=pj);
        strokes.push(Stroke {
            x0: cx - dx,
            y0: cy - dy,
            x1: cx + dx,
            y1: cy + dy,
            thickness: thickness * r.gen_range(0.9..=1.1),
        });
    }
    let n_speckle = r.gen_range(cfg.speckle_min..cfg.speckle_max);
    for _ in 0..n_speckle {
        let px = r.gen_range(8.0..97.0);
        let py = r.gen_range(8.0..97.0);
        strokes.push(Stroke {
            x0: px,
            y0: py,
            x1: px,
            y1: py,
            thickness: r.gen_range(cfg.speckle_radius_min..=cfg.speckle_radius_max),
        });
    }
    strokes
}

/// Rasterizes strokes as filled capsules; ink is 1, background 0.
fn render(strokes: &[Stroke]) -> Vec<f32> {
    let n = RAW_SIZE;
    let mut img = vec![0.0f32; n * n];
    for s in strokes {
        let t = s.thickness;
        let (min_x, max_x) = (s.x0.min(s.x1) - t - 1.0, s.x0.max(s.x1) + t + 1.0);
        let (min_y, max_y) = (s.y0.min(s.y1) - t - 1.0, s.y0.max(s.y1) + t + 1.0);
        let x_lo = (min_x.floor().max(0.0)) as usize;
        let x_hi = (max_x.ceil().min((n - 1) as f32)) as usize;
        let y_lo = (min_y.floor().max(0.0)) as usize;
        let y_hi = (max_y.ceil().min((n - 1) as f32)) as usize;
        let dx = s.x1 - s.x0;
        let dy = s.y1 - s.y0;
        let len2 = dx * dx + dy * dy;
        let t2 = t * t;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (px, py) = (x as f32 - s.x0, y as f32 - s.y0);
                let u = if len2 < 1e-6 {
                    0.0
                } else {
                    ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
                };
                let (ex, ey) = (px - u * dx, py - u * dy);
                if ex * ex + ey * ey <= t2 {
                    img[y * n + x] = 1.0;
                }
            }
        }
    }
    img
}

fn write_png(path: &Path, img: &[f32]) -> Result<()> {
    let n = RAW_SIZE as u32;
    let buf: Vec<u8> = img.iter().map(|&v| 255 - (v * 255.0) as u8).collect();
    let gray = image::GrayImage::from_raw(n, n, buf).expect("sized buffer");
    gray.save(path)
        .map_err(|e| crate::error::EspnError::DatasetIntegrity(format!("{}: {e}", path.display())))?;
    Ok(())
}
