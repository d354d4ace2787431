//! Forward-only embedding network: four identical blocks of 3x3 "same"
//! convolution, per-batch batchnorm, ReLU and 2x2 max-pooling. A 32x32
//! single-channel input ends at (C, 2, 2), giving an embedding of 4*C.
//!
//! There is no backward pass anywhere in this crate; all training happens
//! by evaluating perturbed copies of the flat parameter vector.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EspnError, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor4;

pub const BLOCK_COUNT: usize = 4;
pub const INPUT_HW: usize = 32;
pub const BN_EPS: f32 = 1e-5;

/// One entry of the parameter registry: a named contiguous slice of the
/// flat vector together with its logical shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered registry mapping slices of the flat vector to layers.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Arc<Vec<LayoutEntry>>,
    total: usize,
}

impl ParamLayout {
    fn new(entries: Vec<LayoutEntry>) -> Self {
        let mut expected = 0;
        for e in &entries {
            assert_eq!(e.offset, expected, "registry offsets must be contiguous");
            expected += e.len();
        }
        ParamLayout {
            entries: Arc::new(entries),
            total: expected,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slice_of<'a>(&self, name: &str, values: &'a [f32]) -> Option<&'a [f32]> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        Some(&values[e.offset..e.offset + e.len()])
    }
}

/// Flat vector of all meta-learner parameters plus the shape registry.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(EspnError::ParamSize {
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice_of(&self, name: &str) -> Option<&[f32]> {
        self.layout.slice_of(name, &self.values)
    }
}

/// Parameters of one convolution block, viewed into a flat vector.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'a> {
    /// (out_c, in_c, 3, 3) row-major.
    pub weight: &'a [f32],
    pub gain: &'a [f32],
    pub bias: &'a [f32],
}

/// The four-block convolutional embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingNet {
    channels: usize,
}

impl EmbeddingNet {
    pub fn new(channels: usize) -> Result<Self> {
        if !matches!(channels, 16 | 32 | 64) {
            return Err(EspnError::Config(format!(
                "channel count must be 16, 32 or 64, got {channels}"
            )));
        }
        Ok(EmbeddingNet { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Embedding dimension D_c: channels * (32 / 2^4)^2 = 4 * channels.
    pub fn embedding_dim(&self) -> usize {
        self.channels * (INPUT_HW / (1 << BLOCK_COUNT)).pow(2)
    }

    /// Closed-form parameter count: block 1 holds 9*1*C + 2C values,
    /// blocks 2-4 hold 9*C*C + 2C each.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        (9 * c + 2 * c) + 3 * (9 * c * c + 2 * c)
    }

    pub fn layout(&self) -> ParamLayout {
        let c = self.channels;
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut in_c = 1;
        for b in 1..=BLOCK_COUNT {
            for (suffix, shape) in [
                ("conv.weight", vec![c, in_c, 3, 3]),
                ("bn.gain", vec![c]),
                ("bn.bias", vec![c]),
            ] {
                let len: usize = shape.iter().product();
                entries.push(LayoutEntry {
                    name: format!("block{b}.{suffix}"),
                    offset,
                    shape,
                });
                offset += len;
            }
            in_c = c;
        }
        let layout = ParamLayout::new(entries);
        assert_eq!(layout.total_len(), self.param_count());
        layout
    }

    /// Fan-in-scaled Gaussian conv weights, batchnorm gains 1 and biases 0.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut values = vec![0.0f32; layout.total_len()];
        let mut rng = rng::stream_rng(&[seed, stream::INIT]);
        for e in layout.entries() {
            let slice = &mut values[e.offset..e.offset + e.len()];
            if e.name.ends_with("conv.weight") {
                let fan_in: usize = e.shape[1..].iter().product();
                let std = (2.0 / fan_in as f32).sqrt();
                for v in slice {
                    *v = rng.sample::<f32, _>(StandardNormal) * std;
                }
            } else if e.name.ends_with("bn.gain") {
                slice.fill(1.0);
            }
        }
        ParamVector::new(values, layout).expect("layout-sized vector")
    }

    fn block_params<'a>(&self, block: usize, values: &'a [f32]) -> BlockParams<'a> {
        let c = self.channels;
        let in_c = if block == 1 { 1 } else { c };
        let mut offset = 0;
        for b in 1..block {
            let ic = if b == 1 { 1 } else { c };
            offset += 9 * ic * c + 2 * c;
        }
        let w_len = 9 * in_c * c;
        BlockParams {
            weight: &values[offset..offset + w_len],
            gain: &values[offset + w_len..offset + w_len + c],
            bias: &values[offset + w_len + c..offset + w_len + 2 * c],
        }
    }

    /// Runs all four blocks and flattens the final (batch, C, 2, 2)
    /// activation into a (batch, 4*C) embedding matrix.
    pub fn embed(&self, params: &[f32], images: &Tensor4) -> Result<Array2<f32>> {
        if params.len() != self.param_count() {
            return Err(EspnError::ParamSize {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let (batch, in_c, h, w) = images.dims();
        if in_c != 1 || h != INPUT_HW || w != INPUT_HW {
            return Err(EspnError::Shape {
                layer: "input".into(),
                expected: format!("(batch, 1, {INPUT_HW}, {INPUT_HW})"),
                got: format!("{:?}", images.dims()),
            });
        }
        let mut x = images.clone();
        for b in 1..=BLOCK_COUNT {
            x = conv_block_forward(&x, self.block_params(b, params), self.channels)
                .map_err(|e| match e {
                    EspnError::NonFinite { .. } => EspnError::NonFinite {
                        layer: format!("block{b}"),
                    },
                    other => other,
                })?;
        }
        let (_, c, fh, fw) = x.dims();
        debug_assert_eq!((fh, fw), (2, 2));
        let dim = c * fh * fw;
        Ok(Array2::from_shape_vec((batch, dim), x.data().to_vec()).expect("contiguous"))
    }

    /// Sum of activation bytes produced by the four blocks for one forward
    /// pass of `batch` images: the conv/batchnorm/ReLU output plus the
    /// pooled output of each block, at 4 bytes per scalar. This is the
    /// measured value of the per-step tensor term `g` in the cost model.
    pub fn activation_bytes(&self, batch: usize) -> u64 {
        let c = self.channels as u64;
        let b = batch as u64;
        let mut total = 0u64;
        let mut hw = INPUT_HW as u64;
        for _ in 0..BLOCK_COUNT {
            total += b * c * hw * hw * 4; // conv output
            hw /= 2;
            total += b * c * hw * hw * 4; // pooled output
        }
        total
    }
}

/// One block: 3x3 same-padding convolution, batchnorm over the current
/// batch, ReLU, 2x2 max-pool. Spatial dims are halved.
pub fn conv_block_forward(input: &Tensor4, params: BlockParams<'_>, out_c: usize) -> Result<Tensor4> {
    let (batch, in_c, h, w) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(EspnError::Shape {
            layer: "conv_block".into(),
            expected: "even spatial dims (2x2 pooling)".into(),
            got: format!("{h}x{w}"),
        });
    }
    let w_len = out_c * in_c * 9;
    if params.weight.len() != w_len || params.gain.len() != out_c || params.bias.len() != out_c {
        return Err(EspnError::Shape {
            layer: "conv_block".into(),
            expected: format!("weight {w_len}, gain/bias {out_c}"),
            got: format!(
                "weight {}, gain {}, bias {}",
                params.weight.len(),
                params.gain.len(),
                params.bias.len()
            ),
        });
    }

    // Convolution as im2col + one matrix product: (out_c, 9*in_c) x
    // (9*in_c, batch*h*w). Column j corresponds to (n, y, x) with
    // j = n*h*w + y*w + x.
    let cols = im2col_3x3(input);
    let weights = ArrayView2::from_shape((out_c, in_c * 9), params.weight).expect("checked above");
    let mut conv = weights.dot(&cols.view());

    batchnorm_rows(&mut conv, params.gain, params.bias, BN_EPS);
    conv.mapv_inplace(|v| v.max(0.0));

    if !conv.iter().all(|v| v.is_finite()) {
        return Err(EspnError::NonFinite {
            layer: "conv_block".into(),
        });
    }

    Ok(maxpool_2x2(&conv, batch, out_c, h, w))
}

/// Expands a NCHW tensor into the (9*in_c, batch*h*w) patch matrix for a
/// 3x3 same-padding convolution. Row index is ci*9 + ky*3 + kx, matching
/// the row-major (out_c, in_c, 3, 3) weight layout.
fn im2col_3x3(input: &Tensor4) -> Array2<f32> {
    let (batch, in_c, h, w) = input.dims();
    let hw = h * w;
    let mut cols = Array2::<f32>::zeros((in_c * 9, batch * hw));
    let data = input.data();
    for ci in 0..in_c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row_idx = ci * 9 + ky * 3 + kx;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().expect("row-major");
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for n in 0..batch {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_base = ((n * in_c + ci) * h + sy as usize) * w;
                        let dst_base = n * hw + y * w;
                        // shift the whole row by dx, zero-padding the edge
                        let (src_start, dst_start, len) = if dx < 0 {
                            (0, 1, w - 1)
                        } else if dx > 0 {
                            (1, 0, w - 1)
                        } else {
                            (0, 0, w)
                        };
                        row[dst_base + dst_start..dst_base + dst_start + len]
                            .copy_from_slice(&data[src_base + src_start..src_base + src_start + len]);
                    }
                }
            }
        }
    }
    cols
}

/// Normalizes each row to batch-mean 0 and batch-variance 1 (epsilon
/// guard), then applies the per-channel gain and bias. Statistics come
/// from the current batch only; no running averages exist anywhere.
pub fn batchnorm_rows(mat: &mut Array2<f32>, gain: &[f32], bias: &[f32], eps: f32) {
    for (r, mut row) in mat.rows_mut().into_iter().enumerate() {
        let slice = row.as_slice_mut().expect("row-major");
        let n = slice.len() as f64;
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = slice
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / ((var as f32) + eps).sqrt();
        let (m, g, b) = (mean as f32, gain[r], bias[r]);
        for v in slice {
            *v = (*v - m) * inv * g + b;
        }
    }
}

fn maxpool_2x2(conv: &Array2<f32>, batch: usize, out_c: usize, h: usize, w: usize) -> Tensor4 {
    let (oh, ow) = (h / 2, w / 2);
    let hw = h * w;
    let mut out = Tensor4::zeros((batch, out_c, oh, ow));
    let src = conv.as_slice().expect("row-major");
    let dst = out.data_mut();
    for c in 0..out_c {
        let crow = &src[c * batch * hw..(c + 1) * batch * hw];
        for n in 0..batch {
            for oy in 0..oh {
                let r0 = &crow[n * hw + (2 * oy) * w..];
                let r1 = &crow[n * hw + (2 * oy + 1) * w..];
                let dbase = ((n * out_c + c) * oh + oy) * ow;
                for ox in 0..ow {
                    let m = r0[2 * ox]
                        .max(r0[2 * ox + 1])
                        .max(r1[2 * ox])
                        .max(r1[2 * ox + 1]);
                    dst[dbase + ox] = m;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_block(in_c: usize, out_c: usize) -> Vec<f32> {
        vec![0.0; 9 * in_c * out_c + 2 * out_c]
    }

    #[test]
    fn shape_chain_100_images() {
        let net = EmbeddingNet::new(64).unwrap();
        let params = net.init_params(0);
        let input = Tensor4::zeros((100, 1, 32, 32));
        let bp = net.block_params(1, params.values());
        let out = conv_block_forward(&input, bp, 64).unwrap();
        assert_eq!(out.dims(), (100, 64, 16, 16));
    }

    #[test]
    fn all_zero_input_zero_bias_gives_zero_output() {
        let storage = zero_block(1, 8);
        // gain = 1, bias = 0, weights = 0
        let mut storage = storage;
        for g in &mut storage[72..80] {
            *g = 1.0;
        }
        let bp = BlockParams {
            weight: &storage[..72],
            gain: &storage[72..80],
            bias: &storage[80..88],
        };
        let input = Tensor4::zeros((4, 1, 8, 8));
        let out = conv_block_forward(&input, bp, 8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        // The 32x32 / 4-block chain is 32 -> 16 -> 8 -> 4 -> 2; a (2, 2)
        // input cannot go through another block.
        let storage = zero_block(64, 64);
        let bp = BlockParams {
            weight: &storage[..9 * 64 * 64],
            gain: &storage[9 * 64 * 64..9 * 64 * 64 + 64],
            bias: &storage[9 * 64 * 64 + 64..],
        };
        let input = Tensor4::zeros((100, 64, 1, 1));
        assert!(conv_block_forward(&input, bp, 64).is_err());
    }

    #[test]
    fn embedding_dims_per_channel_count() {
        assert_eq!(EmbeddingNet::new(64).unwrap().embedding_dim(), 256);
        assert_eq!(EmbeddingNet::new(16).unwrap().embedding_dim(), 64);
        assert_eq!(EmbeddingNet::new(32).unwrap().embedding_dim(), 128);
    }

    #[test]
    fn param_count_matches_registry() {
        for c in [16, 32, 64] {
            let net = EmbeddingNet::new(c).unwrap();
            assert_eq!(net.layout().total_len(), net.param_count());
            assert_eq!(net.param_count(), (9 * c + 2 * c) + 3 * (9 * c * c + 2 * c));
        }
    }

    #[test]
    fn init_is_deterministic_and_gains_are_one() {
        let net = EmbeddingNet::new(16).unwrap();
        let a = net.init_params(7);
        let b = net.init_params(7);
        assert_eq!(a.values(), b.values());
        for block in 1..=4 {
            let gains = a.slice_of(&format!("block{block}.bn.gain")).unwrap();
            assert!(gains.iter().all(|&g| g == 1.0));
            let biases = a.slice_of(&format!("block{block}.bn.bias")).unwrap();
            assert!(biases.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn different_seeds_differ_in_most_conv_weights() {
        let net = EmbeddingNet::new(16).unwrap();
        let a = net.init_params(1);
        let b = net.init_params(2);
        let w1 = a.slice_of("block2.conv.weight").unwrap();
        let w2 = b.slice_of("block2.conv.weight").unwrap();
        let differing = w1.iter().zip(w2).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.99 * w1.len() as f64);
    }

    #[test]
    fn embed_rejects_wrong_param_length() {
        let net = EmbeddingNet::new(16).unwrap();
        let input = Tensor4::zeros((2, 1, 32, 32));
        let err = net.embed(&[0.0; 10], &input);
        assert!(matches!(err, Err(EspnError::ParamSize { .. })));
    }

    #[test]
    fn embed_is_deterministic_and_duplicates_match() {
        let net = EmbeddingNet::new(16).unwrap();
        let params = net.init_params(3);
        let mut img = Tensor4::zeros((4, 1, 32, 32));
        let mut r = crate::rng::stream_rng(&[99]);
        use rand::Rng;
        let one: Vec<f32> = (0..32 * 32).map(|_| r.gen::<f32>()).collect();
        for n in 0..4 {
            // images 0 and 2 identical, 1 and 3 identical
            let scale = if n % 2 == 0 { 1.0 } else { 0.5 };
            for (i, &v) in one.iter().enumerate() {
                img.data_mut()[n * 32 * 32 + i] = v * scale;
            }
        }
        let e1 = net.embed(params.values(), &img).unwrap();
        let e2 = net.embed(params.values(), &img).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.row(0), e1.row(2));
        assert_eq!(e1.row(1), e1.row(3));
    }

    #[test]
    fn batchnorm_normalizes_rows() {
        let mut r = crate::rng::stream_rng(&[5]);
        use rand::Rng;
        let data: Vec<f32> = (0..3 * 500).map(|_| r.gen::<f32>() * 4.0 - 1.0).collect();
        let mut mat = Array2::from_shape_vec((3, 500), data).unwrap();
        batchnorm_rows(&mut mat, &[1.0; 3], &[0.0; 3], BN_EPS);
        for row in mat.rows() {
            let n = row.len() as f64;
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        // brute-force 3x3 same-padding conv as an independent oracle
        let net = EmbeddingNet::new(16).unwrap();
        let params = net.init_params(11);
        let bp = net.block_params(1, params.values());
        let mut img = Tensor4::zeros((2, 1, 8, 8));
        let mut r = crate::rng::stream_rng(&[7]);
        use rand::Rng;
        for v in img.data_mut() {
            *v = r.gen::<f32>() - 0.5;
        }
        let cols = im2col_3x3(&img);
        let weights = ArrayView2::from_shape((16, 9), bp.weight).unwrap();
        let fast = weights.dot(&cols.view());
        for n in 0..2 {
            for c in 0..16 {
                for y in 0..8i32 {
                    for x in 0..8i32 {
                        let mut acc = 0.0f32;
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if (0..8).contains(&sy) && (0..8).contains(&sx) {
                                    acc += bp.weight[(c * 9 + ky as usize * 3 + kx as usize) as usize]
                                        * img.at(n, 0, sy as usize, sx as usize);
                                }
                            }
                        }
                        let got = fast[(c, n * 64 + y as usize * 8 + x as usize)];
                        assert!((acc - got).abs() < 1e-5, "{acc} vs {got}");
                    }
                }
            }
        }
    }
}
