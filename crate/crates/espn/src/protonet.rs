//! Prototype computation and the episode fitness function.
//!
//! Queries are scored against class prototypes (support-set mean
//! embeddings) with either negative squared Euclidean distance or cosine
//! similarity; a softmax over the similarity vector gives class
//! probabilities and the episode loss is the mean categorical
//! cross-entropy over queries. The fitness handed to the evolution engine
//! is the negative of that loss.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{EspnError, Result};
use crate::nncore::EmbeddingNet;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = EspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(EspnError::Config(format!(
                "unknown metric '{other}' (expected euclidean|cosine)"
            ))),
        }
    }
}

/// Per-class mean support embeddings for one episode.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// (way, D_c)
    pub prototypes: Array2<f32>,
    pub metric: Metric,
}

/// Loss, accuracy and the full probability table for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// Mean categorical cross-entropy over queries, in nats.
    pub loss: f64,
    /// Fraction of queries whose most probable class is the true class.
    pub accuracy: f64,
    /// (n_query, way), each row sums to 1.
    pub per_query_probs: Array2<f32>,
}

impl EpisodeResult {
    /// Fitness for the evolution engine: negative loss.
    pub fn fitness(&self) -> f64 {
        -self.loss
    }
}

/// Mean of the support embeddings of each class. Requires every label in
/// 0..way to own at least one row.
pub fn compute_prototypes(
    support: ArrayView2<'_, f32>,
    labels: &[usize],
    way: usize,
    metric: Metric,
) -> Result<PrototypeSet> {
    assert_eq!(support.nrows(), labels.len());
    let dim = support.ncols();
    let mut sums = Array2::<f64>::zeros((way, dim));
    let mut counts = vec![0usize; way];
    for (row, &label) in support.rows().into_iter().zip(labels) {
        counts[label] += 1;
        for (s, &v) in sums.row_mut(label).iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    if let Some(label) = counts.iter().position(|&c| c == 0) {
        return Err(EspnError::MissingClass { label });
    }
    let mut prototypes = Array2::<f32>::zeros((way, dim));
    for k in 0..way {
        let inv = 1.0 / counts[k] as f64;
        for (p, &s) in prototypes.row_mut(k).iter_mut().zip(sums.row(k)) {
            *p = (s * inv) as f32;
        }
    }
    Ok(PrototypeSet { prototypes, metric })
}

/// Similarity of one query embedding to one prototype.
pub fn similarity(query: ArrayView1<'_, f32>, prototype: ArrayView1<'_, f32>, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Euclidean => {
            let d2: f64 = query
                .iter()
                .zip(prototype)
                .map(|(&q, &p)| {
                    let d = (q - p) as f64;
                    d * d
                })
                .sum();
            Ok(-d2)
        }
        Metric::Cosine => {
            let (mut dot, mut nq, mut np) = (0.0f64, 0.0f64, 0.0f64);
            for (&q, &p) in query.iter().zip(prototype) {
                dot += q as f64 * p as f64;
                nq += (q as f64).powi(2);
                np += (p as f64).powi(2);
            }
            if nq == 0.0 || np == 0.0 {
                return Err(EspnError::DegenerateVector);
            }
            Ok(dot / (nq.sqrt() * np.sqrt()))
        }
    }
}

/// Scores query embeddings against prototypes. Ties in the argmax break
/// toward the lowest class index.
pub fn score_queries(
    protos: &PrototypeSet,
    queries: ArrayView2<'_, f32>,
    query_labels: &[usize],
) -> Result<EpisodeResult> {
    let way = protos.prototypes.nrows();
    let nq = queries.nrows();
    assert_eq!(nq, query_labels.len());
    let mut probs = Array2::<f32>::zeros((nq, way));
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut sims = vec![0.0f64; way];
    for (qi, query) in queries.rows().into_iter().enumerate() {
        for k in 0..way {
            sims[k] = similarity(query, protos.prototypes.row(k), protos.metric)?;
        }
        // max-subtracted softmax
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for &s in sims.iter() {
            denom += (s - max).exp();
        }
        let label = query_labels[qi];
        let log_p = (sims[label] - max) - denom.ln();
        loss -= log_p;
        let argmax = sims
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (k, &s)| {
                if s > best.1 {
                    (k, s)
                } else {
                    best
                }
            })
            .0;
        if argmax == label {
            correct += 1;
        }
        for k in 0..way {
            probs[(qi, k)] = ((sims[k] - max).exp() / denom) as f32;
        }
    }
    Ok(EpisodeResult {
        loss: loss / nq as f64,
        accuracy: correct as f64 / nq as f64,
        per_query_probs: probs,
    })
}

/// Embeds support and query in ONE batch (episode-wide batchnorm
/// statistics), computes prototypes from the support rows and scores the
/// query rows.
pub fn episode_loss(
    net: &EmbeddingNet,
    params: &[f32],
    episode: &Episode,
    metric: Metric,
) -> Result<EpisodeResult> {
    let n_support = episode.support_labels.len();
    let n_query = episode.query_labels.len();
    let batch = concat_images(&episode.support, &episode.query)?;
    let emb = net.embed(params, &batch)?;
    let support = emb.slice(ndarray::s![..n_support, ..]);
    let queries = emb.slice(ndarray::s![n_support..n_support + n_query, ..]);
    let protos = compute_prototypes(support, &episode.support_labels, episode.way, metric)?;
    let result = score_queries(&protos, queries, &episode.query_labels)?;
    if !result.loss.is_finite() {
        return Err(EspnError::NonFinite {
            layer: "episode_loss".into(),
        });
    }
    Ok(result)
}

fn concat_images(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (na, ca, ha, wa) = a.dims();
    let (nb, cb, hb, wb) = b.dims();
    if (ca, ha, wa) != (cb, hb, wb) {
        return Err(EspnError::Shape {
            layer: "episode batch".into(),
            expected: format!("({ca}, {ha}, {wa})"),
            got: format!("({cb}, {hb}, {wb})"),
        });
    }
    let mut data = Vec::with_capacity((na + nb) * ca * ha * wa);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor4::from_vec(data, (na + nb, ca, ha, wa))
}
