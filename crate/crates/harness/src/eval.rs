//! Recall@K retrieval scoring over held-out pairs.

use ashnet_core::model::AshNet;
use ashnet_tensor::rng::derive_seed;
use ashnet_tensor::Tape;
use serde::Serialize;

use crate::data::{stack_images, SyntheticPair};
use crate::error::{HarnessError, Result};

/// Fraction of rows of the `n×n` `scores` whose diagonal entry ranks in the
/// row's top `k`; entries tied with the diagonal rank ahead of it only when
/// their column index is lower.
pub fn recall_at_k(scores: &[f64], n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n || scores.len() != n * n {
        return Err(HarnessError::Parameter(format!(
            "recall_at_k needs 1 <= k <= n and an n×n matrix, got k={k}, n={n}, {} scores",
            scores.len()
        )));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = &scores[i * n..(i + 1) * n];
            let target = row[i];
            let ahead = (0..n)
                .filter(|&j| row[j] > target || (row[j] == target && j < i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn transpose(scores: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|idx| scores[(idx % n) * n + idx / n]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recall {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

impl Recall {
    /// Image→text and text→image recall averaged at K = 1, 5, 10; K is
    /// capped at `n`.
    pub fn from_scores(scores: &[f64], n: usize) -> Result<Self> {
        let t = transpose(scores, n);
        let mean = |k: usize| -> Result<f64> {
            let k = k.min(n);
            Ok(0.5 * (recall_at_k(scores, n, k)? + recall_at_k(&t, n, k)?))
        };
        Ok(Recall {
            r_at_1: mean(1)?,
            r_at_5: mean(5)?,
            r_at_10: mean(10)?,
        })
    }
}

const EVAL_SPIKE_TAG: u64 = 0xE7A1;

/// Spike seed of pair `id` for evaluation passes; independent of the epoch.
pub fn eval_spike_seed(run_seed: u64, id: usize) -> u64 {
    derive_seed(run_seed, &[EVAL_SPIKE_TAG, id as u64])
}

/// ITC image and text embeddings (each `ids.len() × d_align`, row-major),
/// computed without gradients in consecutive chunks of `batch_size`.
pub fn embed_pairs(
    net: &AshNet,
    pairs: &[SyntheticPair],
    ids: &[usize],
    batch_size: usize,
    spike_seed: impl Fn(usize) -> u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let size = net.cfg.image_size;
    let (mut img, mut txt) = (Vec::new(), Vec::new());
    for chunk in ids.chunks(batch_size) {
        let images = stack_images(pairs, chunk, size)?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| spike_seed(i)).collect();
        let spikes = net.spike_input(&images, &seeds)?;
        let captions: Vec<_> = chunk.iter().map(|&i| net.tokenize(&pairs[i].caption)).collect();
        let tape = Tape::new();
        let p = net.store.bind_constant(&tape);
        let visual = net.encode_visual(&p, &images, &spikes)?;
        let (vi, vt) = net.retrieval_embeddings(&p, &visual, &captions)?;
        img.extend(vi.value().iter());
        txt.extend(vt.value().iter());
    }
    Ok((img, txt))
}

/// Recall@K of `net` over `ids`, scoring every image against every caption.
pub fn evaluate(
    net: &AshNet,
    pairs: &[SyntheticPair],
    ids: &[usize],
    batch_size: usize,
    run_seed: u64,
) -> Result<Recall> {
    let (img, txt) = embed_pairs(net, pairs, ids, batch_size, |i| eval_spike_seed(run_seed, i))?;
    let n = ids.len();
    let d = net.cfg.d_align;
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scores[i * n + j] = img[i * d..(i + 1) * d]
                .iter()
                .zip(&txt[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    Recall::from_scores(&scores, n)
}
