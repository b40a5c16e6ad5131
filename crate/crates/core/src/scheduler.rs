//! Similarity-driven batch reorganization and the freeze/unfreeze schedule.

use ashnet_tensor::rng::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Spiking layers and collector frozen; random batches.
    FrozenWarmup,
    /// Everything trains; batches follow visual similarity.
    Reorganized,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::FrozenWarmup => "frozen_warmup",
            Phase::Reorganized => "reorganized",
        }
    }

    pub fn losses(self) -> LossSet {
        match self {
            Phase::FrozenWarmup => LossSet {
                itc: true,
                itm: true,
                mlm: true,
                mvm: false,
                stua: false,
            },
            Phase::Reorganized => LossSet {
                itc: true,
                itm: true,
                mlm: true,
                mvm: true,
                stua: true,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSet {
    pub itc: bool,
    pub itm: bool,
    pub mlm: bool,
    pub mvm: bool,
    pub stua: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    pub retrieve_count: usize,
    pub phase: Phase,
}

impl EpochPlan {
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.batches.iter().flatten().copied()
    }
}

/// Cosine similarity between the rows of an `n × dim` matrix; the diagonal
/// is exactly 1 and zero rows have similarity 0 to everything else.
pub fn similarity_matrix(embeddings: &[f64], dim: usize) -> Vec<f64> {
    let n = embeddings.len() / dim;
    let unit: Vec<Vec<f64>> = embeddings
        .chunks(dim)
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; dim]
            }
        })
        .collect();
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        sims[i * n + i] = 1.0;
        for j in i + 1..n {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            sims[i * n + j] = c;
            sims[j * n + i] = c;
        }
    }
    sims
}

/// The anchor followed by the `phi − 1` most similar other items among those
/// accepted by `available`, by descending score with ties to the lower index.
/// Returns fewer ids when fewer candidates exist.
fn retrieve_among(anchor: usize, phi: usize, sims: &[f64], n: usize, available: impl Fn(usize) -> bool) -> Vec<usize> {
    let row = &sims[anchor * n..(anchor + 1) * n];
    let mut others: Vec<usize> = (0..n).filter(|&j| j != anchor && available(j)).collect();
    others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    std::iter::once(anchor)
        .chain(others.into_iter().take(phi.saturating_sub(1)))
        .collect()
}

/// `Retrieve(anchor, φ)` over an `n × n` similarity matrix.
pub fn retrieve(anchor: usize, phi: usize, sims: &[f64], n: usize) -> Result<Vec<usize>> {
    if phi == 0 || phi > n {
        return Err(CoreError::Parameter(format!("retrieve count {phi} outside 1..={n}")));
    }
    if anchor >= n || sims.len() != n * n {
        return Err(CoreError::Parameter(format!("anchor {anchor} or matrix size invalid for n={n}")));
    }
    Ok(retrieve_among(anchor, phi, sims, n, |_| true))
}

/// Greedy similarity cover of one epoch.
///
/// `sims` is indexed by position in `ids`. Repeatedly picks a random unused
/// anchor, groups it with its `phi − 1` most similar unused items, and packs
/// groups into batches of at most `batch_size`, opening a new batch when the
/// next group does not fit.
pub fn reorganize_epoch(ids: &[usize], phi: usize, sims: &[f64], batch_size: usize, rng: &mut Rng) -> Result<EpochPlan> {
    let n = ids.len();
    if phi == 0 || phi > batch_size {
        return Err(CoreError::Parameter(format!(
            "retrieve count {phi} must be in 1..={batch_size}"
        )));
    }
    if sims.len() != n * n {
        return Err(CoreError::Parameter(format!("similarity matrix has {} entries for {n} items", sims.len())));
    }
    let mut used = vec![false; n];
    let mut remaining = n;
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    while remaining > 0 {
        let pick = rng.random_range(0..remaining);
        let anchor = (0..n).filter(|&i| !used[i]).nth(pick).expect("pick < remaining");
        let group = retrieve_among(anchor, phi, sims, n, |j| !used[j]);
        for &g in &group {
            used[g] = true;
        }
        remaining -= group.len();
        if current.len() + group.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(group.iter().map(|&g| ids[g]));
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(EpochPlan {
        batches,
        retrieve_count: phi,
        phase: Phase::Reorganized,
    })
}

/// Shuffled consecutive batches of at most `batch_size`.
pub fn random_epoch(ids: &[usize], batch_size: usize, rng: &mut Rng) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(CoreError::Parameter("batch size must be positive".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(rng);
    Ok(EpochPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        retrieve_count: 1,
        phase: Phase::FrozenWarmup,
    })
}

/// `warmup` frozen epochs followed by reorganized ones, `total` in all.
pub fn training_schedule(warmup: usize, total: usize) -> Result<Vec<Phase>> {
    if warmup >= total {
        return Err(CoreError::Config(format!(
            "warmup_epochs ({warmup}) must be less than epochs ({total})"
        )));
    }
    Ok((0..total)
        .map(|e| if e < warmup { Phase::FrozenWarmup } else { Phase::Reorganized })
        .collect())
}

/// Mean pairwise similarity inside batches, over all within-batch pairs.
/// `position` maps an id to its row in `sims`.
pub fn mean_intra_batch_similarity(plan: &EpochPlan, sims: &[f64], n: usize, position: impl Fn(usize) -> usize) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for batch in &plan.batches {
        for (a, &i) in batch.iter().enumerate() {
            for &j in &batch[a + 1..] {
                total += sims[position(i) * n + position(j)];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
