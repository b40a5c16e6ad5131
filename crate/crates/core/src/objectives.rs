//! Contrastive, matching, masked-modeling and spiking-to-text alignment
//! losses, plus spike-label generation and the VQA accuracy score.

use std::collections::VecDeque;

use ashnet_tensor::rng::Rng;
use ashnet_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::transformer::{TokenSequence, CLS, MASK, PAD, SEP};

pub const ALIGN_GROUP: &str = "align";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// Projections of visual and text vectors into a shared normalized space,
/// with a learnable temperature stored as `ln τ`.
pub struct AlignmentHeads {
    h_v: (ParamId, ParamId),
    h_w: (ParamId, ParamId),
    log_tau: ParamId,
    pub d_align: usize,
}

impl AlignmentHeads {
    pub fn new(store: &mut ParamStore, name: &str, m1: usize, d: usize, d_align: usize, rng: &mut Rng) -> Self {
        let mut affine = |part: &str, fan_in: usize| {
            (
                store.add(
                    format!("{name}.{part}.weight"),
                    ALIGN_GROUP,
                    Tensor::randn(&[fan_in, d_align], 1.0 / (fan_in as f64).sqrt(), rng),
                ),
                store.add(format!("{name}.{part}.bias"), ALIGN_GROUP, Tensor::zeros(&[d_align])),
            )
        };
        let h_v = affine("h_v", m1);
        let h_w = affine("h_w", d);
        let log_tau = store.add(format!("{name}.log_tau"), ALIGN_GROUP, Tensor::scalar(TAU_INIT.ln()));
        AlignmentHeads {
            h_v,
            h_w,
            log_tau,
            d_align,
        }
    }

    /// `l2norm(h_v(v))` for `[B, M1]` pooled visual vectors.
    pub fn embed_visual<'t>(&self, p: &Bindings<'t>, v: Var<'t>) -> Result<Var<'t>> {
        Ok(v.linear(p.get(self.h_v.0), Some(p.get(self.h_v.1)))?.l2_normalize_rows()?)
    }

    /// `l2norm(h_w(w))` for `[B, d]` pooled text vectors.
    pub fn embed_text<'t>(&self, p: &Bindings<'t>, w: Var<'t>) -> Result<Var<'t>> {
        Ok(w.linear(p.get(self.h_w.0), Some(p.get(self.h_w.1)))?.l2_normalize_rows()?)
    }

    /// `τ = exp(ln τ)` as a differentiable scalar.
    pub fn tau<'t>(&self, p: &Bindings<'t>) -> Var<'t> {
        p.get(self.log_tau).exp()
    }

    pub fn tau_value(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).item().exp()
    }

    /// Projects `ln τ` back into `[ln 1e-3, ln 10]` after an update.
    pub fn clamp_temperature(&self, store: &mut ParamStore) {
        let t = store.get_mut(self.log_tau);
        let v = t.data()[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        t.data_mut()[0] = v;
    }
}

/// FIFO ring of detached embeddings.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues every `dim`-wide row of `rows`, evicting the oldest entries.
    pub fn push_rows(&mut self, rows: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        for r in rows.chunks(self.dim) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(r.to_vec());
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn as_constant<'t>(&self, tape: &'t Tape) -> Result<Option<Var<'t>>> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let data: Vec<f64> = self.entries.iter().flatten().copied().collect();
        Ok(Some(tape.constant(&[self.entries.len(), self.dim], data)?))
    }
}

/// Image and text negative queues used by [`itc_loss`].
#[derive(Debug, Clone)]
pub struct ItcQueues {
    pub image: NegativeQueue,
    pub text: NegativeQueue,
}

impl ItcQueues {
    pub fn new(capacity: usize, dim: usize) -> Self {
        ItcQueues {
            image: NegativeQueue::new(capacity, dim),
            text: NegativeQueue::new(capacity, dim),
        }
    }
}

fn diagonal_targets(b: usize) -> Vec<Option<usize>> {
    (0..b).map(Some).collect()
}

/// Symmetric InfoNCE over in-batch and queued negatives, divided by `tau`.
///
/// The image→text and text→image cross-entropies are averaged. After the
/// loss is formed, the batch's detached embeddings are enqueued.
pub fn itc_loss<'t>(img: Var<'t>, txt: Var<'t>, tau: Var<'t>, queues: &mut ItcQueues) -> Result<Var<'t>> {
    let (si, st) = (img.shape(), txt.shape());
    if si.len() != 2 || si != st {
        return Err(CoreError::Contract(format!("itc embeddings differ: {si:?} vs {st:?}")));
    }
    let b = si[0];
    if b < 2 && queues.image.is_empty() && queues.text.is_empty() {
        return Err(CoreError::Contract("itc needs a batch of 2 or queued negatives".into()));
    }
    let tape = img.tape();
    let with_queue = |own: Var<'t>, queue: &NegativeQueue| -> Result<Var<'t>> {
        Ok(match queue.as_constant(tape)? {
            Some(q) => tape.concat(&[own, q], 0)?,
            None => own,
        })
    };
    let text_bank = with_queue(txt, &queues.text)?;
    let image_bank = with_queue(img, &queues.image)?;
    let i2t = img.matmul(text_bank.transpose()?)?.div(tau)?;
    let t2i = txt.matmul(image_bank.transpose()?)?.div(tau)?;
    let targets = diagonal_targets(b);
    let loss = i2t
        .cross_entropy(&targets)?
        .add(t2i.cross_entropy(&targets)?)?
        .scale(0.5);
    queues.image.push_rows(&img.value());
    queues.text.push_rows(&txt.value());
    Ok(loss)
}

/// Two-way cross-entropy; class 1 is "match".
pub fn itm_loss<'t>(logits: Var<'t>, matched: &[bool]) -> Result<Var<'t>> {
    let targets: Vec<Option<usize>> = matched.iter().map(|&m| Some(usize::from(m))).collect();
    Ok(logits.cross_entropy(&targets)?)
}

/// For each row of the `b×b` score matrix, the highest-scoring column whose
/// key differs from the row's own key (ties to the lowest index), or `None`
/// when every other item shares the key.
pub fn hardest_negatives<K: PartialEq>(scores: &[f64], keys: &[K]) -> Vec<Option<usize>> {
    let b = keys.len();
    (0..b)
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in 0..b {
                if j == i || keys[j] == keys[i] {
                    continue;
                }
                if best.is_none_or(|k| scores[i * b + j] > scores[i * b + k]) {
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

fn maskable(id: usize) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Replaces each non-special token by `[MASK]` with probability `rate`,
/// forcing one mask when none was drawn. Returns the masked sequence and the
/// original id at every masked position.
pub fn mask_tokens(seq: &TokenSequence, rate: f64, rng: &mut Rng) -> (TokenSequence, Vec<Option<usize>>) {
    let mut out = seq.clone();
    let mut targets = vec![None; seq.len()];
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.attention_mask[i] == 1 && maskable(seq.ids[i]))
        .collect();
    for &i in &candidates {
        if rng.random::<f64>() < rate {
            targets[i] = Some(seq.ids[i]);
        }
    }
    if targets.iter().all(Option::is_none) && !candidates.is_empty() {
        let i = candidates[rng.random_range(0..candidates.len())];
        targets[i] = Some(seq.ids[i]);
    }
    for (i, t) in targets.iter().enumerate() {
        if t.is_some() {
            out.ids[i] = MASK;
        }
    }
    (out, targets)
}

/// Cross-entropy over the vocabulary on masked positions only.
pub fn mlm_loss<'t>(logits: Var<'t>, targets: &[Option<usize>]) -> Result<Var<'t>> {
    Ok(logits.cross_entropy(targets)?)
}

/// Chooses patches to hide with probability `rate`, at least one.
pub fn mask_patches(num_patches: usize, rate: f64, rng: &mut Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = (0..num_patches).filter(|_| rng.random::<f64>() < rate).collect();
    if chosen.is_empty() && num_patches > 0 {
        chosen.push(rng.random_range(0..num_patches));
    }
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeLabel {
    pub class: usize,
    /// No collector unit fired for this patch; excluded from the loss.
    pub silent: bool,
}

/// Argmax over spike counts of each listed patch, ties to the lowest index.
/// `counts` is one sample's `[N × M2]` activation.
pub fn generate_spike_labels(counts: &[f64], m2: usize, positions: &[usize]) -> Vec<SpikeLabel> {
    positions
        .iter()
        .map(|&p| {
            let row = &counts[p * m2..(p + 1) * m2];
            let mut class = 0;
            for j in 1..m2 {
                if row[j] > row[class] {
                    class = j;
                }
            }
            SpikeLabel {
                class,
                silent: row.iter().all(|&c| c == 0.0),
            }
        })
        .collect()
}

/// Cross-entropy over `M2` spike classes; silent labels are skipped.
pub fn mvm_loss<'t>(logits: Var<'t>, labels: &[SpikeLabel]) -> Result<Var<'t>> {
    let targets: Vec<Option<usize>> = labels.iter().map(|l| (!l.silent).then_some(l.class)).collect();
    Ok(logits.cross_entropy(&targets)?)
}

/// `r[i][m] = ⟨v_i, w_m⟩` for row-normalized `[b, D]` embeddings.
pub fn stua_score<'t>(v_emb: Var<'t>, w_emb: Var<'t>) -> Result<Var<'t>> {
    Ok(v_emb.matmul(w_emb.transpose()?)?)
}

/// `½ · mean_s H(onehot(s), softmax(r[s] / τ))`.
pub fn stua_loss<'t>(r: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    let s = r.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(CoreError::Contract(format!("stua scores must be square, got {s:?}")));
    }
    if s[0] < 2 {
        return Err(CoreError::Contract("stua needs a batch of at least 2".into()));
    }
    Ok(r.div(tau)?.cross_entropy(&diagonal_targets(s[0]))?.scale(0.5))
}

/// `min(n / 3, 1)`.
pub fn vqa_accuracy(num_humans_matching: i64) -> Result<f64> {
    if num_humans_matching < 0 {
        return Err(CoreError::Parameter(format!(
            "annotator count must be non-negative, got {num_humans_matching}"
        )));
    }
    Ok((num_humans_matching as f64 / 3.0).min(1.0))
}
