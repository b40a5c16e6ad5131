//! The full hybrid encoder: concrete and spiking visual streams, fusion,
//! alignment transformer and the per-batch pre-training losses.

use ashnet_tensor::rng::{seeded, Rng};
use ashnet_tensor::{Bindings, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cnn::{CnnConfig, CnnEncoder};
use crate::error::{CoreError, Result};
use crate::fusion::{fuse, SrMode, SummaryGate};
use crate::objectives::{
    generate_spike_labels, hardest_negatives, itc_loss, itm_loss, mask_patches, mask_tokens, mlm_loss, mvm_loss,
    stua_loss, stua_score, AlignmentHeads, ItcQueues, SpikeLabel,
};
use crate::scheduler::LossSet;
use crate::snn::{set_frozen, stack_trains, LifConfig, SemanticCollector, SnnConfig, SnnEncoder, COLLECTOR_GROUP};
use crate::spike::{encode_probabilistic, grayscale, patch_major};
use crate::transformer::{AlignTransformer, TextBatch, TokenSequence, TransformerConfig, Vocabulary};

/// Which visual stream(s) feed the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    FixedZero,
    FixedOne,
    Trainable,
    /// Spiking features alone, bypassing fusion.
    SnnOnly,
}

impl VisualMode {
    pub fn sr_mode(self) -> Option<SrMode> {
        match self {
            VisualMode::FixedZero => Some(SrMode::FixedZero),
            VisualMode::FixedOne => Some(SrMode::FixedOne),
            VisualMode::Trainable => Some(SrMode::Trainable),
            VisualMode::SnnOnly => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VisualMode::FixedZero => "fixed_zero",
            VisualMode::FixedOne => "fixed_one",
            VisualMode::Trainable => "trainable",
            VisualMode::SnnOnly => "snn_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub m1: usize,
    pub m2: usize,
    pub snn_hidden: usize,
    pub lif: LifConfig,
    pub time_window: usize,
    pub transformer: TransformerConfig,
    pub d_align: usize,
    pub queue_capacity: usize,
    #[serde(rename = "sr_mode")]
    pub visual_mode: VisualMode,
    pub collector_enabled: bool,
    pub mask_rate: f64,
    pub patch_mask_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 3,
            image_size: 32,
            patch: 8,
            m1: 32,
            m2: 16,
            snn_hidden: 32,
            lif: LifConfig::default(),
            time_window: 10,
            transformer: TransformerConfig::default(),
            d_align: 32,
            queue_capacity: 256,
            visual_mode: VisualMode::Trainable,
            collector_enabled: true,
            mask_rate: 0.15,
            patch_mask_rate: 0.15,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch.max(1);
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.image_size == 0 || self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image_size {} must be a positive multiple of patch {}", self.image_size, self.patch));
        }
        if self.time_window == 0 {
            return bad("time_window must be >= 1".into());
        }
        if self.m1 == 0 || self.m2 == 0 || self.snn_hidden == 0 || self.d_align == 0 {
            return bad("m1, m2, snn_hidden and d_align must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(0.0..=1.0).contains(&self.patch_mask_rate) {
            return bad("mask rates must lie in [0, 1]".into());
        }
        self.lif.validate().map_err(|e| CoreError::Config(format!("lif: {e}")))?;
        self.transformer.validate()?;
        CnnConfig::new(self.image_channels, self.m1, self.patch).validate()?;
        Ok(())
    }
}

/// One batch of paired inputs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `[B, c, h, w]` intensities in `[0, 1]`.
    pub images: Tensor,
    /// `[B, T, N, patch²]` binary spikes.
    pub spikes: Tensor,
    pub captions: Vec<TokenSequence>,
}

/// Visual features of a batch, each `[B, N, M1]` except `counts` (`[B, N, M2]`).
pub struct VisualOutput<'t> {
    pub f_cnn: Var<'t>,
    pub counts: Var<'t>,
    pub f_snn: Var<'t>,
    pub tokens: Var<'t>,
}

/// Active loss terms of one step and their sum.
pub struct LossTerms<'t> {
    pub itc: Option<Var<'t>>,
    pub itm: Option<Var<'t>>,
    pub mlm: Option<Var<'t>>,
    pub mvm: Option<Var<'t>>,
    pub stua: Option<Var<'t>>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// Values in `[itc, itm, mlm, mvm, stua]` order; inactive terms are `None`.
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.itc, self.itm, self.mlm, self.mvm, self.stua].map(|v| v.map(|x| x.item()))
    }
}

pub struct AshNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    cnn: CnnEncoder,
    snn: SnnEncoder,
    collector: SemanticCollector,
    gate: SummaryGate,
    transformer: AlignTransformer,
    pub itc_heads: AlignmentHeads,
    pub stua_heads: AlignmentHeads,
}

impl AshNet {
    /// Parameters are drawn from one seeded stream in a fixed order.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let n = cfg.num_patches();
        let cnn = CnnEncoder::new(&mut store, CnnConfig::new(cfg.image_channels, cfg.m1, cfg.patch), &mut rng)?;
        let snn = SnnEncoder::new(
            &mut store,
            SnnConfig {
                lif: cfg.lif,
                patch_units: cfg.patch * cfg.patch,
                hidden: cfg.snn_hidden,
                m2: cfg.m2,
            },
            &mut rng,
        )?;
        let collector = SemanticCollector::new(&mut store, cfg.m1, cfg.m2, &mut rng);
        let gate = SummaryGate::new(&mut store, cfg.m1, &mut rng);
        let transformer = AlignTransformer::new(&mut store, cfg.transformer, vocab.len(), n, cfg.m1, cfg.m2, &mut rng)?;
        let d = cfg.transformer.d_model;
        let itc_heads = AlignmentHeads::new(&mut store, "itc", cfg.m1, d, cfg.d_align, &mut rng);
        let stua_heads = AlignmentHeads::new(&mut store, "stua", cfg.m1, d, cfg.d_align, &mut rng);
        let mut net = AshNet {
            cfg,
            store,
            vocab,
            cnn,
            snn,
            collector,
            gate,
            transformer,
            itc_heads,
            stua_heads,
        };
        net.set_spiking_frozen(false);
        Ok(net)
    }

    /// Freezes or releases the spiking layers and collector. A disabled
    /// collector stays frozen at its initial value either way.
    pub fn set_spiking_frozen(&mut self, frozen: bool) {
        set_frozen(&mut self.store, frozen);
        if !self.cfg.collector_enabled {
            self.store.set_group_frozen(COLLECTOR_GROUP, true);
        }
    }

    pub fn tokenize(&self, caption: &str) -> TokenSequence {
        self.vocab.tokenize(caption)
    }

    /// Rate-codes each image's grayscale plane, patch by patch, with its own seed.
    pub fn spike_input(&self, images: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[0] != seeds.len() {
            return Err(CoreError::Contract(format!(
                "spike_input needs [b, c, h, w] images and one seed each, got {s:?} and {}",
                seeds.len()
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let per = c * h * w;
        let trains = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let gray = grayscale(&images.data()[i * per..(i + 1) * per], c);
                encode_probabilistic(&patch_major(&gray, h, w, self.cfg.patch), self.cfg.time_window, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        stack_trains(&trains, self.cfg.patch * self.cfg.patch)
    }

    /// Both visual streams and their fusion for a batch.
    pub fn encode_visual<'t>(&self, p: &Bindings<'t>, images: &Tensor, spikes: &Tensor) -> Result<VisualOutput<'t>> {
        let tape = p.get(self.collector.c).tape();
        let f_cnn = self.cnn.encode_concrete(p, tape.leaf(images))?;
        let counts = self.snn.encode_abstract(p, tape.leaf(spikes), false)?;
        let f_snn = self.collector.readout(p, counts)?;
        let tokens = match self.cfg.visual_mode.sr_mode() {
            None => f_snn,
            Some(mode) => {
                let sr = (mode == SrMode::Trainable)
                    .then(|| self.gate.summary_ratio(p, f_cnn))
                    .transpose()?;
                fuse(sr, f_snn, f_cnn, mode)?
            }
        };
        Ok(VisualOutput {
            f_cnn,
            counts,
            f_snn,
            tokens,
        })
    }

    /// Contextual `[CLS]` rows `[B, d]` of a text-only pass.
    pub fn text_cls<'t>(&self, p: &Bindings<'t>, captions: &[TokenSequence]) -> Result<Var<'t>> {
        let text = TextBatch::new(captions);
        let (x, mask) = self.transformer.embed_joint(p, None, &text)?;
        let h = self.transformer.encode(p, x, &mask, None)?;
        let rows: Vec<usize> = (0..text.batch).map(|i| i * text.len).collect();
        self.transformer.select_rows(h, &rows)
    }

    /// Normalized ITC embeddings `(image, text)`, each `[B, d_align]`.
    pub fn retrieval_embeddings<'t>(
        &self,
        p: &Bindings<'t>,
        visual: &VisualOutput<'t>,
        captions: &[TokenSequence],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let img = self.itc_heads.embed_visual(p, visual.tokens.mean_axis(1)?)?;
        let txt = self.itc_heads.embed_text(p, self.text_cls(p, captions)?)?;
        Ok((img, txt))
    }

    /// Builds every active loss for one batch on `tape`.
    ///
    /// The joint pass stacks three groups of sequences: matched pairs,
    /// hardest-negative pairs for ITM, and the masked copies used by MLM and
    /// (when active) MVM.
    pub fn batch_losses<'t>(
        &self,
        p: &Bindings<'t>,
        batch: &PairBatch,
        losses: LossSet,
        queues: &mut ItcQueues,
        rng: &mut Rng,
    ) -> Result<LossTerms<'t>> {
        let tape = p.get(self.collector.c).tape();
        let b = batch.captions.len();
        let n = self.cfg.num_patches();
        let m1 = self.cfg.m1;
        let visual = self.encode_visual(p, &batch.images, &batch.spikes)?;
        let cls = self.text_cls(p, &batch.captions)?;
        let img_emb = self.itc_heads.embed_visual(p, visual.tokens.mean_axis(1)?)?;
        let txt_emb = self.itc_heads.embed_text(p, cls)?;
        let itc = if losses.itc {
            Some(itc_loss(img_emb, txt_emb, self.itc_heads.tau(p), queues)?)
        } else {
            None
        };
        let stua = if losses.stua {
            let v = self.stua_heads.embed_visual(p, visual.f_snn.mean_axis(1)?)?;
            let w = self.stua_heads.embed_text(p, cls)?;
            Some(stua_loss(stua_score(v, w)?, self.stua_heads.tau(p))?)
        } else {
            None
        };

        let scores = img_emb.detach().matmul(txt_emb.detach().transpose()?)?.value();
        let negatives = if losses.itm {
            hardest_negatives(&scores, &batch.captions.iter().map(|c| &c.ids).collect::<Vec<_>>())
        } else {
            vec![None; b]
        };
        let neg_pairs: Vec<(usize, usize)> = negatives
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
            .collect();

        let mut masked_caps = Vec::with_capacity(b);
        let mut text_targets = Vec::with_capacity(b);
        for c in &batch.captions {
            let (m, t) = mask_tokens(c, self.cfg.mask_rate, rng);
            masked_caps.push(m);
            text_targets.push(t);
        }
        let patch_masks: Vec<Vec<usize>> = if losses.mvm {
            (0..b).map(|_| mask_patches(n, self.cfg.patch_mask_rate, rng)).collect()
        } else {
            vec![Vec::new(); b]
        };

        let flat_tokens = visual.tokens.reshape(&[b, n * m1])?;
        let mut keep = vec![1.0; b * n * m1];
        for (i, ps) in patch_masks.iter().enumerate() {
            for &pidx in ps {
                keep[(i * n + pidx) * m1..(i * n + pidx + 1) * m1].fill(0.0);
            }
        }
        let masked_visual = flat_tokens.mul(tape.constant(&[b, n * m1], keep)?)?;
        let neg_visual = flat_tokens.gather_rows(&neg_pairs.iter().map(|&(i, _)| i).collect::<Vec<_>>())?;
        let mut parts = vec![flat_tokens];
        if !neg_pairs.is_empty() {
            parts.push(neg_visual);
        }
        parts.push(masked_visual);
        let joint_visual = tape.concat(&parts, 0)?;
        let total_seqs = 2 * b + neg_pairs.len();
        let joint_visual = joint_visual.reshape(&[total_seqs, n, m1])?;

        let mut seqs: Vec<TokenSequence> = batch.captions.clone();
        seqs.extend(neg_pairs.iter().map(|&(_, j)| batch.captions[j].clone()));
        seqs.extend(masked_caps.iter().cloned());
        let text = TextBatch::new(&seqs);
        let (x, mask) = self.transformer.embed_joint(p, Some(joint_visual), &text)?;
        let h = self.transformer.encode(p, x, &mask, None)?;
        let seq_len = text.len + n;

        let itm = if losses.itm {
            let k = b + neg_pairs.len();
            let pooled = self.transformer.pooled(p, h.narrow(0, 0, k)?)?;
            let mut labels = vec![true; b];
            labels.extend(std::iter::repeat_n(false, neg_pairs.len()));
            Some(itm_loss(self.transformer.itm_logits(p, pooled)?, &labels)?)
        } else {
            None
        };
        let masked_base = b + neg_pairs.len();
        let mlm = if losses.mlm {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (i, t) in text_targets.iter().enumerate() {
                for (pos, target) in t.iter().enumerate() {
                    if let Some(id) = target {
                        rows.push((masked_base + i) * seq_len + pos);
                        targets.push(Some(*id));
                    }
                }
            }
            if rows.is_empty() {
                None
            } else {
                let logits = self.transformer.mlm_logits(p, self.transformer.select_rows(h, &rows)?)?;
                Some(mlm_loss(logits, &targets)?)
            }
        } else {
            None
        };
        let mvm = if losses.mvm {
            let counts = visual.counts.value();
            let m2 = self.cfg.m2;
            let mut rows = Vec::new();
            let mut labels: Vec<SpikeLabel> = Vec::new();
            for (i, ps) in patch_masks.iter().enumerate() {
                let sample = &counts[i * n * m2..(i + 1) * n * m2];
                labels.extend(generate_spike_labels(sample, m2, ps));
                rows.extend(ps.iter().map(|&pidx| (masked_base + i) * seq_len + text.len + pidx));
            }
            let logits = self.transformer.mvm_logits(p, self.transformer.select_rows(h, &rows)?)?;
            Some(mvm_loss(logits, &labels)?)
        } else {
            None
        };

        let active: Vec<Var<'t>> = [itc, itm, mlm, mvm, stua].into_iter().flatten().collect();
        let mut total = tape.constant(&[1], vec![0.0])?;
        for term in &active {
            total = total.add(*term)?;
        }
        Ok(LossTerms {
            itc,
            itm,
            mlm,
            mvm,
            stua,
            total,
        })
    }

    /// Gradient-free visual tokens `[B, N, M1]` for export.
    pub fn fused_tokens(&self, images: &Tensor, spikes: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        Ok(self.encode_visual(&p, images, spikes)?.tokens.to_tensor())
    }

    /// Re-applies parameter constraints after an optimizer step.
    pub fn after_step(&mut self) {
        self.itc_heads.clamp_temperature(&mut self.store);
        self.stua_heads.clamp_temperature(&mut self.store);
    }
}
