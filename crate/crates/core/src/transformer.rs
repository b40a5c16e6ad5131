//! Whitespace vocabulary, joint text/image embeddings and a pre-norm
//! single-stream transformer with pooled task heads.

use std::collections::{BTreeMap, HashMap};

use ashnet_tensor::rng::Rng;
use ashnet_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const TRANSFORMER_GROUP: &str = "transformer";

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then the distinct lowercase words in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> = words.into_iter().map(str::to_lowercase).collect();
        sorted.sort();
        sorted.dedup();
        sorted.retain(|w| !RESERVED.contains(&w.as_str()));
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(sorted).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Builds a vocabulary from every whitespace-separated word of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        Vocabulary::from_words(words.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercase whitespace split wrapped as `[CLS] … [SEP]`; unseen words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend(
            text.split_whitespace()
                .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK)),
        );
        ids.push(SEP);
        TokenSequence::text(ids)
    }

    /// JSON object mapping token to id.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| CoreError::Config(format!("bad vocabulary: {e}")))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in &map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| CoreError::Config(format!("vocabulary id {i} out of range")))?;
            *slot = t.clone();
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(CoreError::Config(format!("vocabulary must reserve id {i} for {r}")));
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, index })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// 0 for text, 1 for image tokens.
    pub type_ids: Vec<usize>,
    /// 1 on real tokens, 0 on padding.
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn text(ids: Vec<usize>) -> Self {
        let n = ids.len();
        TokenSequence {
            ids,
            positions: (0..n).collect(),
            type_ids: vec![0; n],
            attention_mask: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `[PAD]` tokens up to `len`.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        for p in self.len()..len {
            out.ids.push(PAD);
            out.positions.push(p);
            out.type_ids.push(0);
            out.attention_mask.push(0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 3,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(CoreError::Config("transformer sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Padded text tokens for a batch of sequences, `batch × len` row-major.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn new(seqs: &[TokenSequence]) -> Self {
        let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let p = s.padded(len);
            ids.extend(p.ids);
            mask.extend(p.attention_mask.iter().map(|&m| m == 1));
        }
        TextBatch {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }
}

struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Affine {
            weight: store.add(
                format!("{name}.weight"),
                TRANSFORMER_GROUP,
                Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            ),
            bias: store.add(format!("{name}.bias"), TRANSFORMER_GROUP, Tensor::zeros(&[fan_out])),
        }
    }

    fn apply<'t>(&self, p: &Bindings<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(p.get(self.weight), Some(p.get(self.bias)))?)
    }
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), TRANSFORMER_GROUP, Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), TRANSFORMER_GROUP, Tensor::zeros(&[d])),
        }
    }

    fn apply<'t>(&self, p: &Bindings<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(p.get(self.gamma), p.get(self.beta), LN_EPS)?)
    }
}

struct Block {
    ln1: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: Norm,
    ff1: Affine,
    ff2: Affine,
}

/// Single-stream encoder over `[CLS text SEP ∥ image]` sequences.
pub struct AlignTransformer {
    cfg: TransformerConfig,
    vocab_size: usize,
    num_patches: usize,
    m1: usize,
    m2: usize,
    word: ParamId,
    text_pos: ParamId,
    image_pos: ParamId,
    token_type: ParamId,
    image_proj: Affine,
    emb_norm: Norm,
    blocks: Vec<Block>,
    final_norm: Norm,
    pooler: Affine,
    itm: Affine,
    mlm: Affine,
    mvm: Affine,
}

impl AlignTransformer {
    pub fn new(
        store: &mut ParamStore,
        cfg: TransformerConfig,
        vocab_size: usize,
        num_patches: usize,
        m1: usize,
        m2: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let table = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut Rng| {
            store.add(name, TRANSFORMER_GROUP, Tensor::randn(&[rows, d], 0.02, rng))
        };
        let word = table(store, "tf.word_emb", vocab_size, rng);
        let text_pos = table(store, "tf.text_pos_emb", cfg.max_len, rng);
        let image_pos = table(store, "tf.image_pos_emb", num_patches, rng);
        let token_type = table(store, "tf.type_emb", 2, rng);
        let image_proj = Affine::new(store, "tf.image_proj", m1, d, rng);
        let emb_norm = Norm::new(store, "tf.emb_ln", d);
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                ln1: Norm::new(store, &format!("tf.{l}.ln1"), d),
                q: Affine::new(store, &format!("tf.{l}.q"), d, d, rng),
                k: Affine::new(store, &format!("tf.{l}.k"), d, d, rng),
                v: Affine::new(store, &format!("tf.{l}.v"), d, d, rng),
                o: Affine::new(store, &format!("tf.{l}.o"), d, d, rng),
                ln2: Norm::new(store, &format!("tf.{l}.ln2"), d),
                ff1: Affine::new(store, &format!("tf.{l}.ff1"), d, cfg.d_ff, rng),
                ff2: Affine::new(store, &format!("tf.{l}.ff2"), cfg.d_ff, d, rng),
            })
            .collect();
        Ok(AlignTransformer {
            cfg,
            vocab_size,
            num_patches,
            m1,
            m2,
            word,
            text_pos,
            image_pos,
            token_type,
            image_proj,
            emb_norm,
            blocks,
            final_norm: Norm::new(store, "tf.final_ln", d),
            pooler: Affine::new(store, "tf.pooler", d, d, rng),
            itm: Affine::new(store, "tf.itm_head", d, 2, rng),
            mlm: Affine::new(store, "tf.mlm_head", d, vocab_size, rng),
            mvm: Affine::new(store, "tf.mvm_head", d, m2, rng),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    /// Joint embeddings `[B, L, d]` with `L = text.len + N` (or `text.len`
    /// without image tokens), plus the key mask, `B × L` row-major.
    ///
    /// Text rows are word + position + type-0 embeddings; image rows are the
    /// projected visual tokens plus their own position table and type 1.
    pub fn embed_joint<'t>(
        &self,
        p: &Bindings<'t>,
        visual: Option<Var<'t>>,
        text: &TextBatch,
    ) -> Result<(Var<'t>, Vec<bool>)> {
        let tape = p.get(self.word).tape();
        let d = self.cfg.d_model;
        let (b, lt) = (text.batch, text.len);
        let n = visual.map_or(0, |_| self.num_patches);
        if lt + n > self.cfg.max_len {
            return Err(CoreError::SequenceLength {
                len: lt + n,
                max: self.cfg.max_len,
            });
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..lt).collect();
        let words = p.get(self.word).gather_rows(&text.ids)?;
        let pos = p.get(self.text_pos).gather_rows(&positions)?;
        let ty = p.get(self.token_type).gather_rows(&vec![0; b * lt])?;
        let text_emb = words.add(pos)?.add(ty)?.reshape(&[b, lt, d])?;
        let (joint, mask) = match visual {
            None => (text_emb, text.mask.clone()),
            Some(v) => {
                let vs = v.shape();
                if vs != [b, self.num_patches, self.m1] {
                    return Err(CoreError::Contract(format!(
                        "visual tokens must be [{b}, {}, {}], got {vs:?}",
                        self.num_patches, self.m1
                    )));
                }
                let img = self.image_proj.apply(p, v)?.reshape(&[b * n, d])?;
                let ipos: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
                let img = img
                    .add(p.get(self.image_pos).gather_rows(&ipos)?)?
                    .add(p.get(self.token_type).gather_rows(&vec![1; b * n])?)?
                    .reshape(&[b, n, d])?;
                let mut mask = Vec::with_capacity(b * (lt + n));
                for i in 0..b {
                    mask.extend_from_slice(&text.mask[i * lt..(i + 1) * lt]);
                    mask.extend(std::iter::repeat_n(true, n));
                }
                (tape.concat(&[text_emb, img], 1)?, mask)
            }
        };
        Ok((self.emb_norm.apply(p, joint)?, mask))
    }

    /// Runs every block and the final norm. When `attention` is given, the
    /// `[B·heads, L, L]` attention weights of each layer are appended.
    pub fn encode<'t>(
        &self,
        p: &Bindings<'t>,
        x: Var<'t>,
        mask: &[bool],
        mut attention: Option<&mut Vec<Var<'t>>>,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.cfg.d_model || mask.len() != s[0] * s[1] {
            return Err(CoreError::Contract(format!(
                "encode expects [B, L, {}] with a B·L mask, got {s:?} and {}",
                self.cfg.d_model,
                mask.len()
            )));
        }
        let bias = self.key_bias(x.tape(), s[0], s[1], mask)?;
        let mut h = x;
        for block in &self.blocks {
            let (out, probs) = self.attend(p, block, h, bias)?;
            if let Some(a) = attention.as_deref_mut() {
                a.push(probs);
            }
            h = h.add(out)?;
            let ff = block.ff1.apply(p, block.ln2.apply(p, h)?)?.gelu();
            h = h.add(block.ff2.apply(p, ff)?)?;
        }
        self.final_norm.apply(p, h)
    }

    /// Additive attention bias: 0 on real keys, `-inf` on padding.
    fn key_bias<'t>(&self, tape: &'t Tape, b: usize, l: usize, mask: &[bool]) -> Result<Var<'t>> {
        let heads = self.cfg.heads;
        let mut bias = Vec::with_capacity(b * heads * l * l);
        for i in 0..b {
            let keys: Vec<f64> = mask[i * l..(i + 1) * l]
                .iter()
                .map(|&m| if m { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            for _ in 0..heads * l {
                bias.extend_from_slice(&keys);
            }
        }
        Ok(tape.constant(&[b * heads, l, l], bias)?)
    }

    fn attend<'t>(&self, p: &Bindings<'t>, block: &Block, x: Var<'t>, bias: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = x.shape();
        let (b, l, d) = (s[0], s[1], s[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let normed = block.ln1.apply(p, x)?;
        let split = |a: &Affine| -> Result<Var<'t>> {
            Ok(a.apply(p, normed)?
                .reshape(&[b, l, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, l, dh])?)
        };
        let (q, k, v) = (split(&block.q)?, split(&block.k)?, split(&block.v)?);
        let scores = q.bmm(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt()).add(bias)?;
        let probs = scores.softmax_rows(1.0)?;
        let ctx = probs
            .bmm(v)?
            .reshape(&[b, heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, d])?;
        Ok((block.o.apply(p, ctx)?, probs))
    }

    /// `tanh(affine(row 0))` per sequence: `[B, d]`.
    pub fn pooled<'t>(&self, p: &Bindings<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let s = h.shape();
        let rows: Vec<usize> = (0..s[0]).map(|i| i * s[1]).collect();
        let cls = h.reshape(&[s[0] * s[1], s[2]])?.gather_rows(&rows)?;
        Ok(self.pooler.apply(p, cls)?.tanh())
    }

    /// Rows `rows` of the flattened `[B·L, d]` contextual output.
    pub fn select_rows<'t>(&self, h: Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
        let s = h.shape();
        Ok(h.reshape(&[s[0] * s[1], s[2]])?.gather_rows(rows)?)
    }

    /// Match/mismatch logits `[B, 2]` from pooled vectors.
    pub fn itm_logits<'t>(&self, p: &Bindings<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        self.itm.apply(p, pooled)
    }

    /// Vocabulary logits for contextual rows.
    pub fn mlm_logits<'t>(&self, p: &Bindings<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        self.mlm.apply(p, rows)
    }

    /// Spike-class logits (`M2` classes) for contextual image rows.
    pub fn mvm_logits<'t>(&self, p: &Bindings<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        self.mvm.apply(p, rows)
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    /// Parameter ids of the image position table, for diagnostics and tests.
    pub fn image_position_table(&self) -> ParamId {
        self.image_pos
    }
}
