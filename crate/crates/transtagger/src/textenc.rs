//! Tokenizer, input embeddings, and the bidirectional transformer encoder
//! that turns each textual field into a [CLS] summary vector.
//!
//! The encoder follows the BERT input recipe: token + learned position +
//! segment embeddings, then `layers` blocks of multi-head self-attention and
//! feed-forward with residual connections and layer norm. Sequences are
//! encoded from scratch; there is no pre-trained checkpoint loading and no
//! subword tokenization.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token id {0} outside vocabulary of size {1}")]
    IdOutOfRange(usize, usize),
    #[error("sequence length {n} exceeds position table size {max}")]
    TooLong { n: usize, max: usize },
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::Error),
    #[error("vocab file: {0}")]
    Io(#[from] std::io::Error),
}

/// Token vocabulary with reserved ids 0=[PAD], 1=[UNK], 2=[CLS].
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: IndexMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Reserved tokens plus the most frequent normalized corpus tokens,
    /// ties broken lexicographically. `max_size` counts the reserved three.
    pub fn build(corpus: &[String], max_size: usize) -> Vocab {
        assert!(max_size >= 3, "vocab needs room for reserved tokens");
        let mut counts: IndexMap<String, usize> = IndexMap::new();
        for text in corpus {
            for tok in normalize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
        ];
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - 3)
                .map(|(tok, _)| tok),
        );
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut out = String::new();
        for tok in &self.tokens {
            let _ = writeln!(out, "{}", tok);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, Error> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Lowercase and split on whitespace; punctuation marks become their own
/// tokens.
fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// A tokenized sequence: `[CLS]` first, then content ids; the mask marks
/// non-[PAD] positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with [PAD] (mask false) up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.mask.push(false);
        }
    }
}

/// Lowercase, split off punctuation, prepend [CLS], truncate to `max_len`,
/// map out-of-vocabulary tokens to [UNK].
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    assert!(max_len >= 1);
    let mut ids = vec![CLS_ID];
    for tok in normalize(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&tok).unwrap_or(UNK_ID));
    }
    let mask = vec![true; ids.len()];
    TokenSeq { ids, mask }
}

/// Encoder hyperparameters. `hidden` must divide evenly by `heads`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 128,
            ff: 256,
            dropout: 0.1,
            max_len: 100,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ff == 0 {
            return Err(Error::BadConfig("all sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::BadConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Final hidden states `E` (N x H) and the [CLS] row `C`.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub e: Tensor,
    pub c: Tensor,
}

const INIT_SCALE: f64 = 0.02;

/// Register embedding tables and encoder block parameters under `prefix`.
pub fn init_text_params<R: Rng>(
    rng: &mut R,
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    vocab_size: usize,
) {
    let h = cfg.hidden;
    store.insert_uniform(rng, &format!("{prefix}.tok_emb"), &[vocab_size, h], -INIT_SCALE, INIT_SCALE);
    store.insert_uniform(rng, &format!("{prefix}.pos_emb"), &[cfg.max_len, h], -INIT_SCALE, INIT_SCALE);
    store.insert_zeros(&format!("{prefix}.seg_emb"), &[1, h]);
    init_stack_params(rng, store, prefix, cfg.layers, cfg.hidden, cfg.ff);
}

/// Parameters for a stack of standard encoder blocks of width `width`.
pub fn init_stack_params<R: Rng>(
    rng: &mut R,
    store: &mut ParamStore,
    prefix: &str,
    layers: usize,
    width: usize,
    ff: usize,
) {
    for l in 0..layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert_uniform(rng, &format!("{prefix}.l{l}.attn.{w}"), &[width, width], -INIT_SCALE, INIT_SCALE);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert_zeros(&format!("{prefix}.l{l}.attn.{b}"), &[width]);
        }
        store.insert_ones(&format!("{prefix}.l{l}.ln1.gamma"), &[width]);
        store.insert_zeros(&format!("{prefix}.l{l}.ln1.beta"), &[width]);
        store.insert_uniform(rng, &format!("{prefix}.l{l}.ff.w1"), &[width, ff], -INIT_SCALE, INIT_SCALE);
        store.insert_zeros(&format!("{prefix}.l{l}.ff.b1"), &[ff]);
        store.insert_uniform(rng, &format!("{prefix}.l{l}.ff.w2"), &[ff, width], -INIT_SCALE, INIT_SCALE);
        store.insert_zeros(&format!("{prefix}.l{l}.ff.b2"), &[width]);
        store.insert_ones(&format!("{prefix}.l{l}.ln2.gamma"), &[width]);
        store.insert_zeros(&format!("{prefix}.l{l}.ln2.beta"), &[width]);
    }
}

/// A stack of encoder blocks over `n_blocks` independent row blocks of
/// length `block_len` packed into one `[n_blocks * block_len, width]` node.
/// Attention never crosses block boundaries; `key_pad[b][k]` marks keys of
/// block `b` to exclude.
#[allow(clippy::too_many_arguments)]
pub fn encoder_stack(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    heads: usize,
    dropout: f64,
    x0: NodeId,
    block_len: usize,
    n_blocks: usize,
    key_pad: Option<&[Vec<bool>]>,
) -> Result<NodeId, Error> {
    let width = g.node_shape(x0)[1];
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    // per block: an [block_len * block_len] mask replicated over query rows
    let block_masks: Vec<Option<Arc<Vec<bool>>>> = (0..n_blocks)
        .map(|b| {
            let pad = key_pad.map(|m| &m[b])?;
            if pad.iter().any(|&p| p) {
                let mut mask = Vec::with_capacity(block_len * block_len);
                for _q in 0..block_len {
                    mask.extend_from_slice(pad);
                }
                Some(Arc::new(mask))
            } else {
                None
            }
        })
        .collect();

    let mut x = x0;
    for l in 0..layers {
        let p = |suffix: &str| format!("{prefix}.l{l}.{suffix}");
        let wq = g.param_from(store, &p("attn.wq"))?;
        let bq = g.param_from(store, &p("attn.bq"))?;
        let wk = g.param_from(store, &p("attn.wk"))?;
        let bk = g.param_from(store, &p("attn.bk"))?;
        let wv = g.param_from(store, &p("attn.wv"))?;
        let bv = g.param_from(store, &p("attn.bv"))?;
        let wo = g.param_from(store, &p("attn.wo"))?;
        let bo = g.param_from(store, &p("attn.bo"))?;

        let q_all = g.matmul(x, wq).and_then(|n| g.add(n, bq))?;
        let k_all = g.matmul(x, wk).and_then(|n| g.add(n, bk))?;
        let v_all = g.matmul(x, wv).and_then(|n| g.add(n, bv))?;

        let mut block_ctx = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let row0 = b * block_len;
            let qb = g.slice(q_all, 0, row0, block_len)?;
            let kb = g.slice(k_all, 0, row0, block_len)?;
            let vb = g.slice(v_all, 0, row0, block_len)?;
            let mut head_ctx = Vec::with_capacity(heads);
            for hh in 0..heads {
                let col0 = hh * head_dim;
                let qh = g.slice(qb, 1, col0, head_dim)?;
                let kh = g.slice(kb, 1, col0, head_dim)?;
                let vh = g.slice(vb, 1, col0, head_dim)?;
                let kt = g.transpose(kh)?;
                let mut scores = g.matmul(qh, kt)?;
                scores = g.scale(scores, scale)?;
                if let Some(mask) = &block_masks[b] {
                    scores = g.mask_fill(scores, mask.clone(), -1e30)?;
                }
                let probs = g.softmax(scores, 1)?;
                let probs = g.dropout(probs, dropout)?;
                head_ctx.push(g.matmul(probs, vh)?);
            }
            block_ctx.push(g.concat(&head_ctx, 1)?);
        }
        let ctx = g.concat(&block_ctx, 0)?;
        let attn = g.matmul(ctx, wo).and_then(|n| g.add(n, bo))?;
        let attn = g.dropout(attn, dropout)?;
        let res1 = g.add(x, attn)?;
        let g1 = g.param_from(store, &p("ln1.gamma"))?;
        let b1n = g.param_from(store, &p("ln1.beta"))?;
        let norm1 = g.layer_norm(res1, g1, b1n)?;

        let w1 = g.param_from(store, &p("ff.w1"))?;
        let fb1 = g.param_from(store, &p("ff.b1"))?;
        let w2 = g.param_from(store, &p("ff.w2"))?;
        let fb2 = g.param_from(store, &p("ff.b2"))?;
        let h1 = g.matmul(norm1, w1).and_then(|n| g.add(n, fb1))?;
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, w2).and_then(|n| g.add(n, fb2))?;
        let h2 = g.dropout(h2, dropout)?;
        let res2 = g.add(norm1, h2)?;
        let g2 = g.param_from(store, &p("ln2.gamma"))?;
        let b2n = g.param_from(store, &p("ln2.beta"))?;
        x = g.layer_norm(res2, g2, b2n)?;
    }
    Ok(x)
}

/// Batched graph for a set of sequences sharing the encoder under `prefix`.
/// Sequences are padded to a common length; the result holds the packed
/// final hidden states and the per-sequence [CLS] rows as `[n_seqs, H]`.
pub struct TextBatch {
    /// `[n_seqs * padded_len, H]` final hidden states.
    pub hidden: NodeId,
    /// `[n_seqs, H]`, row b = [CLS] vector of sequence b.
    pub cls: NodeId,
    pub padded_len: usize,
    pub n_seqs: usize,
}

/// Add the embedding + encoder graph for `seqs` to `g`.
pub fn build_text_batch(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    seqs: &[TokenSeq],
) -> Result<TextBatch, Error> {
    cfg.validate()?;
    let n = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
    if n > cfg.max_len {
        return Err(Error::TooLong {
            n,
            max: cfg.max_len,
        });
    }
    let mut padded: Vec<TokenSeq> = seqs.to_vec();
    for s in padded.iter_mut() {
        s.pad_to(n);
    }

    let mut flat_ids = Vec::with_capacity(padded.len() * n);
    let mut pos_ids = Vec::with_capacity(padded.len() * n);
    for s in &padded {
        flat_ids.extend_from_slice(&s.ids);
        pos_ids.extend(0..n);
    }

    let tok_table = g.param_from(store, &format!("{prefix}.tok_emb"))?;
    let pos_table = g.param_from(store, &format!("{prefix}.pos_emb"))?;
    let seg_table = g.param_from(store, &format!("{prefix}.seg_emb"))?;
    let tok = g.embed_lookup(tok_table, &flat_ids)?;
    let pos = g.embed_lookup(pos_table, &pos_ids)?;
    let seg = g.embed_lookup(seg_table, &vec![0; flat_ids.len()])?;
    let sum = g.add(tok, pos)?;
    let x0 = g.add(sum, seg)?;

    let key_pad: Vec<Vec<bool>> = padded
        .iter()
        .map(|s| s.mask.iter().map(|&m| !m).collect())
        .collect();
    let hidden = encoder_stack(
        g,
        store,
        prefix,
        cfg.layers,
        cfg.heads,
        cfg.dropout,
        x0,
        n,
        padded.len(),
        Some(&key_pad),
    )?;

    let mut cls_rows = Vec::with_capacity(padded.len());
    for b in 0..padded.len() {
        cls_rows.push(g.slice(hidden, 0, b * n, 1)?);
    }
    let cls = g.concat(&cls_rows, 0)?;
    Ok(TextBatch {
        hidden,
        cls,
        padded_len: n,
        n_seqs: padded.len(),
    })
}

/// Token + position + segment embedding rows for one sequence, evaluated
/// eagerly: row i = tok[ids[i]] + pos[i] + seg[0].
pub fn embed_sequence(
    seq: &TokenSeq,
    store: &ParamStore,
    prefix: &str,
) -> Result<Tensor, Error> {
    let mut g = Graph::new(0);
    let tok_table = g.param_from(store, &format!("{prefix}.tok_emb"))?;
    let pos_table = g.param_from(store, &format!("{prefix}.pos_emb"))?;
    let seg_table = g.param_from(store, &format!("{prefix}.seg_emb"))?;
    let max = g.node_shape(pos_table)[0];
    if seq.len() > max {
        return Err(Error::TooLong {
            n: seq.len(),
            max,
        });
    }
    let tok = g.embed_lookup(tok_table, &seq.ids)?;
    let pos = g.embed_lookup(pos_table, &(0..seq.len()).collect::<Vec<_>>())?;
    let seg = g.embed_lookup(seg_table, &vec![0; seq.len()])?;
    let sum = g.add(tok, pos)?;
    let out = g.add(sum, seg)?;
    Ok(g.forward(out, &Default::default())?)
}

/// Run the full encoder on one sequence in eval mode.
pub fn encode_text(
    seq: &TokenSeq,
    cfg: &EncoderConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<EncodedText, Error> {
    let mut g = Graph::new(0);
    let batch = build_text_batch(&mut g, store, prefix, cfg, std::slice::from_ref(seq))?;
    let e = g.forward(batch.hidden, &Default::default())?;
    let c_mat = g.forward(batch.cls, &Default::default())?;
    let h = c_mat.shape[1];
    let c = Tensor::new(vec![h], c_mat.data).unwrap();
    Ok(EncodedText { e, c })
}
