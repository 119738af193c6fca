//! Byte-level tokenizer and a small pre-norm transformer encoder, plus a
//! precomputed-embedding backend serving stored hidden states by text hash.

mod backend;
mod tokenizer;

pub use backend::{EmbeddingStore, OffsetReader};
pub use tokenizer::{byte_id, detokenize, tokenize, TokenSequence, BYTE_VOCAB_SIZE, CLS_ID, PAD_ID, UNK_ID};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Mode, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: BYTE_VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size must cover CLS/PAD/UNK plus content"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::config("encoder dimensions must be nonzero"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<E> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<E> {
    pub norm1: NormParams<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub norm2: NormParams<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<E> {
    pub tok_embed: Tensor<E>,
    pub pos_embed: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
}

pub const INIT_STD: f64 = 0.02;

impl<E: Real> NormParams<E> {
    fn unit(d: usize) -> Self {
        NormParams { gamma: Tensor::filled(&[d], E::one()), beta: Tensor::zeros(&[d]) }
    }
}

impl EncoderParams<f64> {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                norm1: NormParams::unit(d),
                wq: Tensor::randn(&[d, d], INIT_STD, rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], INIT_STD, rng),
                wv: Tensor::randn(&[d, d], INIT_STD, rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], INIT_STD, rng),
                bo: Tensor::zeros(&[d]),
                norm2: NormParams::unit(d),
                w1: Tensor::randn(&[d, cfg.d_ff], INIT_STD, rng),
                b1: Tensor::zeros(&[cfg.d_ff]),
                w2: Tensor::randn(&[cfg.d_ff, d], INIT_STD, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        EncoderParams {
            tok_embed: Tensor::randn(&[cfg.vocab_size, d], INIT_STD, rng),
            pos_embed: Tensor::randn(&[cfg.max_len, d], INIT_STD, rng),
            layers,
        }
    }
}

impl<E: Real> EncoderParams<E> {
    pub fn cast<F: Real>(&self) -> EncoderParams<F> {
        EncoderParams {
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1: NormParams { gamma: l.norm1.gamma.cast(), beta: l.norm1.beta.cast() },
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    norm2: NormParams { gamma: l.norm2.gamma.cast(), beta: l.norm2.beta.cast() },
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
        }
    }

    /// Parameters in the canonical traversal order shared by `bind`,
    /// `EncoderVars::from_ordered` and the serialized container.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("encoder.tok_embed".into(), &self.tok_embed),
            ("encoder.pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |f: &str| format!("encoder.layer{i}.{f}");
            out.push((p("norm1.gamma"), &l.norm1.gamma));
            out.push((p("norm1.beta"), &l.norm1.beta));
            out.push((p("wq"), &l.wq));
            out.push((p("bq"), &l.bq));
            out.push((p("wk"), &l.wk));
            out.push((p("wv"), &l.wv));
            out.push((p("bv"), &l.bv));
            out.push((p("wo"), &l.wo));
            out.push((p("bo"), &l.bo));
            out.push((p("norm2.gamma"), &l.norm2.gamma));
            out.push((p("norm2.beta"), &l.norm2.beta));
            out.push((p("w1"), &l.w1));
            out.push((p("b1"), &l.b1));
            out.push((p("w2"), &l.w2));
            out.push((p("b2"), &l.b2));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("encoder.tok_embed".into(), &mut self.tok_embed),
            ("encoder.pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |f: &str| format!("encoder.layer{i}.{f}");
            out.push((p("norm1.gamma"), &mut l.norm1.gamma));
            out.push((p("norm1.beta"), &mut l.norm1.beta));
            out.push((p("wq"), &mut l.wq));
            out.push((p("bq"), &mut l.bq));
            out.push((p("wk"), &mut l.wk));
            out.push((p("wv"), &mut l.wv));
            out.push((p("bv"), &mut l.bv));
            out.push((p("wo"), &mut l.wo));
            out.push((p("bo"), &mut l.bo));
            out.push((p("norm2.gamma"), &mut l.norm2.gamma));
            out.push((p("norm2.beta"), &mut l.norm2.beta));
            out.push((p("w1"), &mut l.w1));
            out.push((p("b1"), &mut l.b1));
            out.push((p("w2"), &mut l.w2));
            out.push((p("b2"), &mut l.b2));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub norm1: NormVars,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm2: NormVars,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub tok: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    /// Rebuild the structure from vars laid out in `named()` order.
    pub fn from_ordered(vars: &[Var], n_layers: usize) -> Result<Self> {
        let want = 2 + 15 * n_layers;
        if vars.len() != want {
            return Err(Error::dim("encoder_vars", format!("expected {want} vars, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok = next();
        let pos = next();
        let layers = (0..n_layers)
            .map(|_| LayerVars {
                norm1: NormVars { gamma: next(), beta: next() },
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                norm2: NormVars { gamma: next(), beta: next() },
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Ok(EncoderVars { tok, pos, layers })
    }
}

/// Put every encoder parameter on the tape (leaves when trainable,
/// constants when frozen) in canonical order.
pub fn bind<E: Real>(params: &EncoderParams<E>, tape: &mut Tape<E>, trainable: bool) -> EncoderVars {
    let named = params.named();
    let vars: Vec<Var> = named
        .into_iter()
        .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    EncoderVars::from_ordered(&vars, params.layers.len()).expect("bind order matches named order")
}

/// Pre-norm transformer forward over one sequence -> hidden states [L, d].
pub fn encode_with_vars<E: Real>(
    tape: &mut Tape<E>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    mode: Mode,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::data("cannot encode an empty sequence"));
    }
    if seq.len() > cfg.max_len {
        return Err(Error::data(format!("sequence length {} exceeds max_len {}", seq.len(), cfg.max_len)));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::data(format!("token id {bad} outside vocab of {}", cfg.vocab_size)));
    }
    let l = seq.len();
    let positions: Vec<usize> = (0..l).collect();
    let tok = tape.embed(vars.tok, &seq.ids)?;
    let pos = tape.embed(vars.pos, &positions)?;
    let mut h = tape.add(tok, pos)?;
    for layer in &vars.layers {
        let n1 = tape.layer_norm(h, layer.norm1.gamma, layer.norm1.beta, cfg.layer_norm_eps)?;
        let q = tape.matmul(n1, layer.wq)?;
        let q = tape.add_bias(q, layer.bq)?;
        // No key bias: it shifts every score in a row equally and cancels in the
        // row-wise softmax, so it could never receive gradient.
        let k = tape.matmul(n1, layer.wk)?;
        let v = tape.matmul(n1, layer.wv)?;
        let v = tape.add_bias(v, layer.bv)?;
        let mut a = tape.masked_attention(q, k, v, &seq.mask, cfg.n_heads)?;
        a = tape.matmul(a, layer.wo)?;
        a = tape.add_bias(a, layer.bo)?;
        if mode.is_train() {
            a = tape.dropout(a, cfg.dropout)?;
        }
        h = tape.add(h, a)?;
        let n2 = tape.layer_norm(h, layer.norm2.gamma, layer.norm2.beta, cfg.layer_norm_eps)?;
        let f = tape.matmul(n2, layer.w1)?;
        let f = tape.add_bias(f, layer.b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, layer.w2)?;
        let mut f = tape.add_bias(f, layer.b2)?;
        if mode.is_train() {
            f = tape.dropout(f, cfg.dropout)?;
        }
        h = tape.add(h, f)?;
    }
    Ok(h)
}

/// Either a trainable transformer or a store of precomputed hidden states.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderBackend<E: Real> {
    Learned { config: EncoderConfig, params: EncoderParams<E> },
    Precomputed(EmbeddingStore),
}

impl<E: Real> EncoderBackend<E> {
    pub fn d_model(&self) -> usize {
        match self {
            EncoderBackend::Learned { config, .. } => config.d_model,
            EncoderBackend::Precomputed(store) => store.d_model(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            EncoderBackend::Learned { config, .. } => config.max_len,
            EncoderBackend::Precomputed(_) => usize::MAX,
        }
    }
}

/// Hidden states, CLS var and the effective attention mask for a sequence.
pub struct Encoded {
    pub h: Var,
    pub cls: Var,
    pub mask: Vec<u8>,
}

pub fn encode<E: Real>(
    backend: &EncoderBackend<E>,
    tape: &mut Tape<E>,
    seq: &TokenSequence,
    mode: Mode,
    trainable: bool,
) -> Result<Encoded> {
    match backend {
        EncoderBackend::Learned { config, params } => {
            let vars = bind(params, tape, trainable);
            let h = encode_with_vars(tape, &vars, config, seq, mode)?;
            let cls = tape.select_row(h, 0)?;
            Ok(Encoded { h, cls, mask: seq.mask.clone() })
        }
        EncoderBackend::Precomputed(store) => {
            let (h, mask) = encode_from_store(store, tape, seq)?;
            let cls = tape.select_row(h, 0)?;
            Ok(Encoded { h, cls, mask })
        }
    }
}

/// Serve the stored rows for a sequence's text as a constant; the effective
/// mask covers every stored row.
pub fn encode_from_store<E: Real>(
    store: &EmbeddingStore,
    tape: &mut Tape<E>,
    seq: &TokenSequence,
) -> Result<(Var, Vec<u8>)> {
    let text = detokenize(&seq.ids);
    let stored: Tensor<E> = store.get(&text)?.cast();
    let rows = stored.rows();
    let h = tape.constant(stored);
    Ok((h, vec![1; rows]))
}
