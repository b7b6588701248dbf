//! Small trainable transformer encoder over sub-token ids.
//!
//! Token + learned positional embeddings feed `n_layers` of post-norm blocks
//! (masked multi-head self-attention, then a gelu feed-forward, each with a
//! residual connection and layer norm). Padded key positions are excluded by
//! the masked softmax, so their attention weight and gradient are exactly
//! zero and padding can never leak into real positions.

use crate::error::{NluError, Result};
use crate::tensor::{Axis, ParamId, ParamSet, Tape, TapeBinding, Tensor};
use rand_chacha::rand_core::RngCore;

/// Layer-norm epsilon, matching the usual transformer setting.
pub const LN_EPS: f64 = 1e-12;

/// Std of the Gaussian parameter init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            max_seq_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| NluError::BadConfig {
            path: "encoder config".into(),
            line: 0,
            reason,
        };
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(bad("d_model, n_layers, n_heads and d_ff must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_seq_len < 3 {
            return Err(bad(format!(
                "max_seq_len {} cannot hold [CLS], a word and [SEP]",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Parameter handles for one encoder block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
}

/// Creates and registers all encoder parameters. Projection weights are
/// `[d_in × d_out]` (forward is `x·W + b`), init N(0, 0.02²), biases zero,
/// layer-norm gain one.
pub fn init_encoder(
    cfg: &EncoderConfig,
    vocab_size: usize,
    params: &mut ParamSet,
    rng: &mut impl RngCore,
) -> EncoderParams {
    let d = cfg.d_model;
    let mut w = |params: &mut ParamSet, name: String, rows: usize, cols: usize| {
        params.add(name, Tensor::randn(vec![rows, cols], INIT_STD, rng))
    };
    let tok_emb = w(params, "encoder.tok_emb".into(), vocab_size, d);
    let pos_emb = w(params, "encoder.pos_emb".into(), cfg.max_seq_len, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("encoder.layer{l}.{s}");
        let layer = LayerParams {
            wq: w(params, p("attn.wq"), d, d),
            bq: params.add(p("attn.bq"), Tensor::zeros(vec![d])),
            wk: w(params, p("attn.wk"), d, d),
            bk: params.add(p("attn.bk"), Tensor::zeros(vec![d])),
            wv: w(params, p("attn.wv"), d, d),
            bv: params.add(p("attn.bv"), Tensor::zeros(vec![d])),
            wo: w(params, p("attn.wo"), d, d),
            bo: params.add(p("attn.bo"), Tensor::zeros(vec![d])),
            ln1_gamma: params.add(p("ln1.gamma"), Tensor::from_vec(vec![1.0; d], vec![d])),
            ln1_beta: params.add(p("ln1.beta"), Tensor::zeros(vec![d])),
            w1: w(params, p("ffn.w1"), d, cfg.d_ff),
            b1: params.add(p("ffn.b1"), Tensor::zeros(vec![cfg.d_ff])),
            w2: w(params, p("ffn.w2"), cfg.d_ff, d),
            b2: params.add(p("ffn.b2"), Tensor::zeros(vec![d])),
            ln2_gamma: params.add(p("ln2.gamma"), Tensor::from_vec(vec![1.0; d], vec![d])),
            ln2_beta: params.add(p("ln2.beta"), Tensor::zeros(vec![d])),
        };
        layers.push(layer);
    }
    EncoderParams {
        tok_emb,
        pos_emb,
        layers,
    }
}

/// Encoded hidden states for one utterance, plus the per-head attention
/// distributions for inspection (layer-major, head-minor order).
pub struct EncodedUtterance {
    /// `[L × d_model]`, one row per sub-token position including padding.
    pub hidden: crate::tensor::TensorId,
    pub attn_probs: Vec<crate::tensor::TensorId>,
}

/// Runs the encoder over one (possibly padded) id row. `mask[i]` is true at
/// real positions; masked keys receive exactly zero attention.
#[allow(clippy::too_many_arguments)]
pub fn encode_utterance(
    tape: &mut Tape,
    bind: &mut TapeBinding,
    params: &ParamSet,
    handles: &EncoderParams,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
    train: bool,
    rng: &mut impl RngCore,
) -> Result<EncodedUtterance> {
    if ids.is_empty() {
        return Err(NluError::BadShape {
            op: "encode",
            shape: vec![0],
            reason: "empty id sequence".into(),
        });
    }
    if ids.len() != mask.len() {
        return Err(NluError::ShapeMismatch {
            op: "encode",
            lhs: vec![ids.len()],
            rhs: vec![mask.len()],
        });
    }
    if ids.len() > cfg.max_seq_len {
        return Err(NluError::UtteranceTooLong {
            preview: format!("{} sub-token ids", ids.len()),
            pieces: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let l = ids.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = bind.get(tape, params, handles.tok_emb);
    let pos = bind.get(tape, params, handles.pos_emb);
    let emb = tape.embed(tok, ids)?;
    let pos_rows = tape.slice_rows(pos, 0, l)?;
    let mut x = tape.add(emb, pos_rows)?;
    x = tape.dropout(x, cfg.dropout, train, rng)?;

    let mut attn_probs = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    for layer in &handles.layers {
        // multi-head self-attention
        let wq = bind.get(tape, params, layer.wq);
        let bq = bind.get(tape, params, layer.bq);
        let wk = bind.get(tape, params, layer.wk);
        let bk = bind.get(tape, params, layer.bk);
        let wv = bind.get(tape, params, layer.wv);
        let bv = bind.get(tape, params, layer.bv);
        let q = tape.matmul(x, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(x, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(x, wv)?;
        let v = tape.add_bias(v, bv)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(v, c0, c1)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax(scores, Axis::Rows, Some(mask))?;
            attn_probs.push(probs);
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let wo = bind.get(tape, params, layer.wo);
        let bo = bind.get(tape, params, layer.bo);
        let proj = tape.matmul(ctx, wo)?;
        let proj = tape.add_bias(proj, bo)?;
        let proj = tape.dropout(proj, cfg.dropout, train, rng)?;
        let res = tape.add(x, proj)?;
        let g1 = bind.get(tape, params, layer.ln1_gamma);
        let b1n = bind.get(tape, params, layer.ln1_beta);
        x = tape.layer_norm(res, g1, b1n, LN_EPS)?;

        // feed-forward
        let w1 = bind.get(tape, params, layer.w1);
        let b1 = bind.get(tape, params, layer.b1);
        let w2 = bind.get(tape, params, layer.w2);
        let b2 = bind.get(tape, params, layer.b2);
        let ff = tape.matmul(x, w1)?;
        let ff = tape.add_bias(ff, b1)?;
        let ff = tape.gelu(ff)?;
        let ff = tape.matmul(ff, w2)?;
        let ff = tape.add_bias(ff, b2)?;
        let ff = tape.dropout(ff, cfg.dropout, train, rng)?;
        let res = tape.add(x, ff)?;
        let g2 = bind.get(tape, params, layer.ln2_gamma);
        let b2n = bind.get(tape, params, layer.ln2_beta);
        x = tape.layer_norm(res, g2, b2n, LN_EPS)?;
    }
    Ok(EncodedUtterance {
        hidden: x,
        attn_probs,
    })
}
