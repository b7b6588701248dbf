//! Attention adapters between the encoder and the decoders.
//!
//! The sub-word adapter turns the hidden states of each word's sub-token span
//! into exactly one representation per word: single-piece words pass their
//! hidden state through untouched, multi-piece words are pooled by an
//! attention over the span that is queried from the span's first piece. The
//! intent adapter then scores every word representation against the `[CLS]`
//! state and forms an utterance summary as the attention-weighted sum.
//!
//! Both adapters expose their attention weights, which is what makes the
//! model's word-level decisions inspectable.

use crate::error::{NluError, Result};
use crate::tensor::{Activation, Axis, ParamId, ParamSet, Tape, TapeBinding, Tensor, TensorId};
use crate::wordpiece::{AlignmentMap, TokenizedUtterance};
use rand_chacha::rand_core::RngCore;

/// Where the intent adapter draws the vectors for its weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IaaSum {
    /// Word representations (pooled for multi-piece words). Default.
    #[default]
    WordReps,
    /// The raw hidden state at each word's first sub-token.
    FirstSubtokenHidden,
}

impl std::str::FromStr for IaaSum {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "word_reps" => Ok(IaaSum::WordReps),
            "first_subtoken_hidden" => Ok(IaaSum::FirstSubtokenHidden),
            other => Err(format!(
                "unknown iaa_sum \"{other}\" (expected word_reps or first_subtoken_hidden)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct IaaParams {
    pub w_int: ParamId,
    pub activation: Activation,
    pub sum_source: IaaSum,
}

pub fn init_saa(
    d_model: usize,
    activation: Activation,
    params: &mut ParamSet,
    rng: &mut impl RngCore,
) -> SaaParams {
    let std = crate::encoder::INIT_STD;
    SaaParams {
        w_q: params.add("saa.wq", Tensor::randn(vec![d_model, d_model], std, rng)),
        w_k: params.add("saa.wk", Tensor::randn(vec![d_model, d_model], std, rng)),
        w_v: params.add("saa.wv", Tensor::randn(vec![d_model, d_model], std, rng)),
        activation,
    }
}

pub fn init_iaa(
    d_model: usize,
    activation: Activation,
    sum_source: IaaSum,
    params: &mut ParamSet,
    rng: &mut impl RngCore,
) -> IaaParams {
    IaaParams {
        w_int: params.add(
            "iaa.w",
            Tensor::randn(vec![d_model, d_model], crate::encoder::INIT_STD, rng),
        ),
        activation,
        sum_source,
    }
}

/// One representation per word plus the span attention that produced it.
pub struct SaaOutput {
    /// `[1 × d]` per word, utterance order.
    pub word_reps: Vec<TensorId>,
    /// All word representations stacked, `[W × d]`.
    pub stacked: TensorId,
    /// Per word: one weight per sub-token piece, summing to one.
    pub attn: Vec<Vec<f64>>,
}

/// Pools sub-token hidden states into word representations.
///
/// With `use_saa` false the attention is bypassed entirely and every word is
/// represented by its first sub-token's hidden state (weight 1 on the first
/// piece), which is the classic joint-BERT reduction.
pub fn saa_forward(
    tape: &mut Tape,
    bind: &mut TapeBinding,
    params: &ParamSet,
    handles: &SaaParams,
    hidden: TensorId,
    alignment: &AlignmentMap,
    use_saa: bool,
) -> Result<SaaOutput> {
    if alignment.is_empty() {
        return Err(NluError::BadShape {
            op: "saa",
            shape: tape.shape(hidden).to_vec(),
            reason: "utterance has no words".into(),
        });
    }
    let n_pieces = tape.shape(hidden)[0];
    let mut word_reps = Vec::with_capacity(alignment.len());
    let mut attn = Vec::with_capacity(alignment.len());
    for (start, end) in alignment.iter() {
        if start == 0 || end <= start || end > n_pieces {
            return Err(NluError::BadShape {
                op: "saa",
                shape: tape.shape(hidden).to_vec(),
                reason: format!("span {start}..{end} outside the hidden rows"),
            });
        }
        let width = end - start;
        if width == 1 || !use_saa {
            // simple word (or attention disabled): first piece stands for the word
            word_reps.push(tape.slice_rows(hidden, start, start + 1)?);
            let mut w = vec![0.0; width];
            w[0] = 1.0;
            attn.push(w);
            continue;
        }
        let span = tape.slice_rows(hidden, start, end)?;
        let first = tape.slice_rows(hidden, start, start + 1)?;
        let wq = bind.get(tape, params, handles.w_q);
        let wk = bind.get(tape, params, handles.w_k);
        let wv = bind.get(tape, params, handles.w_v);
        let q_lin = tape.matmul(first, wq)?;
        let q1 = handles.activation.apply(tape, q_lin)?; // [1×d]
        let k_lin = tape.matmul(span, wk)?;
        let keys = handles.activation.apply(tape, k_lin)?; // [w×d]
        let v_lin = tape.matmul(span, wv)?;
        let vals = handles.activation.apply(tape, v_lin)?; // [w×d]
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q1, kt)?; // [1×w], deliberately unscaled
        let alpha = tape.softmax(scores, Axis::Rows, None)?;
        let rep = tape.matmul(alpha, vals)?; // [1×d]
        word_reps.push(rep);
        attn.push(tape.data(alpha).to_vec());
    }
    let stacked = tape.concat_rows(&word_reps)?;
    Ok(SaaOutput {
        word_reps,
        stacked,
        attn,
    })
}

/// Utterance summary for intent classification.
pub struct IaaOutput {
    /// `[1 × d]` attention-weighted summary.
    pub h_intent: TensorId,
    /// One weight per word, summing to one.
    pub weights: Vec<f64>,
}

/// Scores each word representation against the `[CLS]` hidden state and
/// returns the weighted word summary. Scores are scaled by `1/sqrt(d)` before
/// the softmax.
pub fn iaa_forward(
    tape: &mut Tape,
    bind: &mut TapeBinding,
    params: &ParamSet,
    handles: &IaaParams,
    hidden: TensorId,
    saa: &SaaOutput,
    alignment: &AlignmentMap,
) -> Result<IaaOutput> {
    let d = tape.shape(hidden)[1];
    let h1 = tape.slice_rows(hidden, 0, 1)?; // [CLS]
    let w_int = bind.get(tape, params, handles.w_int);
    let t_lin = tape.matmul(saa.stacked, w_int)?;
    let transformed = handles.activation.apply(tape, t_lin)?; // [W×d]
    let h1t = tape.transpose(h1)?; // [d×1]
    let scores_col = tape.matmul(transformed, h1t)?; // [W×1]
    let scores = tape.transpose(scores_col)?; // [1×W]
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let alpha = tape.softmax(scaled, Axis::Rows, None)?; // [1×W]
    let sum_src = match handles.sum_source {
        IaaSum::WordReps => saa.stacked,
        IaaSum::FirstSubtokenHidden => {
            let firsts: Vec<TensorId> = alignment
                .iter()
                .map(|(s, _)| tape.slice_rows(hidden, s, s + 1))
                .collect::<Result<_>>()?;
            tape.concat_rows(&firsts)?
        }
    };
    let h_intent = tape.matmul(alpha, sum_src)?;
    Ok(IaaOutput {
        h_intent,
        weights: tape.data(alpha).to_vec(),
    })
}

/// Pairs every word with its pieces and their attention weights.
pub fn attention_table(
    tokenized: &TokenizedUtterance,
    attn: &[Vec<f64>],
) -> Vec<(String, Vec<(String, f64)>)> {
    tokenized
        .alignment
        .iter()
        .enumerate()
        .map(|(w, (s, e))| {
            let pieces = tokenized.pieces[s..e]
                .iter()
                .cloned()
                .zip(attn[w].iter().copied())
                .collect();
            (tokenized.words[w].clone(), pieces)
        })
        .collect()
}

/// One line per word: `word<TAB>piece:weight piece:weight ...`, weights with
/// six decimals.
pub fn format_attention_tsv(table: &[(String, Vec<(String, f64)>)]) -> String {
    let mut out = String::new();
    for (word, pieces) in table {
        out.push_str(word);
        out.push('\t');
        let cells: Vec<String> = pieces
            .iter()
            .map(|(p, w)| format!("{p}:{w:.6}"))
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}
