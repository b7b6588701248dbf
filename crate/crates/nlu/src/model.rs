//! The joint model: encoder, attention adapters, and the two linear decoders,
//! combined under a weighted sum of the intent and slot losses.
//!
//! Every piece the ablation study needs is a switch here: the sub-word
//! adapter, the intent adapter, the intent feature fed into slot decoding,
//! and a slot-only mode that removes the intent loss from the objective.

use crate::adapters::{
    iaa_forward, init_iaa, init_saa, saa_forward, IaaParams, IaaSum, SaaParams,
};
use crate::dataset::{Batch, LabelCatalog};
use crate::encoder::{encode_utterance, init_encoder, EncoderConfig, EncoderParams, INIT_STD};
use crate::error::{NluError, Result};
use crate::tensor::{Activation, ParamId, ParamSet, Tape, TapeBinding, Tensor, TensorId};
use rand_chacha::rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Activation used inside both adapters.
    pub activation: Activation,
    /// What the intent adapter sums over.
    pub iaa_sum: IaaSum,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            activation: Activation::Tanh,
            iaa_sum: IaaSum::WordReps,
        }
    }
}

/// Which architectural pieces are active. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    /// Pool multi-piece words by span attention (off: first piece stands in).
    pub use_saa: bool,
    /// Summarize words for the intent decoder (off: `[CLS]` alone decides).
    pub use_iaa: bool,
    /// Add the intent summary to every word representation before slot
    /// decoding.
    pub feed_intent_to_slot: bool,
    /// Drop the intent term from the loss entirely.
    pub slot_only: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_saa: true,
            use_iaa: true,
            feed_intent_to_slot: true,
            slot_only: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub saa: SaaParams,
    pub iaa: IaaParams,
    pub intent_w: ParamId,
    pub intent_b: ParamId,
    pub slot_w: ParamId,
    pub slot_b: ParamId,
}

/// Registers every parameter of the joint model.
pub fn init_model(
    cfg: &ModelConfig,
    vocab_size: usize,
    n_intents: usize,
    n_slots: usize,
    params: &mut ParamSet,
    rng: &mut impl RngCore,
) -> ModelParams {
    let d = cfg.encoder.d_model;
    let encoder = init_encoder(&cfg.encoder, vocab_size, params, rng);
    let saa = init_saa(d, cfg.activation, params, rng);
    let iaa = init_iaa(d, cfg.activation, cfg.iaa_sum, params, rng);
    let intent_w = params.add("intent.w", Tensor::randn(vec![d, n_intents], INIT_STD, rng));
    let intent_b = params.add("intent.b", Tensor::zeros(vec![n_intents]));
    let slot_w = params.add("slot.w", Tensor::randn(vec![d, n_slots], INIT_STD, rng));
    let slot_b = params.add("slot.b", Tensor::zeros(vec![n_slots]));
    ModelParams {
        encoder,
        saa,
        iaa,
        intent_w,
        intent_b,
        slot_w,
        slot_b,
    }
}

/// Attention recorded for one utterance, for inspection and export.
#[derive(Debug, Clone)]
pub struct UtteranceTrace {
    /// Per word: weight per sub-token piece.
    pub word_attention: Vec<Vec<f64>>,
    /// Weight per word from the intent adapter (empty when it is disabled).
    pub intent_weights: Vec<f64>,
}

pub struct BatchForward {
    /// `[B × n_intents]`.
    pub intent_logits: TensorId,
    /// `[ΣW × n_slots]`, utterances in batch order, words in utterance order.
    pub slot_logits: TensorId,
    /// Words per utterance; prefix sums index `slot_logits` rows.
    pub word_counts: Vec<usize>,
    pub traces: Vec<UtteranceTrace>,
}

/// Runs the full model over a padded batch.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    tape: &mut Tape,
    bind: &mut TapeBinding,
    params: &ParamSet,
    handles: &ModelParams,
    cfg: &ModelConfig,
    ablate: &AblationConfig,
    batch: &Batch,
    train: bool,
    rng: &mut impl RngCore,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(NluError::BadShape {
            op: "forward",
            shape: vec![0],
            reason: "empty batch".into(),
        });
    }
    let p_drop = cfg.encoder.dropout;
    let mut intent_rows = Vec::with_capacity(batch.len());
    let mut slot_blocks = Vec::with_capacity(batch.len());
    let mut word_counts = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());

    for (i, item) in batch.items.iter().enumerate() {
        let enc = encode_utterance(
            tape,
            bind,
            params,
            &handles.encoder,
            &cfg.encoder,
            &batch.ids[i],
            &batch.mask[i],
            train,
            rng,
        )?;
        let align = &item.tokenized.alignment;
        let saa_out = saa_forward(
            tape,
            bind,
            params,
            &handles.saa,
            enc.hidden,
            align,
            ablate.use_saa,
        )?;
        let h1 = tape.slice_rows(enc.hidden, 0, 1)?;
        let (summary, intent_weights) = if ablate.use_iaa {
            let iaa_out = iaa_forward(
                tape,
                bind,
                params,
                &handles.iaa,
                enc.hidden,
                &saa_out,
                align,
            )?;
            (Some(iaa_out.h_intent), iaa_out.weights)
        } else {
            (None, Vec::new())
        };

        // intent decoder: summary + [CLS], or [CLS] alone
        let intent_in = match summary {
            Some(h) => tape.add(h, h1)?,
            None => h1,
        };
        let intent_in = tape.dropout(intent_in, p_drop, train, rng)?;
        let wi = bind.get(tape, params, handles.intent_w);
        let bi = bind.get(tape, params, handles.intent_b);
        let iproj = tape.matmul(intent_in, wi)?;
        intent_rows.push(tape.add_bias(iproj, bi)?);

        // slot decoder: word representations, optionally shifted by the
        // intent summary
        let rep = tape.dropout(saa_out.stacked, p_drop, train, rng)?;
        let slot_in = if ablate.feed_intent_to_slot {
            let feat = summary.unwrap_or(h1);
            tape.add_bias(rep, feat)?
        } else {
            rep
        };
        let ws = bind.get(tape, params, handles.slot_w);
        let bs = bind.get(tape, params, handles.slot_b);
        let sproj = tape.matmul(slot_in, ws)?;
        slot_blocks.push(tape.add_bias(sproj, bs)?);

        word_counts.push(align.len());
        traces.push(UtteranceTrace {
            word_attention: saa_out.attn,
            intent_weights,
        });
    }

    Ok(BatchForward {
        intent_logits: tape.concat_rows(&intent_rows)?,
        slot_logits: tape.concat_rows(&slot_blocks)?,
        word_counts,
        traces,
    })
}

/// The ignored-label convention: targets at or past the class count (the
/// reserved unknown ids, and the padding sentinel) are excluded from the mean.
fn ce_targets(ids: impl Iterator<Item = usize>, n_classes: usize) -> Vec<Option<usize>> {
    ids.map(|id| (id < n_classes).then_some(id)).collect()
}

pub struct LossParts {
    pub loss: TensorId,
    pub joint: f64,
    pub intent_loss: f64,
    pub slot_loss: f64,
}

/// `β·L_intent + (1−β)·L_slot` over the batch. Pass the effective β
/// (see [`effective_beta`]).
pub fn joint_loss(
    tape: &mut Tape,
    fwd: &BatchForward,
    batch: &Batch,
    n_intents: usize,
    n_slots: usize,
    beta: f64,
) -> Result<LossParts> {
    if !(0.0..=1.0).contains(&beta) || !beta.is_finite() {
        return Err(NluError::BadShape {
            op: "joint_loss",
            shape: vec![],
            reason: format!("loss weight beta={beta} outside [0, 1]"),
        });
    }
    let intent_targets = ce_targets(batch.intent_ids.iter().copied(), n_intents);
    let slot_targets = ce_targets(
        batch.items.iter().flat_map(|it| it.slot_ids.iter().copied()),
        n_slots,
    );
    let li = tape.cross_entropy_mean(fwd.intent_logits, &intent_targets)?;
    let ls = tape.cross_entropy_mean(fwd.slot_logits, &slot_targets)?;
    let wi = tape.scale(li, beta)?;
    let wsl = tape.scale(ls, 1.0 - beta)?;
    let loss = tape.add(wi, wsl)?;
    Ok(LossParts {
        loss,
        joint: tape.scalar(loss)?,
        intent_loss: tape.scalar(li)?,
        slot_loss: tape.scalar(ls)?,
    })
}

/// Slot-only training removes the intent term regardless of the configured β.
pub fn effective_beta(beta: f64, ablate: &AblationConfig) -> f64 {
    if ablate.slot_only {
        0.0
    } else {
        beta
    }
}

// ── gradient verification harness ────────────────────────────────────────

const CHECK_VOCAB: &str =
    "[PAD]\n[UNK]\n[CLS]\n[SEP]\nplay\nred\n##bre\n##ast\nnow\nweather\nin\nriver\n##dale\n";

/// A two-utterance corpus small enough to finite-difference the whole model:
/// one multi-piece word per utterance, two intents, three slot classes.
pub fn verification_fixture() -> (
    crate::wordpiece::WordpieceVocab,
    Vec<crate::dataset::LabeledUtterance>,
    LabelCatalog,
) {
    let vocab = crate::wordpiece::WordpieceVocab::from_lines(
        CHECK_VOCAB.lines().map(String::from),
        "builtin verification vocab",
    )
    .expect("builtin vocab is well formed");
    let data = vec![
        crate::dataset::LabeledUtterance {
            words: vec!["play".into(), "redbreast".into(), "now".into()],
            slots: vec!["O".into(), "B-song".into(), "O".into()],
            intent: "play_music".into(),
        },
        crate::dataset::LabeledUtterance {
            words: vec!["weather".into(), "in".into(), "riverdale".into()],
            slots: vec!["O".into(), "O".into(), "B-city".into()],
            intent: "get_weather".into(),
        },
    ];
    let catalog = LabelCatalog::from_training(&data);
    (vocab, data, catalog)
}

/// Finite-difference check of the full joint loss against the backward pass,
/// over every parameter, on the builtin fixture. Dropout (if configured) is
/// active and re-seeded identically for every evaluation, so the check
/// covers the exact training-time graph.
pub fn model_grad_check(
    cfg: &ModelConfig,
    ablate: &AblationConfig,
    beta: f64,
    eps: f64,
    seed: u64,
) -> Result<crate::gradcheck::GradCheckReport> {
    let (vocab, data, catalog) = verification_fixture();
    let (mut batches, _) = crate::dataset::batch_iter(
        &data,
        &vocab,
        &catalog,
        cfg.encoder.max_seq_len,
        data.len(),
        None,
    )?;
    let batch = batches.remove(0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let handles = init_model(
        cfg,
        vocab.len(),
        catalog.intents().len(),
        catalog.slots().len(),
        &mut params,
        &mut rng,
    );
    let n_intents = catalog.intents().len();
    let n_slots = catalog.slots().len();
    let run = |p: &ParamSet| -> Result<(Tape, crate::tensor::TapeBinding, TensorId, f64)> {
        let mut tape = Tape::new();
        let mut bind = crate::tensor::TapeBinding::new(p);
        // fresh generator per evaluation keeps the dropout mask constant
        // across the perturbed finite-difference passes
        let mut drop_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let fwd = forward_batch(
            &mut tape, &mut bind, p, &handles, cfg, ablate, &batch, true, &mut drop_rng,
        )?;
        let parts = joint_loss(
            &mut tape,
            &fwd,
            &batch,
            n_intents,
            n_slots,
            effective_beta(beta, ablate),
        )?;
        Ok((tape, bind, parts.loss, parts.joint))
    };
    crate::gradcheck::grad_check(
        &mut params,
        eps,
        |p| run(p).map(|(_, _, _, v)| v),
        |p| {
            let (mut tape, bind, loss, v) = run(p)?;
            tape.backward(loss)?;
            bind.harvest(&tape, p);
            Ok(v)
        },
    )
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct JointPrediction {
    pub words: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
    pub trace: UtteranceTrace,
}

/// Greedy decode of a forward pass into label strings.
pub fn decode_predictions(
    tape: &Tape,
    fwd: &BatchForward,
    batch: &Batch,
    catalog: &LabelCatalog,
) -> Result<Vec<JointPrediction>> {
    let n_intents = catalog.intents().len();
    let n_slots = catalog.slots().len();
    let intent_data = tape.data(fwd.intent_logits);
    let slot_data = tape.data(fwd.slot_logits);
    let mut out = Vec::with_capacity(batch.len());
    let mut row = 0usize;
    for (i, item) in batch.items.iter().enumerate() {
        let intent_row = &intent_data[i * n_intents..(i + 1) * n_intents];
        let intent = catalog.intent_name(argmax(intent_row)).to_string();
        let w = fwd.word_counts[i];
        let mut slots = Vec::with_capacity(w);
        for r in row..row + w {
            let logits = &slot_data[r * n_slots..(r + 1) * n_slots];
            slots.push(catalog.slot_name(argmax(logits)).to_string());
        }
        row += w;
        out.push(JointPrediction {
            words: item.tokenized.words.clone(),
            intent,
            slots,
            trace: fwd.traces[i].clone(),
        });
    }
    Ok(out)
}
