//! Training: run configuration, the AdamW optimizer, gradient clipping, the
//! epoch loop with per-epoch validation, the ablation study, and binary
//! checkpoints that capture everything needed to reload a trained model.

use crate::dataset::{batch_iter, BatchStats, LabelCatalog, LabeledUtterance};
use crate::error::{NluError, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    decode_predictions, effective_beta, forward_batch, init_model, joint_loss, AblationConfig,
    ModelConfig, ModelParams,
};
use crate::tensor::{Activation, ParamSet, Tape, TapeBinding, Tensor};
use crate::wordpiece::WordpieceVocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

// ── configuration ────────────────────────────────────────────────────────

/// Everything a training run needs, parsed from a `key = value` file.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the intent loss; the slot loss gets `1 - beta`.
    pub beta: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            lr: 5e-5,
            batch_size: 16,
            epochs: 30,
            beta: 0.7,
            seed: 42,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NluError::io(format!("reading config {}", path.display()), e))?;
        Self::from_str_source(&text, &path.display().to_string())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn from_str_source(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let bad = |line: usize, reason: String| NluError::BadConfig {
            path: origin.to_string(),
            line,
            reason,
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected key = value, got \"{raw}\"")))?;
            let (key, value) = (key.trim(), value.trim());
            macro_rules! parse {
                ($ty:ty) => {
                    value.parse::<$ty>().map_err(|_| {
                        bad(line_no, format!("bad value \"{value}\" for {key}"))
                    })?
                };
            }
            match key {
                "d_model" => cfg.model.encoder.d_model = parse!(usize),
                "n_layers" => cfg.model.encoder.n_layers = parse!(usize),
                "n_heads" => cfg.model.encoder.n_heads = parse!(usize),
                "d_ff" => cfg.model.encoder.d_ff = parse!(usize),
                "dropout" => cfg.model.encoder.dropout = parse!(f64),
                "max_seq_len" => cfg.model.encoder.max_seq_len = parse!(usize),
                "activation" => {
                    cfg.model.activation = value
                        .parse::<Activation>()
                        .map_err(|e| bad(line_no, e))?
                }
                "iaa_sum" => {
                    cfg.model.iaa_sum =
                        value.parse().map_err(|e: String| bad(line_no, e))?
                }
                "use_saa" => cfg.ablation.use_saa = parse!(bool),
                "use_iaa" => cfg.ablation.use_iaa = parse!(bool),
                "feed_intent_to_slot" => cfg.ablation.feed_intent_to_slot = parse!(bool),
                "slot_only" => cfg.ablation.slot_only = parse!(bool),
                "lr" => cfg.lr = parse!(f64),
                "batch_size" => cfg.batch_size = parse!(usize),
                "epochs" => cfg.epochs = parse!(usize),
                "beta" => cfg.beta = parse!(f64),
                "seed" => cfg.seed = parse!(u64),
                "weight_decay" => cfg.weight_decay = parse!(f64),
                "clip_norm" => cfg.clip_norm = parse!(f64),
                other => return Err(bad(line_no, format!("unknown key \"{other}\""))),
            }
        }
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let bad = |reason: String| NluError::BadConfig {
            path: origin.to_string(),
            line: 0,
            reason,
        };
        self.model.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.beta) || !self.beta.is_finite() {
            return Err(bad(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(bad(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(bad("epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(bad(format!(
                "clip_norm {} must be non-negative",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW: Adam moments on the gradient, weight decay applied directly to the
/// parameter (decoupled from the adaptive step).
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. A tensor without a gradient this
    /// step is treated as having gradient zero: its moments decay and weight
    /// decay still applies.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (pi, (_, tensor)) in params.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let old = data[i];
                data[i] = old - self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS))
                    - self.lr * self.weight_decay * old;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`
/// (`0` disables). Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                for x in g {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

// ── evaluation ───────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Mean joint loss per utterance.
    pub mean_loss: f64,
    pub stats: BatchStats,
}

/// Scores a model over a labeled split: corpus metrics plus the mean loss.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    params: &ParamSet,
    handles: &ModelParams,
    cfg: &ModelConfig,
    ablate: &AblationConfig,
    beta: f64,
    vocab: &WordpieceVocab,
    catalog: &LabelCatalog,
    data: &[LabeledUtterance],
    batch_size: usize,
) -> Result<EvalOutcome> {
    let (batches, stats) =
        batch_iter(data, vocab, catalog, cfg.encoder.max_seq_len, batch_size, None)?;
    if batches.is_empty() {
        return Err(NluError::BadData {
            path: "evaluation split".into(),
            reason: "no utterances fit within max_seq_len".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // inference only: dropout off
    let mut gold_intents = Vec::new();
    let mut gold_slots = Vec::new();
    let mut pred_intents = Vec::new();
    let mut pred_slots = Vec::new();
    let mut loss_sum = 0.0;
    let mut n_items = 0usize;
    let beta_eff = effective_beta(beta, ablate);
    for batch in &batches {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(params);
        let fwd = forward_batch(
            &mut tape, &mut bind, params, handles, cfg, ablate, batch, false, &mut rng,
        )?;
        let parts = joint_loss(
            &mut tape,
            &fwd,
            batch,
            catalog.intents().len(),
            catalog.slots().len(),
            beta_eff,
        )?;
        loss_sum += parts.joint * batch.len() as f64;
        n_items += batch.len();
        for pred in decode_predictions(&tape, &fwd, batch, catalog)? {
            pred_intents.push(pred.intent);
            pred_slots.push(pred.slots);
        }
        for item in &batch.items {
            gold_intents.push(data[item.orig_index].intent.clone());
            gold_slots.push(data[item.orig_index].slots.clone());
        }
    }
    let report = evaluate(&gold_intents, &gold_slots, &pred_intents, &pred_slots)?;
    Ok(EvalOutcome {
        report,
        mean_loss: loss_sum / n_items as f64,
        stats,
    })
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Cumulative optimizer steps after this epoch.
    pub steps: u64,
    /// Item-weighted mean joint loss over the epoch's batches.
    pub train_loss: f64,
    pub intent_loss: f64,
    pub slot_loss: f64,
    /// Mean pre-clip gradient norm.
    pub grad_norm: f64,
    pub val: EvalReport,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    /// 1-based epoch whose validation overall accuracy was best (earliest on
    /// ties).
    pub best_epoch: usize,
    pub best_val: EvalReport,
    pub best_params: ParamSet,
    pub final_params: ParamSet,
    pub handles: ModelParams,
    pub steps: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Batching stats from the first epoch (identical data every epoch).
    pub train_stats: BatchStats,
}

/// Trains from scratch and validates after every epoch.
pub fn train(
    cfg: &TrainConfig,
    vocab: &WordpieceVocab,
    catalog: &LabelCatalog,
    train_data: &[LabeledUtterance],
    valid_data: &[LabeledUtterance],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let handles = init_model(
        &cfg.model,
        vocab.len(),
        catalog.intents().len(),
        catalog.slots().len(),
        &mut params,
        &mut rng,
    );
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let beta_eff = effective_beta(cfg.beta, &cfg.ablation);

    let mut logs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport, ParamSet)> = None;
    let mut train_stats = BatchStats::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let (batches, stats) = batch_iter(
            train_data,
            vocab,
            catalog,
            cfg.model.encoder.max_seq_len,
            cfg.batch_size,
            Some(cfg.seed.wrapping_add(epoch as u64)),
        )?;
        if epoch == 1 {
            train_stats = stats;
            if batches.is_empty() {
                return Err(NluError::BadData {
                    path: "training split".into(),
                    reason: "no utterances fit within max_seq_len".into(),
                });
            }
        }
        let mut loss_sum = 0.0;
        let mut intent_sum = 0.0;
        let mut slot_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut n_items = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            params.zero_grads();
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&params);
            let fwd = forward_batch(
                &mut tape,
                &mut bind,
                &params,
                &handles,
                &cfg.model,
                &cfg.ablation,
                batch,
                true,
                &mut rng,
            )?;
            let parts = joint_loss(
                &mut tape,
                &fwd,
                batch,
                catalog.intents().len(),
                catalog.slots().len(),
                beta_eff,
            )?;
            if !parts.joint.is_finite() {
                return Err(NluError::NonFiniteLoss { step, batch: bi });
            }
            tape.backward(parts.loss)?;
            bind.harvest(&tape, &mut params);
            norm_sum += clip_global_norm(&mut params, cfg.clip_norm);
            opt.step(&mut params);
            step += 1;
            let n = batch.len() as f64;
            loss_sum += parts.joint * n;
            intent_sum += parts.intent_loss * n;
            slot_sum += parts.slot_loss * n;
            n_items += batch.len();
        }

        let val = evaluate_model(
            &params,
            &handles,
            &cfg.model,
            &cfg.ablation,
            cfg.beta,
            vocab,
            catalog,
            valid_data,
            cfg.batch_size,
        )?;
        let log = EpochLog {
            epoch,
            steps: opt.steps_taken(),
            train_loss: loss_sum / n_items as f64,
            intent_loss: intent_sum / n_items as f64,
            slot_loss: slot_sum / n_items as f64,
            grad_norm: norm_sum / batches.len() as f64,
            val: val.report.clone(),
            val_loss: val.mean_loss,
        };
        progress(&log);
        let better = match &best {
            None => true,
            Some((_, b, _)) => val.report.overall_acc > b.overall_acc,
        };
        if better {
            best = Some((epoch, val.report.clone(), params.clone()));
        }
        logs.push(log);
    }

    let (best_epoch, best_val, best_params) = best.expect("epochs >= 1 guarantees a best");
    Ok(TrainOutcome {
        logs,
        best_epoch,
        best_val,
        best_params,
        final_params: params,
        handles,
        steps: opt.steps_taken(),
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        train_stats,
    })
}

// ── ablation study ───────────────────────────────────────────────────────

/// The model variants the ablation study compares. The slot-only row also
/// drops the intent feature from slot decoding so nothing from the dead
/// intent branch leaks in.
pub fn ablation_rows() -> Vec<(&'static str, AblationConfig)> {
    let full = AblationConfig::default();
    vec![
        ("full", full),
        ("no_iaa", AblationConfig { use_iaa: false, ..full }),
        ("no_saa", AblationConfig { use_saa: false, ..full }),
        (
            "no_intent_feature",
            AblationConfig {
                feed_intent_to_slot: false,
                ..full
            },
        ),
        (
            "slot_only",
            AblationConfig {
                slot_only: true,
                feed_intent_to_slot: false,
                ..full
            },
        ),
    ]
}

pub struct AblationCell {
    pub seed: u64,
    pub test: EvalReport,
}

pub struct AblationSummary {
    pub name: &'static str,
    pub ablate: AblationConfig,
    pub cells: Vec<AblationCell>,
    pub mean_intent_acc: f64,
    pub mean_slot_f1: f64,
    pub mean_overall_acc: f64,
}

/// Trains every ablation row for every seed and scores the best checkpoint
/// of each run on the test split.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    cfg: &TrainConfig,
    vocab: &WordpieceVocab,
    catalog: &LabelCatalog,
    train_data: &[LabeledUtterance],
    valid_data: &[LabeledUtterance],
    test_data: &[LabeledUtterance],
    seeds: &[u64],
    mut progress: impl FnMut(&'static str, u64, &EvalReport),
) -> Result<Vec<AblationSummary>> {
    let mut out = Vec::new();
    for (name, ablate) in ablation_rows() {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.ablation = ablate;
            run_cfg.seed = seed;
            let outcome = train(&run_cfg, vocab, catalog, train_data, valid_data, |_| {})?;
            let test = evaluate_model(
                &outcome.best_params,
                &outcome.handles,
                &run_cfg.model,
                &ablate,
                run_cfg.beta,
                vocab,
                catalog,
                test_data,
                run_cfg.batch_size,
            )?;
            progress(name, seed, &test.report);
            cells.push(AblationCell {
                seed,
                test: test.report,
            });
        }
        let n = cells.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| cells.iter().map(|c| f(&c.test)).sum::<f64>() / n;
        out.push(AblationSummary {
            name,
            ablate,
            mean_intent_acc: mean(&|r| r.intent_acc),
            mean_slot_f1: mean(&|r| r.slot.f1),
            mean_overall_acc: mean(&|r| r.overall_acc),
            cells,
        });
    }
    Ok(out)
}

// ── checkpoints ──────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"NLUCKPT1";
const CKPT_VERSION: u32 = 1;

/// A complete serialized run: configuration, vocabulary, label catalogs,
/// progress counters, generator state, and every parameter tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub vocab_tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intents: Vec<String>,
    pub steps: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_training(
        cfg: &TrainConfig,
        vocab: &WordpieceVocab,
        catalog: &LabelCatalog,
        outcome: &TrainOutcome,
    ) -> Checkpoint {
        Checkpoint {
            cfg: cfg.clone(),
            vocab_tokens: vocab.tokens().to_vec(),
            slots: catalog.slots().to_vec(),
            intents: catalog.intents().to_vec(),
            steps: outcome.steps,
            rng_seed: outcome.rng_seed,
            rng_word_pos: outcome.rng_word_pos,
            tensors: outcome
                .best_params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Reconstructs the runtime objects: vocabulary, catalog, and a
    /// parameter set whose layout is re-derived from the configuration and
    /// then overwritten tensor-for-tensor from the stored values.
    pub fn rebuild(&self, origin: &str) -> Result<(WordpieceVocab, LabelCatalog, ParamSet, ModelParams)> {
        let vocab = WordpieceVocab::from_lines(self.vocab_tokens.iter().cloned(), origin)?;
        let catalog = LabelCatalog::from_parts(self.slots.clone(), self.intents.clone())?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // values are replaced below
        let handles = init_model(
            &self.cfg.model,
            vocab.len(),
            catalog.intents().len(),
            catalog.slots().len(),
            &mut params,
            &mut rng,
        );
        let stored: std::collections::HashMap<&str, &Tensor> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if stored.len() != self.tensors.len() {
            return Err(NluError::BadCheckpoint {
                path: origin.to_string(),
                reason: "duplicate tensor names".into(),
            });
        }
        let expected = params.len();
        if stored.len() != expected {
            return Err(NluError::BadCheckpoint {
                path: origin.to_string(),
                reason: format!(
                    "expected {expected} tensors for this configuration, found {}",
                    stored.len()
                ),
            });
        }
        for (name, tensor) in params.iter_mut() {
            let src = stored.get(name).ok_or_else(|| NluError::BadCheckpoint {
                path: origin.to_string(),
                reason: format!("missing tensor \"{name}\""),
            })?;
            if src.shape() != tensor.shape() {
                return Err(NluError::BadCheckpoint {
                    path: origin.to_string(),
                    reason: format!(
                        "tensor \"{name}\" has shape {:?}, expected {:?}",
                        src.shape(),
                        tensor.shape()
                    ),
                });
            }
            tensor.data_mut().copy_from_slice(src.data());
        }
        Ok((vocab, catalog, params, handles))
    }
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    fn bad(&self, reason: impl Into<String>) -> NluError {
        NluError::BadCheckpoint {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.bad(format!("{what} {v} does not fit in usize")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.usize(what)?;
        // any stored count is bounded by the bytes that must follow it
        if v > self.buf.len() {
            return Err(self.bad(format!("implausible {what} {v}")));
        }
        Ok(v)
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| self.bad(format!("{what} is not valid UTF-8")))
    }

    fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.bad(format!("{what} has bad boolean value {v}"))),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CKPT_MAGIC);
    w.u32(CKPT_VERSION);

    let cfg = &ckpt.cfg;
    w.u64(cfg.model.encoder.d_model as u64);
    w.u64(cfg.model.encoder.n_layers as u64);
    w.u64(cfg.model.encoder.n_heads as u64);
    w.u64(cfg.model.encoder.d_ff as u64);
    w.u64(cfg.model.encoder.max_seq_len as u64);
    w.f64(cfg.model.encoder.dropout);
    w.u8(match cfg.model.activation {
        Activation::Tanh => 0,
        Activation::Gelu => 1,
    });
    w.u8(match cfg.model.iaa_sum {
        crate::adapters::IaaSum::WordReps => 0,
        crate::adapters::IaaSum::FirstSubtokenHidden => 1,
    });
    w.u8(cfg.ablation.use_saa as u8);
    w.u8(cfg.ablation.use_iaa as u8);
    w.u8(cfg.ablation.feed_intent_to_slot as u8);
    w.u8(cfg.ablation.slot_only as u8);
    w.f64(cfg.lr);
    w.u64(cfg.batch_size as u64);
    w.u64(cfg.epochs as u64);
    w.f64(cfg.beta);
    w.u64(cfg.seed);
    w.f64(cfg.weight_decay);
    w.f64(cfg.clip_norm);

    w.u64(ckpt.vocab_tokens.len() as u64);
    for t in &ckpt.vocab_tokens {
        w.str(t);
    }
    w.u64(ckpt.slots.len() as u64);
    for s in &ckpt.slots {
        w.str(s);
    }
    w.u64(ckpt.intents.len() as u64);
    for s in &ckpt.intents {
        w.str(s);
    }

    w.u64(ckpt.steps);
    w.buf.extend_from_slice(&ckpt.rng_seed);
    w.u128(ckpt.rng_word_pos);

    w.u64(ckpt.tensors.len() as u64);
    for (name, t) in &ckpt.tensors {
        w.str(name);
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &x in t.data() {
            w.f64(x);
        }
    }

    std::fs::write(path, &w.buf)
        .map_err(|e| NluError::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)
        .map_err(|e| NluError::io(format!("reading checkpoint {}", path.display()), e))?;
    let display = path.display().to_string();
    let mut r = ByteReader::new(&buf, &display);

    let magic = r.take(8, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(r.bad("bad magic (not a checkpoint file)"));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(r.bad(format!(
            "unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }

    let mut cfg = TrainConfig::default();
    cfg.model.encoder.d_model = r.usize("d_model")?;
    cfg.model.encoder.n_layers = r.usize("n_layers")?;
    cfg.model.encoder.n_heads = r.usize("n_heads")?;
    cfg.model.encoder.d_ff = r.usize("d_ff")?;
    cfg.model.encoder.max_seq_len = r.usize("max_seq_len")?;
    cfg.model.encoder.dropout = r.f64("dropout")?;
    cfg.model.activation = match r.u8("activation")? {
        0 => Activation::Tanh,
        1 => Activation::Gelu,
        v => return Err(r.bad(format!("unknown activation code {v}"))),
    };
    cfg.model.iaa_sum = match r.u8("iaa_sum")? {
        0 => crate::adapters::IaaSum::WordReps,
        1 => crate::adapters::IaaSum::FirstSubtokenHidden,
        v => return Err(r.bad(format!("unknown iaa_sum code {v}"))),
    };
    cfg.ablation.use_saa = r.bool("use_saa")?;
    cfg.ablation.use_iaa = r.bool("use_iaa")?;
    cfg.ablation.feed_intent_to_slot = r.bool("feed_intent_to_slot")?;
    cfg.ablation.slot_only = r.bool("slot_only")?;
    cfg.lr = r.f64("lr")?;
    cfg.batch_size = r.usize("batch_size")?;
    cfg.epochs = r.usize("epochs")?;
    cfg.beta = r.f64("beta")?;
    cfg.seed = r.u64("seed")?;
    cfg.weight_decay = r.f64("weight_decay")?;
    cfg.clip_norm = r.f64("clip_norm")?;

    let n_vocab = r.len("vocabulary size")?;
    let vocab_tokens: Vec<String> = (0..n_vocab)
        .map(|_| r.str("vocabulary token"))
        .collect::<Result<_>>()?;
    let n_slots = r.len("slot label count")?;
    let slots: Vec<String> = (0..n_slots)
        .map(|_| r.str("slot label"))
        .collect::<Result<_>>()?;
    let n_intents = r.len("intent label count")?;
    let intents: Vec<String> = (0..n_intents)
        .map(|_| r.str("intent label"))
        .collect::<Result<_>>()?;

    let steps = r.u64("step counter")?;
    let rng_seed: [u8; 32] = r.take(32, "generator seed")?.try_into().unwrap();
    let rng_word_pos = r.u128("generator position")?;

    let n_tensors = r.len("tensor count")?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.str("tensor name")?;
        let ndim = r.len("tensor rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.usize("tensor dimension")?);
        }
        let numel: usize = shape.iter().product();
        if numel > buf.len() / 8 + 1 {
            return Err(r.bad(format!(
                "tensor \"{name}\" claims {numel} elements, larger than the file"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor data")?);
        }
        tensors.push((name, Tensor::from_vec(data, shape)));
    }
    if r.pos != buf.len() {
        return Err(r.bad(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        cfg,
        vocab_tokens,
        slots,
        intents,
        steps,
        rng_seed,
        rng_word_pos,
        tensors,
    })
}
