//! Command-line interface for the joint intent/slot model.

use clap::{Parser, Subcommand};
use nlu::adapters::{attention_table, format_attention_tsv};
use nlu::dataset::{batch_iter, load_split, prepare_words, LabelCatalog, LabeledUtterance};
use nlu::model::{decode_predictions, forward_batch, model_grad_check};
use nlu::tensor::{Tape, TapeBinding};
use nlu::trainer::{
    evaluate_model, load_checkpoint, run_ablations, save_checkpoint, train, Checkpoint,
    TrainConfig,
};
use nlu::wordpiece::WordpieceVocab;
use nlu::{NluError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::BufRead;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "nlu",
    version,
    about = "Joint intent detection and slot filling with sub-word attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize utterances and show the word-to-piece alignment
    Tokenize {
        /// Wordpiece vocabulary file, one token per line
        #[arg(long)]
        vocab: PathBuf,
        /// A single utterance (otherwise reads --input or stdin)
        #[arg(long)]
        text: Option<String>,
        /// File with one utterance per line
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a model and save the best-validation checkpoint
    Train {
        /// Training configuration (key = value lines)
        #[arg(long)]
        config: PathBuf,
        /// Wordpiece vocabulary file
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus root containing train/ and valid/ subdirectories
        #[arg(long)]
        data: PathBuf,
        /// Where to write the checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled split
    Eval {
        /// Checkpoint produced by train
        #[arg(long)]
        model: PathBuf,
        /// Corpus root
        #[arg(long)]
        data: PathBuf,
        /// Which split to score
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict intent and slots for raw utterances
    Predict {
        /// Checkpoint produced by train
        #[arg(long)]
        model: PathBuf,
        /// A single utterance (otherwise reads --input or stdin)
        #[arg(long)]
        text: Option<String>,
        /// File with one utterance per line
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also print the adapter attention weights
        #[arg(long)]
        attention: bool,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// Optional configuration; without it a compact model sized for
        /// quick verification is used. The builtin two-utterance fixture
        /// supplies the data either way
        #[arg(long)]
        config: Option<PathBuf>,
        /// Central-difference step
        #[arg(long, default_value_t = nlu::gradcheck::DEFAULT_EPS)]
        eps: f64,
        /// Largest acceptable relative error
        #[arg(long, default_value_t = nlu::gradcheck::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Initialization seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every model variant and compare them on the test split
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus root containing train/, valid/ and test/
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training seeds
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Print per-epoch validation metrics for one training run
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// List the parameter tensors stored in a checkpoint
    Weights {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(i32::from(e.exit_class().code()));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Tokenize { vocab, text, input } => cmd_tokenize(&vocab, text, input),
        Command::Train {
            config,
            vocab,
            data,
            out,
        } => cmd_train(&config, &vocab, &data, &out),
        Command::Eval { model, data, split } => cmd_eval(&model, &data, &split),
        Command::Predict {
            model,
            text,
            input,
            attention,
        } => cmd_predict(&model, text, input, attention),
        Command::Gradcheck {
            config,
            eps,
            threshold,
            seed,
        } => cmd_gradcheck(config, eps, threshold, seed),
        Command::Ablate {
            config,
            vocab,
            data,
            seeds,
        } => cmd_ablate(&config, &vocab, &data, &seeds),
        Command::Sweep {
            config,
            vocab,
            data,
        } => cmd_sweep(&config, &vocab, &data),
        Command::Weights { model } => cmd_weights(&model),
    }
}

/// Collects input utterances from `--text`, `--input`, or stdin.
fn read_utterances(text: Option<String>, input: Option<PathBuf>) -> Result<Vec<String>> {
    match (text, input) {
        (Some(_), Some(_)) => Err(NluError::Usage(
            "--text and --input are mutually exclusive".into(),
        )),
        (Some(t), None) => Ok(vec![t]),
        (None, Some(path)) => {
            let content = std::fs::read_to_string(&path)
                .map_err(|e| NluError::io(format!("reading {}", path.display()), e))?;
            Ok(content.lines().map(String::from).collect())
        }
        (None, None) => {
            let stdin = std::io::stdin();
            let mut lines = Vec::new();
            for line in stdin.lock().lines() {
                lines.push(line.map_err(|e| NluError::io("reading stdin", e))?);
            }
            Ok(lines)
        }
    }
}

fn cmd_tokenize(vocab: &PathBuf, text: Option<String>, input: Option<PathBuf>) -> Result<()> {
    let vocab = WordpieceVocab::from_file(vocab)?;
    let mut first = true;
    for line in read_utterances(text, input)? {
        let words = prepare_words(&line);
        if words.is_empty() {
            continue;
        }
        if !first {
            println!();
        }
        first = false;
        let tok = vocab.tokenize_utterance(&words, usize::MAX)?;
        println!("{}", tok.pieces.join(" "));
        for (w, (s, e)) in tok.alignment.iter().enumerate() {
            println!("{}\t{}", tok.words[w], tok.pieces[s..e].join(" "));
        }
    }
    Ok(())
}

fn cmd_train(config: &PathBuf, vocab: &PathBuf, data: &PathBuf, out: &PathBuf) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let vocab = WordpieceVocab::from_file(vocab)?;
    let train_data = load_split(data, "train")?;
    let valid_data = load_split(data, "valid")?;
    let catalog = LabelCatalog::from_training(&train_data);
    println!(
        "training: {} utterances, {} intents, {} slot labels",
        train_data.len(),
        catalog.intents().len(),
        catalog.slots().len()
    );
    let outcome = train(&cfg, &vocab, &catalog, &train_data, &valid_data, |log| {
        println!(
            "epoch {}\ttrain_loss {:.4}\tval_loss {:.4}\tval_intent_acc {:.4}\tval_slot_f1 {:.4}\tval_overall {:.4}",
            log.epoch, log.train_loss, log.val_loss, log.val.intent_acc, log.val.slot.f1, log.val.overall_acc
        );
    })?;
    if outcome.train_stats.skipped_too_long > 0 {
        eprintln!(
            "warning: {} training utterances exceeded max_seq_len and were skipped",
            outcome.train_stats.skipped_too_long
        );
    }
    println!(
        "best epoch {} (val_overall {:.4}), {} optimizer steps",
        outcome.best_epoch, outcome.best_val.overall_acc, outcome.steps
    );
    let ckpt = Checkpoint::from_training(&cfg, &vocab, &catalog, &outcome);
    save_checkpoint(out, &ckpt)?;
    println!(
        "saved {} ({} parameters)",
        out.display(),
        outcome.best_params.count_parameters()
    );
    Ok(())
}

fn cmd_eval(model: &PathBuf, data: &PathBuf, split: &str) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let (vocab, catalog, params, handles) = ckpt.rebuild(&model.display().to_string())?;
    let eval_data = load_split(data, split)?;
    let out = evaluate_model(
        &params,
        &handles,
        &ckpt.cfg.model,
        &ckpt.cfg.ablation,
        ckpt.cfg.beta,
        &vocab,
        &catalog,
        &eval_data,
        ckpt.cfg.batch_size,
    )?;
    if out.stats.skipped_too_long > 0 {
        eprintln!(
            "warning: {} utterances exceeded max_seq_len and were skipped",
            out.stats.skipped_too_long
        );
    }
    let r = &out.report;
    println!("utterances\t{}", r.n_utterances);
    println!("intent_acc\t{:.6}", r.intent_acc);
    println!("slot_precision\t{:.6}", r.slot.precision);
    println!("slot_recall\t{:.6}", r.slot.recall);
    println!("slot_f1\t{:.6}", r.slot.f1);
    println!("overall_acc\t{:.6}", r.overall_acc);
    println!("mean_loss\t{:.6}", out.mean_loss);
    println!("{}", r.machine_line());
    Ok(())
}

fn cmd_predict(
    model: &PathBuf,
    text: Option<String>,
    input: Option<PathBuf>,
    attention: bool,
) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let (vocab, catalog, params, handles) = ckpt.rebuild(&model.display().to_string())?;
    let max_seq_len = ckpt.cfg.model.encoder.max_seq_len;
    let mut data = Vec::new();
    for line in read_utterances(text, input)? {
        let words = prepare_words(&line);
        if words.is_empty() {
            continue;
        }
        // surface overlong input as an error instead of a silent skip
        vocab.tokenize_utterance(&words, max_seq_len)?;
        let n = words.len();
        data.push(LabeledUtterance {
            words,
            slots: vec!["O".to_string(); n],
            intent: catalog
                .intents()
                .first()
                .cloned()
                .unwrap_or_else(|| "unknown".into()),
        });
    }
    if data.is_empty() {
        return Err(NluError::Usage("no utterances to predict".into()));
    }
    let (batches, _) = batch_iter(
        &data,
        &vocab,
        &catalog,
        max_seq_len,
        ckpt.cfg.batch_size,
        None,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut first = true;
    for batch in &batches {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&params);
        let fwd = forward_batch(
            &mut tape,
            &mut bind,
            &params,
            &handles,
            &ckpt.cfg.model,
            &ckpt.cfg.ablation,
            batch,
            false,
            &mut rng,
        )?;
        let preds = decode_predictions(&tape, &fwd, batch, &catalog)?;
        for (pred, item) in preds.iter().zip(&batch.items) {
            if !first {
                println!();
            }
            first = false;
            println!("intent\t{}", pred.intent);
            for (word, slot) in pred.words.iter().zip(&pred.slots) {
                println!("{word}\t{slot}");
            }
            if attention {
                println!("# span attention");
                let table = attention_table(&item.tokenized, &pred.trace.word_attention);
                print!("{}", format_attention_tsv(&table));
                if !pred.trace.intent_weights.is_empty() {
                    println!("# intent attention");
                    let cells: Vec<String> = pred
                        .words
                        .iter()
                        .zip(&pred.trace.intent_weights)
                        .map(|(w, a)| format!("{w}:{a:.6}"))
                        .collect();
                    println!("{}", cells.join(" "));
                }
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<PathBuf>, eps: f64, threshold: f64, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(path) => TrainConfig::from_file(&path)?,
        None => {
            // full default dimensions make finite differences take minutes;
            // a narrow model checks every parameter group in seconds
            let mut cfg = TrainConfig::default();
            cfg.model.encoder.d_model = 32;
            cfg.model.encoder.n_layers = 1;
            cfg.model.encoder.n_heads = 2;
            cfg.model.encoder.d_ff = 64;
            cfg.model.encoder.max_seq_len = 16;
            cfg
        }
    };
    let report = model_grad_check(&cfg.model, &cfg.ablation, cfg.beta, eps, seed)?;
    println!("loss\t{:.6}", report.loss);
    for g in &report.groups {
        println!("{}\t{:.3e}", g.name, g.max_rel_err);
    }
    println!(
        "max_rel_err\t{:.3e}\tthreshold\t{:.1e}",
        report.max_rel_err(),
        threshold
    );
    report.require(threshold)?;
    println!("PASS");
    Ok(())
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = raw
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| NluError::Usage(format!("bad --seeds \"{raw}\" (want e.g. 1,2,3)")))?;
    if seeds.is_empty() {
        return Err(NluError::Usage("--seeds must name at least one seed".into()));
    }
    Ok(seeds)
}

fn cmd_ablate(config: &PathBuf, vocab: &PathBuf, data: &PathBuf, seeds: &str) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let vocab = WordpieceVocab::from_file(vocab)?;
    let seeds = parse_seeds(seeds)?;
    let train_data = load_split(data, "train")?;
    let valid_data = load_split(data, "valid")?;
    let test_data = load_split(data, "test")?;
    let catalog = LabelCatalog::from_training(&train_data);
    let rows = run_ablations(
        &cfg,
        &vocab,
        &catalog,
        &train_data,
        &valid_data,
        &test_data,
        &seeds,
        |name, seed, report| {
            eprintln!(
                "{name} seed {seed}: intent_acc {:.4} slot_f1 {:.4} overall {:.4}",
                report.intent_acc, report.slot.f1, report.overall_acc
            );
        },
    )?;
    println!("variant\tintent_acc\tslot_f1\toverall_acc");
    for row in &rows {
        if row.ablate.slot_only {
            // the intent head is untrained here; its numbers would be noise
            println!("{}\t-\t{:.4}\t-", row.name, row.mean_slot_f1);
        } else {
            println!(
                "{}\t{:.4}\t{:.4}\t{:.4}",
                row.name, row.mean_intent_acc, row.mean_slot_f1, row.mean_overall_acc
            );
        }
    }
    Ok(())
}

fn cmd_sweep(config: &PathBuf, vocab: &PathBuf, data: &PathBuf) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let vocab = WordpieceVocab::from_file(vocab)?;
    let train_data = load_split(data, "train")?;
    let valid_data = load_split(data, "valid")?;
    let catalog = LabelCatalog::from_training(&train_data);
    println!("epoch\ttrain_loss\tval_loss\tval_intent_acc\tval_slot_f1\tval_overall");
    train(&cfg, &vocab, &catalog, &train_data, &valid_data, |log| {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            log.epoch, log.train_loss, log.val_loss, log.val.intent_acc, log.val.slot.f1, log.val.overall_acc
        );
    })?;
    Ok(())
}

fn cmd_weights(model: &PathBuf) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let mut total = 0usize;
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        println!("{name}\t{}\t{}", dims.join("x"), t.numel());
        total += t.numel();
    }
    println!("total\t\t{total}");
    Ok(())
}
