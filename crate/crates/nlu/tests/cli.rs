//! End-to-end tests that drive the compiled binary: every subcommand, the
//! three input channels, and the exit-code contract (0 success, 1 usage,
//! 2 data, 3 numeric).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlu"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary must spawn")
}

fn run_with_stdin(args: &[&str], stdin: &str) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary must spawn");
    child
        .stdin
        .as_mut()
        .expect("stdin handle")
        .write_all(stdin.as_bytes())
        .expect("write stdin");
    child.wait_with_output().expect("binary must finish")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Small model that trains in well under a second on the bundled corpus.
fn write_quick_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("quick.cfg");
    std::fs::write(
        &path,
        format!(
            "d_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\ndropout = 0.1\n\
             max_seq_len = 32\nactivation = tanh\nlr = 0.001\nbatch_size = 16\n\
             epochs = {epochs}\nbeta = 0.7\nseed = 7\nweight_decay = 0.01\nclip_norm = 1.0\n"
        ),
    )
    .expect("write config");
    path
}

// ── global flags and usage errors ────────────────────────────────────────

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_exit(&help, 0);
    for name in ["tokenize", "train", "eval", "predict", "gradcheck", "ablate", "sweep", "weights"]
    {
        assert!(stdout(&help).contains(name), "--help must list {name}");
    }
    let version = run(&["--version"]);
    assert_exit(&version, 0);
    assert!(stdout(&version).contains("nlu"));
}

#[test]
fn missing_subcommand_and_unknown_flag_are_usage_errors() {
    assert_exit(&run(&[]), 1);
    assert_exit(&run(&["tokenize", "--bogus"]), 1);
    assert_exit(&run(&["frobnicate"]), 1);
}

#[test]
fn text_and_input_together_are_a_usage_error() {
    let out = run(&[
        "tokenize",
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--text",
        "play redbreast",
        "--input",
        "somefile.txt",
    ]);
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("mutually exclusive"));
}

// ── tokenize ─────────────────────────────────────────────────────────────

#[test]
fn tokenize_shows_pieces_and_alignment() {
    let out = run(&[
        "tokenize",
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--text",
        "play redbreast now",
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("[CLS] play red ##bre ##ast now [SEP]"));
    assert_eq!(lines.next(), Some("play\tplay"));
    assert_eq!(lines.next(), Some("redbreast\tred ##bre ##ast"));
    assert_eq!(lines.next(), Some("now\tnow"));
    assert_eq!(lines.next(), None);
}

#[test]
fn tokenize_reads_utterances_from_stdin() {
    let out = run_with_stdin(
        &["tokenize", "--vocab", fixture("vocab.txt").to_str().unwrap()],
        "play anthem\nweather in riverdale\n",
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    let blocks: Vec<&str> = text.trim_end().split("\n\n").collect();
    assert_eq!(blocks.len(), 2, "one block per utterance:\n{text}");
    assert!(blocks[0].starts_with("[CLS] play anthem [SEP]"));
    assert!(blocks[1].contains("riverdale\triver ##dale"));
}

#[test]
fn tokenize_with_missing_vocab_is_a_data_error() {
    let out = run(&[
        "tokenize",
        "--vocab",
        "/nonexistent/vocab.txt",
        "--text",
        "play",
    ]);
    assert_exit(&out, 2);
    assert!(stderr(&out).starts_with("error:"));
}

// ── train / eval / predict / weights round trip ──────────────────────────

#[test]
fn train_eval_predict_weights_round_trip() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = write_quick_config(dir.path(), 3);
    let ckpt = dir.path().join("model.ckpt");
    let vocab = fixture("vocab.txt");
    let data = fixture("synth");

    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("training: 64 utterances"));
    assert!(text.contains("epoch 1\t"), "per-epoch progress expected:\n{text}");
    assert!(text.contains("epoch 3\t"));
    assert!(text.contains("best epoch"));
    assert!(text.contains("saved"));
    assert!(ckpt.exists(), "checkpoint file must be written");

    let out = run(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("utterances\t32"));
    for key in ["intent_acc", "slot_precision", "slot_recall", "slot_f1", "overall_acc", "mean_loss"]
    {
        assert!(text.contains(key), "eval output must report {key}:\n{text}");
    }
    // final line is the machine-readable five-column summary
    let last = text.lines().last().expect("eval output");
    let cols: Vec<&str> = last.split('\t').collect();
    assert_eq!(cols.len(), 5, "machine line must have five columns: {last}");
    for c in cols {
        let v: f64 = c.parse().expect("machine line column must parse");
        assert!((0.0..=1.0).contains(&v) || v.is_finite());
    }

    let out = run(&[
        "predict",
        "--model",
        ckpt.to_str().unwrap(),
        "--text",
        "play moonlight now",
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "intent line plus one line per word:\n{text}");
    assert!(lines[0].starts_with("intent\t"));
    assert!(lines[1].starts_with("play\t"));
    assert!(lines[2].starts_with("moonlight\t"));
    assert!(lines[3].starts_with("now\t"));

    let out = run(&[
        "predict",
        "--model",
        ckpt.to_str().unwrap(),
        "--text",
        "play moonlight now",
        "--attention",
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("# span attention"));
    assert!(text.contains("# intent attention"));
    // the multi-piece word shows one weight per piece
    let span_line = text
        .lines()
        .find(|l| l.starts_with("moonlight\t") && l.contains(':'))
        .expect("span attention row for the split word");
    assert!(span_line.contains("moon:"), "{span_line}");
    assert!(span_line.contains("##light:"), "{span_line}");

    // two utterances over stdin come back as two blocks
    let out = run_with_stdin(
        &["predict", "--model", ckpt.to_str().unwrap()],
        "play anthem\nbook a table for seven\n",
    );
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert_eq!(
        text.trim_end().split("\n\n").count(),
        2,
        "one block per utterance:\n{text}"
    );

    let out = run(&["weights", "--model", ckpt.to_str().unwrap()]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("encoder.tok_emb\t"));
    assert!(text.contains("slot.w\t16x"));
    let total = text
        .lines()
        .last()
        .and_then(|l| l.rsplit('\t').next())
        .and_then(|v| v.parse::<usize>().ok())
        .expect("total parameter count");
    assert!(total > 0);
}

#[test]
fn eval_on_a_missing_split_is_a_data_error() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = write_quick_config(dir.path(), 1);
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let out = run(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
        "--split",
        "nonexistent",
    ]);
    assert_exit(&out, 2);

    // an utterance past the sequence budget is surfaced, not silently skipped
    let long = "play ".repeat(40);
    let out = run(&["predict", "--model", ckpt.to_str().unwrap(), "--text", &long]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("max_seq_len"));
}

#[test]
fn train_with_a_bad_config_value_is_a_data_error() {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "d_model = 16\nepochs = banana\n").expect("write config");
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let err = stderr(&out);
    assert!(err.contains("line 2"), "error must name the line: {err}");
    assert!(err.contains("banana"));
}

#[test]
fn weights_on_a_corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("garbage.ckpt");
    std::fs::write(&path, b"not a checkpoint at all").expect("write garbage");
    let out = run(&["weights", "--model", path.to_str().unwrap()]);
    assert_exit(&out, 2);
}

// ── gradcheck ────────────────────────────────────────────────────────────

#[test]
fn gradcheck_passes_with_defaults_and_reports_per_group_errors() {
    let out = run(&["gradcheck"]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.trim_end().ends_with("PASS"), "{text}");
    assert!(text.contains("encoder.tok_emb\t"));
    assert!(text.contains("saa.wq\t"));
    assert!(text.contains("iaa.w\t"));
    assert!(text.contains("max_rel_err\t"));
}

#[test]
fn gradcheck_with_an_impossible_threshold_is_a_numeric_error() {
    let out = run(&["gradcheck", "--threshold", "1e-18"]);
    assert_exit(&out, 3);
    assert!(stderr(&out).contains("gradient check failed"));
}

// ── ablate and sweep ─────────────────────────────────────────────────────

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = write_quick_config(dir.path(), 1);
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
        "--seeds",
        "1",
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant\tintent_acc\tslot_f1\toverall_acc");
    assert_eq!(lines.len(), 6, "header plus five variants:\n{text}");
    for name in ["full", "no_iaa", "no_saa", "no_intent_feature", "slot_only"] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{name}\t"))),
            "missing variant {name}:\n{text}"
        );
    }
    let slot_only = lines.iter().find(|l| l.starts_with("slot_only\t")).unwrap();
    let cols: Vec<&str> = slot_only.split('\t').collect();
    assert_eq!(cols[1], "-", "slot-only must not report intent accuracy");
    assert_eq!(cols[3], "-", "slot-only must not report overall accuracy");
    cols[2].parse::<f64>().expect("slot F1 must still be numeric");
}

#[test]
fn ablate_with_malformed_seeds_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = write_quick_config(dir.path(), 1);
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
        "--seeds",
        "1,two,3",
    ]);
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("--seeds"));
}

#[test]
fn sweep_prints_one_row_per_epoch() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = write_quick_config(dir.path(), 2);
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--vocab",
        fixture("vocab.txt").to_str().unwrap(),
        "--data",
        fixture("synth").to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "epoch\ttrain_loss\tval_loss\tval_intent_acc\tval_slot_f1\tval_overall"
    );
    assert_eq!(lines.len(), 3, "header plus two epochs:\n{text}");
    assert!(lines[1].starts_with("1\t"));
    assert!(lines[2].starts_with("2\t"));
}
