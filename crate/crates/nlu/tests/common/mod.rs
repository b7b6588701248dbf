//! Independent reference implementations used to cross-check the production
//! code: adapter math written as explicit scalar loops over flat buffers,
//! and a second chunk extractor for the span metrics.

use std::collections::BTreeSet;

pub fn tanh_ref(x: f64) -> f64 {
    x.tanh()
}

pub fn gelu_ref(x: f64) -> f64 {
    let k = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (k * (x + 0.044_715 * x * x * x)).tanh())
}

/// `y[j] = act(sum_i x[i] * w[i*d_out + j])` for a single row.
fn project(x: &[f64], w: &[f64], d_out: usize, act: fn(f64) -> f64) -> Vec<f64> {
    let mut y = vec![0.0; d_out];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi * w[i * d_out + j];
        }
        *yj = act(acc);
    }
    y
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Span pooling written as plain loops. `hidden` is row-major `[n_pieces*d]`,
/// weights are `[d*d]` with the input dimension first. Returns one
/// representation per word and the per-piece attention weights.
#[allow(clippy::too_many_arguments)]
pub fn saa_reference(
    hidden: &[f64],
    d: usize,
    spans: &[(usize, usize)],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    act: fn(f64) -> f64,
    use_saa: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut reps = Vec::with_capacity(spans.len());
    let mut attns = Vec::with_capacity(spans.len());
    for &(start, end) in spans {
        let width = end - start;
        let row = |p: usize| &hidden[p * d..(p + 1) * d];
        if width == 1 || !use_saa {
            reps.push(row(start).to_vec());
            let mut a = vec![0.0; width];
            a[0] = 1.0;
            attns.push(a);
            continue;
        }
        let q1 = project(row(start), wq, d, act);
        let mut scores = Vec::with_capacity(width);
        let mut vals = Vec::with_capacity(width);
        for p in start..end {
            let key = project(row(p), wk, d, act);
            scores.push(q1.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>());
            vals.push(project(row(p), wv, d, act));
        }
        let alpha = softmax_row(&scores);
        let mut rep = vec![0.0; d];
        for (a, v) in alpha.iter().zip(&vals) {
            for (r, x) in rep.iter_mut().zip(v) {
                *r += a * x;
            }
        }
        reps.push(rep);
        attns.push(alpha);
    }
    (reps, attns)
}

/// Intent summarization written as plain loops. Scores each word
/// representation against the first hidden row, scaled by `1/sqrt(d)`.
/// When `sum_first` is set the weighted sum runs over each word's first
/// sub-token hidden state instead of the word representations.
pub fn iaa_reference(
    hidden: &[f64],
    d: usize,
    spans: &[(usize, usize)],
    word_reps: &[Vec<f64>],
    w_int: &[f64],
    act: fn(f64) -> f64,
    sum_first: bool,
) -> (Vec<f64>, Vec<f64>) {
    let h1 = &hidden[0..d];
    let mut scores = Vec::with_capacity(word_reps.len());
    for rep in word_reps {
        let t = project(rep, w_int, d, act);
        let dot: f64 = t.iter().zip(h1).map(|(a, b)| a * b).sum();
        scores.push(dot / (d as f64).sqrt());
    }
    let alpha = softmax_row(&scores);
    let mut h_intent = vec![0.0; d];
    for (w, &a) in alpha.iter().enumerate() {
        let src: &[f64] = if sum_first {
            let first = spans[w].0;
            &hidden[first * d..(first + 1) * d]
        } else {
            &word_reps[w]
        };
        for (h, x) in h_intent.iter_mut().zip(src) {
            *h += a * x;
        }
    }
    (h_intent, alpha)
}

/// Second chunk extractor: scans forward collecting maximal runs instead of
/// walking a state machine. A chunk starts at `B-` or at an `I-` that does
/// not continue one, and runs through following `I-` tags of the same label.
pub fn chunks_reference(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < tags.len() {
        let label = match tags[i].split_once('-') {
            Some(("B", l)) | Some(("I", l)) => l.to_string(),
            _ => {
                i += 1;
                continue;
            }
        };
        let cont = format!("I-{label}");
        let mut j = i + 1;
        while j < tags.len() && tags[j] == cont {
            j += 1;
        }
        out.insert((label, i, j));
        i = j;
    }
    out
}

/// Micro precision/recall/F1 over whole corpora of tag sequences, with the
/// convention that an empty gold and empty prediction set is perfect.
pub fn prf_reference(
    gold: &[Vec<String>],
    pred: &[Vec<String>],
) -> (usize, usize, usize, f64, f64, f64) {
    let mut tp = 0;
    let mut n_pred = 0;
    let mut n_gold = 0;
    for (g, p) in gold.iter().zip(pred) {
        let gc = chunks_reference(g);
        let pc = chunks_reference(p);
        tp += gc.intersection(&pc).count();
        n_pred += pc.len();
        n_gold += gc.len();
    }
    let (precision, recall, f1) = if n_pred == 0 && n_gold == 0 {
        (1.0, 1.0, 1.0)
    } else {
        let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
        let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    };
    (tp, n_pred, n_gold, precision, recall, f1)
}
