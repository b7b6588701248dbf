//! Loading and batching of slot/intent corpora.
//!
//! A split lives in its own directory as three parallel line files:
//! `seq.in` (space-separated words), `seq.out` (one IOB slot tag per word),
//! `label` (one intent per utterance). Words are lowercased at load; tags and
//! intents are kept verbatim.

use crate::error::{NluError, Result};
use crate::wordpiece::{TokenizedUtterance, WordpieceVocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

/// Padding value in per-word slot id rows; never a valid class index.
pub const SLOT_IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledUtterance {
    pub words: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

/// Checks a slot tag is `O`, `B-<type>` or `I-<type>`.
fn valid_tag(tag: &str) -> bool {
    tag == "O"
        || (tag.len() > 2
            && (tag.starts_with("B-") || tag.starts_with("I-")))
}

/// Reads one split (`<root>/<split>/{seq.in,seq.out,label}`).
pub fn load_split(root: &Path, split: &str) -> Result<Vec<LabeledUtterance>> {
    let dir = root.join(split);
    let read = |name: &str| -> Result<(String, Vec<String>)> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| NluError::io(format!("reading {}", path.display()), e))?;
        Ok((
            path.display().to_string(),
            text.lines().map(str::to_string).collect(),
        ))
    };
    let (in_path, seq_in) = read("seq.in")?;
    let (out_path, seq_out) = read("seq.out")?;
    let (label_path, labels) = read("label")?;

    if seq_in.len() != seq_out.len() || seq_in.len() != labels.len() {
        return Err(NluError::BadData {
            path: dir.display().to_string(),
            reason: format!(
                "parallel files disagree: {} utterances in seq.in, {} in seq.out, {} in label",
                seq_in.len(),
                seq_out.len(),
                labels.len()
            ),
        });
    }

    let mut out = Vec::with_capacity(seq_in.len());
    for (i, ((line_in, line_out), intent)) in
        seq_in.iter().zip(&seq_out).zip(&labels).enumerate()
    {
        let words: Vec<String> = line_in
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        let tags: Vec<String> = line_out.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(NluError::BadData {
                path: in_path.clone(),
                reason: format!("empty utterance at line {}", i + 1),
            });
        }
        if words.len() != tags.len() {
            return Err(NluError::TagCountMismatch {
                path: out_path.clone(),
                line: i + 1,
                words: words.len(),
                tags: tags.len(),
            });
        }
        for tag in &tags {
            if !valid_tag(tag) {
                return Err(NluError::MalformedTag {
                    path: out_path.clone(),
                    line: i + 1,
                    tag: tag.clone(),
                });
            }
        }
        if intent.trim().is_empty() {
            return Err(NluError::BadData {
                path: label_path.clone(),
                reason: format!("empty intent at line {}", i + 1),
            });
        }
        out.push(LabeledUtterance {
            words,
            slots: tags,
            intent: intent.trim().to_string(),
        });
    }
    Ok(out)
}

/// Lowercased whitespace word split, the same normalization `load_split`
/// applies. Used for ad-hoc prediction input.
pub fn prepare_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

// ── label catalog ────────────────────────────────────────────────────────

/// Slot tag and intent vocabularies, built from the training split only.
/// Slot id 0 is always `O`; remaining ids follow first appearance. Tags or
/// intents outside the catalog (possible on eval splits) map to a reserved
/// id one past the known range, which is never a decoder class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCatalog {
    slots: Vec<String>,
    intents: Vec<String>,
    slot_ids: HashMap<String, usize>,
    intent_ids: HashMap<String, usize>,
}

impl LabelCatalog {
    pub fn from_training(data: &[LabeledUtterance]) -> Self {
        let mut slots = vec!["O".to_string()];
        let mut slot_ids = HashMap::from([("O".to_string(), 0)]);
        let mut intents = Vec::new();
        let mut intent_ids = HashMap::new();
        for utt in data {
            for tag in &utt.slots {
                if !slot_ids.contains_key(tag) {
                    slot_ids.insert(tag.clone(), slots.len());
                    slots.push(tag.clone());
                }
            }
            if !intent_ids.contains_key(&utt.intent) {
                intent_ids.insert(utt.intent.clone(), intents.len());
                intents.push(utt.intent.clone());
            }
        }
        LabelCatalog {
            slots,
            intents,
            slot_ids,
            intent_ids,
        }
    }

    /// Rebuilds a catalog from stored label lists (checkpoint loading).
    pub fn from_parts(slots: Vec<String>, intents: Vec<String>) -> Result<Self> {
        if slots.first().map(String::as_str) != Some("O") {
            return Err(NluError::BadData {
                path: "label catalog".into(),
                reason: "slot label list must start with O".into(),
            });
        }
        let slot_ids = slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let intent_ids = intents
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(LabelCatalog {
            slots,
            intents,
            slot_ids,
            intent_ids,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn slot_id(&self, tag: &str) -> Option<usize> {
        self.slot_ids.get(tag).copied()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_ids.get(intent).copied()
    }

    /// Reserved id for slot tags unseen in training.
    pub fn slot_unk_id(&self) -> usize {
        self.slots.len()
    }

    /// Reserved id for intents unseen in training.
    pub fn intent_unk_id(&self) -> usize {
        self.intents.len()
    }

    pub fn slot_name(&self, id: usize) -> &str {
        &self.slots[id]
    }

    pub fn intent_name(&self, id: usize) -> &str {
        &self.intents[id]
    }
}

// ── batching ─────────────────────────────────────────────────────────────

/// One tokenized utterance inside a batch.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Index into the source dataset slice.
    pub orig_index: usize,
    pub tokenized: TokenizedUtterance,
    /// Per-word slot class ids (catalog ids, or the reserved unknown id).
    pub slot_ids: Vec<usize>,
    pub intent_id: usize,
}

/// A group of utterances padded to a common sub-token length.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// `[B×L]` sub-token ids, rows padded with `[PAD]`.
    pub ids: Vec<Vec<usize>>,
    /// `[B×L]` mask, true at real positions.
    pub mask: Vec<Vec<bool>>,
    /// `[B×W_max]` slot ids, rows padded with [`SLOT_IGNORE`].
    pub slot_rows: Vec<Vec<usize>>,
    /// `[B]` intent ids.
    pub intent_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Common padded sub-token length.
    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    fn build(items: Vec<BatchItem>, pad_id: usize) -> Batch {
        let max_len = items.iter().map(|i| i.tokenized.ids.len()).max().unwrap_or(0);
        let max_words = items.iter().map(|i| i.slot_ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(items.len());
        let mut mask = Vec::with_capacity(items.len());
        let mut slot_rows = Vec::with_capacity(items.len());
        let mut intent_ids = Vec::with_capacity(items.len());
        for item in &items {
            let mut row = item.tokenized.ids.clone();
            let mut mrow = vec![true; row.len()];
            row.resize(max_len, pad_id);
            mrow.resize(max_len, false);
            ids.push(row);
            mask.push(mrow);
            let mut srow = item.slot_ids.clone();
            srow.resize(max_words, SLOT_IGNORE);
            slot_rows.push(srow);
            intent_ids.push(item.intent_id);
        }
        Batch {
            items,
            ids,
            mask,
            slot_rows,
            intent_ids,
        }
    }
}

/// Counters for everything batching had to work around.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchStats {
    /// Utterances dropped because they exceed `max_seq_len` after splitting.
    pub skipped_too_long: usize,
    /// Slot tags not present in the catalog (mapped to the reserved id).
    pub unseen_slot_tags: usize,
    /// Intents not present in the catalog.
    pub unseen_intents: usize,
}

/// Tokenizes and groups a dataset into batches. With a seed, utterance order
/// is shuffled deterministically; without, file order is kept. The final
/// partial batch is kept. Over-long utterances are skipped and counted, never
/// truncated.
pub fn batch_iter(
    data: &[LabeledUtterance],
    vocab: &WordpieceVocab,
    catalog: &LabelCatalog,
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<(Vec<Batch>, BatchStats)> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }

    let mut stats = BatchStats::default();
    let mut items = Vec::with_capacity(data.len());
    for &idx in &order {
        let utt = &data[idx];
        let tokenized = match vocab.tokenize_utterance(&utt.words, max_seq_len) {
            Ok(t) => t,
            Err(NluError::UtteranceTooLong { .. }) => {
                stats.skipped_too_long += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let slot_ids: Vec<usize> = utt
            .slots
            .iter()
            .map(|tag| {
                catalog.slot_id(tag).unwrap_or_else(|| {
                    stats.unseen_slot_tags += 1;
                    catalog.slot_unk_id()
                })
            })
            .collect();
        let intent_id = catalog.intent_id(&utt.intent).unwrap_or_else(|| {
            stats.unseen_intents += 1;
            catalog.intent_unk_id()
        });
        items.push(BatchItem {
            orig_index: idx,
            tokenized,
            slot_ids,
            intent_id,
        });
    }

    let mut batches = Vec::new();
    let mut chunk = Vec::with_capacity(batch_size);
    for item in items {
        chunk.push(item);
        if chunk.len() == batch_size {
            batches.push(Batch::build(std::mem::take(&mut chunk), vocab.pad_id));
        }
    }
    if !chunk.is_empty() {
        batches.push(Batch::build(chunk, vocab.pad_id));
    }
    Ok((batches, stats))
}

// ── corpus statistics ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordStats {
    pub utterances: usize,
    pub total_words: usize,
    /// Words splitting into two or more pieces.
    pub multi_piece_words: usize,
    /// Distinct piece strings emitted by words that split (the sub-words the
    /// tokenizer created, as opposed to words passed through whole).
    pub distinct_subwords: usize,
}

impl SubwordStats {
    pub fn multi_piece_fraction(&self) -> f64 {
        if self.total_words == 0 {
            0.0
        } else {
            self.multi_piece_words as f64 / self.total_words as f64
        }
    }
}

/// Tokenizes every word of the corpus and tallies how much splitting the
/// vocabulary causes.
pub fn corpus_subword_stats(data: &[LabeledUtterance], vocab: &WordpieceVocab) -> SubwordStats {
    let mut distinct = std::collections::HashSet::new();
    let mut total_words = 0usize;
    let mut multi = 0usize;
    for utt in data {
        for word in &utt.words {
            total_words += 1;
            let pieces = vocab.tokenize_word(word);
            if pieces.len() > 1 {
                multi += 1;
                for p in pieces {
                    distinct.insert(p);
                }
            }
        }
    }
    SubwordStats {
        utterances: data.len(),
        total_words,
        multi_piece_words: multi,
        distinct_subwords: distinct.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixture_root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/tiny")
    }

    fn fixture_vocab() -> WordpieceVocab {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/vocab.txt");
        WordpieceVocab::from_file(&path).unwrap()
    }

    fn write_split(dir: &Path, seq_in: &str, seq_out: &str, label: &str) {
        std::fs::create_dir_all(dir).unwrap();
        std::fs::write(dir.join("seq.in"), seq_in).unwrap();
        std::fs::write(dir.join("seq.out"), seq_out).unwrap();
        std::fs::write(dir.join("label"), label).unwrap();
    }

    #[test]
    fn loads_the_tiny_fixture_split() {
        let data = load_split(&fixture_root(), "train").unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data[0].words[3], "playing");
        assert_eq!(data[0].slots.len(), data[0].words.len());
        assert_eq!(data[2].intent, "play_music");
    }

    #[test]
    fn loading_lowercases_words_but_not_tags() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(
            &tmp.path().join("train"),
            "Play REDBREAST now\n",
            "O B-Song O\n",
            "play_music\n",
        );
        let data = load_split(tmp.path(), "train").unwrap();
        assert_eq!(data[0].words, ["play", "redbreast", "now"]);
        assert_eq!(data[0].slots[1], "B-Song", "tag case preserved");
    }

    #[test]
    fn mismatched_parallel_files_error_with_counts() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(&tmp.path().join("train"), "a b\nc d\n", "O O\n", "x\ny\n");
        let err = load_split(tmp.path(), "train").unwrap_err().to_string();
        assert!(err.contains("2 utterances") && err.contains("1 in seq.out"), "{err}");
    }

    #[test]
    fn word_tag_count_mismatch_names_the_line() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(&tmp.path().join("train"), "a b c\n", "O O\n", "x\n");
        let err = load_split(tmp.path(), "train").unwrap_err();
        match err {
            NluError::TagCountMismatch { line, words, tags, .. } => {
                assert_eq!((line, words, tags), (1, 3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_slot_tag_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(&tmp.path().join("train"), "a b\n", "O Q-song\n", "x\n");
        let err = load_split(tmp.path(), "train").unwrap_err();
        assert!(matches!(err, NluError::MalformedTag { ref tag, .. } if tag == "Q-song"));
        // bare "B-" with no type is malformed too
        write_split(&tmp.path().join("t2"), "a\n", "B-\n", "x\n");
        assert!(load_split(tmp.path(), "t2").is_err());
    }

    #[test]
    fn catalog_puts_o_first_then_first_appearance_order() {
        let data = vec![
            LabeledUtterance {
                words: vec!["x".into(), "y".into()],
                slots: vec!["B-song".into(), "O".into()],
                intent: "play_music".into(),
            },
            LabeledUtterance {
                words: vec!["z".into()],
                slots: vec!["B-city".into()],
                intent: "get_weather".into(),
            },
        ];
        let cat = LabelCatalog::from_training(&data);
        assert_eq!(cat.slot_id("O"), Some(0), "O is always id 0");
        assert_eq!(cat.slot_id("B-song"), Some(1));
        assert_eq!(cat.slot_id("B-city"), Some(2));
        assert_eq!(cat.intent_id("play_music"), Some(0));
        assert_eq!(cat.intent_id("get_weather"), Some(1));
        assert_eq!(cat.slot_id("B-unknown"), None);
        assert_eq!(cat.slot_unk_id(), 3);
    }

    #[test]
    fn catalog_round_trips_through_parts() {
        let data = load_split(&fixture_root(), "train").unwrap();
        let cat = LabelCatalog::from_training(&data);
        let rebuilt =
            LabelCatalog::from_parts(cat.slots().to_vec(), cat.intents().to_vec()).unwrap();
        assert_eq!(cat, rebuilt);
        assert!(LabelCatalog::from_parts(vec!["B-x".into()], vec![]).is_err());
    }

    #[test]
    fn batches_pad_to_batch_max_and_round_trip() {
        let data = load_split(&fixture_root(), "train").unwrap();
        let vocab = fixture_vocab();
        let cat = LabelCatalog::from_training(&data);
        let (batches, stats) = batch_iter(&data, &vocab, &cat, 128, 2, None).unwrap();
        assert_eq!(batches.len(), 2, "3 utterances at batch size 2: 2 + 1");
        assert_eq!(batches[0].len(), 2);
        assert_eq!(batches[1].len(), 1, "last partial batch kept");
        assert_eq!(stats, BatchStats::default());

        for batch in &batches {
            let l = batch.seq_len();
            for (row, mrow) in batch.ids.iter().zip(&batch.mask) {
                assert_eq!(row.len(), l);
                assert_eq!(mrow.len(), l);
            }
            for (i, item) in batch.items.iter().enumerate() {
                let n = item.tokenized.ids.len();
                // unpadding recovers the original tokenization and labels
                assert_eq!(&batch.ids[i][..n], &item.tokenized.ids[..]);
                assert!(batch.ids[i][n..].iter().all(|&id| id == vocab.pad_id));
                assert!(batch.mask[i][..n].iter().all(|&m| m));
                assert!(batch.mask[i][n..].iter().all(|&m| !m));
                let orig = &data[item.orig_index];
                assert_eq!(item.tokenized.words, orig.words);
                let w = item.slot_ids.len();
                assert_eq!(w, orig.words.len());
                assert_eq!(&batch.slot_rows[i][..w], &item.slot_ids[..]);
                assert!(batch.slot_rows[i][w..].iter().all(|&s| s == SLOT_IGNORE));
            }
        }
    }

    #[test]
    fn shuffling_is_deterministic_per_seed_and_covers_everything() {
        let data = load_split(&fixture_root(), "train").unwrap();
        let vocab = fixture_vocab();
        let cat = LabelCatalog::from_training(&data);
        let order = |seed: Option<u64>| -> Vec<usize> {
            let (batches, _) = batch_iter(&data, &vocab, &cat, 128, 1, seed).unwrap();
            batches.iter().map(|b| b.items[0].orig_index).collect()
        };
        assert_eq!(order(Some(5)), order(Some(5)), "same seed, same order");
        assert_eq!(order(None), vec![0, 1, 2], "no seed keeps file order");
        let mut o = order(Some(5));
        o.sort_unstable();
        assert_eq!(o, vec![0, 1, 2], "shuffle is a permutation");
    }

    #[test]
    fn overlong_utterances_are_skipped_and_counted() {
        let data = vec![
            LabeledUtterance {
                words: vec!["play".into(), "music".into()],
                slots: vec!["O".into(), "O".into()],
                intent: "play_music".into(),
            },
            LabeledUtterance {
                words: vec!["thirtieth".into(); 10], // 42 pieces with specials
                slots: vec!["O".into(); 10],
                intent: "play_music".into(),
            },
        ];
        let vocab = fixture_vocab();
        let cat = LabelCatalog::from_training(&data);
        let (batches, stats) = batch_iter(&data, &vocab, &cat, 16, 4, None).unwrap();
        assert_eq!(stats.skipped_too_long, 1);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 1);
    }

    #[test]
    fn unseen_eval_labels_map_to_reserved_ids_and_are_counted() {
        let train = vec![LabeledUtterance {
            words: vec!["play".into()],
            slots: vec!["O".into()],
            intent: "play_music".into(),
        }];
        let eval = vec![LabeledUtterance {
            words: vec!["rain".into(), "now".into()],
            slots: vec!["B-storm".into(), "O".into()],
            intent: "get_forecast".into(),
        }];
        let vocab = fixture_vocab();
        let cat = LabelCatalog::from_training(&train);
        let (batches, stats) = batch_iter(&eval, &vocab, &cat, 128, 4, None).unwrap();
        assert_eq!(stats.unseen_slot_tags, 1);
        assert_eq!(stats.unseen_intents, 1);
        assert_eq!(batches[0].items[0].slot_ids[0], cat.slot_unk_id());
        assert_eq!(batches[0].items[0].intent_id, cat.intent_unk_id());
    }

    #[test]
    fn subword_stats_match_hand_counts_on_the_tiny_fixture() {
        let data = load_split(&fixture_root(), "train").unwrap();
        let vocab = fixture_vocab();
        let stats = corpus_subword_stats(&data, &vocab);
        assert_eq!(data.iter().map(|u| u.words.len()).sum::<usize>(), stats.total_words);
        // hand count over the three fixture utterances: "playing", "lossless",
        // "thirtieth" and "redbreast" split; every other word is whole
        assert_eq!(stats.multi_piece_words, 4);
        // their pieces: play ##ing loss ##less th ##ir ##tie ##th red ##bre ##ast
        assert_eq!(stats.distinct_subwords, 11);
        let frac = stats.multi_piece_fraction();
        assert!(frac > 0.0 && frac < 1.0);
    }

    #[test]
    fn prepare_words_matches_load_normalization() {
        assert_eq!(
            prepare_words("  Play  Moonlight\tNOW "),
            ["play", "moonlight", "now"]
        );
        assert!(prepare_words("").is_empty());
    }
}
