//! Span-level slot metrics, intent accuracy and whole-frame accuracy.
//!
//! Slot F1 follows the classic CoNLL evaluation: tags are grouped into typed
//! chunks and a predicted chunk counts only on an exact (type, start, end)
//! match. Chunking is lenient: an `I-` tag without a matching preceding tag
//! opens a new chunk rather than being an error.

use crate::error::{NluError, Result};
use std::collections::HashSet;

/// A typed span, `[start, end)` in word positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

enum TagKind<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<TagKind<'_>> {
    if tag == "O" {
        return Ok(TagKind::Outside);
    }
    if let Some(ty) = tag.strip_prefix("B-") {
        if !ty.is_empty() {
            return Ok(TagKind::Begin(ty));
        }
    }
    if let Some(ty) = tag.strip_prefix("I-") {
        if !ty.is_empty() {
            return Ok(TagKind::Inside(ty));
        }
    }
    Err(NluError::MalformedTag {
        path: "tag sequence".into(),
        line: 0,
        tag: tag.to_string(),
    })
}

/// Groups an IOB tag sequence into typed chunks.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Chunk>> {
    let mut chunks = Vec::new();
    let mut current: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref())? {
            TagKind::Outside => {
                if let Some((label, start)) = current.take() {
                    chunks.push(Chunk { label, start, end: i });
                }
            }
            TagKind::Begin(ty) => {
                if let Some((label, start)) = current.take() {
                    chunks.push(Chunk { label, start, end: i });
                }
                current = Some((ty.to_string(), i));
            }
            TagKind::Inside(ty) => match &current {
                Some((cur_ty, _)) if cur_ty == ty => {}
                _ => {
                    // lenient continuation: an orphan I- opens a chunk
                    if let Some((label, start)) = current.take() {
                        chunks.push(Chunk { label, start, end: i });
                    }
                    current = Some((ty.to_string(), i));
                }
            },
        }
    }
    if let Some((label, start)) = current {
        chunks.push(Chunk {
            label,
            start,
            end: tags.len(),
        });
    }
    Ok(chunks)
}

/// Micro-averaged precision/recall/F1 over chunks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotPrf {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf_from_counts(tp: usize, n_pred: usize, n_gold: usize) -> SlotPrf {
    // a corpus with no gold chunks and no predicted chunks is perfectly
    // labeled, not undefined
    let (precision, recall, f1) = if n_pred == 0 && n_gold == 0 {
        (1.0, 1.0, 1.0)
    } else {
        let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
        let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    };
    SlotPrf {
        tp,
        n_pred,
        n_gold,
        precision,
        recall,
        f1,
    }
}

/// Chunk-level scores across a corpus of tag sequences.
pub fn slot_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SlotPrf> {
    if gold.len() != pred.len() {
        return Err(NluError::BadData {
            path: "metrics".into(),
            reason: format!(
                "{} gold sequences but {} predicted",
                gold.len(),
                pred.len()
            ),
        });
    }
    let mut tp = 0;
    let mut n_pred = 0;
    let mut n_gold = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(NluError::BadData {
                path: "metrics".into(),
                reason: format!(
                    "gold sequence has {} tags but prediction has {}",
                    g.len(),
                    p.len()
                ),
            });
        }
        let gc = extract_chunks(g)?;
        let pc = extract_chunks(p)?;
        let gset: HashSet<&Chunk> = gc.iter().collect();
        tp += pc.iter().filter(|c| gset.contains(c)).count();
        n_pred += pc.len();
        n_gold += gc.len();
    }
    Ok(prf_from_counts(tp, n_pred, n_gold))
}

/// All the numbers one evaluation pass produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub n_utterances: usize,
    pub intent_acc: f64,
    pub slot: SlotPrf,
    /// Fraction of utterances with the intent and every slot tag correct.
    pub overall_acc: f64,
}

impl EvalReport {
    /// Tab-separated `intent_acc slot_p slot_r slot_f1 overall_acc`.
    pub fn machine_line(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.intent_acc, self.slot.precision, self.slot.recall, self.slot.f1, self.overall_acc
        )
    }
}

/// Scores predictions against gold for a whole split.
pub fn evaluate<S: AsRef<str> + PartialEq>(
    gold_intents: &[S],
    gold_slots: &[Vec<S>],
    pred_intents: &[S],
    pred_slots: &[Vec<S>],
) -> Result<EvalReport> {
    if gold_intents.len() != pred_intents.len()
        || gold_intents.len() != gold_slots.len()
        || gold_slots.len() != pred_slots.len()
    {
        return Err(NluError::BadData {
            path: "metrics".into(),
            reason: format!(
                "inconsistent lengths: {} gold intents, {} predicted, {} gold slot rows, {} predicted",
                gold_intents.len(),
                pred_intents.len(),
                gold_slots.len(),
                pred_slots.len()
            ),
        });
    }
    let n = gold_intents.len();
    let slot = slot_prf(gold_slots, pred_slots)?;
    let mut intent_hits = 0;
    let mut overall_hits = 0;
    for i in 0..n {
        let intent_ok = gold_intents[i] == pred_intents[i];
        if intent_ok {
            intent_hits += 1;
        }
        let slots_ok = gold_slots[i].len() == pred_slots[i].len()
            && gold_slots[i]
                .iter()
                .zip(&pred_slots[i])
                .all(|(a, b)| a.as_ref() == b.as_ref());
        if intent_ok && slots_ok {
            overall_hits += 1;
        }
    }
    let denom = if n == 0 { 1.0 } else { n as f64 };
    Ok(EvalReport {
        n_utterances: n,
        intent_acc: intent_hits as f64 / denom,
        slot,
        overall_acc: overall_hits as f64 / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn chunk(label: &str, start: usize, end: usize) -> Chunk {
        Chunk {
            label: label.to_string(),
            start,
            end,
        }
    }

    #[test]
    fn basic_chunking_groups_b_and_following_i() {
        let c = extract_chunks(&tags(&["B-x", "I-x", "O", "B-y"])).unwrap();
        assert_eq!(c, vec![chunk("x", 0, 2), chunk("y", 3, 4)]);
    }

    #[test]
    fn orphan_i_tags_open_chunks_leniently() {
        let c = extract_chunks(&tags(&["O", "I-x", "I-x"])).unwrap();
        assert_eq!(c, vec![chunk("x", 1, 3)]);
        // type change inside a run splits the chunk
        let c = extract_chunks(&tags(&["B-x", "I-y"])).unwrap();
        assert_eq!(c, vec![chunk("x", 0, 1), chunk("y", 1, 2)]);
        // I after a different chunk of the same type continues it only via B
        let c = extract_chunks(&tags(&["I-x", "B-x", "I-x"])).unwrap();
        assert_eq!(c, vec![chunk("x", 0, 1), chunk("x", 1, 3)]);
    }

    #[test]
    fn adjacent_b_tags_are_separate_chunks() {
        let c = extract_chunks(&tags(&["B-x", "B-x", "I-x"])).unwrap();
        assert_eq!(c, vec![chunk("x", 0, 1), chunk("x", 1, 3)]);
    }

    #[test]
    fn chunk_runs_to_sequence_end() {
        let c = extract_chunks(&tags(&["O", "B-x", "I-x"])).unwrap();
        assert_eq!(c, vec![chunk("x", 1, 3)]);
    }

    #[test]
    fn malformed_tags_are_rejected() {
        assert!(extract_chunks(&tags(&["B-x", "Z-x"])).is_err());
        assert!(extract_chunks(&tags(&["B-"])).is_err());
        assert!(extract_chunks(&tags(&["b-x"])).is_err());
    }

    #[test]
    fn truncated_prediction_of_a_long_chunk_scores_zero_f1() {
        // gold has one chunk [0,2), prediction one chunk [0,1): no exact
        // match, so precision, recall and F1 are all zero
        let gold = vec![tags(&["B-x", "I-x", "O"])];
        let pred = vec![tags(&["B-x", "O", "O"])];
        let prf = slot_prf(&gold, &pred).unwrap();
        assert_eq!(prf.tp, 0);
        assert_eq!(prf.n_pred, 1);
        assert_eq!(prf.n_gold, 1);
        assert_eq!(prf.f1, 0.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gold = vec![tags(&["B-x", "I-x", "O", "B-y"]), tags(&["O", "O"])];
        let prf = slot_prf(&gold, &gold.clone()).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_chunks_anywhere_counts_as_perfect() {
        let gold = vec![tags(&["O", "O", "O"])];
        let pred = vec![tags(&["O", "O", "O"])];
        let prf = slot_prf(&gold, &pred).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn spurious_and_missed_chunks_move_precision_and_recall_apart() {
        // gold: one chunk; pred: that chunk plus a spurious one
        let gold = vec![tags(&["B-x", "O", "O"])];
        let pred = vec![tags(&["B-x", "O", "B-y"])];
        let prf = slot_prf(&gold, &pred).unwrap();
        assert_eq!(prf.tp, 1);
        assert!((prf.precision - 0.5).abs() < 1e-12);
        assert_eq!(prf.recall, 1.0);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let gold = vec![tags(&["O", "O"])];
        let pred = vec![tags(&["O"])];
        assert!(slot_prf(&gold, &pred).is_err());
        let pred2: Vec<Vec<String>> = vec![];
        assert!(slot_prf(&gold, &pred2).is_err());
    }

    #[test]
    fn overall_accuracy_requires_intent_and_every_tag() {
        let gold_intents = tags(&["a", "a", "b"]);
        let gold_slots = vec![
            tags(&["B-x", "O"]),
            tags(&["O", "O"]),
            tags(&["B-y", "I-y"]),
        ];
        // first utterance: slot error; second: intent error; third: perfect
        let pred_intents = tags(&["a", "b", "b"]);
        let pred_slots = vec![
            tags(&["O", "O"]),
            tags(&["O", "O"]),
            tags(&["B-y", "I-y"]),
        ];
        let r = evaluate(&gold_intents, &gold_slots, &pred_intents, &pred_slots).unwrap();
        assert!((r.intent_acc - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.overall_acc - 1.0 / 3.0).abs() < 1e-12);
        // whole-frame accuracy can never beat intent accuracy or the
        // sentence-level slot exact-match rate
        assert!(r.overall_acc <= r.intent_acc);
    }

    #[test]
    fn machine_line_is_five_tab_separated_numbers() {
        let r = EvalReport {
            n_utterances: 4,
            intent_acc: 0.75,
            slot: prf_from_counts(3, 4, 5),
            overall_acc: 0.5,
        };
        let line = r.machine_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], "0.750000");
        assert_eq!(fields[4], "0.500000");
    }
}
