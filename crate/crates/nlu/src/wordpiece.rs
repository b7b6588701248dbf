//! Greedy longest-match wordpiece tokenization with word ↔ sub-token
//! alignment.
//!
//! Words absent from the vocabulary split into pieces, continuations carrying
//! a `##` prefix ("playing" → `play`, `##ing`). The [`AlignmentMap`] records
//! which contiguous run of sub-token positions each original word occupies,
//! which downstream attention uses to pool multi-piece words back into one
//! representation per word.

use crate::error::{NluError, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Continuation pieces start with this marker.
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters are mapped straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// Vocabulary file: one token per line, token id = zero-based line number.
#[derive(Debug, Clone)]
pub struct WordpieceVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pub pad_id: usize,
    pub unk_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
}

impl WordpieceVocab {
    pub fn from_lines(lines: impl IntoIterator<Item = String>, origin: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (i, line) in lines.into_iter().enumerate() {
            let tok = line.trim_end_matches(['\r', '\n']).to_string();
            if tok.is_empty() {
                return Err(NluError::BadVocab {
                    path: origin.to_string(),
                    reason: format!("empty token at line {}", i + 1),
                });
            }
            if ids.insert(tok.clone(), i).is_some() {
                return Err(NluError::BadVocab {
                    path: origin.to_string(),
                    reason: format!("duplicate token \"{tok}\" at line {}", i + 1),
                });
            }
            tokens.push(tok);
        }
        let special = |name: &str| -> Result<usize> {
            ids.get(name).copied().ok_or_else(|| NluError::BadVocab {
                path: origin.to_string(),
                reason: format!("missing required special token {name}"),
            })
        };
        Ok(WordpieceVocab {
            pad_id: special(PAD)?,
            unk_id: special(UNK)?,
            cls_id: special(CLS)?,
            sep_id: special(SEP)?,
            tokens,
            ids,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NluError::io(format!("reading vocab {}", path.display()), e))?;
        Self::from_lines(text.lines().map(str::to_string), &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits one word into wordpieces, greedy longest match first. A word
    /// that cannot be fully covered (or is absurdly long) becomes `[UNK]`.
    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK.to_string()];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut matched: Option<String> = None;
            // longest candidate first
            let mut end = chars.len();
            while end > start {
                let mut candidate: String = if start > 0 {
                    CONTINUATION_PREFIX.to_string()
                } else {
                    String::new()
                };
                candidate.extend(&chars[start..end]);
                if self.ids.contains_key(&candidate) {
                    matched = Some(candidate);
                    break;
                }
                end -= 1;
            }
            match matched {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => return vec![UNK.to_string()],
            }
        }
        pieces
    }

    /// Tokenizes a full utterance: `[CLS]`, the pieces of every word, `[SEP]`.
    /// Errors (rather than truncating) when the result would not fit.
    pub fn tokenize_utterance(
        &self,
        words: &[String],
        max_seq_len: usize,
    ) -> Result<TokenizedUtterance> {
        let mut pieces = vec![CLS.to_string()];
        let mut spans = Vec::with_capacity(words.len());
        for word in words {
            let wp = self.tokenize_word(word);
            let start = pieces.len();
            pieces.extend(wp);
            spans.push((start, pieces.len()));
        }
        pieces.push(SEP.to_string());
        if pieces.len() > max_seq_len {
            let preview: String = words.join(" ").chars().take(40).collect();
            return Err(NluError::UtteranceTooLong {
                preview,
                pieces: pieces.len(),
                max: max_seq_len,
            });
        }
        let ids = pieces
            .iter()
            .map(|p| self.ids.get(p).copied().unwrap_or(self.unk_id))
            .collect();
        Ok(TokenizedUtterance {
            words: words.to_vec(),
            pieces,
            ids,
            alignment: AlignmentMap { spans },
        })
    }
}

/// Half-open sub-token span `[start, end)` for each word, in utterance order.
/// Spans are contiguous, non-overlapping, each at least one piece wide, and
/// together cover every position strictly between `[CLS]` and `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    spans: Vec<(usize, usize)>,
}

impl AlignmentMap {
    pub fn new(spans: Vec<(usize, usize)>) -> Self {
        AlignmentMap { spans }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn span(&self, word: usize) -> (usize, usize) {
        self.spans[word]
    }

    pub fn width(&self, word: usize) -> usize {
        let (s, e) = self.spans[word];
        e - s
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.spans.iter().copied()
    }

    /// Total sub-token positions covered by word spans.
    pub fn covered(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s).sum()
    }
}

/// One utterance after tokenization. `pieces[0]` is always `[CLS]` and the
/// last piece `[SEP]`; `alignment` indexes into `pieces`/`ids`.
#[derive(Debug, Clone)]
pub struct TokenizedUtterance {
    pub words: Vec<String>,
    pub pieces: Vec<String>,
    pub ids: Vec<usize>,
    pub alignment: AlignmentMap,
}

impl TokenizedUtterance {
    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    /// Number of words that split into more than one piece.
    pub fn multi_piece_words(&self) -> usize {
        (0..self.alignment.len())
            .filter(|&w| self.alignment.width(w) > 1)
            .count()
    }

    /// Reassembles each word from its pieces by stripping continuation
    /// markers. `[UNK]` pieces reproduce as the literal `[UNK]` string.
    pub fn detokenize(&self) -> Vec<String> {
        self.alignment
            .iter()
            .map(|(s, e)| {
                let mut word = String::new();
                for p in &self.pieces[s..e] {
                    word.push_str(p.strip_prefix(CONTINUATION_PREFIX).unwrap_or(p));
                }
                word
            })
            .collect()
    }
}
