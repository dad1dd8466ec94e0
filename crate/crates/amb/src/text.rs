//! WordPiece tokenizer with the uncased special-token conventions.
//!
//! Vocabulary file format: one token per line, the line number is the id,
//! and `[PAD]` must be the first line. The five reserved tokens `[PAD]`,
//! `[UNK]`, `[CLS]`, `[SEP]`, `[MASK]` must each appear exactly once.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Continuation marker for non-initial subwords.
pub const CONTINUATION: &str = "##";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("vocabulary must list {PAD} first, found {found:?}")]
    PadNotFirst { found: String },
    #[error("special token {0} missing from vocabulary")]
    MissingSpecial(String),
    #[error("duplicate token {token:?} at ids {first} and {second}")]
    DuplicateToken {
        token: String,
        first: usize,
        second: usize,
    },
    #[error("vocab i/o: {0}")]
    Io(String),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
}

/// Immutable token-string registry with dense ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad_id: usize,
    unk_id: usize,
    cls_id: usize,
    sep_id: usize,
    mask_id: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(TextError::PadNotFirst {
                found: tokens.first().cloned().unwrap_or_default(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(first) = index.insert(tok.clone(), id) {
                return Err(TextError::DuplicateToken {
                    token: tok.clone(),
                    first,
                    second: id,
                });
            }
        }
        let special = |name: &str| -> Result<usize, TextError> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| TextError::MissingSpecial(name.to_string()))
        };
        Ok(Self {
            pad_id: special(PAD)?,
            unk_id: special(UNK)?,
            cls_id: special(CLS)?,
            sep_id: special(SEP)?,
            mask_id: special(MASK)?,
            tokens,
            index,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, TextError> {
        let body = std::fs::read_to_string(path).map_err(|e| TextError::Io(e.to_string()))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }

    pub fn to_file(&self, path: &Path) -> Result<(), TextError> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| TextError::Io(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn cls_id(&self) -> usize {
        self.cls_id
    }

    pub fn sep_id(&self) -> usize {
        self.sep_id
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id == self.pad_id || id == self.unk_id || id == self.cls_id || id == self.sep_id || id == self.mask_id
    }

    /// Ids of every token that is not one of the five reserved specials.
    pub fn non_special_ids(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| !self.is_reserved(i)).collect()
    }
}

/// Token-level view of one encoded sentence.
///
/// Always `[CLS] .. [SEP]` followed by padding; the three vectors stay the
/// same length, and `token_strings` mirrors `token_ids` so corruption
/// bookkeeping can tell specials apart after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub token_strings: Vec<String>,
}

impl EncodedText {
    /// Number of valid (non-padding) positions.
    pub fn true_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m).count()
    }
}

/// Greedy longest-match-first subword split of a single lowercased word.
///
/// Continuation pieces carry the `##` marker; if any remainder fails to
/// match, the whole word collapses to `[UNK]`.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocabulary) -> Vec<String> {
    debug_assert!(!word.is_empty());
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0; // index into chars
    while start < chars.len() {
        let mut matched = None;
        let mut end = chars.len();
        while end > start {
            let from = chars[start].0;
            let to = if end == chars.len() {
                word.len()
            } else {
                chars[end].0
            };
            let mut candidate = String::new();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[from..to]);
            if vocab.id(&candidate).is_some() {
                matched = Some(candidate);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    pieces
}

/// Lowercases, splits on whitespace and ASCII punctuation (punctuation
/// becomes standalone tokens), and applies [`wordpiece_tokenize`] per word.
fn basic_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Encodes a sentence: `[CLS]` + subwords truncated to `max_len - 2` +
/// `[SEP]`, padded with `[PAD]` to exactly `max_len`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<EncodedText, TextError> {
    if max_len < 3 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let mut pieces = Vec::new();
    for word in basic_tokenize(text) {
        pieces.extend(wordpiece_tokenize(&word, vocab));
    }
    pieces.truncate(max_len - 2);

    let mut token_strings = Vec::with_capacity(max_len);
    token_strings.push(CLS.to_string());
    token_strings.extend(pieces);
    token_strings.push(SEP.to_string());
    let valid = token_strings.len();
    token_strings.resize(max_len, PAD.to_string());

    let token_ids: Vec<usize> = token_strings
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
        .collect();
    let attention_mask: Vec<bool> = (0..max_len).map(|i| i < valid).collect();
    Ok(EncodedText {
        token_ids,
        attention_mask,
        token_strings,
    })
}

/// Reverses wordpiece splitting: strips `##` markers and rejoins words.
pub fn detokenize(pieces: &[String]) -> String {
    let mut out = String::new();
    for piece in pieces {
        if let Some(rest) = piece.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    #[test]
    fn vocab_requires_pad_first() {
        let err = Vocabulary::from_tokens(vec![UNK.into(), PAD.into()]).unwrap_err();
        assert!(matches!(err, TextError::PadNotFirst { .. }));
    }

    #[test]
    fn vocab_rejects_duplicates_and_missing_specials() {
        let err =
            Vocabulary::from_tokens(vec![PAD.into(), UNK.into(), UNK.into()]).unwrap_err();
        assert!(matches!(err, TextError::DuplicateToken { .. }));
        let err = Vocabulary::from_tokens(vec![PAD.into(), UNK.into()]).unwrap_err();
        assert!(matches!(err, TextError::MissingSpecial(_)));
    }

    #[test]
    fn whole_word_in_vocab() {
        let v = vocab(&["hello"]);
        assert_eq!(wordpiece_tokenize("hello", &v), vec!["hello"]);
    }

    #[test]
    fn greedy_longest_match_trace() {
        let v = vocab(&["un", "##aff", "##able"]);
        assert_eq!(
            wordpiece_tokenize("unaffable", &v),
            vec!["un", "##aff", "##able"]
        );
    }

    #[test]
    fn unmatched_character_falls_back_to_unk() {
        let v = vocab(&["un", "##aff", "##able"]);
        assert_eq!(wordpiece_tokenize("unqaffable", &v), vec![UNK]);
    }

    #[test]
    fn encode_empty_text() {
        let v = vocab(&["hi"]);
        let e = encode("", &v, 6).unwrap();
        assert_eq!(e.token_ids[0], v.cls_id());
        assert_eq!(e.token_ids[1], v.sep_id());
        assert_eq!(&e.token_ids[2..], &[v.pad_id(); 4]);
        assert_eq!(e.attention_mask, vec![true, true, false, false, false, false]);
    }

    #[test]
    fn encode_structure_and_exact_length() {
        let v = vocab(&["the", "movie", "was", "good", "!"]);
        let e = encode("The movie was GOOD!", &v, 10).unwrap();
        assert_eq!(e.token_ids.len(), 10);
        assert_eq!(e.token_ids[0], v.cls_id());
        let tl = e.true_len();
        assert_eq!(e.token_ids[tl - 1], v.sep_id());
        assert_eq!(
            &e.token_strings[..tl],
            &[CLS, "the", "movie", "was", "good", "!", SEP]
        );
    }

    #[test]
    fn encode_truncates_to_budget() {
        let v = vocab(&["a", "b", "c"]);
        let e = encode("a b c a b c", &v, 4).unwrap();
        assert_eq!(e.token_ids.len(), 4);
        assert_eq!(e.true_len(), 4);
        assert_eq!(&e.token_strings, &[CLS, "a", "b", SEP]);
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        let v = vocab(&[]);
        assert!(matches!(
            encode("x", &v, 2),
            Err(TextError::MaxLenTooSmall(2))
        ));
    }

    #[test]
    fn round_trip_in_vocab_sentence() {
        let v = vocab(&["un", "##aff", "##able", "good", "movie"]);
        let text = "unaffable good movie";
        let e = encode(text, &v, 16).unwrap();
        let tl = e.true_len();
        let pieces = e.token_strings[1..tl - 1].to_vec();
        assert_eq!(detokenize(&pieces), text);
    }

    proptest! {
        #[test]
        fn encode_is_pure_and_mask_is_prefix(words in proptest::collection::vec("[a-z]{1,8}", 0..6)) {
            let v = vocab(&["good", "bad", "movie", "##s"]);
            let text = words.join(" ");
            let a = encode(&text, &v, 12).unwrap();
            let b = encode(&text, &v, 12).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.token_ids.len(), 12);
            // mask is trues then falses
            let mut seen_false = false;
            for m in &a.attention_mask {
                if !*m {
                    seen_false = true;
                } else {
                    prop_assert!(!seen_false);
                }
            }
        }
    }
}
