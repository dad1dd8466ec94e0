//! Data ingestion, synthetic corpus generation, and batching.
//!
//! JSONL schema (UTF-8, one object per line):
//! `{"id": str, "text": str, "visual": [[f32...]...], "acoustic": [[f32...]...], "label": f32}`
//! with the label in `[-3, 3]` and fixed per-frame feature widths.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AmbConfig;
use crate::text::{encode, EncodedText, TextError, Vocabulary, PAD};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data i/o: {0}")]
    Io(String),
    #[error("line {line}: malformed sample: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: label {label} outside [-3, 3]")]
    LabelOutOfRange { line: usize, label: f32 },
    #[error("line {line}: {stream} frame has {found} features, expected {expected}")]
    DimMismatch {
        line: usize,
        stream: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {stream} stream contains a non-finite value")]
    NonFinite { line: usize, stream: &'static str },
    #[error(transparent)]
    Text(#[from] TextError),
}

/// One utterance: word-level transcript plus word-aligned visual and
/// acoustic feature sequences and a sentiment label in `[-3, 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub text: String,
    pub visual: Vec<Vec<f32>>,
    pub acoustic: Vec<Vec<f32>>,
    pub label: f32,
}

fn validate_stream(
    frames: &[Vec<f32>],
    expected: usize,
    stream: &'static str,
    line: usize,
) -> Result<(), DataError> {
    for frame in frames {
        if frame.len() != expected {
            return Err(DataError::DimMismatch {
                line,
                stream,
                expected,
                found: frame.len(),
            });
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { line, stream });
        }
    }
    Ok(())
}

/// Loads and validates a JSONL corpus. Frame widths are checked against the
/// configured feature dimensions; a word-alignment mismatch only warns.
pub fn load_jsonl(path: &Path, cfg: &AmbConfig) -> Result<Vec<MultimodalSample>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: MultimodalSample =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: lineno,
                msg: e.to_string(),
            })?;
        if !sample.label.is_finite() || !(-3.0..=3.0).contains(&sample.label) {
            return Err(DataError::LabelOutOfRange {
                line: lineno,
                label: sample.label,
            });
        }
        validate_stream(&sample.visual, cfg.d_visual, "visual", lineno)?;
        validate_stream(&sample.acoustic, cfg.d_audio, "acoustic", lineno)?;
        let words = sample.text.split_whitespace().count();
        for (stream, len) in [("visual", sample.visual.len()), ("acoustic", sample.acoustic.len())] {
            if len != 0 && len != words {
                eprintln!(
                    "warning: sample {} line {lineno}: {stream} length {len} is not word-aligned to {words} words",
                    sample.id
                );
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples as JSONL, one object per line, in input order.
pub fn save_jsonl(samples: &[MultimodalSample], path: &Path) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path).map_err(|e| DataError::Io(e.to_string()))?;
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DataError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| DataError::Io(e.to_string()))?;
    }
    Ok(())
}

// ── synthetic corpus ───────────────────────────────────────────────────

pub const POSITIVE_WORDS: [&str; 10] = [
    "good", "great", "happy", "love", "excellent", "wonderful", "amazing", "nice", "fantastic",
    "enjoyable",
];

pub const NEGATIVE_WORDS: [&str; 10] = [
    "bad", "terrible", "sad", "hate", "awful", "horrible", "boring", "poor", "worst", "annoying",
];

pub const NEUTRAL_WORDS: [&str; 31] = [
    "the", "a", "movie", "film", "was", "is", "it", "this", "that", "story", "plot", "acting",
    "music", "scene", "really", "very", "quite", "i", "we", "they", "think", "felt", "saw",
    "watched", "again", "today", "about", "with", "and", "but", "overall",
];

/// How the synthetic label is assembled from the three modalities:
/// `label = clamp(text*s + visual*gm_v + acoustic*gm_a, -3, 3)` where `s` is
/// the signed sentiment-keyword count and `gm_*` are the grand means of the
/// generated frame features (a uniform read-out vector over each frame).
#[derive(Debug, Clone, Copy)]
pub struct SynthWeights {
    pub text: f32,
    pub visual: f32,
    pub acoustic: f32,
}

impl Default for SynthWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            visual: 1.0,
            acoustic: 1.0,
        }
    }
}

/// Signed sentiment-keyword count of a whitespace-tokenized lowercase text.
pub fn text_sentiment_score(text: &str) -> f32 {
    let mut score = 0i32;
    for word in text.split_whitespace() {
        if POSITIVE_WORDS.contains(&word) {
            score += 1;
        } else if NEGATIVE_WORDS.contains(&word) {
            score -= 1;
        }
    }
    score as f32
}

/// The fixed vocabulary covering every word the generator can emit.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = vec![
        PAD.to_string(),
        crate::text::UNK.to_string(),
        crate::text::CLS.to_string(),
        crate::text::SEP.to_string(),
        crate::text::MASK.to_string(),
    ];
    tokens.extend(POSITIVE_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(NEGATIVE_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(NEUTRAL_WORDS.iter().map(|s| s.to_string()));
    Vocabulary::from_tokens(tokens).expect("static vocabulary is well formed")
}

/// Token count of [`synthetic_vocabulary`], usable in const-ish contexts.
pub fn synthetic_vocabulary_len() -> usize {
    5 + POSITIVE_WORDS.len() + NEGATIVE_WORDS.len() + NEUTRAL_WORDS.len()
}

/// Deterministic synthetic corpus with the default modality weights.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &AmbConfig) -> Vec<MultimodalSample> {
    generate_synthetic_weighted(n, seed, cfg, &SynthWeights::default())
}

/// Deterministic synthetic corpus where the label is a documented function
/// of all three modalities; see [`SynthWeights`].
pub fn generate_synthetic_weighted(
    n: usize,
    seed: u64,
    cfg: &AmbConfig,
    w: &SynthWeights,
) -> Vec<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame_noise = Normal::new(0.0f64, 0.1).expect("valid sigma");
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let n_sentiment = rng.gen_range(0..=3usize);
        let mut words: Vec<&str> = (0..n_sentiment)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    *POSITIVE_WORDS.choose(&mut rng).expect("non-empty")
                } else {
                    *NEGATIVE_WORDS.choose(&mut rng).expect("non-empty")
                }
            })
            .collect();
        let n_filler = rng.gen_range(3..=6usize);
        words.extend((0..n_filler).map(|_| *NEUTRAL_WORDS.choose(&mut rng).expect("non-empty")));
        words.shuffle(&mut rng);
        let text = words.join(" ");
        let t = words.len();

        let gen_frames = |dim: usize, strength: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..t)
                .map(|_| {
                    (0..dim)
                        .map(|_| (strength + frame_noise.sample(rng)) as f32)
                        .collect()
                })
                .collect()
        };
        let v_strength = rng.gen_range(-1.0..1.0f64);
        let visual = gen_frames(cfg.d_visual, v_strength, &mut rng);
        let a_strength = rng.gen_range(-1.0..1.0f64);
        let acoustic = gen_frames(cfg.d_audio, a_strength, &mut rng);

        let grand_mean = |frames: &[Vec<f32>]| -> f32 {
            let total: f32 = frames.iter().flatten().sum();
            let count = frames.iter().map(Vec::len).sum::<usize>();
            if count == 0 {
                0.0
            } else {
                total / count as f32
            }
        };
        let s_text = text_sentiment_score(&text);
        let raw = w.text * s_text + w.visual * grand_mean(&visual) + w.acoustic * grand_mean(&acoustic);
        let label = raw.clamp(-3.0, 3.0);

        samples.push(MultimodalSample {
            id: format!("synth-{i:05}"),
            text,
            visual,
            acoustic,
            label,
        });
    }
    samples
}

// ── preparation and batching ───────────────────────────────────────────

/// A sample after tokenization, trimmed to its natural lengths (no padding).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub encoded: EncodedText,
    pub visual: Vec<Vec<f32>>,
    pub acoustic: Vec<Vec<f32>>,
    pub label: f32,
}

/// Encodes each sample and truncates frame streams to `max_frames`.
pub fn prepare(
    samples: &[MultimodalSample],
    vocab: &Vocabulary,
    cfg: &AmbConfig,
) -> Result<Vec<PreparedSample>, TextError> {
    samples
        .iter()
        .map(|s| {
            let mut encoded = encode(&s.text, vocab, cfg.max_len)?;
            let tl = encoded.true_len();
            encoded.token_ids.truncate(tl);
            encoded.attention_mask.truncate(tl);
            encoded.token_strings.truncate(tl);
            let mut visual = s.visual.clone();
            visual.truncate(cfg.max_frames);
            let mut acoustic = s.acoustic.clone();
            acoustic.truncate(cfg.max_frames);
            Ok(PreparedSample {
                id: s.id.clone(),
                encoded,
                visual,
                acoustic,
                label: s.label,
            })
        })
        .collect()
}

/// One right-padded element of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub encoded: EncodedText,
    pub visual: Vec<Vec<f32>>,
    pub visual_mask: Vec<bool>,
    pub acoustic: Vec<Vec<f32>>,
    pub acoustic_mask: Vec<bool>,
    pub label: f32,
}

/// Samples padded to common lengths, plus the label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn labels(&self) -> Vec<f32> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Right-pads every sample to the batch maximum (capped at `max_len` tokens
/// and `max_frames` frames); padded token ids are `[PAD]`, padded frames are
/// zero vectors, and masks record the original lengths.
pub fn collate_batch(samples: &[PreparedSample], max_len: usize, max_frames: usize) -> Batch {
    debug_assert!(!samples.is_empty(), "collate_batch expects samples");
    let token_len = samples
        .iter()
        .map(|s| s.encoded.true_len().min(max_len))
        .max()
        .unwrap_or(0);
    let v_len = samples
        .iter()
        .map(|s| s.visual.len().min(max_frames))
        .max()
        .unwrap_or(0);
    let a_len = samples
        .iter()
        .map(|s| s.acoustic.len().min(max_frames))
        .max()
        .unwrap_or(0);

    let items = samples
        .iter()
        .map(|s| {
            let mut encoded = s.encoded.clone();
            encoded.token_ids.truncate(token_len);
            encoded.attention_mask.truncate(token_len);
            encoded.token_strings.truncate(token_len);
            let valid = encoded.true_len();
            encoded.token_ids.resize(token_len, 0);
            encoded.token_strings.resize(token_len, PAD.to_string());
            encoded.attention_mask = (0..token_len).map(|i| i < valid).collect();

            let pad_frames = |frames: &[Vec<f32>], target: usize, dim_hint: usize| {
                let mut out: Vec<Vec<f32>> =
                    frames.iter().take(target).cloned().collect();
                let dim = frames.first().map(Vec::len).unwrap_or(dim_hint);
                let orig = out.len();
                out.resize(target, vec![0.0; dim]);
                let mask: Vec<bool> = (0..target).map(|i| i < orig).collect();
                (out, mask)
            };
            let (visual, visual_mask) = pad_frames(&s.visual, v_len, 0);
            let (acoustic, acoustic_mask) = pad_frames(&s.acoustic, a_len, 0);
            BatchItem {
                encoded,
                visual,
                visual_mask,
                acoustic,
                acoustic_mask,
                label: s.label,
            }
        })
        .collect();
    Batch { items }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> AmbConfig {
        AmbConfig::toy()
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, &toy()).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","text":"good","visual":[[0,0,0,0,0,0]],"acoustic":[[0,0,0,0,0,0,0,0]],"label":1.0}"#;
        let bad = r#"{"id":"b","text":"bad","visual":[],"acoustic":[],"label":3.5}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_jsonl(&path, &toy()).unwrap_err();
        match err {
            DataError::LabelOutOfRange { line, label } => {
                assert_eq!(line, 2);
                assert_eq!(label, 3.5);
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn frame_dimension_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dims.jsonl");
        let line = r#"{"id":"a","text":"good","visual":[[1.0,2.0]],"acoustic":[],"label":0.0}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_jsonl(&path, &toy()).unwrap_err();
        assert!(matches!(
            err,
            DataError::DimMismatch {
                line: 1,
                stream: "visual",
                expected: 6,
                found: 2
            }
        ));
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("malformed.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        let err = load_jsonl(&path, &toy()).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }));
    }

    #[test]
    fn three_line_fixture_parses_to_expected_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let body = concat!(
            r#"{"id":"s1","text":"good movie","visual":[[0.5,0.5,0.5,0.5,0.5,0.5],[0.5,0.5,0.5,0.5,0.5,0.5]],"acoustic":[[0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1],[0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1]],"label":1.6}"#,
            "\n",
            r#"{"id":"s2","text":"bad","visual":[[-1,-1,-1,-1,-1,-1]],"acoustic":[[0,0,0,0,0,0,0,0]],"label":-2.0}"#,
            "\n",
            r#"{"id":"s3","text":"","visual":[],"acoustic":[],"label":0.0}"#,
            "\n",
        );
        std::fs::write(&path, body).unwrap();
        let samples = load_jsonl(&path, &toy()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].id, "s1");
        assert_eq!(samples[0].text, "good movie");
        assert_eq!(samples[0].visual.len(), 2);
        assert_eq!(samples[0].visual[1][3], 0.5);
        assert_eq!(samples[0].label, 1.6);
        assert_eq!(samples[1].label, -2.0);
        assert!(samples[2].visual.is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = toy();
        let samples = generate_synthetic(5, 9, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        save_jsonl(&samples, &path).unwrap();
        let loaded = load_jsonl(&path, &cfg).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = toy();
        let a = generate_synthetic(20, 123, &cfg);
        let b = generate_synthetic(20, 123, &cfg);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        let c = generate_synthetic(20, 124, &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn text_only_weights_make_labels_text_predictable() {
        let cfg = toy();
        let w = SynthWeights {
            text: 1.0,
            visual: 0.0,
            acoustic: 0.0,
        };
        for s in generate_synthetic_weighted(50, 7, &cfg, &w) {
            let expect = text_sentiment_score(&s.text).clamp(-3.0, 3.0);
            assert_eq!(s.label, expect, "text {}", s.text);
        }
    }

    #[test]
    fn labels_span_both_signs() {
        let cfg = toy();
        let samples = generate_synthetic(1000, 3, &cfg);
        assert!(samples.iter().any(|s| s.label > 0.5));
        assert!(samples.iter().any(|s| s.label < -0.5));
        assert!(samples.iter().all(|s| (-3.0..=3.0).contains(&s.label)));
    }

    #[test]
    fn frames_are_word_aligned() {
        let cfg = toy();
        for s in generate_synthetic(20, 5, &cfg) {
            let words = s.text.split_whitespace().count();
            assert_eq!(s.visual.len(), words);
            assert_eq!(s.acoustic.len(), words);
            assert!(s.visual.iter().all(|f| f.len() == cfg.d_visual));
            assert!(s.acoustic.iter().all(|f| f.len() == cfg.d_audio));
        }
    }

    #[test]
    fn collate_single_sample_all_true_masks() {
        let cfg = toy();
        let vocab = synthetic_vocabulary();
        let samples = generate_synthetic(1, 11, &cfg);
        let prepared = prepare(&samples, &vocab, &cfg).unwrap();
        let batch = collate_batch(&prepared, cfg.max_len, cfg.max_frames);
        let item = &batch.items[0];
        assert!(item.encoded.attention_mask.iter().all(|m| *m));
        assert!(item.visual_mask.iter().all(|m| *m));
        assert!(item.acoustic_mask.iter().all(|m| *m));
    }

    #[test]
    fn collate_pads_to_batch_maximum() {
        let cfg = toy();
        let vocab = synthetic_vocabulary();
        // token true lengths 3 ("" -> CLS SEP is 2... use one word -> 3) and 7
        let mk = |text: &str| MultimodalSample {
            id: "x".into(),
            text: text.into(),
            visual: vec![vec![0.0; cfg.d_visual]; text.split_whitespace().count()],
            acoustic: vec![vec![0.0; cfg.d_audio]; text.split_whitespace().count()],
            label: 0.0,
        };
        let samples = vec![mk("good"), mk("the movie was very good")];
        let prepared = prepare(&samples, &vocab, &cfg).unwrap();
        assert_eq!(prepared[0].encoded.token_ids.len(), 3);
        assert_eq!(prepared[1].encoded.token_ids.len(), 7);
        let batch = collate_batch(&prepared, cfg.max_len, cfg.max_frames);
        assert_eq!(batch.items[0].encoded.token_ids.len(), 7);
        let falses = batch.items[0]
            .encoded
            .attention_mask
            .iter()
            .filter(|m| !**m)
            .count();
        assert_eq!(falses, 4);
        // padded frames are zero vectors
        assert_eq!(batch.items[0].visual.len(), 5);
        assert!(batch.items[0].visual[4].iter().all(|v| *v == 0.0));
        assert_eq!(
            batch.items[0].visual_mask,
            vec![true, false, false, false, false]
        );
    }
}
