//! Input-noise robustness protocol: token deletion (replacement by [UNK]),
//! random token replacement, multiplicative Gaussian noise on visual
//! frames, and seeded multi-run sweeps averaging correlation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::AmbModel;
use crate::pipeline::PreparedSample;
use crate::tensor::Scalar;
use crate::text::{EncodedText, Vocabulary, UNK};
use crate::trainer::{evaluate, TrainError};

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("corruption rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("noise sigma {0} must be positive")]
    SigmaOutOfRange(f64),
    #[error("vocabulary has no non-special tokens to draw replacements from")]
    NoReplacementTokens,
    #[error("unknown corruption kind {given:?}; valid kinds: delete, replace, visual_noise")]
    UnknownKind { given: String },
    #[error(transparent)]
    Eval(#[from] TrainError),
}

/// What gets corrupted and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Non-special tokens become `[UNK]` (lengths stay aligned with the
    /// frame streams, so this models deletion without shifting).
    Delete,
    /// Non-special tokens are replaced by uniform draws over the
    /// non-special vocabulary.
    Replace,
    /// Randomly selected visual frames are multiplied elementwise by
    /// factors drawn from N(1, sigma^2).
    VisualNoise,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Delete => "delete",
            CorruptionKind::Replace => "replace",
            CorruptionKind::VisualNoise => "visual_noise",
        }
    }

    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::Delete,
        CorruptionKind::Replace,
        CorruptionKind::VisualNoise,
    ];
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = RobustnessError;

    fn from_str(s: &str) -> Result<Self, RobustnessError> {
        match s {
            "delete" => Ok(CorruptionKind::Delete),
            "replace" => Ok(CorruptionKind::Replace),
            "visual_noise" => Ok(CorruptionKind::VisualNoise),
            _ => Err(RobustnessError::UnknownKind {
                given: s.to_string(),
            }),
        }
    }
}

/// One corruption setting: per-element probability, noise spread (visual
/// only), and the seed that makes it a pure function of its inputs.
#[derive(Debug, Clone, Copy)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub rate: f64,
    pub sigma: f64,
    pub seed: u64,
}

fn check_rate(rate: f64) -> Result<(), RobustnessError> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return Err(RobustnessError::RateOutOfRange(rate));
    }
    Ok(())
}

fn is_untouchable(id: usize, vocab: &Vocabulary) -> bool {
    id == vocab.cls_id() || id == vocab.sep_id() || id == vocab.pad_id()
}

/// Independently replaces each non-special token by `[UNK]` with
/// probability `rate`. `[CLS]`, `[SEP]` and `[PAD]` are never touched and
/// masks are unchanged.
pub fn corrupt_delete(
    encoded: &EncodedText,
    rate: f64,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedText, RobustnessError> {
    check_rate(rate)?;
    let mut out = encoded.clone();
    for i in 0..out.token_ids.len() {
        if is_untouchable(out.token_ids[i], vocab) {
            continue;
        }
        if rng.gen_bool(rate) {
            out.token_ids[i] = vocab.unk_id();
            out.token_strings[i] = UNK.to_string();
        }
    }
    Ok(out)
}

/// Independently replaces each non-special token by a uniform draw over
/// the non-special vocabulary with probability `rate`.
pub fn corrupt_replace(
    encoded: &EncodedText,
    rate: f64,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedText, RobustnessError> {
    check_rate(rate)?;
    let pool = vocab.non_special_ids();
    if pool.is_empty() {
        return Err(RobustnessError::NoReplacementTokens);
    }
    let mut out = encoded.clone();
    for i in 0..out.token_ids.len() {
        if is_untouchable(out.token_ids[i], vocab) {
            continue;
        }
        if rng.gen_bool(rate) {
            let id = pool[rng.gen_range(0..pool.len())];
            out.token_ids[i] = id;
            out.token_strings[i] = vocab.token(id).to_string();
        }
    }
    Ok(out)
}

/// Selects each frame independently with probability `rate` and multiplies
/// every scalar of a selected frame by its own factor drawn from
/// N(1, sigma^2).
pub fn corrupt_visual(
    frames: &[Vec<f32>],
    rate: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>, RobustnessError> {
    check_rate(rate)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(RobustnessError::SigmaOutOfRange(sigma));
    }
    let normal = StandardNormal;
    let mut out = frames.to_vec();
    for frame in out.iter_mut() {
        if rng.gen_bool(rate) {
            for v in frame.iter_mut() {
                let z: f64 = normal.sample(rng);
                *v = (*v as f64 * (1.0 + sigma * z)) as f32;
            }
        }
    }
    Ok(out)
}

/// Applies one corruption spec to a copy of a prepared sample.
pub fn corrupt_sample(
    sample: &PreparedSample,
    spec: &CorruptionSpec,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample, RobustnessError> {
    let mut out = sample.clone();
    match spec.kind {
        CorruptionKind::Delete => {
            out.encoded = corrupt_delete(&sample.encoded, spec.rate, vocab, rng)?;
        }
        CorruptionKind::Replace => {
            out.encoded = corrupt_replace(&sample.encoded, spec.rate, vocab, rng)?;
        }
        CorruptionKind::VisualNoise => {
            out.visual = corrupt_visual(&sample.visual, spec.rate, spec.sigma, rng)?;
        }
    }
    Ok(out)
}

/// Applies one corruption spec to a fresh copy of a whole evaluation set,
/// drawing from a single stream seeded by `spec.seed`.
pub fn corrupt_set(
    set: &[PreparedSample],
    spec: &CorruptionSpec,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedSample>, RobustnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    set.iter()
        .map(|s| corrupt_sample(s, spec, vocab, &mut rng))
        .collect()
}

/// Metrics of one corrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub corr: f64,
    pub mae: f64,
}

/// All runs of one (kind, rate) cell plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub kind: CorruptionKind,
    pub rate: f64,
    pub runs: Vec<RunResult>,
    pub mean_corr: f64,
    pub mean_mae: f64,
}

/// Default corruption-rate grid.
pub const DEFAULT_RATES: [f64; 8] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];

/// For each kind and rate, corrupts a fresh copy of the evaluation set with
/// seed `base_seed + run` and evaluates it, `runs` times; results carry the
/// per-run values and their arithmetic mean.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep<T: Scalar>(
    model: &AmbModel<T>,
    eval_set: &[PreparedSample],
    vocab: &Vocabulary,
    kinds: &[CorruptionKind],
    rates: &[f64],
    runs: usize,
    sigma: f64,
    base_seed: u64,
) -> Result<Vec<SweepPoint>, RobustnessError> {
    let mut points = Vec::with_capacity(kinds.len() * rates.len());
    for &kind in kinds {
        for &rate in rates {
            let mut results = Vec::with_capacity(runs);
            for run in 0..runs {
                let seed = base_seed + run as u64;
                let spec = CorruptionSpec {
                    kind,
                    rate,
                    sigma,
                    seed,
                };
                let corrupted = corrupt_set(eval_set, &spec, vocab)?;
                let report = evaluate(model, &corrupted)?;
                results.push(RunResult {
                    run,
                    seed,
                    corr: report.corr,
                    mae: report.mae,
                });
            }
            let mean_corr = results.iter().map(|r| r.corr).sum::<f64>() / results.len() as f64;
            let mean_mae = results.iter().map(|r| r.mae).sum::<f64>() / results.len() as f64;
            points.push(SweepPoint {
                kind,
                rate,
                runs: results,
                mean_corr,
                mean_mae,
            });
        }
    }
    Ok(points)
}

/// Fixed-column CSV: `kind,rate,run,seed,corr,mae`, one row per run plus a
/// `mean` row per (kind, rate) with an empty seed column.
pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("kind,rate,run,seed,corr,mae\n");
    for p in points {
        for r in &p.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.kind, p.rate, r.run, r.seed, r.corr, r.mae
            ));
        }
        out.push_str(&format!(
            "{},{},mean,,{},{}\n",
            p.kind, p.rate, p.mean_corr, p.mean_mae
        ));
    }
    out
}
