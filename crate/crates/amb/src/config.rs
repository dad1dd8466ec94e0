//! Model and training configuration with flat key/value parsing.
//!
//! A config file is UTF-8 text of `key = value` lines (`#` starts a
//! comment). Every key is optional and defaults to the standard
//! configuration below; unknown keys are rejected. `--set key=value`
//! overrides use the same parser.

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Which parts of the model train and which inputs the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Backbone and embeddings frozen; adapters, encoders, fusion and the
    /// predictor train.
    Adapters,
    /// Everything trains, including the backbone.
    Finetune,
    /// Adapter-style freezing, but visual/audio tokens are zeroed.
    TextOnly,
    /// Adapter-style freezing, but the text input is a [CLS][SEP] skeleton.
    NoText,
}

pub const MODE_NAMES: [&str; 4] = ["adapters", "finetune", "text_only", "no_text"];

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adapters => "adapters",
            Mode::Finetune => "finetune",
            Mode::TextOnly => "text_only",
            Mode::NoText => "no_text",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "adapters" => Ok(Mode::Adapters),
            "finetune" => Ok(Mode::Finetune),
            "text_only" => Ok(Mode::TextOnly),
            "no_text" => Ok(Mode::NoText),
            _ => Err(ConfigError::UnknownMode {
                given: s.to_string(),
                valid: MODE_NAMES.join(", "),
            }),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown mode {given:?}; valid modes: {valid}")]
    UnknownMode { given: String, valid: String },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config file: {0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// All architecture and training dials.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbConfig {
    // language backbone
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    // adapters
    pub bottleneck: usize,
    // modality encoders
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub d_enc: usize,
    pub enc_ff: usize,
    pub d_tok: usize,
    // fusion
    pub d_proj: usize,
    pub d_fuse: usize,
    // modality feature dims
    pub d_visual: usize,
    pub d_audio: usize,
    pub max_frames: usize,
    // training
    pub lr: f64,
    pub dropout: f64,
    pub patience: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for AmbConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl AmbConfig {
    /// Standard configuration: BERT-base dims with the published adapter and
    /// fusion sizes.
    pub fn paper() -> Self {
        Self {
            layers: 12,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            vocab_size: 30_522,
            max_len: 128,
            ln_eps: 1e-12,
            bottleneck: 384,
            enc_layers: 2,
            enc_heads: 1,
            d_enc: 128,
            enc_ff: 128,
            d_tok: 110,
            d_proj: 220,
            d_fuse: 220,
            d_visual: 35,
            d_audio: 74,
            max_frames: 64,
            lr: 5e-5,
            dropout: 0.2,
            patience: 10,
            batch: 32,
            epochs: 100,
            seed: 42,
            mode: Mode::Adapters,
        }
    }

    /// Small configuration for tests and smoke runs; everything fits in a
    /// few tens of thousands of parameters so finite-difference sweeps and
    /// overfit runs finish in seconds.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            vocab_size: crate::pipeline::synthetic_vocabulary_len(),
            max_len: 16,
            ln_eps: 1e-12,
            bottleneck: 16,
            enc_layers: 2,
            enc_heads: 1,
            d_enc: 8,
            enc_ff: 8,
            d_tok: 4,
            d_proj: 8,
            d_fuse: 32,
            d_visual: 6,
            d_audio: 8,
            max_frames: 12,
            lr: 1e-3,
            dropout: 0.0,
            patience: 10,
            batch: 16,
            epochs: 40,
            seed: 42,
            mode: Mode::Adapters,
        }
    }

    /// Width of the fused representation. Tied to the CLS projection width.
    pub fn d_fused_out(&self) -> usize {
        self.d_proj
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |cond: bool, msg: &str| -> Result<(), ConfigError> {
            if cond {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg.to_string()))
            }
        };
        check(self.layers >= 1, "layers must be >= 1")?;
        check(self.d_model.is_multiple_of(self.heads), "d_model must be divisible by heads")?;
        check(self.d_enc.is_multiple_of(self.enc_heads), "d_enc must be divisible by enc_heads")?;
        check(self.bottleneck >= 1 && self.bottleneck < self.d_model, "bottleneck must satisfy 1 <= b < d_model")?;
        check(self.max_len >= 3, "max_len must be >= 3")?;
        check(self.max_frames >= 1, "max_frames must be >= 1")?;
        check(self.vocab_size >= 5, "vocab_size must cover the special tokens")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)")?;
        check(self.lr > 0.0, "lr must be positive")?;
        check(self.batch >= 1, "batch must be >= 1")?;
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(
            key: &str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected,
            })
        }
        match key {
            // replaces every architecture/training dial but keeps the seed
            // and mode, so `preset=toy` composes with AMB_SEED and --mode
            "preset" => {
                let (seed, mode) = (self.seed, self.mode);
                *self = match value {
                    "paper" => Self::paper(),
                    "toy" => Self::toy(),
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "one of: paper, toy",
                        })
                    }
                };
                self.seed = seed;
                self.mode = mode;
            }
            "layers" => self.layers = parse(key, value, "usize")?,
            "d_model" => self.d_model = parse(key, value, "usize")?,
            "heads" => self.heads = parse(key, value, "usize")?,
            "d_ff" => self.d_ff = parse(key, value, "usize")?,
            "vocab_size" => self.vocab_size = parse(key, value, "usize")?,
            "max_len" => self.max_len = parse(key, value, "usize")?,
            "ln_eps" => self.ln_eps = parse(key, value, "f64")?,
            "bottleneck" => self.bottleneck = parse(key, value, "usize")?,
            "enc_layers" => self.enc_layers = parse(key, value, "usize")?,
            "enc_heads" => self.enc_heads = parse(key, value, "usize")?,
            "d_enc" => self.d_enc = parse(key, value, "usize")?,
            "enc_ff" => self.enc_ff = parse(key, value, "usize")?,
            "d_tok" => self.d_tok = parse(key, value, "usize")?,
            "d_proj" => self.d_proj = parse(key, value, "usize")?,
            "d_fuse" => self.d_fuse = parse(key, value, "usize")?,
            "d_visual" => self.d_visual = parse(key, value, "usize")?,
            "d_audio" => self.d_audio = parse(key, value, "usize")?,
            "max_frames" => self.max_frames = parse(key, value, "usize")?,
            "lr" => self.lr = parse(key, value, "f64")?,
            "dropout" => self.dropout = parse(key, value, "f64")?,
            "patience" => self.patience = parse(key, value, "usize")?,
            "batch" => self.batch = parse(key, value, "usize")?,
            "epochs" => self.epochs = parse(key, value, "usize")?,
            "seed" => self.seed = parse(key, value, "u64")?,
            "mode" => self.mode = value.parse()?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a flat `key = value` document and applies it over `self`.
    pub fn apply_str(&mut self, body: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        self.apply_str(&body)
    }

    /// Serializes the full resolved configuration as a parseable document.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("layers", self.layers.to_string());
        kv("d_model", self.d_model.to_string());
        kv("heads", self.heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("max_len", self.max_len.to_string());
        kv("ln_eps", format!("{:e}", self.ln_eps));
        kv("bottleneck", self.bottleneck.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("enc_heads", self.enc_heads.to_string());
        kv("d_enc", self.d_enc.to_string());
        kv("enc_ff", self.enc_ff.to_string());
        kv("d_tok", self.d_tok.to_string());
        kv("d_proj", self.d_proj.to_string());
        kv("d_fuse", self.d_fuse.to_string());
        kv("d_visual", self.d_visual.to_string());
        kv("d_audio", self.d_audio.to_string());
        kv("max_frames", self.max_frames.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("dropout", self.dropout.to_string());
        kv("patience", self.patience.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = AmbConfig::default();
        assert_eq!(c.layers, 12);
        assert_eq!(c.d_model, 768);
        assert_eq!(c.bottleneck, 384);
        assert_eq!(c.d_fuse, 220);
        assert_eq!(c.enc_layers, 2);
        assert_eq!(c.enc_heads, 1);
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.dropout, 0.2);
        assert_eq!(c.patience, 10);
        c.validate().unwrap();
        AmbConfig::toy().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = AmbConfig::default();
        assert!(matches!(
            c.apply_kv("bogus", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn unknown_mode_names_valid_modes() {
        let mut c = AmbConfig::default();
        let err = c.apply_kv("mode", "bogus").unwrap_err();
        let msg = err.to_string();
        for name in MODE_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn kv_document_round_trip() {
        let mut c = AmbConfig::toy();
        c.mode = Mode::Finetune;
        c.lr = 3e-4;
        let doc = c.to_kv_string();
        let mut d = AmbConfig::default();
        d.apply_str(&doc).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let mut c = AmbConfig::default();
        c.apply_str("# comment\n\nlayers = 2  # trailing\nmode = finetune\n")
            .unwrap();
        assert_eq!(c.layers, 2);
        assert_eq!(c.mode, Mode::Finetune);
    }

    #[test]
    fn bad_line_reported_with_number() {
        let mut c = AmbConfig::default();
        let err = c.apply_str("layers = 2\nnot a kv line\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadLine { line: 2, .. }));
    }
}
