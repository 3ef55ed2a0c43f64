//! Sectioned `key = value` run configuration.
//!
//! Bracketed section headers group keys; `#` starts a comment; values are
//! raw strings parsed per key. Every key can be overridden on the command
//! line as `--set section.key=value`. Unknown keys are errors, and paths
//! resolve relative to the config file they came from.

use std::path::{Path, PathBuf};

use taitone::corpus::{SplitSizes, ToyLanguageSpec};
use taitone::model::{EncoderConfig, ModelDims, Nonlinearity};
use taitone::training::{FreezeSet, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: ToyLanguageSpec,
    pub sizes: SplitSizes,
    pub source_sizes: SplitSizes,
    pub source_overlap: f64,
    pub d_model: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub subsample: usize,
    pub nonlinearity: Nonlinearity,
    pub vocab_size: usize,
    pub train: TrainConfig,
    pub beam: usize,
    pub max_symbols: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: ToyLanguageSpec::default(),
            sizes: SplitSizes {
                train: 600,
                dev: 100,
                test: 100,
            },
            source_sizes: SplitSizes {
                train: 300,
                dev: 20,
                test: 20,
            },
            source_overlap: 0.6,
            d_model: 256,
            embed_dim: 256,
            hidden_dim: 256,
            num_layers: 2,
            subsample: 2,
            nonlinearity: Nonlinearity::Tanh,
            vocab_size: 500,
            train: TrainConfig::default(),
            beam: 4,
            max_symbols: 8,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parses config text; `base_dir` anchors relative paths.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, String> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            let dotted = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            config
                .set(&dotted, value.trim())
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        config.out_dir = base_dir.join(&config.out_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies one `section.key = value` assignment. Unknown keys are
    /// errors so config typos never pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
        }
        fn list(value: &str) -> Vec<String> {
            value
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        }
        match key {
            "run.seed" => {
                self.seed = num(key, value)?;
                self.corpus.seed = self.seed;
                self.train.seed = self.seed;
            }
            "corpus.initials" => {
                // An empty initial is legal; a lone comma spells it.
                self.corpus.initials = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect();
            }
            "corpus.open_finals" => self.corpus.open_finals = list(value),
            "corpus.checked_finals" => self.corpus.checked_finals = list(value),
            "corpus.lexicon_size" => self.corpus.lexicon_size = num(key, value)?,
            "corpus.han_ambiguity" => self.corpus.han_ambiguity_rate = num(key, value)?,
            "corpus.hanlo_roman_rate" => self.corpus.hanlo_roman_rate = num(key, value)?,
            "corpus.frames_lo" => self.corpus.frames_lo = num(key, value)?,
            "corpus.frames_hi" => self.corpus.frames_hi = num(key, value)?,
            "corpus.feature_dim" => self.corpus.feature_dim = num(key, value)?,
            "corpus.noise_sigma" => self.corpus.noise_sigma = num(key, value)?,
            "corpus.words_lo" => self.corpus.words_lo = num(key, value)?,
            "corpus.words_hi" => self.corpus.words_hi = num(key, value)?,
            "corpus.speakers" => self.corpus.speakers = num(key, value)?,
            "corpus.train_size" => self.sizes.train = num(key, value)?,
            "corpus.dev_size" => self.sizes.dev = num(key, value)?,
            "corpus.test_size" => self.sizes.test = num(key, value)?,
            "corpus.source_train_size" => self.source_sizes.train = num(key, value)?,
            "corpus.source_dev_size" => self.source_sizes.dev = num(key, value)?,
            "corpus.source_test_size" => self.source_sizes.test = num(key, value)?,
            "corpus.source_overlap" => self.source_overlap = num(key, value)?,
            "model.d_model" => self.d_model = num(key, value)?,
            "model.embed_dim" => self.embed_dim = num(key, value)?,
            "model.hidden_dim" => self.hidden_dim = num(key, value)?,
            "model.num_layers" => self.num_layers = num(key, value)?,
            "model.subsample" => self.subsample = num(key, value)?,
            "model.nonlinearity" => self.nonlinearity = value.parse()?,
            "tokenizer.vocab_size" => self.vocab_size = num(key, value)?,
            "train.base_lr" => self.train.base_lr = num(key, value)?,
            "train.clip_norm" => self.train.clip_norm = num(key, value)?,
            "train.accum_steps" => self.train.accum_steps = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.max_frames" => self.train.max_frames = num(key, value)?,
            "train.epochs_pretrain" => self.train.epochs.pretrain = num(key, value)?,
            "train.epochs_stage1" => self.train.epochs.stage1 = num(key, value)?,
            "train.epochs_stage2" => self.train.epochs.stage2 = num(key, value)?,
            "train.epochs_direct" => self.train.epochs.direct = num(key, value)?,
            "train.lr_batches" => self.train.eden.lr_batches = num(key, value)?,
            "train.lr_epochs" => self.train.eden.lr_epochs = num(key, value)?,
            "decode.beam" => self.beam = num(key, value)?,
            "decode.max_symbols" => self.max_symbols = num(key, value)?,
            "paths.out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Model dimensions implied by the config; the vocabulary size comes
    /// from the trained tokenizer, which may fall short of the configured
    /// target when the corpus runs out of mergeable pairs.
    pub fn model_dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            vocab_size,
            embed_dim: self.embed_dim,
            encoder: EncoderConfig {
                input_dim: self.corpus.feature_dim,
                subsample: self.subsample,
                num_layers: self.num_layers,
                hidden_dim: self.hidden_dim,
                nonlinearity: self.nonlinearity,
            },
        }
    }

    /// Canonical dump of every key, for hashing and provenance records.
    pub fn canonical(&self) -> String {
        let nl = match self.nonlinearity {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        };
        let c = &self.corpus;
        let t = &self.train;
        format!(
            "corpus.checked_finals={}\ncorpus.dev_size={}\ncorpus.feature_dim={}\n\
             corpus.frames_hi={}\ncorpus.frames_lo={}\ncorpus.han_ambiguity={}\ncorpus.hanlo_roman_rate={}\n\
             corpus.initials={}\ncorpus.lexicon_size={}\ncorpus.noise_sigma={}\n\
             corpus.open_finals={}\ncorpus.source_dev_size={}\ncorpus.source_overlap={}\n\
             corpus.source_test_size={}\ncorpus.source_train_size={}\ncorpus.speakers={}\n\
             corpus.test_size={}\ncorpus.train_size={}\ncorpus.words_hi={}\ncorpus.words_lo={}\n\
             decode.beam={}\ndecode.max_symbols={}\n\
             model.d_model={}\nmodel.embed_dim={}\nmodel.hidden_dim={}\nmodel.nonlinearity={}\n\
             model.num_layers={}\nmodel.subsample={}\n\
             paths.out_dir={}\nrun.seed={}\ntokenizer.vocab_size={}\n\
             train.accum_steps={}\ntrain.base_lr={}\ntrain.batch_size={}\ntrain.clip_norm={}\n\
             train.epochs_direct={}\ntrain.epochs_pretrain={}\ntrain.epochs_stage1={}\n\
             train.epochs_stage2={}\ntrain.lr_batches={}\ntrain.lr_epochs={}\ntrain.max_frames={}\n",
            c.checked_finals.join(","),
            self.sizes.dev,
            c.feature_dim,
            c.frames_hi,
            c.frames_lo,
            c.han_ambiguity_rate,
            c.hanlo_roman_rate,
            c.initials.join(","),
            c.lexicon_size,
            c.noise_sigma,
            c.open_finals.join(","),
            self.source_sizes.dev,
            self.source_overlap,
            self.source_sizes.test,
            self.source_sizes.train,
            c.speakers,
            self.sizes.test,
            self.sizes.train,
            c.words_hi,
            c.words_lo,
            self.beam,
            self.max_symbols,
            self.d_model,
            self.embed_dim,
            self.hidden_dim,
            nl,
            self.num_layers,
            self.subsample,
            self.out_dir.display(),
            self.seed,
            self.vocab_size,
            t.accum_steps,
            t.base_lr,
            t.batch_size,
            t.clip_norm,
            t.epochs.direct,
            t.epochs.pretrain,
            t.epochs.stage1,
            t.epochs.stage2,
            t.eden.lr_batches,
            t.eden.lr_epochs,
            t.max_frames,
        )
    }

    /// FNV-1a hash of the canonical dump.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Freeze list from the CLI (`--freeze encoder,joint`).
pub fn parse_freeze(list: &str) -> Result<FreezeSet, String> {
    FreezeSet::parse(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let text = "\
[run]
seed = 7

[corpus]
train_size = 40   # small run
noise_sigma = 0.1

[model]
d_model = 32

[paths]
out_dir = my_runs
";
        let config = RunConfig::parse(text, Path::new("/tmp/conf")).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.train.seed, 7);
        assert_eq!(config.sizes.train, 40);
        assert_eq!(config.corpus.noise_sigma, 0.1);
        assert_eq!(config.d_model, 32);
        assert_eq!(config.out_dir, PathBuf::from("/tmp/conf/my_runs"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("[run]\nsead = 1\n", Path::new(".")).unwrap_err();
        assert!(err.contains("unknown config key"), "{err}");
        let mut config = RunConfig::default();
        assert!(config.set("train.warmup", "5").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.set("run.seed", "9").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
