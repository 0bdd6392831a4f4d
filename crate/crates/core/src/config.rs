//! Training configuration and its `key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "`{other}` is not one of: {}", [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
    };
}

keyword_enum!(
    /// Relevance function between a query and a memory key.
    AttentionMode { Dot => "dot", Biaffine => "biaffine" }
);
keyword_enum!(
    /// What the memory returns: nothing (baseline), summed one-hot values, or summed keys.
    ResponseMode { Baseline => "baseline", Value => "value", Key => "key" }
);
keyword_enum!(
    /// `dynamic`: 0 for mispredicted slots, 1/m_j otherwise. `balance`: 1/count_j for every slot.
    CoefficientMode { Dynamic => "dynamic", Balance => "balance" }
);
keyword_enum!(
    /// `dynamic`: keys are refreshed from pair representations every epoch.
    /// `fixed`: keys are averaged static word vectors, written once.
    KeyMode { Dynamic => "dynamic", Fixed => "fixed" }
);
keyword_enum!(
    /// Query used against fixed keys: the same static average, or the pair
    /// representation through a learned projection.
    FixedQuery { Static => "static", Projected => "projected" }
);
keyword_enum!(
    /// Which relation output decides correctness in the coefficient pass.
    CoefficientSource { Mixed => "mixed", Baseline => "baseline" }
);
keyword_enum!(OptimizerKind { Adam => "adam", Sgd => "sgd" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub attention: AttentionMode,
    pub response: ResponseMode,
    pub coefficient: CoefficientMode,
    pub key_mode: KeyMode,
    pub fixed_query: FixedQuery,
    pub coefficient_source: CoefficientSource,
    /// Tokens per argument after padding/truncation.
    pub pad_length: usize,
    pub layers: usize,
    pub encoder_kernel: usize,
    pub share_encoder: bool,
    pub word_dim: usize,
    pub subword_dim: usize,
    pub subword_embed_dim: usize,
    pub contextual_dim: usize,
    pub subword_kernels: Vec<usize>,
    pub highway_layers: usize,
    pub bpe_merges: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Hidden width of the value-response head; `0` means `4 * n_r`.
    pub memory_hidden: usize,
    pub classifier_dropout: f64,
    pub memory_dropout: f64,
    pub embedding_dropout: f64,
    pub patience: usize,
    pub exclude_self: bool,
    pub ffn_relu: bool,
    pub mask_pad: bool,
    pub clean_key_pass: bool,
    pub connective_head: bool,
    /// `None`: trainable when randomly initialised, frozen when loaded from file.
    pub word_trainable: Option<bool>,
    /// Share of training instances stored in memory (uniform subsample).
    pub memory_fraction: f64,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            lambda: 0.3,
            attention: AttentionMode::Dot,
            response: ResponseMode::Value,
            coefficient: CoefficientMode::Dynamic,
            key_mode: KeyMode::Dynamic,
            fixed_query: FixedQuery::Projected,
            coefficient_source: CoefficientSource::Mixed,
            pad_length: 100,
            layers: 2,
            encoder_kernel: 3,
            share_encoder: true,
            word_dim: 50,
            subword_dim: 50,
            subword_embed_dim: 16,
            contextual_dim: 0,
            subword_kernels: vec![1, 2, 3],
            highway_layers: 1,
            bpe_merges: 1000,
            hidden: 64,
            depth: 2,
            memory_hidden: 0,
            classifier_dropout: 0.5,
            memory_dropout: 0.2,
            embedding_dropout: 0.0,
            patience: 5,
            exclude_self: false,
            ffn_relu: true,
            mask_pad: false,
            clean_key_pass: false,
            connective_head: true,
            word_trainable: None,
            memory_fraction: 1.0,
            parallel: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "lambda",
    "attention",
    "response",
    "coefficient",
    "key_mode",
    "fixed_query",
    "coefficient_source",
    "pad_length",
    "layers",
    "encoder_kernel",
    "share_encoder",
    "word_dim",
    "subword_dim",
    "subword_embed_dim",
    "contextual_dim",
    "subword_kernels",
    "highway_layers",
    "bpe_merges",
    "hidden",
    "depth",
    "memory_hidden",
    "classifier_dropout",
    "memory_dropout",
    "embedding_dropout",
    "patience",
    "exclude_self",
    "ffn_relu",
    "mask_pad",
    "clean_key_pass",
    "connective_head",
    "word_trainable",
    "memory_fraction",
    "parallel",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: `{other}` is not a boolean"))),
    }
}

fn keyword<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

impl TrainConfig {
    /// Settings matching the larger published configuration: 100-token
    /// arguments, two 2048-wide classifier layers, learning rate 0.0012.
    pub fn paper_scale() -> Self {
        TrainConfig {
            hidden: 2048,
            depth: 2,
            learning_rate: 0.0012,
            lambda: 0.3,
            memory_dropout: 0.2,
            pad_length: 100,
            ..TrainConfig::default()
        }
    }

    /// Embedding width d_e.
    pub fn embed_dim(&self) -> usize {
        self.word_dim + self.subword_dim + self.contextual_dim
    }

    /// Pair representation width d_r = 4 * d_e * L.
    pub fn pair_dim(&self) -> usize {
        4 * self.embed_dim() * self.layers
    }

    pub fn uses_memory(&self) -> bool {
        self.response != ResponseMode::Baseline
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "optimizer" => self.optimizer = keyword(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "attention" => self.attention = keyword(key, v)?,
            "response" => self.response = keyword(key, v)?,
            "coefficient" => self.coefficient = keyword(key, v)?,
            "key_mode" => self.key_mode = keyword(key, v)?,
            "fixed_query" => self.fixed_query = keyword(key, v)?,
            "coefficient_source" => self.coefficient_source = keyword(key, v)?,
            "pad_length" => self.pad_length = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "encoder_kernel" => self.encoder_kernel = num(key, v)?,
            "share_encoder" => self.share_encoder = boolean(key, v)?,
            "word_dim" => self.word_dim = num(key, v)?,
            "subword_dim" => self.subword_dim = num(key, v)?,
            "subword_embed_dim" => self.subword_embed_dim = num(key, v)?,
            "contextual_dim" => self.contextual_dim = num(key, v)?,
            "subword_kernels" => {
                self.subword_kernels = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "highway_layers" => self.highway_layers = num(key, v)?,
            "bpe_merges" => self.bpe_merges = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "memory_hidden" => self.memory_hidden = num(key, v)?,
            "classifier_dropout" => self.classifier_dropout = num(key, v)?,
            "memory_dropout" => self.memory_dropout = num(key, v)?,
            "embedding_dropout" => self.embedding_dropout = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "exclude_self" => self.exclude_self = boolean(key, v)?,
            "ffn_relu" => self.ffn_relu = boolean(key, v)?,
            "mask_pad" => self.mask_pad = boolean(key, v)?,
            "clean_key_pass" => self.clean_key_pass = boolean(key, v)?,
            "connective_head" => self.connective_head = boolean(key, v)?,
            "word_trainable" => {
                self.word_trainable = match v {
                    "auto" => None,
                    other => Some(boolean(key, other)?),
                }
            }
            "memory_fraction" => self.memory_fraction = num(key, v)?,
            "parallel" => self.parallel = boolean(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lambda" => self.lambda.to_string(),
            "attention" => self.attention.to_string(),
            "response" => self.response.to_string(),
            "coefficient" => self.coefficient.to_string(),
            "key_mode" => self.key_mode.to_string(),
            "fixed_query" => self.fixed_query.to_string(),
            "coefficient_source" => self.coefficient_source.to_string(),
            "pad_length" => self.pad_length.to_string(),
            "layers" => self.layers.to_string(),
            "encoder_kernel" => self.encoder_kernel.to_string(),
            "share_encoder" => self.share_encoder.to_string(),
            "word_dim" => self.word_dim.to_string(),
            "subword_dim" => self.subword_dim.to_string(),
            "subword_embed_dim" => self.subword_embed_dim.to_string(),
            "contextual_dim" => self.contextual_dim.to_string(),
            "subword_kernels" => self
                .subword_kernels
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "highway_layers" => self.highway_layers.to_string(),
            "bpe_merges" => self.bpe_merges.to_string(),
            "hidden" => self.hidden.to_string(),
            "depth" => self.depth.to_string(),
            "memory_hidden" => self.memory_hidden.to_string(),
            "classifier_dropout" => self.classifier_dropout.to_string(),
            "memory_dropout" => self.memory_dropout.to_string(),
            "embedding_dropout" => self.embedding_dropout.to_string(),
            "patience" => self.patience.to_string(),
            "exclude_self" => self.exclude_self.to_string(),
            "ffn_relu" => self.ffn_relu.to_string(),
            "mask_pad" => self.mask_pad.to_string(),
            "clean_key_pass" => self.clean_key_pass.to_string(),
            "connective_head" => self.connective_head.to_string(),
            "word_trainable" => match self.word_trainable {
                None => "auto".into(),
                Some(b) => b.to_string(),
            },
            "memory_fraction" => self.memory_fraction.to_string(),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }

    /// Renders every key as `key = value` lines.
    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.key_mode == KeyMode::Fixed && self.response == ResponseMode::Key {
            return bad("fixed keys can only be used with the value response".into());
        }
        for (name, p) in [
            ("classifier_dropout", self.classifier_dropout),
            ("memory_dropout", self.memory_dropout),
            ("embedding_dropout", self.embedding_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("pad_length", self.pad_length),
            ("layers", self.layers),
            ("encoder_kernel", self.encoder_kernel),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.word_dim + self.subword_dim == 0 {
            return bad("word_dim and subword_dim cannot both be 0".into());
        }
        if self.subword_dim > 0 {
            if self.subword_kernels.is_empty() || self.subword_kernels.contains(&0) {
                return bad("subword_kernels must be a non-empty list of positive widths".into());
            }
            if self.subword_kernels.len() > self.subword_dim || self.subword_embed_dim == 0 {
                return bad("subword_dim must be at least the number of kernels and subword_embed_dim positive".into());
            }
        }
        if !(self.memory_fraction > 0.0 && self.memory_fraction <= 1.0) {
            return bad(format!("memory_fraction {} outside (0, 1]", self.memory_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut cfg = TrainConfig {
            seed: 9,
            response: ResponseMode::Key,
            attention: AttentionMode::Biaffine,
            word_trainable: Some(false),
            subword_kernels: vec![2, 5],
            lambda: 0.25,
            ..TrainConfig::default()
        };
        cfg.mask_pad = true;
        let mut back = TrainConfig::default();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named() {
        let mut cfg = TrainConfig::default();
        let err = cfg.set("lamda", "0.3").unwrap_err().to_string();
        assert!(err.contains("lamda"));
        let err = cfg.set("attention", "cosine").unwrap_err().to_string();
        assert!(err.contains("attention") && err.contains("biaffine"), "{err}");
    }

    #[test]
    fn fixed_keys_require_value_response() {
        let cfg = TrainConfig {
            key_mode: KeyMode::Fixed,
            response: ResponseMode::Key,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lambda: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        TrainConfig::default().validate().unwrap();
        TrainConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn derived_dims() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.embed_dim(), 100);
        assert_eq!(cfg.pair_dim(), 800);
        assert_eq!(TrainConfig::paper_scale().lambda, 0.3);
        assert_eq!(TrainConfig::paper_scale().hidden, 2048);
    }
}
