//! Flat `section.key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! [`ExperimentConfig::to_text`] writes every key, so an echoed config parses
//! back to the same value.

use std::path::PathBuf;

use memsinks::corpus::{CorpusSpec, IdMode};
use memsinks::model::{MlpKind, ModelConfig};
use memsinks::seqid::MaskSpec;
use memsinks::theory::SuiteParams;
use memsinks::trainer::{TrainConfig, TrainMode};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalizeMethod {
    Ig,
    Gates,
}

impl LocalizeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LocalizeMethod::Ig => "ig",
            LocalizeMethod::Gates => "gates",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizeSettings {
    pub method: LocalizeMethod,
    pub ig_steps: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    pub r_list: Vec<f64>,
    /// Once documents used as the retain set of the gate objective.
    pub retain_docs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    G,
    NoiseD,
    ModelSize,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::G => "g",
            SweepAxis::NoiseD => "noise_d",
            SweepAxis::ModelSize => "model_size",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SweepAxis::P, SweepAxis::G, SweepAxis::NoiseD, SweepAxis::ModelSize]
            .into_iter()
            .find(|a| a.as_str() == s)
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::P | SweepAxis::G => vec![0.1, 0.3, 0.5, 0.7],
            SweepAxis::NoiseD => vec![0.0, 0.1, 0.5],
            SweepAxis::ModelSize => vec![64.0, 128.0, 256.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub shards: usize,
    pub id_mode: IdMode,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_expansion: usize,
    pub mlp_kind: MlpKind,
    pub model_seed: u64,
    pub shared_fraction: f64,
    pub activation_ratio: f64,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub localize: LocalizeSettings,
    pub sweep_axis: SweepAxis,
    /// Empty means the axis defaults.
    pub sweep_values: Vec<f64>,
    pub theory_seeds: u64,
    pub theory: SuiteParams,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            corpus: CorpusSpec::default(),
            shards: 1,
            id_mode: IdMode::Hash,
            n_layers: model.n_layers,
            d_model: model.d_model,
            n_heads: model.n_heads,
            mlp_expansion: model.mlp_expansion,
            mlp_kind: model.mlp_kind,
            model_seed: 0,
            shared_fraction: 0.7,
            activation_ratio: 0.3,
            train: TrainConfig::default(),
            checkpoint_every: 500,
            localize: LocalizeSettings {
                method: LocalizeMethod::Ig,
                ig_steps: 16,
                lambda: 500.0,
                iterations: 200,
                seed: 0,
                r_list: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
                retain_docs: 32,
            },
            sweep_axis: SweepAxis::P,
            sweep_values: Vec::new(),
            theory_seeds: 50,
            theory: SuiteParams::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or("none".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Values use the same spelling as [`Self::to_text`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "corpus.vocab_size" => self.corpus.vocab_size = parse_num(key, v)?,
            "corpus.seq_len" => self.corpus.seq_len = parse_num(key, v)?,
            "corpus.n_once" => self.corpus.n_once = parse_num(key, v)?,
            "corpus.n_repeated" => self.corpus.n_repeated = parse_num(key, v)?,
            "corpus.repetitions" => self.corpus.repetitions = parse_num(key, v)?,
            "corpus.canary_len" => self.corpus.canary_len = parse_num(key, v)?,
            "corpus.n_validation" => self.corpus.n_validation = parse_num(key, v)?,
            "corpus.seed" => self.corpus.seed = parse_num(key, v)?,
            "corpus.spacing" => self.corpus.spacing = parse_opt(key, v)?,
            "corpus.shards" => self.shards = parse_num(key, v)?,
            "corpus.id_mode" => {
                self.id_mode = match v {
                    "hash" => IdMode::Hash,
                    "sequential" => IdMode::Sequential,
                    _ => return Err(bad(key, v, "expected hash or sequential")),
                }
            }
            "model.n_layers" => self.n_layers = parse_num(key, v)?,
            "model.d_model" => self.d_model = parse_num(key, v)?,
            "model.n_heads" => self.n_heads = parse_num(key, v)?,
            "model.mlp_expansion" => self.mlp_expansion = parse_num(key, v)?,
            "model.mlp_kind" => self.mlp_kind = MlpKind::parse(v).ok_or_else(|| bad(key, v, "expected plain or gated"))?,
            "model.seed" => self.model_seed = parse_num(key, v)?,
            "mask.shared_fraction" => self.shared_fraction = parse_num(key, v)?,
            "mask.activation_ratio" => self.activation_ratio = parse_num(key, v)?,
            "train.mode" => {
                self.train.mode =
                    TrainMode::parse(v).ok_or_else(|| bad(key, v, "expected standard, dedup, gradmask or memsinks"))?
            }
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr_max" => self.train.lr_max = parse_num(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "train.tracked_sequence" => self.train.tracked_sequence = parse_opt(key, v)?,
            "train.gradmask_fraction" => self.train.gradmask_fraction = parse_num(key, v)?,
            "train.id_noise" => self.train.id_noise = parse_num(key, v)?,
            "localize.method" => {
                self.localize.method = match v {
                    "ig" => LocalizeMethod::Ig,
                    "gates" => LocalizeMethod::Gates,
                    _ => return Err(bad(key, v, "expected ig or gates")),
                }
            }
            "localize.ig_steps" => self.localize.ig_steps = parse_num(key, v)?,
            "localize.lambda" => self.localize.lambda = parse_num(key, v)?,
            "localize.iterations" => self.localize.iterations = parse_num(key, v)?,
            "localize.seed" => self.localize.seed = parse_num(key, v)?,
            "localize.r_list" => self.localize.r_list = parse_list(key, v)?,
            "localize.retain_docs" => self.localize.retain_docs = parse_num(key, v)?,
            "sweep.axis" => {
                self.sweep_axis =
                    SweepAxis::parse(v).ok_or_else(|| bad(key, v, "expected p, g, noise_d or model_size"))?
            }
            "sweep.values" => self.sweep_values = parse_list(key, v)?,
            "theory.seeds" => self.theory_seeds = parse_num(key, v)?,
            "theory.coadaptation_gamma" => self.theory.coadaptation_gamma = parse_num(key, v)?,
            "theory.forgetting_gamma" => self.theory.forgetting_gamma = parse_num(key, v)?,
            "theory.sinks_gamma" => self.theory.sinks_gamma = parse_num(key, v)?,
            "theory.entanglement_rank" => self.theory.entanglement_rank = parse_num(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let t = &self.train;
        let l = &self.localize;
        vec![
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("corpus.seq_len", c.seq_len.to_string()),
            ("corpus.n_once", c.n_once.to_string()),
            ("corpus.n_repeated", c.n_repeated.to_string()),
            ("corpus.repetitions", c.repetitions.to_string()),
            ("corpus.canary_len", c.canary_len.to_string()),
            ("corpus.n_validation", c.n_validation.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("corpus.spacing", fmt_opt(c.spacing)),
            ("corpus.shards", self.shards.to_string()),
            (
                "corpus.id_mode",
                match self.id_mode {
                    IdMode::Hash => "hash",
                    IdMode::Sequential => "sequential",
                }
                .to_string(),
            ),
            ("model.n_layers", self.n_layers.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.mlp_expansion", self.mlp_expansion.to_string()),
            ("model.mlp_kind", self.mlp_kind.as_str().to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("mask.shared_fraction", format!("{:?}", self.shared_fraction)),
            ("mask.activation_ratio", format!("{:?}", self.activation_ratio)),
            ("train.mode", t.mode.as_str().to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", format!("{:?}", t.lr_max)),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.grad_clip", format!("{:?}", t.grad_clip)),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.tracked_sequence", fmt_opt(t.tracked_sequence)),
            ("train.gradmask_fraction", format!("{:?}", t.gradmask_fraction)),
            ("train.id_noise", format!("{:?}", t.id_noise)),
            ("localize.method", l.method.as_str().to_string()),
            ("localize.ig_steps", l.ig_steps.to_string()),
            ("localize.lambda", format!("{:?}", l.lambda)),
            ("localize.iterations", l.iterations.to_string()),
            ("localize.seed", l.seed.to_string()),
            ("localize.r_list", fmt_list(&l.r_list)),
            ("localize.retain_docs", l.retain_docs.to_string()),
            ("sweep.axis", self.sweep_axis.as_str().to_string()),
            ("sweep.values", fmt_list(&self.sweep_values)),
            ("theory.seeds", self.theory_seeds.to_string()),
            ("theory.coadaptation_gamma", format!("{:?}", self.theory.coadaptation_gamma)),
            ("theory.forgetting_gamma", format!("{:?}", self.theory.forgetting_gamma)),
            ("theory.sinks_gamma", format!("{:?}", self.theory.sinks_gamma)),
            ("theory.entanglement_rank", self.theory.entanglement_rank.to_string()),
            ("out.dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_expansion: self.mlp_expansion,
            mlp_kind: self.mlp_kind,
            vocab_size: self.corpus.vocab_size,
            context_len: self.corpus.seq_len,
            memsinks: None,
        }
    }

    /// Model config with the mask attached when training in memsinks mode.
    pub fn training_model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut m = self.model_config();
        if self.train.mode == TrainMode::MemSinks {
            let spec = MaskSpec::new(m.hidden_size(), self.shared_fraction, self.activation_ratio)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            m.memsinks = Some(spec);
        }
        m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            id_mode: self.id_mode,
            ..self.train.clone()
        }
    }

    /// Checks everything the commands rely on before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.corpus.validate().map_err(|e| inv(e.to_string()))?;
        self.training_model_config()?;
        self.train_config().validate().map_err(|e| inv(e.to_string()))?;
        if self.shards == 0 {
            return Err(inv("corpus.shards must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(inv("train.checkpoint_every must be positive".into()));
        }
        if let Some(r) = self.localize.r_list.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(inv(format!("localize.r_list entry {r} outside [0, 1]")));
        }
        Ok(())
    }
}
