//! Decoder-only transformer whose MLP hidden layer can be masked per token.
//!
//! The hidden activation of every MLP is multiplied by a 0/1 mask chosen by
//! the [`ForwardMode`]. For plain MLPs the mask sits after the GeLU; for gated
//! MLPs it sits after the gate product. Shared neurons occupy the leading
//! `floor(g * H)` positions and sink neurons the rest.
//!
//! Masks are not rescaled by `1/p`: the shared pathway is identical in every
//! mode and evaluation simply removes the sinks.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seqid::{sink_mask, MaskSpec, SequenceId};
use crate::tensor::{EngineError, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSNK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence ids are required for the train-masked forward pass")]
    MissingIds,
    #[error("input shape: {0}")]
    Shape(String),
    #[error("neuron index {index} out of range for layer {layer} of width {width}")]
    NeuronOutOfRange { layer: usize, index: usize, width: usize },
    #[error("gradient masking needs a homogeneous batch (all repeated or all once)")]
    MixedBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpKind {
    Plain,
    Gated,
}

impl MlpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MlpKind::Plain => "plain",
            MlpKind::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(MlpKind::Plain),
            "gated" => Some(MlpKind::Gated),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_expansion: usize,
    pub mlp_kind: MlpKind,
    pub vocab_size: usize,
    pub context_len: usize,
    pub memsinks: Option<MaskSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            mlp_expansion: 4,
            mlp_kind: MlpKind::Plain,
            vocab_size: 256,
            context_len: 64,
            memsinks: None,
        }
    }
}

impl ModelConfig {
    pub fn hidden_size(&self) -> usize {
        self.mlp_expansion * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.mlp_expansion == 0 {
            return bad("layer count, width, heads and expansion must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 2 || self.context_len == 0 {
            return bad("vocab_size must be >= 2 and context_len positive".into());
        }
        if let Some(spec) = &self.memsinks {
            if spec.hidden_size != self.hidden_size() {
                return bad(format!(
                    "mask hidden size {} != mlp hidden size {}",
                    spec.hidden_size,
                    self.hidden_size()
                ));
            }
            spec.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Flat `key=value` text, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_layers={}\nd_model={}\nn_heads={}\nmlp_expansion={}\nmlp_kind={}\nvocab_size={}\ncontext_len={}\n",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.mlp_expansion,
            self.mlp_kind.as_str(),
            self.vocab_size,
            self.context_len
        );
        if let Some(m) = &self.memsinks {
            s.push_str(&format!(
                "memsinks.shared_fraction={:?}\nmemsinks.activation_ratio={:?}\n",
                m.shared_fraction, m.activation_ratio
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Checkpoint(format!("bad config line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad value for {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad value for {k}")))
        };
        let mut cfg = ModelConfig {
            n_layers: num("n_layers")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            mlp_expansion: num("mlp_expansion")?,
            mlp_kind: MlpKind::parse(&get("mlp_kind")?)
                .ok_or_else(|| ModelError::Checkpoint("bad mlp_kind".into()))?,
            vocab_size: num("vocab_size")?,
            context_len: num("context_len")?,
            memsinks: None,
        };
        if kv.contains_key("memsinks.shared_fraction") {
            cfg.memsinks = Some(MaskSpec {
                hidden_size: cfg.hidden_size(),
                shared_fraction: float("memsinks.shared_fraction")?,
                activation_ratio: float("memsinks.activation_ratio")?,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which MLP hidden neurons participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Shared neurons plus the sinks selected by each token's sequence ID.
    TrainMasked,
    /// Sinks zeroed; the evaluation default when sinks are configured.
    SharedOnly,
    /// No masking.
    AllActive,
    /// Shared neurons zeroed, every sink active.
    SinksOnly,
}

impl ForwardMode {
    pub fn eval_default(config: &ModelConfig) -> Self {
        if config.memsinks.is_some() {
            ForwardMode::SharedOnly
        } else {
            ForwardMode::AllActive
        }
    }
}

/// Per-layer split of hidden neurons into a generalization block (`true`)
/// and a memorization block (`false`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronPartition {
    pub general: Vec<Vec<bool>>,
}

impl NeuronPartition {
    /// Leading `floor(g * H)` neurons of every layer are generalization neurons.
    pub fn leading(n_layers: usize, hidden: usize, g: f64) -> Self {
        let cut = (g * hidden as f64).floor() as usize;
        Self {
            general: vec![(0..hidden).map(|j| j < cut).collect(); n_layers],
        }
    }

    /// Indices of the memorization block per layer.
    pub fn memorization_sets(&self) -> Vec<Vec<usize>> {
        self.general
            .iter()
            .map(|l| l.iter().enumerate().filter(|(_, g)| !**g).map(|(j, _)| j).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_gate: Option<usize>,
    pub b_gate: Option<usize>,
    pub w_proj: usize,
    pub b_proj: usize,
}

impl LayerParams {
    /// MLP parameters as (index, hidden axis is the column axis) pairs.
    fn mlp_params(&self) -> Vec<(usize, NeuronAxis)> {
        let mut v = vec![
            (self.w_fc, NeuronAxis::Column),
            (self.b_fc, NeuronAxis::Vector),
            (self.w_proj, NeuronAxis::Row),
        ];
        if let (Some(w), Some(b)) = (self.w_gate, self.b_gate) {
            v.push((w, NeuronAxis::Column));
            v.push((b, NeuronAxis::Vector));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NeuronAxis {
    Column,
    Row,
    Vector,
}

/// Positions of every named parameter inside [`ModelState::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerParams>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, h, v) = (cfg.d_model, cfg.hidden_size(), cfg.vocab_size);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let wte = add("wte".into(), vec![v, d]);
        let wpe = add("wpe".into(), vec![cfg.context_len, d]);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            let ln1_g = add(p("ln1.g"), vec![d]);
            let ln1_b = add(p("ln1.b"), vec![d]);
            let w_qkv = add(p("attn.w_qkv"), vec![d, 3 * d]);
            let b_qkv = add(p("attn.b_qkv"), vec![3 * d]);
            let w_o = add(p("attn.w_o"), vec![d, d]);
            let b_o = add(p("attn.b_o"), vec![d]);
            let ln2_g = add(p("ln2.g"), vec![d]);
            let ln2_b = add(p("ln2.b"), vec![d]);
            let w_fc = add(p("mlp.w_fc"), vec![d, h]);
            let b_fc = add(p("mlp.b_fc"), vec![h]);
            let (w_gate, b_gate) = match cfg.mlp_kind {
                MlpKind::Gated => (
                    Some(add(p("mlp.w_gate"), vec![d, h])),
                    Some(add(p("mlp.b_gate"), vec![h])),
                ),
                MlpKind::Plain => (None, None),
            };
            let w_proj = add(p("mlp.w_proj"), vec![h, d]);
            let b_proj = add(p("mlp.b_proj"), vec![d]);
            layers.push(LayerParams {
                ln1_g,
                ln1_b,
                w_qkv,
                b_qkv,
                w_o,
                b_o,
                ln2_g,
                ln2_b,
                w_fc,
                b_fc,
                w_gate,
                b_gate,
                w_proj,
                b_proj,
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d]);
        let lnf_b = add("ln_f.b".into(), vec![d]);
        let head = add("lm_head".into(), vec![d, v]);
        Self {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            head,
            names,
            shapes,
        }
    }

    /// Whether parameter `idx` belongs to an MLP block.
    pub fn is_mlp_param(&self, idx: usize) -> bool {
        self.layers
            .iter()
            .any(|l| l.mlp_params().iter().any(|(i, _)| *i == idx))
    }

    /// Flat indices of parameter `param` that belong to hidden neuron `j`.
    fn neuron_entries(&self, param: usize, axis: NeuronAxis, j: usize) -> Vec<usize> {
        let shape = &self.shapes[param];
        match axis {
            NeuronAxis::Vector => vec![j],
            NeuronAxis::Column => {
                let (rows, cols) = (shape[0], shape[1]);
                (0..rows).map(|r| r * cols + j).collect()
            }
            NeuronAxis::Row => {
                let cols = shape[1];
                (j * cols..(j + 1) * cols).collect()
            }
        }
    }

    /// Per-parameter entry masks marking which entries may be updated, given
    /// per-layer neuron flags (`true` = neuron may be updated). Non-MLP
    /// parameters get `None` (unrestricted).
    pub fn neuron_update_masks(&self, allowed: &[Vec<bool>]) -> Vec<Option<Vec<bool>>> {
        let mut out: Vec<Option<Vec<bool>>> = vec![None; self.names.len()];
        for (layer, flags) in self.layers.iter().zip(allowed) {
            for (param, axis) in layer.mlp_params() {
                let mut m = vec![true; self.shapes[param].iter().product()];
                for (j, ok) in flags.iter().enumerate() {
                    if !ok {
                        for e in self.neuron_entries(param, axis, j) {
                            m[e] = false;
                        }
                    }
                }
                out[param] = Some(m);
            }
        }
        out
    }
}

/// Transformer parameters plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Tensor>,
}

/// Handles produced by recording a forward pass on a tape.
#[derive(Debug)]
pub struct Recorded {
    pub params: Vec<Var>,
    pub logits: Var,
    pub loss: Var,
    /// Masked hidden activation of each MLP, before any extra scaling.
    pub hidden: Vec<Var>,
    /// Activation actually fed to the down projection (after scaling).
    pub hidden_scaled: Vec<Var>,
}

/// Optional per-layer extra column scaling of the MLP hidden activation.
pub type HiddenScales<'a> = &'a [Option<Var>];

impl ModelState {
    /// GPT-2 style initialisation: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2 * n_layers)`, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut tensors = Vec::with_capacity(layout.names.len());
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = if name.ends_with(".g") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let s = if name.ends_with("w_o") || name.ends_with("w_proj") {
                    resid_std
                } else {
                    std
                };
                Tensor::from_fn(shape, |_| s * normal.sample(&mut rng))
            };
            tensors.push(t);
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<(usize, usize)> {
        let b = tokens.len();
        if b == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let t = tokens[0].len();
        if t == 0 || tokens.iter().any(|s| s.len() != t) {
            return Err(ModelError::Shape("sequences must be non-empty and of equal length".into()));
        }
        if t > self.config.context_len {
            return Err(ModelError::Shape(format!(
                "sequence length {t} exceeds context {}",
                self.config.context_len
            )));
        }
        if let Some(bad) = tokens.iter().flatten().find(|&&x| x as usize >= self.config.vocab_size) {
            return Err(ModelError::Shape(format!("token {bad} outside vocabulary")));
        }
        Ok((b, t))
    }

    /// Hidden-layer mask for the given mode: `None` (no masking), a column
    /// vector shared by all rows, or a full per-token matrix.
    fn mode_mask(
        &self,
        mode: ForwardMode,
        ids: Option<&[Vec<SequenceId>]>,
        b: usize,
        t: usize,
    ) -> Result<Option<MaskKind>> {
        let Some(spec) = &self.config.memsinks else {
            return Ok(None);
        };
        let h = spec.hidden_size;
        let shared = spec.shared_count();
        Ok(match mode {
            ForwardMode::AllActive => None,
            ForwardMode::SharedOnly => Some(MaskKind::Columns(Tensor::from_fn(&[h], |j| {
                if j < shared {
                    1.0
                } else {
                    0.0
                }
            }))),
            ForwardMode::SinksOnly => Some(MaskKind::Columns(Tensor::from_fn(&[h], |j| {
                if j < shared {
                    0.0
                } else {
                    1.0
                }
            }))),
            ForwardMode::TrainMasked => {
                let ids = ids.ok_or(ModelError::MissingIds)?;
                if ids.len() != b || ids.iter().any(|r| r.len() != t) {
                    return Err(ModelError::Shape("ids must match the token batch".into()));
                }
                let mut cache: HashMap<SequenceId, Vec<f64>> = HashMap::new();
                let mut data = Vec::with_capacity(b * t * h);
                for id in ids.iter().flatten() {
                    let row = cache
                        .entry(*id)
                        .or_insert_with(|| sink_mask(*id, spec).as_f64());
                    data.extend_from_slice(row);
                }
                Some(MaskKind::Tokens(Tensor::from_parts(vec![b * t, h], data)))
            }
        })
    }

    /// Records the forward pass on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<u32>],
        ids: Option<&[Vec<SequenceId>]>,
        mode: ForwardMode,
        scales: HiddenScales<'_>,
    ) -> Result<Recorded> {
        let (b, t) = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = b * t;
        let mask = self.mode_mask(mode, ids, b, t)?;
        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_, _>>()?;
        let lay = &self.layout;
        let flat: Vec<usize> = tokens.iter().flatten().map(|&x| x as usize).collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok_emb = tape.embedding(params[lay.wte], &flat)?;
        let pos_emb = tape.embedding(params[lay.wpe], &pos)?;
        let mut x = tape.add(tok_emb, pos_emb)?;
        let mask_var = match &mask {
            Some(MaskKind::Columns(m)) | Some(MaskKind::Tokens(m)) => Some(tape.leaf(m.clone())?),
            None => None,
        };
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut hidden_scaled = Vec::with_capacity(cfg.n_layers);
        for (l, lp) in lay.layers.iter().enumerate() {
            let h1 = tape.layer_norm(x, params[lp.ln1_g], params[lp.ln1_b])?;
            let qkv = tape.matmul(h1, params[lp.w_qkv])?;
            let qkv = tape.add_row(qkv, params[lp.b_qkv])?;
            let att = tape.causal_attention(qkv, b, t, cfg.n_heads)?;
            let att = tape.matmul(att, params[lp.w_o])?;
            let att = tape.add_row(att, params[lp.b_o])?;
            x = tape.add(x, att)?;

            let h2 = tape.layer_norm(x, params[lp.ln2_g], params[lp.ln2_b])?;
            let up = tape.matmul(h2, params[lp.w_fc])?;
            let up = tape.add_row(up, params[lp.b_fc])?;
            let mut z = match (lp.w_gate, lp.b_gate) {
                (Some(wg), Some(bg)) => {
                    let gate = tape.matmul(h2, params[wg])?;
                    let gate = tape.add_row(gate, params[bg])?;
                    let gate = tape.gelu(gate)?;
                    tape.mul(gate, up)?
                }
                _ => tape.gelu(up)?,
            };
            match (&mask, mask_var) {
                (Some(MaskKind::Columns(_)), Some(m)) => z = tape.scale_cols(z, m)?,
                (Some(MaskKind::Tokens(_)), Some(m)) => z = tape.mul(z, m)?,
                _ => {}
            }
            hidden.push(z);
            if let Some(Some(s)) = scales.get(l) {
                z = tape.scale_cols(z, *s)?;
            }
            hidden_scaled.push(z);
            let down = tape.matmul(z, params[lp.w_proj])?;
            let down = tape.add_row(down, params[lp.b_proj])?;
            x = tape.add(x, down)?;
        }
        let xf = tape.layer_norm(x, params[lay.lnf_g], params[lay.lnf_b])?;
        let logits = tape.matmul(xf, params[lay.head])?;
        let targets: Vec<Option<usize>> = tokens
            .iter()
            .flat_map(|s| (0..t).map(move |i| s.get(i + 1).map(|&x| x as usize)))
            .collect();
        debug_assert_eq!(targets.len(), n);
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(Recorded {
            params,
            logits,
            loss,
            hidden,
            hidden_scaled,
        })
    }

    /// Logits `[batch * seq, vocab]` and mean next-token loss.
    pub fn forward(
        &self,
        tokens: &[Vec<u32>],
        ids: Option<&[Vec<SequenceId>]>,
        mode: ForwardMode,
    ) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, ids, mode, &[])?;
        let loss = tape.value(rec.loss)?.data()[0];
        Ok((tape.value(rec.logits)?.clone(), loss))
    }

    /// Loss and gradient for every parameter tensor.
    pub fn loss_and_grads(
        &self,
        tokens: &[Vec<u32>],
        ids: Option<&[Vec<SequenceId>]>,
        mode: ForwardMode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, ids, mode, &[])?;
        tape.backward(rec.loss)?;
        let loss = tape.value(rec.loss)?.data()[0];
        let grads = rec
            .params
            .iter()
            .map(|&p| tape.grad_or_zeros(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((loss, grads))
    }

    /// Copy of the model with the listed hidden neurons permanently removed
    /// (their up/gate columns, biases and down-projection rows zeroed).
    pub fn drop_neurons(&self, sets: &[Vec<usize>]) -> Result<ModelState> {
        let h = self.config.hidden_size();
        if sets.len() > self.config.n_layers {
            return Err(ModelError::Shape(format!(
                "{} neuron sets for {} layers",
                sets.len(),
                self.config.n_layers
            )));
        }
        let mut out = self.clone();
        for (l, set) in sets.iter().enumerate() {
            if let Some(&bad) = set.iter().find(|&&j| j >= h) {
                return Err(ModelError::NeuronOutOfRange {
                    layer: l,
                    index: bad,
                    width: h,
                });
            }
            let lp = &self.layout.layers[l];
            for (param, axis) in lp.mlp_params() {
                for &j in set {
                    for e in self.layout.neuron_entries(param, axis, j) {
                        out.tensors[param].data_mut()[e] = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layout.names.iter().cloned().zip(self.tensors.iter()).collect()
    }

    /// Rebuilds a model from named tensors, ignoring names it does not use.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut tensors = Vec::with_capacity(layout.names.len());
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push((*t).clone());
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        write_checkpoint(w, &self.config, &self.named_tensors())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let (cfg, named) = read_checkpoint(r)?;
        Self::from_named(cfg, &named)
    }
}

enum MaskKind {
    Columns(Tensor),
    Tokens(Tensor),
}

/// Zeroes MLP gradients routed away from the batch's block: repeated batches
/// keep only the memorization block, once batches only the generalization
/// block. Non-MLP gradients pass through.
pub fn apply_gradient_mask(
    layout: &Layout,
    grads: &[Tensor],
    batch_is_repeated: &[bool],
    partition: &NeuronPartition,
) -> Result<Vec<Tensor>> {
    let repeated = match batch_is_repeated {
        [] => return Err(ModelError::Shape("empty batch".into())),
        [first, rest @ ..] => {
            if rest.iter().any(|r| r != first) {
                return Err(ModelError::MixedBatch);
            }
            *first
        }
    };
    let allowed = gradient_mask_allowed(partition, repeated);
    let masks = layout.neuron_update_masks(&allowed);
    Ok(grads
        .iter()
        .zip(masks)
        .map(|(g, m)| match m {
            None => g.clone(),
            Some(m) => {
                let mut g = g.clone();
                for (v, ok) in g.data_mut().iter_mut().zip(m) {
                    if !ok {
                        *v = 0.0;
                    }
                }
                g
            }
        })
        .collect())
}

/// Neurons that receive updates for a batch of the given type.
pub fn gradient_mask_allowed(partition: &NeuronPartition, repeated: bool) -> Vec<Vec<bool>> {
    partition
        .general
        .iter()
        .map(|l| l.iter().map(|&g| g != repeated).collect())
        .collect()
}

/// Writes the checkpoint format: magic, version, length-prefixed config text,
/// then `(name_len u32, name, rank u32, dims u64 x rank, f64 values)` records.
pub fn write_checkpoint(mut w: impl Write, config: &ModelConfig, named: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config.to_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("magic is not MSNK".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(clen)?)
        .map_err(|_| ModelError::Checkpoint("config is not utf-8".into()))?;
    let config = ModelConfig::from_text(text)?;
    let mut named = Vec::new();
    while cur.pos < bytes.len() {
        let nlen = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::new(dims, data)?));
    }
    Ok((config, named))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
