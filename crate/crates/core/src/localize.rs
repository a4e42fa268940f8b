//! Post-hoc localization: integrated gradients, hard-concrete gate pruning,
//! score-based neuron dropping and the forgetting/degradation tradeoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Document;
use crate::model::{ForwardMode, ModelError, ModelState};
use crate::tensor::{EngineError, Tape, Tensor, Var};
use crate::trainer::{evaluate, TrainError};

/// Hard-concrete temperature.
pub const HC_BETA: f64 = 2.0 / 3.0;
/// Lower stretch limit.
pub const HC_GAMMA: f64 = -0.1;
/// Upper stretch limit.
pub const HC_ZETA: f64 = 1.1;
/// Initial gate log-odds (gates start almost fully open).
pub const HC_INIT_LOG_ALPHA: f64 = 3.0;
/// Adam step size for the gate parameters.
pub const HC_LR: f64 = 0.1;
/// Quadrature points for the expected gate.
const HC_QUADRATURE: usize = 256;

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("integrated gradients needs at least one step")]
    ZeroSteps,
    #[error("lambda must be positive, got {0}")]
    Lambda(f64),
    #[error("iterations must be positive")]
    ZeroIterations,
    #[error("drop fraction must lie in [0, 1], got {0}")]
    Fraction(f64),
    #[error("score shape does not match the model")]
    ScoreShape,
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = LocalizeError> = std::result::Result<T, E>;

/// One score per MLP hidden neuron, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionScores {
    pub layers: Vec<Vec<f64>>,
}

impl AttributionScores {
    fn zeros(n_layers: usize, hidden: usize) -> Self {
        Self {
            layers: vec![vec![0.0; hidden]; n_layers],
        }
    }

    fn matches(&self, model: &ModelState) -> bool {
        self.layers.len() == model.config.n_layers
            && self.layers.iter().all(|l| l.len() == model.config.hidden_size())
    }
}

fn batch(docs: &[Document]) -> Result<Vec<Vec<u32>>> {
    if docs.is_empty() {
        return Err(LocalizeError::Empty("documents"));
    }
    Ok(docs.iter().map(|d| d.tokens.clone()).collect())
}

fn ig_core(model: &ModelState, targets: &[Document], steps: usize, absolute: bool) -> Result<AttributionScores> {
    if steps == 0 {
        return Err(LocalizeError::ZeroSteps);
    }
    let tokens = batch(targets)?;
    let mode = ForwardMode::eval_default(&model.config);
    let (n_layers, h) = (model.config.n_layers, model.config.hidden_size());
    let mut out = AttributionScores::zeros(n_layers, h);
    for layer in 0..n_layers {
        let mut grad_sum: Option<Vec<f64>> = None;
        let mut z: Vec<f64> = Vec::new();
        for k in 1..=steps {
            let alpha = k as f64 / steps as f64;
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::full(&[h], alpha))?;
            let mut scales: Vec<Option<Var>> = vec![None; n_layers];
            scales[layer] = Some(s);
            let rec = model.record(&mut tape, &tokens, None, mode, &scales)?;
            tape.backward(rec.loss)?;
            let g = tape.grad_or_zeros(rec.hidden_scaled[layer])?;
            match &mut grad_sum {
                None => grad_sum = Some(g.into_data()),
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            }
            if z.is_empty() {
                z = tape.value(rec.hidden[layer])?.data().to_vec();
            }
        }
        let grad_sum = grad_sum.expect("steps >= 1");
        let scores = &mut out.layers[layer];
        for (row_z, row_g) in z.chunks(h).zip(grad_sum.chunks(h)) {
            for j in 0..h {
                let a = row_z[j] * row_g[j] / steps as f64;
                scores[j] += if absolute { a.abs() } else { a };
            }
        }
    }
    Ok(out)
}

/// Integrated gradients from a zero baseline, scaling one layer's hidden
/// activation at a time. Per-position attributions are summed in absolute
/// value.
pub fn integrated_gradients(model: &ModelState, targets: &[Document], steps: usize) -> Result<AttributionScores> {
    ig_core(model, targets, steps, true)
}

/// Signed variant of [`integrated_gradients`] (positions summed with sign).
pub fn integrated_gradients_signed(
    model: &ModelState,
    targets: &[Document],
    steps: usize,
) -> Result<AttributionScores> {
    ig_core(model, targets, steps, false)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hard-concrete sample for uniform `u` and its derivative w.r.t. `log_alpha`.
pub fn hard_concrete(u: f64, log_alpha: f64) -> (f64, f64) {
    let s = sigmoid(((u / (1.0 - u)).ln() + log_alpha) / HC_BETA);
    let stretched = s * (HC_ZETA - HC_GAMMA) + HC_GAMMA;
    if stretched <= 0.0 {
        (0.0, 0.0)
    } else if stretched >= 1.0 {
        (1.0, 0.0)
    } else {
        (stretched, (HC_ZETA - HC_GAMMA) * s * (1.0 - s) / HC_BETA)
    }
}

/// `E_u[gate]` by midpoint quadrature over the uniform noise.
pub fn expected_gate(log_alpha: f64) -> f64 {
    let n = HC_QUADRATURE;
    (0..n)
        .map(|i| hard_concrete((i as f64 + 0.5) / n as f64, log_alpha).0)
        .sum::<f64>()
        / n as f64
}

/// Hyperparameters of [`learned_gate_prune`].
#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Learns per-neuron hard-concrete gates that raise the target loss while
/// keeping the retain loss and the fraction of closed gates low. Objective:
/// `-L_target + lambda * mean(1 - gate) + L_retain`. Returns
/// `1 - E[gate]` per neuron.
pub fn learned_gate_prune(
    model: &ModelState,
    targets: &[Document],
    retain: &[Document],
    cfg: &GateConfig,
) -> Result<AttributionScores> {
    if !(cfg.lambda > 0.0) {
        return Err(LocalizeError::Lambda(cfg.lambda));
    }
    if cfg.iterations == 0 {
        return Err(LocalizeError::ZeroIterations);
    }
    let target_tokens = batch(targets)?;
    let retain_tokens = if retain.is_empty() { None } else { Some(batch(retain)?) };
    let mode = ForwardMode::eval_default(&model.config);
    let (n_layers, h) = (model.config.n_layers, model.config.hidden_size());
    let total = (n_layers * h) as f64;
    let mut log_alpha = vec![vec![HC_INIT_LOG_ALPHA; h]; n_layers];
    let mut m = vec![vec![0.0; h]; n_layers];
    let mut v = vec![vec![0.0; h]; n_layers];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for it in 1..=cfg.iterations {
        let mut gates = vec![vec![0.0; h]; n_layers];
        let mut dgate = vec![vec![0.0; h]; n_layers];
        for l in 0..n_layers {
            for j in 0..h {
                let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
                let (g, d) = hard_concrete(u, log_alpha[l][j]);
                gates[l][j] = g;
                dgate[l][j] = d;
            }
        }
        // d objective / d gate, accumulated over the two loss terms.
        let mut dobj = vec![vec![-cfg.lambda / total; h]; n_layers];
        let passes: Vec<(&Vec<Vec<u32>>, f64)> = std::iter::once((&target_tokens, -1.0))
            .chain(retain_tokens.iter().map(|t| (t, 1.0)))
            .collect();
        for (tokens, sign) in passes {
            let mut tape = Tape::new();
            let vars: Vec<Var> = gates
                .iter()
                .map(|g| tape.leaf(Tensor::from_parts(vec![h], g.clone())))
                .collect::<Result<_, _>>()?;
            let scales: Vec<Option<Var>> = vars.iter().copied().map(Some).collect();
            let rec = model.record(&mut tape, tokens, None, mode, &scales)?;
            tape.backward(rec.loss)?;
            for (l, var) in vars.iter().enumerate() {
                let g = tape.grad_or_zeros(*var)?;
                for (o, gv) in dobj[l].iter_mut().zip(g.data()) {
                    *o += sign * gv;
                }
            }
        }
        for l in 0..n_layers {
            for j in 0..h {
                let g = dobj[l][j] * dgate[l][j];
                m[l][j] = b1 * m[l][j] + (1.0 - b1) * g;
                v[l][j] = b2 * v[l][j] + (1.0 - b2) * g * g;
                let mhat = m[l][j] / (1.0 - b1.powi(it as i32));
                let vhat = v[l][j] / (1.0 - b2.powi(it as i32));
                log_alpha[l][j] -= HC_LR * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(AttributionScores {
        layers: log_alpha
            .iter()
            .map(|l| l.iter().map(|&a| 1.0 - expected_gate(a)).collect())
            .collect(),
    })
}

/// Per-layer indices of the `ceil(r * H)` highest scores, ties broken by
/// lower index.
pub fn top_fraction_sets(scores: &AttributionScores, r: f64) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(LocalizeError::Fraction(r));
    }
    Ok(scores
        .layers
        .iter()
        .map(|layer| {
            let k = (r * layer.len() as f64).ceil() as usize;
            let mut idx: Vec<usize> = (0..layer.len()).collect();
            idx.sort_by(|&a, &b| layer[b].total_cmp(&layer[a]).then(a.cmp(&b)));
            let mut set: Vec<usize> = idx.into_iter().take(k).collect();
            set.sort_unstable();
            set
        })
        .collect())
}

/// Drops the top `r` fraction of neurons in every layer.
pub fn drop_top_fraction(model: &ModelState, scores: &AttributionScores, r: f64) -> Result<ModelState> {
    if !scores.matches(model) {
        return Err(LocalizeError::ScoreShape);
    }
    let sets = top_fraction_sets(scores, r)?;
    Ok(model.drop_neurons(&sets)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    IntegratedGradients { steps: usize },
    LearnedGates { config: GateConfig, retain: Vec<Document> },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::IntegratedGradients { .. } => "ig",
            Method::LearnedGates { .. } => "gates",
        }
    }

    pub fn score(&self, model: &ModelState, targets: &[Document]) -> Result<AttributionScores> {
        match self {
            Method::IntegratedGradients { steps } => integrated_gradients(model, targets, *steps),
            Method::LearnedGates { config, retain } => learned_gate_prune(model, targets, retain, config),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub r: f64,
    /// Target loss after dropping minus before.
    pub forgetting: f64,
    /// Validation loss after dropping minus before.
    pub degradation: f64,
}

pub const TRADEOFF_CSV_HEADER: &str = "method,r,forgetting,degradation";

impl TradeoffPoint {
    pub fn to_csv(&self, method: &str) -> String {
        format!("{method},{:?},{:?},{:?}", self.r, self.forgetting, self.degradation)
    }
}

/// Scores once, then for each `r` drops the top fraction and measures the
/// change in target and validation loss.
pub fn tradeoff_curve(
    model: &ModelState,
    targets: &[Document],
    val: &[Document],
    method: &Method,
    r_list: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    if targets.is_empty() || val.is_empty() || r_list.is_empty() {
        return Err(LocalizeError::Empty("targets, validation docs and r list must be non-empty"));
    }
    if let Some(&bad) = r_list.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(LocalizeError::Fraction(bad));
    }
    let scores = method.score(model, targets)?;
    tradeoff_from_scores(model, targets, val, &scores, r_list)
}

pub fn tradeoff_from_scores(
    model: &ModelState,
    targets: &[Document],
    val: &[Document],
    scores: &AttributionScores,
    r_list: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    let mode = ForwardMode::eval_default(&model.config);
    let t0 = evaluate(model, targets, mode)?;
    let v0 = evaluate(model, val, mode)?;
    r_list
        .iter()
        .map(|&r| {
            let dropped = drop_top_fraction(model, scores, r)?;
            Ok(TradeoffPoint {
                r,
                forgetting: evaluate(&dropped, targets, mode)? - t0,
                degradation: evaluate(&dropped, val, mode)? - v0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule_prefers_lower_index() {
        let s = AttributionScores {
            layers: vec![vec![0.9, 0.1, 0.5, 0.5]],
        };
        assert_eq!(top_fraction_sets(&s, 0.5).unwrap(), vec![vec![0, 2]]);
        assert_eq!(top_fraction_sets(&s, 0.0).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(top_fraction_sets(&s, 1.0).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(top_fraction_sets(&s, 1.5).is_err());
    }

    #[test]
    fn hard_concrete_range_and_limits() {
        for &la in &[-8.0, -1.0, 0.0, 2.0, 8.0] {
            for i in 1..100 {
                let (g, d) = hard_concrete(i as f64 / 100.0, la);
                assert!((0.0..=1.0).contains(&g));
                assert!(d >= 0.0);
            }
        }
        assert!(expected_gate(20.0) > 0.999);
        assert!(expected_gate(-20.0) < 1e-3);
        assert!(expected_gate(HC_INIT_LOG_ALPHA) > 0.9);
    }
}
