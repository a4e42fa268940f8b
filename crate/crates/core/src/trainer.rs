//! Training loops for standard, dedup, gradient-masked and MemSinks runs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, IdMode};
use crate::model::{
    gradient_mask_allowed, read_checkpoint, write_checkpoint, ForwardMode, ModelError, ModelState,
    NeuronPartition,
};
use crate::seqid::{hash_tokens, perturb_occurrence, sink_mask, SequenceId};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("config/corpus mismatch: {0}")]
    Mismatch(String),
    #[error("step {step} outside schedule of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("nothing to evaluate")]
    EmptyDocs,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    Dedup,
    GradMask,
    MemSinks,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::Dedup => "dedup",
            TrainMode::GradMask => "gradmask",
            TrainMode::MemSinks => "memsinks",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(TrainMode::Standard),
            "dedup" => Some(TrainMode::Dedup),
            "gradmask" => Some(TrainMode::GradMask),
            "memsinks" => Some(TrainMode::MemSinks),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub tracked_sequence: Option<usize>,
    /// Generalization fraction of the gradient-masking partition.
    pub gradmask_fraction: f64,
    /// Probability of perturbing an occurrence's ID (memsinks mode).
    pub id_noise: f64,
    pub id_mode: IdMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Standard,
            steps: 3000,
            batch_size: 32,
            lr_max: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 100,
            tracked_sequence: None,
            gradmask_fraction: 0.7,
            id_noise: 0.0,
            id_mode: IdMode::Hash,
        }
    }
}

impl TrainConfig {
    pub fn lr_min(&self) -> f64 {
        self.lr_max / 10.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.gradmask_fraction > 0.0 && self.gradmask_fraction < 1.0) {
            return bad("gradmask_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.id_noise) {
            return bad("id_noise must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max` at `warmup_steps`, then cosine decay reaching
/// `lr_max / 10` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(TrainError::StepOutOfRange {
            step,
            steps: cfg.steps,
        });
    }
    let (max, min) = (cfg.lr_max, cfg.lr_min());
    let w = cfg.warmup_steps;
    if step < w || cfg.steps <= w {
        return Ok(max * (step.min(w) + 1) as f64 / (w + 1) as f64);
    }
    let phase = (step - w) as f64 / (cfg.steps - w) as f64;
    Ok(min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * phase).cos()))
}

/// One record of the metrics log. Evaluation fields are present every
/// `eval_every` steps and on the final step; the tracked-sequence loss is
/// present on every step when configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss_shared_only: Option<f64>,
    pub val_loss_all_active: Option<f64>,
    pub mem_loss_shared_only: Option<f64>,
    pub mem_loss_all_active: Option<f64>,
    pub tracked_seq_train_loss: Option<f64>,
}

pub const CSV_HEADER: &str = "step,lr,train_loss,val_loss_shared_only,val_loss_all_active,mem_loss_shared_only,mem_loss_all_active,tracked_seq_train_loss";

impl MetricsRow {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics rows serialize")
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{},{},{},{},{}",
            self.step,
            self.lr,
            self.train_loss,
            opt(self.val_loss_shared_only),
            opt(self.val_loss_all_active),
            opt(self.mem_loss_shared_only),
            opt(self.mem_loss_all_active),
            opt(self.tracked_seq_train_loss)
        )
    }

    pub fn has_eval(&self) -> bool {
        self.val_loss_all_active.is_some()
    }
}

/// Mean next-token loss over `docs` under `mode`. `TrainMasked` uses each
/// document's hash ID.
pub fn evaluate(model: &ModelState, docs: &[Document], mode: ForwardMode) -> Result<f64> {
    if docs.is_empty() {
        return Err(TrainError::EmptyDocs);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in docs.chunks(EVAL_CHUNK) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|d| d.tokens.clone()).collect();
        let ids: Vec<Vec<SequenceId>> = chunk
            .iter()
            .map(|d| vec![hash_tokens(&d.tokens); d.tokens.len()])
            .collect();
        let (_, loss) = model.forward(&tokens, Some(&ids), mode)?;
        let n: usize = chunk.iter().map(|d| d.tokens.len().saturating_sub(1)).sum();
        total += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::EmptyDocs);
    }
    Ok(total / count as f64)
}

/// AdamW moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per-entry update counts, for bias correction under sparse updates.
    pub t: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z.clone(),
            t: z,
        }
    }

    /// One AdamW step. Entries whose mask is `false` are left completely
    /// untouched (no moment update, no weight decay).
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        masks: &[Option<Vec<bool>>],
        lr: f64,
        weight_decay: f64,
    ) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { weight_decay } else { 0.0 };
            let mask = masks.get(i).and_then(|m| m.as_ref());
            let (m, v, t) = (self.m[i].data_mut(), self.v[i].data_mut(), self.t[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if let Some(mask) = mask {
                    if !mask[j] {
                        continue;
                    }
                }
                t[j] += 1.0;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mhat = m[j] / (1.0 - ADAM_BETA1.powf(t[j]));
                let vhat = v[j] / (1.0 - ADAM_BETA2.powf(t[j]));
                *w -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * *w);
            }
        }
    }
}

/// A batch of occurrences: indices into `corpus.docs` plus the global
/// occurrence number of each row (used for ID noise).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub docs: Vec<usize>,
    pub occurrences: Vec<u64>,
}

/// Stateful training loop that can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub model: ModelState,
    pub optimizer: AdamState,
    pub cfg: TrainConfig,
    pub step: usize,
    corpus: &'a Corpus,
    plan: Vec<PlannedBatch>,
    total_steps: usize,
    doc_ids: Vec<SequenceId>,
    repeated: Vec<Document>,
    partition: Option<NeuronPartition>,
    last_train_loss: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelState, corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        match (cfg.mode, model.config.memsinks.is_some()) {
            (TrainMode::MemSinks, false) => {
                return Err(TrainError::Mismatch("memsinks mode needs a model with a mask spec".into()))
            }
            (m, true) if m != TrainMode::MemSinks => {
                return Err(TrainError::Mismatch(format!(
                    "{} mode with a memsinks model",
                    m.as_str()
                )))
            }
            _ => {}
        }
        if corpus.schedule.is_empty() {
            return Err(TrainError::Mismatch("corpus schedule is empty".into()));
        }
        if corpus.seq_len > model.config.context_len || corpus.vocab_size > model.config.vocab_size {
            return Err(TrainError::Mismatch("corpus does not fit the model".into()));
        }
        if let Some(t) = cfg.tracked_sequence {
            if t >= corpus.docs.len() {
                return Err(TrainError::Mismatch(format!("tracked document {t} does not exist")));
            }
        }
        let (plan, total_steps) = build_plan(corpus, &cfg);
        let partition = (cfg.mode == TrainMode::GradMask).then(|| {
            NeuronPartition::leading(
                model.config.n_layers,
                model.config.hidden_size(),
                cfg.gradmask_fraction,
            )
        });
        if let Some(p) = &partition {
            if p.general[0].iter().all(|g| *g) || p.general[0].iter().all(|g| !*g) {
                return Err(TrainError::Config("gradmask partition leaves an empty block".into()));
            }
        }
        let optimizer = AdamState::zeros_like(&model.tensors);
        Ok(Self {
            doc_ids: corpus.doc_ids(cfg.id_mode),
            repeated: corpus.repeated_docs().into_iter().cloned().collect(),
            model,
            optimizer,
            cfg,
            step: 0,
            corpus,
            plan,
            total_steps,
            partition,
            last_train_loss: f64::NAN,
        })
    }

    /// Optimizer steps in the full run (dedup runs fewer steps).
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn tokens_trained(&self) -> usize {
        self.total_steps * self.cfg.batch_size * self.corpus.seq_len
    }

    pub fn batch_at(&self, step: usize) -> &PlannedBatch {
        &self.plan[step % self.plan.len()]
    }

    /// Steps (0-based) whose batch contains document `doc`.
    pub fn occurrence_steps(&self, doc: usize) -> Vec<usize> {
        (0..self.total_steps)
            .filter(|&s| self.batch_at(s).docs.contains(&doc))
            .collect()
    }

    fn schedule_cfg(&self) -> TrainConfig {
        TrainConfig {
            steps: self.total_steps,
            ..self.cfg.clone()
        }
    }

    fn forward_mode(&self) -> ForwardMode {
        match self.cfg.mode {
            TrainMode::MemSinks => ForwardMode::TrainMasked,
            _ => ForwardMode::AllActive,
        }
    }

    fn batch_ids(&self, batch: &PlannedBatch) -> Vec<SequenceId> {
        batch
            .docs
            .iter()
            .zip(&batch.occurrences)
            .map(|(&d, &occ)| perturb_occurrence(self.doc_ids[d], self.cfg.id_noise, self.cfg.seed, occ))
            .collect()
    }

    /// Runs one optimizer step and returns its metrics row.
    pub fn step_once(&mut self) -> Result<MetricsRow> {
        if self.step >= self.total_steps {
            return Err(TrainError::StepOutOfRange {
                step: self.step,
                steps: self.total_steps,
            });
        }
        let lr = lr_at(self.step, &self.schedule_cfg())?;
        let batch = self.batch_at(self.step).clone();
        let tokens: Vec<Vec<u32>> = batch
            .docs
            .iter()
            .map(|&d| self.corpus.docs[d].tokens.clone())
            .collect();
        let seq_ids = self.batch_ids(&batch);
        let ids: Vec<Vec<SequenceId>> = seq_ids
            .iter()
            .zip(&tokens)
            .map(|(&id, t)| vec![id; t.len()])
            .collect();
        let mode = self.forward_mode();
        let (loss, mut grads) = self.model.loss_and_grads(&tokens, Some(&ids), mode)?;
        let layout = &self.model.layout;
        let masks: Vec<Option<Vec<bool>>> = match self.cfg.mode {
            TrainMode::GradMask => {
                let flags: Vec<bool> = batch
                    .docs
                    .iter()
                    .map(|&d| self.corpus.docs[d].kind.is_repeated())
                    .collect();
                let part = self.partition.as_ref().expect("gradmask partition");
                grads = crate::model::apply_gradient_mask(layout, &grads, &flags, part)?;
                layout.neuron_update_masks(&gradient_mask_allowed(part, flags[0]))
            }
            TrainMode::MemSinks => {
                let spec = self.model.config.memsinks.expect("checked in new");
                let mut used = vec![false; spec.hidden_size];
                for id in &seq_ids {
                    for (u, on) in used.iter_mut().zip(sink_mask(*id, &spec).0) {
                        *u |= on;
                    }
                }
                layout.neuron_update_masks(&vec![used; self.model.config.n_layers])
            }
            _ => vec![None; grads.len()],
        };
        clip_gradients(&mut grads, self.cfg.grad_clip);
        self.optimizer
            .step(&mut self.model.tensors, &grads, &masks, lr, self.cfg.weight_decay);
        self.step += 1;
        self.last_train_loss = loss;

        let mut row = MetricsRow {
            step: self.step,
            lr,
            train_loss: loss,
            val_loss_shared_only: None,
            val_loss_all_active: None,
            mem_loss_shared_only: None,
            mem_loss_all_active: None,
            tracked_seq_train_loss: None,
        };
        if let Some(doc) = self.cfg.tracked_sequence {
            let t = &self.corpus.docs[doc].tokens;
            let ids = vec![vec![self.doc_ids[doc]; t.len()]];
            let (_, l) = self.model.forward(&[t.clone()], Some(&ids), mode)?;
            row.tracked_seq_train_loss = Some(l);
        }
        if self.step % self.cfg.eval_every == 0 || self.step == self.total_steps {
            self.fill_eval(&mut row)?;
        }
        Ok(row)
    }

    /// Model with the memorization side removed, as used for the
    /// "shared only" columns.
    pub fn shared_only_view(&self) -> Result<Option<ModelState>> {
        Ok(match &self.partition {
            Some(p) => Some(self.model.drop_neurons(&p.memorization_sets())?),
            None => None,
        })
    }

    fn fill_eval(&self, row: &mut MetricsRow) -> Result<()> {
        let m = &self.model;
        let shared_mode = ForwardMode::eval_default(&m.config);
        let dropped = self.shared_only_view()?;
        let shared_model = dropped.as_ref().unwrap_or(m);
        let val = &self.corpus.validation;
        if !val.is_empty() {
            row.val_loss_all_active = Some(evaluate(m, val, ForwardMode::AllActive)?);
            row.val_loss_shared_only = Some(evaluate(shared_model, val, shared_mode)?);
        }
        if !self.repeated.is_empty() {
            row.mem_loss_all_active = Some(evaluate(m, &self.repeated, ForwardMode::AllActive)?);
            row.mem_loss_shared_only = Some(evaluate(shared_model, &self.repeated, shared_mode)?);
        }
        Ok(())
    }

    /// Runs to the end of the schedule (or `until`, whichever is first),
    /// passing every row to `sink`.
    pub fn run(&mut self, until: Option<usize>, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let end = until.unwrap_or(self.total_steps).min(self.total_steps);
        while self.step < end {
            let row = self.step_once()?;
            sink(&row)?;
        }
        Ok(())
    }

    /// Checkpoint with model tensors plus optimizer state and step counter.
    pub fn save_checkpoint(&self, w: impl Write) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = self.model.named_tensors();
        let names = &self.model.layout.names;
        for (i, name) in names.iter().enumerate() {
            named.push((format!("opt.m.{name}"), &self.optimizer.m[i]));
        }
        for (i, name) in names.iter().enumerate() {
            named.push((format!("opt.v.{name}"), &self.optimizer.v[i]));
        }
        for (i, name) in names.iter().enumerate() {
            named.push((format!("opt.t.{name}"), &self.optimizer.t[i]));
        }
        let step = Tensor::scalar(self.step as f64);
        named.push(("opt.step".into(), &step));
        write_checkpoint(w, &self.model.config, &named)?;
        Ok(())
    }

    /// Restores model, optimizer and step from a checkpoint written by
    /// [`Trainer::save_checkpoint`].
    pub fn resume(r: impl Read, corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self> {
        let (config, named) = read_checkpoint(r)?;
        let model = ModelState::from_named(config, &named)?;
        let mut tr = Trainer::new(model, corpus, cfg)?;
        let find = |n: &str| {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TrainError::Model(ModelError::Checkpoint(format!("missing {n}"))))
        };
        let names = tr.model.layout.names.clone();
        for (i, name) in names.iter().enumerate() {
            tr.optimizer.m[i] = find(&format!("opt.m.{name}"))?;
            tr.optimizer.v[i] = find(&format!("opt.v.{name}"))?;
            tr.optimizer.t[i] = find(&format!("opt.t.{name}"))?;
        }
        tr.step = find("opt.step")?.data()[0] as usize;
        if tr.step > tr.total_steps {
            return Err(TrainError::StepOutOfRange {
                step: tr.step,
                steps: tr.total_steps,
            });
        }
        Ok(tr)
    }
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0, |a, v| a + v * v);
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Batch plan and step count for a run.
///
/// Standard and memsinks runs walk the schedule in order; dedup walks the
/// deduplicated schedule and runs proportionally fewer steps; gradmask splits
/// the schedule into repeated-only and once-only batches and orders them by
/// their mean schedule position.
fn build_plan(corpus: &Corpus, cfg: &TrainConfig) -> (Vec<PlannedBatch>, usize) {
    let b = cfg.batch_size;
    let chunk = |order: &[(usize, u64)]| -> Vec<PlannedBatch> {
        let n = order.len();
        let n_batches = n.div_ceil(b);
        (0..n_batches)
            .map(|k| {
                let rows: Vec<(usize, u64)> = (0..b).map(|i| order[(k * b + i) % n]).collect();
                PlannedBatch {
                    docs: rows.iter().map(|r| r.0).collect(),
                    occurrences: rows.iter().map(|r| r.1).collect(),
                }
            })
            .collect()
    };
    let full: Vec<(usize, u64)> = corpus
        .schedule
        .iter()
        .enumerate()
        .map(|(o, &d)| (d, o as u64))
        .collect();
    match cfg.mode {
        TrainMode::Standard | TrainMode::MemSinks => (epoch_plan(&full, b), cfg.steps),
        TrainMode::Dedup => {
            let dd = corpus.deduplicated();
            let order: Vec<(usize, u64)> = dd
                .schedule
                .iter()
                .enumerate()
                .map(|(o, &d)| (d, o as u64))
                .collect();
            let steps = (cfg.steps as f64 * order.len() as f64 / full.len() as f64).round() as usize;
            (epoch_plan(&order, b), steps)
        }
        TrainMode::GradMask => {
            let (rep, once): (Vec<_>, Vec<_>) = full
                .iter()
                .partition(|(d, _)| corpus.docs[*d].kind.is_repeated());
            let mut batches: Vec<(f64, PlannedBatch)> = Vec::new();
            for part in [rep, once] {
                if part.is_empty() {
                    continue;
                }
                for pb in chunk(&part) {
                    let pos = pb.occurrences.iter().map(|&o| o as f64).sum::<f64>() / b as f64;
                    batches.push((pos, pb));
                }
            }
            batches.sort_by(|a, c| a.0.total_cmp(&c.0));
            (batches.into_iter().map(|x| x.1).collect(), cfg.steps)
        }
    }
}

/// Consecutive batches over `order`; the occurrence counter keeps growing
/// across epochs so ID noise is drawn afresh for every pass.
fn epoch_plan(order: &[(usize, u64)], b: usize) -> Vec<PlannedBatch> {
    let n = order.len();
    // One plan covers lcm(n, b) rows so that wrapping batches stay aligned.
    let rows = n / gcd(n, b) * b;
    (0..rows / b)
        .map(|k| {
            let r: Vec<(usize, u64)> = (0..b)
                .map(|i| {
                    let g = k * b + i;
                    (order[g % n].0, g as u64)
                })
                .collect();
            PlannedBatch {
                docs: r.iter().map(|x| x.0).collect(),
                occurrences: r.iter().map(|x| x.1).collect(),
            }
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Convenience wrapper: trains a fresh run to completion.
pub fn train(model: ModelState, corpus: &Corpus, cfg: TrainConfig) -> Result<(ModelState, Vec<MetricsRow>)> {
    let mut tr = Trainer::new(model, corpus, cfg)?;
    let mut rows = Vec::new();
    tr.run(None, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok((tr.model, rows))
}
