//! Command implementations behind the `memsinks` binary.
//!
//! Each `cmd_*` function is usable as a library call so experiments can be
//! scripted from tests without spawning processes.

pub mod config;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use memsinks::corpus::{generate_corpus, pack_interleaved, Corpus, DocKind, Document};
use memsinks::localize::{tradeoff_curve, GateConfig, LocalizeError, Method, TradeoffPoint, TRADEOFF_CSV_HEADER};
use memsinks::model::{ForwardMode, ModelError, ModelState};
use memsinks::theory::{run_suite_with, Suite, SuiteRow, TheoryError};
use memsinks::trainer::{evaluate, MetricsRow, TrainError, TrainMode, Trainer, CSV_HEADER};
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, LocalizeMethod, SweepAxis};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.msnk";
pub const RUN_LOG: &str = "run.log";
pub const MANIFEST: &str = "manifest.json";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const SWEEP_CSV_HEADER: &str =
    "axis,value,steps,val_loss_shared_only,val_loss_all_active,mem_loss_shared_only,mem_loss_all_active";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    /// 1 usage/config, 2 invariant or bound failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(e) => CliError::Io(e),
            TrainError::Model(ModelError::Io(e)) => CliError::Io(e),
            TrainError::Config(m) | TrainError::Mismatch(m) => CliError::Usage(m),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => CliError::Io(e),
            ModelError::Config(m) => CliError::Usage(m),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<LocalizeError> for CliError {
    fn from(e: LocalizeError) -> Self {
        match e {
            LocalizeError::Model(m) => m.into(),
            LocalizeError::Train(t) => t.into(),
            LocalizeError::Engine(e) => CliError::Invariant(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// Appends a timestamped line to the run's sidecar log. Timestamps live
/// only here so every other output is reproducible byte for byte.
fn log_line(dir: &Path, msg: &str) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let path = dir.join(RUN_LOG);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    writeln!(f, "{secs} {msg}").map_err(|e| io_err(&path, e))
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| io_err(&path, e))?;
    Ok(dir)
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    generate_corpus(&cfg.corpus).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))
}

// ---------------------------------------------------------------------------
// gen-corpus

#[derive(Debug, Serialize, PartialEq)]
pub struct ShardInfo {
    pub file: String,
    pub occurrences: usize,
    pub tokens: usize,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Manifest {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub id_mode: String,
    pub seed: u64,
    pub unique_docs: usize,
    pub once_docs: usize,
    pub repeated_docs: usize,
    pub canary_docs: usize,
    pub repetitions: usize,
    pub canary_len: usize,
    pub occurrences: usize,
    pub tokens: usize,
    pub shards: Vec<ShardInfo>,
    pub validation: ShardInfo,
}

/// Writes the training schedule as `corpus.shards` contiguous stream files,
/// the validation set as one more, and a JSON manifest.
pub fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let ids = corpus.doc_ids(cfg.id_mode);
    let occ = corpus.occurrences();
    let occ_ids: Vec<_> = corpus.schedule.iter().map(|&i| Some(ids[i])).collect();
    let n = occ.len();
    let per = n.div_ceil(cfg.shards).max(1);
    let vocab = cfg.corpus.vocab_size as u32;
    let mut shards = Vec::new();
    for s in 0..cfg.shards {
        let (lo, hi) = ((s * per).min(n), ((s + 1) * per).min(n));
        let stream = pack_interleaved(&occ[lo..hi], &occ_ids[lo..hi])
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        let file = format!("train-{s:05}.mstr");
        let path = dir.join(&file);
        let mut w = create(&path)?;
        stream.write_to(vocab, &mut w).map_err(|e| CliError::Invariant(e.to_string()))?;
        w.flush().map_err(|e| io_err(&path, e))?;
        shards.push(ShardInfo {
            file,
            occurrences: hi - lo,
            tokens: stream.n_tokens(),
        });
    }
    let val_ids: Vec<_> = corpus
        .validation
        .iter()
        .map(|d| Some(memsinks::seqid::hash_tokens(&d.tokens)))
        .collect();
    let val = pack_interleaved(&corpus.validation, &val_ids).map_err(|e| CliError::Invariant(e.to_string()))?;
    let vpath = dir.join("validation.mstr");
    let mut w = create(&vpath)?;
    val.write_to(vocab, &mut w).map_err(|e| CliError::Invariant(e.to_string()))?;
    w.flush().map_err(|e| io_err(&vpath, e))?;
    let count = |k: DocKind| corpus.docs.iter().filter(|d| d.kind == k).count();
    let manifest = Manifest {
        vocab_size: corpus.vocab_size,
        seq_len: corpus.seq_len,
        id_mode: match cfg.id_mode {
            memsinks::corpus::IdMode::Hash => "hash".into(),
            memsinks::corpus::IdMode::Sequential => "sequential".into(),
        },
        seed: cfg.corpus.seed,
        unique_docs: corpus.docs.len(),
        once_docs: count(DocKind::Once),
        repeated_docs: count(DocKind::Repeated) + count(DocKind::Canary),
        canary_docs: count(DocKind::Canary),
        repetitions: if cfg.corpus.n_repeated > 0 { cfg.corpus.repetitions } else { 0 },
        canary_len: cfg.corpus.canary_len,
        occurrences: n,
        tokens: corpus.n_tokens(),
        shards,
        validation: ShardInfo {
            file: "validation.mstr".into(),
            occurrences: corpus.validation.len(),
            tokens: val.n_tokens(),
        },
    };
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Invariant(e.to_string()))?;
    fs::write(&mpath, text + "\n").map_err(|e| io_err(&mpath, e))?;
    log_line(&dir, &format!("gen-corpus wrote {} shards", cfg.shards))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub tokens_trained: usize,
    pub last: Option<MetricsRow>,
    pub rows: Vec<MetricsRow>,
}

fn write_checkpoint_atomic(tr: &Trainer<'_>, dir: &Path) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT}.tmp"));
    let mut w = create(&tmp)?;
    tr.save_checkpoint(&mut w)?;
    w.flush().map_err(|e| io_err(&tmp, e))?;
    drop(w);
    let path = dir.join(CHECKPOINT);
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

/// Reads the metrics rows already on disk, keeping those at or before `step`.
fn existing_rows(dir: &Path, step: usize) -> Result<Vec<MetricsRow>> {
    let path = dir.join(METRICS_JSONL);
    let f = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path, e)),
    };
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow =
            serde_json::from_str(&line).map_err(|e| CliError::Invariant(format!("{}: {e}", path.display())))?;
        if row.step <= step {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Trains one run. Metrics go to `metrics.jsonl` and `metrics.csv`, flushed
/// after every step; a checkpoint is written every `train.checkpoint_every`
/// steps and at the end. With `resume`, training continues from the
/// checkpoint in the output directory if one exists.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainSummary> {
    cmd_train_until(cfg, resume, None)
}

/// [`cmd_train`] that stops (with a checkpoint) once `until` steps are done,
/// as if the process had been interrupted there.
pub fn cmd_train_until(cfg: &ExperimentConfig, resume: bool, until: Option<usize>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let tcfg = cfg.train_config();
    let ckpt = dir.join(CHECKPOINT);
    let mut trainer = if resume && ckpt.exists() {
        let f = File::open(&ckpt).map_err(|e| io_err(&ckpt, e))?;
        let tr = Trainer::resume(BufReader::new(f), &corpus, tcfg)?;
        if tr.model.config != cfg.training_model_config()? {
            return Err(CliError::Usage("checkpoint model does not match the config".into()));
        }
        tr
    } else {
        let model = ModelState::init(cfg.training_model_config()?, cfg.model_seed)?;
        Trainer::new(model, &corpus, tcfg)?
    };
    let mut rows = existing_rows(&dir, trainer.step)?;
    if !resume || trainer.step == 0 {
        rows.clear();
    }
    let jpath = dir.join(METRICS_JSONL);
    let cpath = dir.join(METRICS_CSV);
    let mut jw = create(&jpath)?;
    let mut cw = create(&cpath)?;
    writeln!(cw, "{CSV_HEADER}").map_err(|e| io_err(&cpath, e))?;
    for r in &rows {
        writeln!(jw, "{}", r.to_json()).map_err(|e| io_err(&jpath, e))?;
        writeln!(cw, "{}", r.to_csv()).map_err(|e| io_err(&cpath, e))?;
    }
    jw.flush().map_err(|e| io_err(&jpath, e))?;
    cw.flush().map_err(|e| io_err(&cpath, e))?;
    log_line(
        &dir,
        &format!("train start mode={} step={} of {}", cfg.train.mode.as_str(), trainer.step, trainer.total_steps()),
    )?;
    let end = until.map_or(trainer.total_steps(), |u| u.min(trainer.total_steps()));
    while trainer.step < end {
        let row = trainer.step_once()?;
        writeln!(jw, "{}", row.to_json()).map_err(|e| io_err(&jpath, e))?;
        writeln!(cw, "{}", row.to_csv()).map_err(|e| io_err(&cpath, e))?;
        jw.flush().map_err(|e| io_err(&jpath, e))?;
        cw.flush().map_err(|e| io_err(&cpath, e))?;
        if trainer.step % cfg.checkpoint_every == 0 && trainer.step < end {
            write_checkpoint_atomic(&trainer, &dir)?;
        }
        rows.push(row);
    }
    write_checkpoint_atomic(&trainer, &dir)?;
    log_line(&dir, &format!("train stopped at step {} of {}", trainer.step, trainer.total_steps()))?;
    Ok(TrainSummary {
        out_dir: dir,
        steps: trainer.total_steps(),
        tokens_trained: trainer.tokens_trained(),
        last: rows.iter().rev().find(|r| r.has_eval()).cloned(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EvalReport {
    pub val_loss_shared_only: f64,
    pub val_loss_all_active: f64,
    pub mem_loss_shared_only: Option<f64>,
    pub mem_loss_all_active: Option<f64>,
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(ModelState::load(BufReader::new(f))?)
}

/// Evaluates a checkpoint on the config's validation and repeated documents.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let model = load_model(checkpoint)?;
    let corpus = build_corpus(cfg)?;
    let shared = ForwardMode::eval_default(&model.config);
    let rep: Vec<Document> = corpus.repeated_docs().into_iter().cloned().collect();
    let ev = |docs: &[Document], mode| evaluate(&model, docs, mode).map_err(CliError::from);
    let report = EvalReport {
        val_loss_shared_only: ev(&corpus.validation, shared)?,
        val_loss_all_active: ev(&corpus.validation, ForwardMode::AllActive)?,
        mem_loss_shared_only: if rep.is_empty() { None } else { Some(ev(&rep, shared)?) },
        mem_loss_all_active: if rep.is_empty() { None } else { Some(ev(&rep, ForwardMode::AllActive)?) },
    };
    let dir = prepare_dir(cfg)?;
    let path = dir.join("eval.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invariant(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// localize

pub fn localize_method(cfg: &ExperimentConfig, corpus: &Corpus) -> Method {
    let l = &cfg.localize;
    match l.method {
        LocalizeMethod::Ig => Method::IntegratedGradients { steps: l.ig_steps },
        LocalizeMethod::Gates => Method::LearnedGates {
            config: GateConfig {
                lambda: l.lambda,
                iterations: l.iterations,
                seed: l.seed,
            },
            retain: corpus
                .docs
                .iter()
                .filter(|d| d.kind == DocKind::Once)
                .take(l.retain_docs)
                .cloned()
                .collect(),
        },
    }
}

/// Scores a checkpoint's neurons for the repeated documents and writes the
/// forgetting/degradation tradeoff for every `r` in `localize.r_list`.
pub fn cmd_localize(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<TradeoffPoint>> {
    cfg.validate()?;
    if cfg.localize.r_list.is_empty() {
        return Err(CliError::Usage("localize.r_list is empty".into()));
    }
    let model = load_model(checkpoint)?;
    let corpus = build_corpus(cfg)?;
    let targets: Vec<Document> = corpus.repeated_docs().into_iter().cloned().collect();
    if targets.is_empty() {
        return Err(CliError::Usage("corpus has no repeated documents to localize".into()));
    }
    let method = localize_method(cfg, &corpus);
    let points = tradeoff_curve(&model, &targets, &corpus.validation, &method, &cfg.localize.r_list)?;
    let dir = prepare_dir(cfg)?;
    let path = dir.join(TRADEOFF_CSV);
    let mut w = create(&path)?;
    writeln!(w, "{TRADEOFF_CSV_HEADER}").map_err(|e| io_err(&path, e))?;
    for p in &points {
        writeln!(w, "{}", p.to_csv(method.name())).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(points)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub summary: TrainSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Config for one sweep point, with its own output directory.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::P | SweepAxis::G => {
            if c.train.mode != TrainMode::MemSinks {
                return Err(CliError::Usage(format!("sweep over {} needs train.mode = memsinks", axis.as_str())));
            }
            if axis == SweepAxis::P {
                c.activation_ratio = value;
            } else {
                c.shared_fraction = value;
            }
        }
        SweepAxis::NoiseD => c.train.id_noise = value,
        SweepAxis::ModelSize => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(CliError::Usage(format!("model_size value {value} is not a positive integer")));
            }
            c.d_model = value as usize;
        }
    }
    c.out_dir = cfg.out_dir.join(format!("{}-{value:?}", axis.as_str()));
    c.validate()?;
    Ok(c)
}

/// Worker count: `MEMSINKS_THREADS` if set, else the available parallelism.
pub fn sweep_threads(n_runs: usize) -> usize {
    let cap = std::env::var("MEMSINKS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(n_runs).max(1)
}

/// One training run per axis value on a worker pool, then an aggregated CSV
/// of final metrics in axis order.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let axis = cfg.sweep_axis;
    let values = if cfg.sweep_values.is_empty() {
        axis.default_values()
    } else {
        cfg.sweep_values.clone()
    };
    let points = values
        .iter()
        .map(|&v| sweep_point(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let dir = prepare_dir(cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainSummary>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..sweep_threads(points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = cmd_train(&points[i], false);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for (v, r) in values.iter().zip(results.into_inner().expect("workers joined")) {
        rows.push(SweepRow {
            value: *v,
            summary: r.expect("every point ran")?,
        });
    }
    let path = dir.join(format!("sweep_{}.csv", axis.as_str()));
    let mut w = create(&path)?;
    writeln!(w, "{SWEEP_CSV_HEADER}").map_err(|e| io_err(&path, e))?;
    for r in &rows {
        let last = r.summary.last.as_ref();
        writeln!(
            w,
            "{},{:?},{},{},{},{},{}",
            axis.as_str(),
            r.value,
            r.summary.steps,
            fmt_opt(last.and_then(|l| l.val_loss_shared_only)),
            fmt_opt(last.and_then(|l| l.val_loss_all_active)),
            fmt_opt(last.and_then(|l| l.mem_loss_shared_only)),
            fmt_opt(last.and_then(|l| l.mem_loss_all_active)),
        )
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// theory

#[derive(Debug, Serialize)]
pub struct TheoryOutcome {
    pub rows: Vec<SuiteRow>,
    pub violations: usize,
}

/// Runs the requested suites (all when `suite` is `None`). Precondition
/// errors are usage errors; a failed bound is reported through
/// [`TheoryOutcome::violations`].
pub fn cmd_theory(cfg: &ExperimentConfig, suite: Option<Suite>) -> Result<TheoryOutcome> {
    let suites: Vec<Suite> = match suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for s in suites {
        let r = run_suite_with(s, cfg.theory_seeds, &cfg.theory).map_err(|e| match e {
            TheoryError::Precondition(m) => CliError::Usage(format!("{} precondition: {m}", s.name())),
            other => CliError::Invariant(format!("{}: {other}", s.name())),
        })?;
        rows.extend(r);
    }
    let violations = rows.iter().filter(|r| !r.informational && !r.report.pass).count();
    Ok(TheoryOutcome { rows, violations })
}

pub fn theory_table(rows: &[SuiteRow]) -> String {
    let mut out = format!(
        "{:<14} {:>4} {:<26} {:>14} {:>14} {:>12} {}\n",
        "suite", "seed", "check", "measured", "bound", "margin", "status"
    );
    for r in rows {
        let status = match (r.report.pass, r.informational) {
            (true, _) => "ok",
            (false, true) => "info",
            (false, false) => "FAIL",
        };
        out.push_str(&format!(
            "{:<14} {:>4} {:<26} {:>14.6e} {:>14.6e} {:>12.3e} {}\n",
            r.suite, r.seed, r.report.name, r.report.measured, r.report.bound, r.report.margin, status
        ));
    }
    out
}

pub fn write_theory(cfg: &ExperimentConfig, outcome: &TheoryOutcome) -> Result<()> {
    let dir = prepare_dir(cfg)?;
    let path = dir.join("theory.json");
    let text = serde_json::to_string_pretty(outcome).map_err(|e| CliError::Invariant(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}
