//! Acceptance run on the scaled desk configuration.
//!
//! Plain binary (no libtest harness): every criterion prints one
//! `PASS`/`FAIL` line and the process exits non-zero if any failed.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 10`.

use std::cell::OnceCell;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memsinks::corpus::{Document, InterleavedStream};
use memsinks::localize::{drop_top_fraction, AttributionScores};
use memsinks::model::{ForwardMode, ModelState};
use memsinks::seqid::{hash_tokens, sink_mask, splitmix64, MaskSpec, SequenceId};
use memsinks::tensor::gradcheck::RandomNet;
use memsinks::theory::{run_suite, Suite, BOUND_SLACK, SOFTMAX_TRIPLES_PER_SEED};
use memsinks::trainer::{evaluate, MetricsRow, Trainer};
use memsinks_cli::*;

// Scaled desk configuration: 4 layers at width 64, one pass over a corpus
// where about 40% of the occurrences are repeats. A 128-wide, 3000-step run
// does not fit the time budget on a single core; see README.
const STEPS: usize = 1000;
const BATCH: usize = 16;
const N_REPEATED: usize = 50;
const REPETITIONS: usize = 128;
const CANARY_LEN: usize = 16;
const CYCLE_SPACING_STEPS: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn reference(dir: &Path, mode: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    let n_once = (STEPS * BATCH - N_REPEATED * REPETITIONS).to_string();
    let (rep, reps, steps, batch) = (
        N_REPEATED.to_string(),
        REPETITIONS.to_string(),
        STEPS.to_string(),
        BATCH.to_string(),
    );
    for (k, v) in [
        ("corpus.vocab_size", "256"),
        ("corpus.seq_len", "32"),
        ("corpus.n_once", &n_once),
        ("corpus.n_repeated", &rep),
        ("corpus.repetitions", &reps),
        ("corpus.n_validation", "128"),
        ("corpus.seed", "1"),
        ("model.n_layers", "4"),
        ("model.d_model", "64"),
        ("model.n_heads", "2"),
        ("model.mlp_expansion", "4"),
        ("model.seed", "7"),
        ("mask.shared_fraction", "0.7"),
        ("mask.activation_ratio", "0.3"),
        ("train.mode", mode),
        ("train.steps", &steps),
        ("train.batch_size", &batch),
        ("train.lr_max", "0.01"),
        ("train.warmup_steps", "50"),
        ("train.eval_every", "50"),
        ("train.checkpoint_every", "500"),
    ] {
        c.set(k, v).unwrap();
    }
    c.out_dir = dir.join(mode);
    c
}

fn final_row(rows: &[MetricsRow]) -> &MetricsRow {
    rows.iter().rev().find(|r| r.has_eval()).expect("final step is evaluated")
}

struct Run {
    cfg: ExperimentConfig,
    rows: Vec<MetricsRow>,
}

impl Run {
    fn train(cfg: ExperimentConfig) -> Run {
        let t = Instant::now();
        let s = cmd_train(&cfg, false).unwrap_or_else(|e| panic!("{}: {e}", cfg.out_dir.display()));
        eprintln!("  trained {} in {:.0}s", cfg.out_dir.display(), t.elapsed().as_secs_f64());
        Run { cfg, rows: s.rows }
    }

    fn last(&self) -> &MetricsRow {
        final_row(&self.rows)
    }

    fn model(&self) -> ModelState {
        load_model(&self.cfg.out_dir.join(CHECKPOINT)).unwrap()
    }
}

/// Runs shared between criteria, trained on first use.
struct Runs {
    root: PathBuf,
    standard: OnceCell<Run>,
    memsinks: OnceCell<Run>,
    dedup: OnceCell<Run>,
    gradmask: OnceCell<Run>,
    canary: OnceCell<Run>,
}

impl Runs {
    fn get<'a>(&self, cell: &'a OnceCell<Run>, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> &'a Run {
        cell.get_or_init(|| {
            let mode = if name == "canary" { "standard" } else { name };
            let mut cfg = reference(&self.root, mode);
            cfg.out_dir = self.root.join(name);
            edit(&mut cfg);
            Run::train(cfg)
        })
    }
    fn standard(&self) -> &Run {
        self.get(&self.standard, "standard", |_| {})
    }
    fn memsinks(&self) -> &Run {
        self.get(&self.memsinks, "memsinks", |_| {})
    }
    fn dedup(&self) -> &Run {
        self.get(&self.dedup, "dedup", |_| {})
    }
    fn gradmask(&self) -> &Run {
        self.get(&self.gradmask, "gradmask", |_| {})
    }
    fn canary(&self) -> &Run {
        self.get(&self.canary, "canary", |c| c.corpus.canary_len = CANARY_LEN)
    }
}

// ---------------------------------------------------------------------------

fn numeric_core() -> Outcome {
    let t = Instant::now();
    let worst = (0..100).map(|s| RandomNet::new(s).check().unwrap()).fold(0.0f64, f64::max);
    let rows = run_suite(Suite::Softmax, 50).unwrap();
    let violations = rows.iter().filter(|r| r.report.margin < -BOUND_SLACK).count();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && violations == 0 && secs < 60.0,
        format!(
            "worst gradient rel. error {worst:.2e} over 100 nets; softmax {} triples, {violations} violations; {secs:.1}s",
            50 * SOFTMAX_TRIPLES_PER_SEED
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let mk = |name: &str| {
        let mut c = reference(root, "memsinks");
        c.set("train.steps", "300").unwrap();
        c.out_dir = root.join(name);
        cmd_train(&c, false).unwrap();
        c.out_dir
    };
    let (a, b) = (mk("det-a"), mk("det-b"));
    let same: Vec<bool> = [METRICS_JSONL, METRICS_CSV, CHECKPOINT]
        .iter()
        .map(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap())
        .collect();
    outcome(
        same.iter().all(|s| *s),
        format!("metrics.jsonl, metrics.csv, checkpoint identical: {same:?}"),
    )
}

fn mask_statistics() -> Outcome {
    let spec = MaskSpec::new(256, 0.7, 0.3).unwrap();
    let id = hash_tokens(&[3, 1, 4, 1, 5]);
    let first = sink_mask(id, &spec);
    let stable = (0..100_000).all(|_| sink_mask(id, &spec) == first);
    let (pool, shared, p) = (spec.pool_size() as f64, spec.shared_count(), spec.activation_ratio);
    let pairs = 1000u64;
    let (mut active, mut overlap) = (0.0, 0.0);
    for i in 0..pairs {
        let a = sink_mask(SequenceId(splitmix64(2 * i)), &spec);
        let b = sink_mask(SequenceId(splitmix64(2 * i + 1)), &spec);
        active += (a.active_count() - shared) as f64;
        overlap += a.0[shared..].iter().zip(&b.0[shared..]).filter(|(x, y)| **x && **y).count() as f64;
    }
    let n = pairs as f64 * pool;
    let z = |x: f64, q: f64| (x - q * n) / (n * q * (1.0 - q)).sqrt();
    let (za, zo) = (z(active, p), z(overlap, p * p));
    outcome(
        stable && za.abs() <= 3.0 && zo.abs() <= 3.0,
        format!("1e5 re-evaluations stable: {stable}; activation z = {za:.2}; overlap z = {zo:.2} (pool {pool})"),
    )
}

fn memorization(runs: &Runs) -> Outcome {
    let r = runs.standard().last();
    let (val, mem) = (r.val_loss_all_active.unwrap(), r.mem_loss_all_active.unwrap());
    outcome(
        mem <= 0.5 * val,
        format!("memorized {mem:.4} vs validation {val:.4} (ratio {:.3})", mem / val),
    )
}

fn isolation(runs: &Runs) -> Outcome {
    let s = runs.standard().last();
    let m = runs.memsinks().last();
    let d = runs.dedup().last();
    let (val_std, mem_std) = (s.val_loss_all_active.unwrap(), s.mem_loss_all_active.unwrap());
    let (val_ms, mem_ms) = (m.val_loss_shared_only.unwrap(), m.mem_loss_shared_only.unwrap());
    let val_dd = d.val_loss_all_active.unwrap();
    let closure = (mem_ms - mem_std) / (val_std - mem_std);
    let rel = (val_ms - val_std).abs() / val_std;
    outcome(
        closure >= 0.5 && rel <= 0.05 && val_ms < val_dd,
        format!(
            "gap closed {:.1}%; val shared-only {val_ms:.4} vs standard {val_std:.4} ({:.2}%) vs dedup {val_dd:.4}",
            100.0 * closure,
            100.0 * rel
        ),
    )
}

fn quarter_gap(rows: &[MetricsRow], lo: usize, hi: usize) -> f64 {
    let gaps: Vec<f64> = rows
        .iter()
        .filter(|r| r.has_eval() && r.step > lo && r.step <= hi)
        .map(|r| r.val_loss_shared_only.unwrap() - r.val_loss_all_active.unwrap())
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

fn gradient_masking(runs: &Runs) -> Outcome {
    let g = runs.gradmask();
    let keep_all = g.last().val_loss_all_active.unwrap();
    let standard = runs.standard().last().val_loss_all_active.unwrap();
    let first = quarter_gap(&g.rows, 0, STEPS / 4);
    let last = quarter_gap(&g.rows, 3 * STEPS / 4, STEPS);
    outcome(
        keep_all > standard && last > first,
        format!(
            "keep-all val {keep_all:.4} vs standard {standard:.4}; dropout gap first quarter {first:.4}, final quarter {last:.4}"
        ),
    )
}

/// `(pre-next-occurrence - post-step)` tracked loss for every complete cycle
/// that starts after warmup.
fn cycle_amplitudes(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Vec<f64> {
    let corpus = build_corpus(cfg).unwrap();
    let model = ModelState::init(cfg.training_model_config().unwrap(), 0).unwrap();
    let occ: Vec<usize> = Trainer::new(model, &corpus, cfg.train_config())
        .unwrap()
        .occurrence_steps(0)
        .into_iter()
        .filter(|&s| s >= cfg.train.warmup_steps)
        .collect();
    let loss = |i: usize| rows[i].tracked_seq_train_loss.unwrap();
    // rows[s] follows step s (0-based); rows[s - 1] is the state just before.
    occ.windows(2).map(|w| loss(w[1] - 1) - loss(w[0])).collect()
}

fn cycles(root: &Path) -> Outcome {
    let steps = STEPS;
    let reps = steps / CYCLE_SPACING_STEPS;
    let run = |mode: &str| {
        let mut c = reference(&root.join("cycles"), mode);
        c.corpus.n_repeated = 1;
        c.corpus.repetitions = reps;
        c.corpus.n_once = steps * BATCH - reps;
        c.corpus.spacing = Some(CYCLE_SPACING_STEPS * BATCH);
        c.train.steps = steps;
        c.train.eval_every = steps;
        c.train.tracked_sequence = Some(0);
        let r = Run::train(c);
        cycle_amplitudes(&r.cfg, &r.rows)
    };
    let std_amp = run("standard");
    let ms_amp = run("memsinks");
    let frac = std_amp.iter().filter(|a| **a > 0.0).count() as f64 / std_amp.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, ss) = (mean(&ms_amp), mean(&std_amp));
    outcome(
        frac >= 0.8 && ms < ss,
        format!(
            "standard: {:.0}% of {} cycles forget, mean amplitude {ss:.4}; memsinks mean amplitude {ms:.4}",
            100.0 * frac,
            std_amp.len()
        ),
    )
}

fn noise(runs: &Runs) -> Outcome {
    let base = runs.memsinks().last().mem_loss_shared_only.unwrap();
    let noisy = |d: f64| {
        let mut c = reference(&runs.root, "memsinks");
        c.train.id_noise = d;
        c.out_dir = runs.root.join(format!("noise-{d}"));
        Run::train(c).last().mem_loss_shared_only.unwrap()
    };
    let (lo, hi) = (noisy(0.1), noisy(0.5));
    let rel_lo = (lo - base).abs() / base;
    let drop_hi = (base - hi) / base;
    outcome(
        rel_lo <= 0.2 && drop_hi >= 0.3,
        format!(
            "memorized shared-only loss d=0 {base:.4}, d=0.1 {lo:.4} ({:.1}% off), d=0.5 {hi:.4} ({:.1}% lower)",
            100.0 * rel_lo,
            100.0 * drop_hi
        ),
    )
}

/// Smallest fraction on the per-neuron grid whose drop forgets at least
/// `target`, with the forgetting and degradation it produces.
fn match_forgetting(
    model: &ModelState,
    scores: &AttributionScores,
    targets: &[Document],
    val: &[Document],
    target: f64,
) -> Option<(f64, f64, f64)> {
    let mode = ForwardMode::eval_default(&model.config);
    let t0 = evaluate(model, targets, mode).unwrap();
    let v0 = evaluate(model, val, mode).unwrap();
    let h = model.config.hidden_size();
    (1..=h).find_map(|k| {
        let r = k as f64 / h as f64;
        let dropped = drop_top_fraction(model, scores, r).unwrap();
        let f = evaluate(&dropped, targets, mode).unwrap() - t0;
        (f >= target).then(|| (r, f, evaluate(&dropped, val, mode).unwrap() - v0))
    })
}

fn localization(runs: &Runs) -> Outcome {
    let natural = runs.standard();
    let canary = runs.canary();
    let mut lines = Vec::new();
    let mut pass = true;
    for method_name in ["ig", "gates"] {
        let mut found = Vec::new();
        for run in [canary, natural] {
            let mut cfg = run.cfg.clone();
            cfg.localize.method = if method_name == "ig" { LocalizeMethod::Ig } else { LocalizeMethod::Gates };
            let corpus = build_corpus(&cfg).unwrap();
            let method = localize_method(&cfg, &corpus);
            let model = run.model();
            let targets: Vec<Document> = corpus.repeated_docs().into_iter().cloned().collect();
            let scores = method.score(&model, &targets).unwrap();
            found.push((model, scores, targets, corpus.validation));
        }
        // Match at half the forgetting the weaker model reaches by dropping
        // 30% of each layer.
        let reach = |i: usize| {
            let (m, s, t, _) = &found[i];
            let mode = ForwardMode::eval_default(&m.config);
            let d = drop_top_fraction(m, s, 0.3).unwrap();
            evaluate(&d, t, mode).unwrap() - evaluate(m, t, mode).unwrap()
        };
        let target = 0.5 * reach(0).min(reach(1));
        let hit: Vec<_> = found
            .iter()
            .map(|(m, s, t, v)| match_forgetting(m, s, t, v, target))
            .collect();
        match (hit[0], hit[1]) {
            (Some((rc, fc, dc)), Some((rn, f_n, dn))) => {
                let within = (fc - f_n).abs() <= 0.1 * f_n.max(fc);
                pass &= within && dc < dn && target > 0.0;
                lines.push(format!(
                    "{method_name}: forgetting {fc:.4}/{f_n:.4} at r {rc:.3}/{rn:.3}, degradation canary {dc:.4} vs natural {dn:.4}"
                ));
            }
            _ => {
                pass = false;
                lines.push(format!("{method_name}: forgetting {target:.4} not reached"));
            }
        }
    }
    outcome(pass, lines.join("; "))
}

fn theory() -> Outcome {
    let t = Instant::now();
    let mut checks = 0;
    let mut violations = Vec::new();
    let mut norm_ok = 0;
    for suite in Suite::ALL {
        for row in run_suite(suite, 50).unwrap().iter().filter(|r| !r.informational) {
            checks += 1;
            if row.report.margin < -BOUND_SLACK {
                violations.push(format!("{} seed {} {}", row.suite, row.seed, row.report.name));
            }
            if suite == Suite::Entanglement && row.seed < 20 && row.report.name == "entanglement_norm" {
                norm_ok += usize::from(row.report.measured < row.report.bound);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        violations.is_empty() && norm_ok == 20 && secs < 300.0,
        format!(
            "{checks} checks, {} violations {violations:?}; converged norm below the disentangled norm in {norm_ok}/20 seeds; {secs:.0}s",
            violations.len()
        ),
    )
}

fn persistence(root: &Path) -> Outcome {
    let mut c = reference(root, "memsinks");
    c.set("train.steps", "400").unwrap();
    c.out_dir = root.join("persist-full");
    cmd_train(&c, false).unwrap();
    let mut r = c.clone();
    r.out_dir = root.join("persist-resumed");
    cmd_train_until(&r, false, Some(200)).unwrap();
    cmd_train(&r, true).unwrap();
    let resumed = [METRICS_JSONL, METRICS_CSV, CHECKPOINT]
        .iter()
        .all(|f| fs::read(c.out_dir.join(f)).unwrap() == fs::read(r.out_dir.join(f)).unwrap());

    let ckpt = c.out_dir.join(CHECKPOINT);
    let bytes = fs::read(&ckpt).unwrap();
    let corpus = build_corpus(&c).unwrap();
    let tr = Trainer::resume(BufReader::new(File::open(&ckpt).unwrap()), &corpus, c.train_config()).unwrap();
    let mut again = Vec::new();
    tr.save_checkpoint(&mut again).unwrap();
    let ckpt_ok = again == bytes;

    let mut g = c.clone();
    g.out_dir = root.join("persist-corpus");
    g.shards = 2;
    let manifest = cmd_gen_corpus(&g).unwrap();
    let stream_ok = manifest.shards.iter().all(|s| {
        let path = g.out_dir.join(&s.file);
        let bytes = fs::read(&path).unwrap();
        let (stream, vocab) = InterleavedStream::read_from(bytes.as_slice()).unwrap();
        let mut out = Vec::new();
        stream.write_to(vocab, &mut out).unwrap();
        out == bytes
    });
    outcome(
        resumed && ckpt_ok && stream_ok,
        format!("resume 200+200 identical: {resumed}; checkpoint round trip: {ckpt_ok}; stream round trip: {stream_ok}"),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let runs = Runs {
        root: tmp.path().to_path_buf(),
        standard: OnceCell::new(),
        memsinks: OnceCell::new(),
        dedup: OnceCell::new(),
        gradmask: OnceCell::new(),
        canary: OnceCell::new(),
    };
    let root = tmp.path();
    let criteria: [(usize, &str, &dyn Fn() -> Outcome); 11] = [
        (1, "numeric core", &numeric_core),
        (2, "determinism", &|| determinism(root)),
        (3, "mask statistics", &mask_statistics),
        (4, "memorization under standard training", &|| memorization(&runs)),
        (5, "memsinks isolation", &|| isolation(&runs)),
        (6, "gradient-masking pathology", &|| gradient_masking(&runs)),
        (7, "learning/forgetting cycles", &|| cycles(root)),
        (8, "id noise ablation", &|| noise(&runs)),
        (9, "localization ordering", &|| localization(&runs)),
        (10, "theory suite", &theory),
        (11, "persistence", &|| persistence(root)),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !want(n) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {n:>2} {} {name}: {} [{:.0}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
