use std::fs;
use std::path::Path;
use std::process::Command;

use memsinks::theory::Suite;
use memsinks_cli::*;

fn small(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in [
        ("corpus.vocab_size", "16"),
        ("corpus.seq_len", "8"),
        ("corpus.n_once", "60"),
        ("corpus.n_repeated", "3"),
        ("corpus.repetitions", "5"),
        ("corpus.n_validation", "8"),
        ("model.n_layers", "1"),
        ("model.d_model", "8"),
        ("model.n_heads", "2"),
        ("model.mlp_expansion", "2"),
        ("train.steps", "12"),
        ("train.batch_size", "4"),
        ("train.warmup_steps", "2"),
        ("train.eval_every", "4"),
        ("train.checkpoint_every", "4"),
        ("localize.ig_steps", "4"),
        ("localize.iterations", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c.out_dir = dir.to_path_buf();
    c
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_memsinks")).args(args).output().unwrap()
}

#[test]
fn written_config_parses_back_to_the_same_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.set("train.mode", "memsinks").unwrap();
    c.set("localize.r_list", "0,0.25").unwrap();
    cmd_train(&c, false).unwrap();
    let text = fs::read_to_string(tmp.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
}

#[test]
fn gen_corpus_is_deterministic_and_counts_add_up() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small(a.path());
    ca.shards = 3;
    let mut cb = ca.clone();
    cb.out_dir = b.path().to_path_buf();
    let ma = cmd_gen_corpus(&ca).unwrap();
    cmd_gen_corpus(&cb).unwrap();
    for f in ["train-00000.mstr", "train-00001.mstr", "train-00002.mstr", "validation.mstr", MANIFEST] {
        assert!(read(a.path().join(f)) == read(b.path().join(f)), "{f} differs");
    }
    assert_eq!(ma.occurrences, 60 + 3 * 5);
    assert_eq!(ma.shards.iter().map(|s| s.occurrences).sum::<usize>(), ma.occurrences);
    assert_eq!(ma.shards.iter().map(|s| s.tokens).sum::<usize>(), ma.tokens);
    assert_eq!((ma.once_docs, ma.repeated_docs, ma.canary_docs), (60, 3, 0));
}

#[test]
fn gen_corpus_without_repeats_or_with_canaries() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.set("corpus.n_repeated", "0").unwrap();
    let m = cmd_gen_corpus(&c).unwrap();
    assert_eq!((m.repeated_docs, m.repetitions), (0, 0));
    assert_eq!(m.occurrences, 60);

    c.set("corpus.n_repeated", "2").unwrap();
    c.set("corpus.canary_len", "3").unwrap();
    let m = cmd_gen_corpus(&c).unwrap();
    assert_eq!((m.repeated_docs, m.canary_docs, m.canary_len), (2, 2, 3));
    let json: serde_json::Value = serde_json::from_slice(&read(tmp.path().join(MANIFEST))).unwrap();
    assert_eq!(json["canary_docs"], 2);
}

#[test]
fn train_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small(a.path());
    ca.set("train.mode", "memsinks").unwrap();
    let mut cb = ca.clone();
    cb.out_dir = b.path().to_path_buf();
    cmd_train(&ca, false).unwrap();
    cmd_train(&cb, false).unwrap();
    for f in [METRICS_JSONL, METRICS_CSV, CHECKPOINT] {
        assert!(read(a.path().join(f)) == read(b.path().join(f)), "{f} differs");
    }
}

#[test]
fn interrupted_then_resumed_run_matches_uninterrupted() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small(a.path());
    let mut cb = ca.clone();
    cb.out_dir = b.path().to_path_buf();
    cmd_train(&ca, false).unwrap();
    let partial = cmd_train_until(&cb, false, Some(5)).unwrap();
    assert_eq!(partial.rows.len(), 5);
    let done = cmd_train(&cb, true).unwrap();
    assert_eq!(done.rows.len(), 12);
    for f in [METRICS_JSONL, METRICS_CSV, CHECKPOINT] {
        assert!(read(a.path().join(f)) == read(b.path().join(f)), "{f} differs");
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    cmd_train_until(&c, false, Some(2)).unwrap();
    c.set("model.d_model", "12").unwrap();
    assert!(matches!(cmd_train(&c, true), Err(CliError::Usage(_))));
}

#[test]
fn dedup_trains_on_fewer_tokens() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    let std_tokens = cmd_train(&c, false).unwrap().tokens_trained;
    c.set("train.mode", "dedup").unwrap();
    let s = cmd_train(&c, false).unwrap();
    // 63 unique docs out of 75 occurrences.
    assert_eq!(s.steps, (12.0f64 * 63.0 / 75.0).round() as usize);
    assert!(s.tokens_trained < std_tokens);
}

#[test]
fn eval_reports_both_views() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.set("train.mode", "memsinks").unwrap();
    let s = cmd_train(&c, false).unwrap();
    let r = cmd_eval(&c, &tmp.path().join(CHECKPOINT)).unwrap();
    let last = s.last.unwrap();
    assert_eq!(Some(r.val_loss_shared_only), last.val_loss_shared_only);
    assert_eq!(r.mem_loss_all_active, last.mem_loss_all_active);
    assert!(tmp.path().join("eval.json").exists());
}

#[test]
fn localize_at_zero_fraction_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    cmd_train(&c, false).unwrap();
    let ckpt = tmp.path().join(CHECKPOINT);
    for method in ["ig", "gates"] {
        c.set("localize.method", method).unwrap();
        c.set("localize.r_list", "0").unwrap();
        let pts = cmd_localize(&c, &ckpt).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].forgetting, pts[0].degradation), (0.0, 0.0));
        let csv = fs::read_to_string(tmp.path().join(TRADEOFF_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with(method));
    }
    c.set("localize.r_list", "").unwrap();
    assert!(matches!(cmd_localize(&c, &ckpt), Err(CliError::Usage(_))));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.set("train.mode", "memsinks").unwrap();
    c.set("sweep.axis", "p").unwrap();
    c.set("sweep.values", "0.2,0.6").unwrap();
    let rows = cmd_sweep(&c).unwrap();
    assert_eq!(rows.len(), 2);
    let csv = fs::read_to_string(tmp.path().join("sweep_p.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SWEEP_CSV_HEADER);
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("p-0.2").join(CHECKPOINT).exists());

    c.set("train.mode", "standard").unwrap();
    assert!(matches!(cmd_sweep(&c), Err(CliError::Usage(_))));
}

#[test]
fn theory_softmax_suite_is_fast_and_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(tmp.path());
    let t = std::time::Instant::now();
    let out = cmd_theory(&c, Some(Suite::Softmax)).unwrap();
    assert!(t.elapsed().as_secs_f64() < 5.0);
    assert_eq!(out.violations, 0);
    assert_eq!(out.rows.len(), 100);
}

#[test]
fn theory_precondition_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path());
    c.set("theory.coadaptation_gamma", "1.5").unwrap();
    let e = cmd_theory(&c, Some(Suite::Coadaptation)).unwrap_err();
    assert!(matches!(e, CliError::Usage(_)));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert!(bin(&["--help"]).status.success());
    assert_eq!(bin(&["theory", "--suite", "softmax", "--seeds", "2", "--out", out]).status.code(), Some(0));
    assert!(tmp.path().join("theory.json").exists());
    assert_eq!(
        bin(&["theory", "--suite", "coadaptation", "--theory.coadaptation_gamma=1.5", "--out", out]).status.code(),
        Some(1)
    );
    assert_eq!(bin(&["train", "--train.nonsense=1", "--out", out]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        bin(&["eval", "--checkpoint", tmp.path().join("missing.msnk").to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn binary_reads_config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(&tmp.path().join("run"));
    let cfg_path = tmp.path().join("exp.txt");
    fs::write(&cfg_path, format!("# small run\n{}", c.to_text())).unwrap();
    let o = bin(&["gen-corpus", "--config", cfg_path.to_str().unwrap(), "--corpus.shards=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("run").join("train-00001.mstr").exists());
}
