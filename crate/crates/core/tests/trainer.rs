use memsinks::corpus::*;
use memsinks::model::*;
use memsinks::seqid::*;
use memsinks::trainer::*;

fn corpus(n_once: usize, n_repeated: usize) -> Corpus {
    generate_corpus(&CorpusSpec {
        vocab_size: 16,
        seq_len: 8,
        n_once,
        n_repeated,
        repetitions: 4,
        n_validation: 6,
        seed: 5,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn model(memsinks: bool) -> ModelState {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        mlp_expansion: 4,
        mlp_kind: MlpKind::Plain,
        vocab_size: 16,
        context_len: 8,
        memsinks: memsinks.then(|| MaskSpec::new(32, 0.5, 0.3).unwrap()),
    };
    ModelState::init(cfg, 3).unwrap()
}

fn cfg(mode: TrainMode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        batch_size: 4,
        lr_max: 1e-2,
        warmup_steps: 2,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

/// Indices into the flattened `w_fc`, `b_fc` and `w_proj` tensors that
/// belong to hidden neuron `j`.
fn neuron_slices(m: &ModelState, l: usize, j: usize) -> Vec<(String, usize)> {
    let h = m.config.hidden_size();
    let d = m.config.d_model;
    let mut out = Vec::new();
    for r in 0..d {
        out.push((format!("h{l}.mlp.w_fc"), r * h + j));
        out.push((format!("h{l}.mlp.w_proj"), j * d + r));
    }
    out.push((format!("h{l}.mlp.b_fc"), j));
    out
}

fn neuron_unchanged(a: &ModelState, b: &ModelState, l: usize, j: usize) -> bool {
    neuron_slices(a, l, j)
        .iter()
        .all(|(n, i)| a.tensor(n).unwrap().data()[*i].to_bits() == b.tensor(n).unwrap().data()[*i].to_bits())
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let c = corpus(20, 2);
    let init = model(false);
    let (m, rows) = train(init.clone(), &c, cfg(TrainMode::Standard, 0)).unwrap();
    assert!(m.bit_eq(&init));
    assert!(rows.is_empty());
}

#[test]
fn training_is_deterministic() {
    let c = corpus(20, 2);
    let (a, ra) = train(model(true), &c, cfg(TrainMode::MemSinks, 12)).unwrap();
    let (b, rb) = train(model(true), &c, cfg(TrainMode::MemSinks, 12)).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(ra, rb);
    assert!(!a.bit_eq(&model(true)));
}

#[test]
fn eval_rows_at_interval_and_final_step() {
    let c = corpus(20, 2);
    let (_, rows) = train(model(false), &c, cfg(TrainMode::Standard, 12)).unwrap();
    let eval_steps: Vec<usize> = rows.iter().filter(|r| r.has_eval()).map(|r| r.step).collect();
    assert_eq!(eval_steps, vec![5, 10, 12]);
    assert!(rows.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn gradmask_on_repeated_data_leaves_general_block_untouched() {
    let c = corpus(0, 4);
    let init = model(false);
    let (m, _) = train(init.clone(), &c, cfg(TrainMode::GradMask, 6)).unwrap();
    let part = NeuronPartition::leading(2, 32, 0.7);
    for l in 0..2 {
        for j in 0..32 {
            assert_eq!(neuron_unchanged(&init, &m, l, j), part.general[l][j], "layer {l} neuron {j}");
        }
    }
    // Attention is shared and keeps training.
    assert_ne!(init.tensor("h0.attn.w_qkv"), m.tensor("h0.attn.w_qkv"));
}

#[test]
fn gradmask_on_once_data_leaves_memorization_block_untouched() {
    let c = corpus(24, 0);
    let init = model(false);
    let (m, _) = train(init.clone(), &c, cfg(TrainMode::GradMask, 6)).unwrap();
    let part = NeuronPartition::leading(2, 32, 0.7);
    for j in 0..32 {
        assert_eq!(neuron_unchanged(&init, &m, 1, j), !part.general[1][j]);
    }
}

#[test]
fn memsinks_never_updates_inactive_sinks() {
    let c = corpus(20, 2);
    let init = model(true);
    let cf = TrainConfig {
        batch_size: 1,
        ..cfg(TrainMode::MemSinks, 3)
    };
    let mut tr = Trainer::new(init.clone(), &c, cf).unwrap();
    let spec = init.config.memsinks.unwrap();
    let ids = c.doc_ids(IdMode::Hash);
    let mut used = vec![false; 32];
    for s in 0..3 {
        for &d in &tr.batch_at(s).docs {
            for (u, on) in used.iter_mut().zip(sink_mask(ids[d], &spec).0) {
                *u |= on;
            }
        }
    }
    tr.run(None, |_| Ok(())).unwrap();
    assert!(used.iter().any(|u| !u), "test needs at least one idle sink");
    for l in 0..2 {
        for j in 0..32 {
            assert_eq!(neuron_unchanged(&init, &tr.model, l, j), !used[j], "layer {l} neuron {j}");
        }
    }
}

#[test]
fn dedup_trains_on_fewer_tokens() {
    let c = corpus(40, 5);
    let full = Trainer::new(model(false), &c, cfg(TrainMode::Standard, 30)).unwrap();
    let dd = Trainer::new(model(false), &c, cfg(TrainMode::Dedup, 30)).unwrap();
    assert!(dd.tokens_trained() < full.tokens_trained());
    // 45 of 60 occurrences survive deduplication.
    assert_eq!(dd.total_steps(), (30.0f64 * 45.0 / 60.0).round() as usize);
}

#[test]
fn dropping_sinks_of_trained_model_equals_shared_only() {
    let c = corpus(20, 2);
    let (m, _) = train(model(true), &c, cfg(TrainMode::MemSinks, 10)).unwrap();
    let spec = m.config.memsinks.unwrap();
    let sinks: Vec<usize> = (spec.shared_count()..spec.hidden_size).collect();
    let dropped = m.drop_neurons(&[sinks.clone(), sinks]).unwrap();
    let toks: Vec<Vec<u32>> = c.validation.iter().map(|d| d.tokens.clone()).collect();
    let (a, la) = m.forward(&toks, None, ForwardMode::SharedOnly).unwrap();
    let (b, lb) = dropped.forward(&toks, None, ForwardMode::AllActive).unwrap();
    assert!((la - lb).abs() < 1e-12);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let c = corpus(20, 2);
    let cf = cfg(TrainMode::MemSinks, 10);
    let (full, full_rows) = train(model(true), &c, cf.clone()).unwrap();
    let mut first = Trainer::new(model(true), &c, cf.clone()).unwrap();
    let mut rows = Vec::new();
    first.run(Some(4), |r| {
        rows.push(r.clone());
        Ok(())
    })
    .unwrap();
    let mut buf = Vec::new();
    first.save_checkpoint(&mut buf).unwrap();
    let mut second = Trainer::resume(buf.as_slice(), &c, cf).unwrap();
    assert_eq!(second.step, 4);
    second
        .run(None, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert!(second.model.bit_eq(&full));
    assert_eq!(rows, full_rows);
}

#[test]
fn tracked_sequence_loss_recorded_every_step() {
    let c = corpus(20, 2);
    let cf = TrainConfig {
        tracked_sequence: Some(0),
        ..cfg(TrainMode::Standard, 8)
    };
    let (_, rows) = train(model(false), &c, cf).unwrap();
    assert!(rows.iter().all(|r| r.tracked_seq_train_loss.is_some()));
}

#[test]
fn mode_and_model_must_agree() {
    let c = corpus(20, 2);
    assert!(matches!(
        Trainer::new(model(false), &c, cfg(TrainMode::MemSinks, 2)),
        Err(TrainError::Mismatch(_))
    ));
    assert!(matches!(
        Trainer::new(model(true), &c, cfg(TrainMode::Standard, 2)),
        Err(TrainError::Mismatch(_))
    ));
}
