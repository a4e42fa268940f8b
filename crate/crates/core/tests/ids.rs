use memsinks::corpus::*;
use memsinks::seqid::*;
use proptest::prelude::*;

fn three_sigma(n: f64, p: f64) -> f64 {
    3.0 * (n * p * (1.0 - p)).sqrt()
}

#[test]
fn sink_mask_is_stable_across_reevaluation() {
    let spec = MaskSpec::new(512, 0.5, 0.3).unwrap();
    let id = hash_tokens(&[5, 17, 2, 9]);
    let first = sink_mask(id, &spec);
    for _ in 0..100_000 {
        assert_eq!(sink_mask(id, &spec), first);
    }
}

#[test]
fn pool_activation_and_overlap_counts() {
    let spec = MaskSpec::new(1024, 0.25, 0.3).unwrap();
    let pool = spec.pool_size() as f64;
    let shared = spec.shared_count();
    let p = spec.activation_ratio;
    let mut total_active = 0.0;
    let mut total_overlap = 0.0;
    let pairs = 1000u64;
    for i in 0..pairs {
        let a = sink_mask(SequenceId(splitmix64(2 * i)), &spec);
        let b = sink_mask(SequenceId(splitmix64(2 * i + 1)), &spec);
        let active = (a.active_count() - shared) as f64;
        total_active += active;
        let overlap = a.0[shared..].iter().zip(&b.0[shared..]).filter(|(x, y)| **x && **y).count() as f64;
        total_overlap += overlap;
    }
    // Per-pair counts are Binomial(pool, p) and Binomial(pool, p^2); the
    // totals over independent pairs are checked against their own 3 sigma.
    let n = pairs as f64 * pool;
    assert!((total_active - p * n).abs() <= three_sigma(n, p));
    assert!((total_overlap - p * p * n).abs() <= three_sigma(n, p * p));
}

#[test]
fn perturbation_count_is_binomial() {
    let ids: Vec<SequenceId> = (0..20_000).map(|i| SequenceId(i % 7)).collect();
    for d in [0.1, 0.5] {
        let out = perturb_occurrence_ids(&ids, d, 99).unwrap();
        let changed = ids.iter().zip(&out).filter(|(a, b)| a != b).count() as f64;
        let n = ids.len() as f64;
        assert!((changed - d * n).abs() <= three_sigma(n, d), "d={d}: {changed}");
    }
    assert_eq!(perturb_occurrence_ids(&ids, 0.0, 99).unwrap(), ids);
}

#[test]
fn perturbed_occurrences_get_distinct_fresh_ids() {
    let ids = vec![SequenceId(42); 2000];
    let out = perturb_occurrence_ids(&ids, 1.0, 3).unwrap();
    let unique: std::collections::HashSet<_> = out.iter().collect();
    assert_eq!(unique.len(), ids.len());
}

#[test]
fn canary_suffix_is_uniform() {
    let spec = CorpusSpec {
        vocab_size: 16,
        seq_len: 40,
        n_once: 0,
        n_repeated: 400,
        repetitions: 2,
        canary_len: 32,
        n_validation: 0,
        seed: 11,
        spacing: None,
    };
    let corpus = generate_corpus(&spec).unwrap();
    let mut counts = [0f64; 16];
    for d in &corpus.docs {
        assert_eq!(d.kind, DocKind::Canary);
        for &t in &d.tokens[spec.seq_len - spec.canary_len..] {
            counts[t as usize] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    let e = n / 16.0;
    let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    // 15 degrees of freedom, p = 0.001 critical value.
    assert!(chi2 < 37.70, "chi2 = {chi2}");
}

#[test]
fn dedup_run_sees_fewer_tokens() {
    let spec = CorpusSpec {
        vocab_size: 32,
        seq_len: 8,
        n_once: 50,
        n_repeated: 5,
        repetitions: 10,
        n_validation: 4,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let d = corpus.deduplicated();
    assert_eq!(corpus.n_tokens(), (50 + 50) * 8);
    assert_eq!(d.n_tokens(), (50 + 5) * 8);
}

fn doc_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..1000, 1..12), 0..10)
}

proptest! {
    #[test]
    fn pack_then_deinterleave_recovers_tokens_and_ids(docs in doc_strategy(), seed in any::<u64>()) {
        let docs: Vec<Document> = docs
            .into_iter()
            .map(|tokens| Document { tokens, kind: DocKind::Once, repetitions: 1 })
            .collect();
        let ids: Vec<Option<SequenceId>> = (0..docs.len()).map(|i| Some(SequenceId(splitmix64(seed ^ i as u64)))).collect();
        let stream = pack_interleaved(&docs, &ids).unwrap();
        let (toks, got_ids) = deinterleave(stream.words()).unwrap();
        let want_toks: Vec<u64> = docs.iter().flat_map(|d| d.tokens.iter().map(|&t| t as u64)).collect();
        let want_ids: Vec<u64> = docs.iter().zip(&ids).flat_map(|(d, id)| std::iter::repeat(id.unwrap().0).take(d.tokens.len())).collect();
        prop_assert_eq!(toks, want_toks);
        prop_assert_eq!(got_ids, want_ids);
    }

    #[test]
    fn perturbation_never_touches_tokens(n_docs in 1usize..20, doc_len in 1usize..6, d in 0.0f64..=1.0, seed in any::<u64>()) {
        let docs: Vec<Document> = (0..n_docs)
            .map(|i| Document { tokens: (0..doc_len as u32).map(|t| t + i as u32).collect(), kind: DocKind::Once, repetitions: 1 })
            .collect();
        let ids: Vec<Option<SequenceId>> = docs.iter().map(|d| Some(hash_tokens(&d.tokens))).collect();
        let stream = pack_interleaved(&docs, &ids).unwrap();
        let out = perturb_ids(&stream, doc_len, d, seed).unwrap();
        let (t0, _) = stream.split();
        let (t1, id1) = out.split();
        prop_assert_eq!(t0, t1);
        // Every occurrence keeps a single ID across its tokens.
        for chunk in id1.chunks(doc_len) {
            prop_assert!(chunk.iter().all(|&x| x == chunk[0]));
        }
    }

    #[test]
    fn schedule_is_the_expected_multiset(n_once in 0usize..40, n_rep in 0usize..5, reps in 2usize..6, seed in any::<u64>()) {
        let spec = CorpusSpec {
            vocab_size: 20,
            seq_len: 4,
            n_once,
            n_repeated: n_rep,
            repetitions: reps,
            n_validation: 0,
            seed,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut counts = vec![0usize; corpus.docs.len()];
        for &i in &corpus.schedule {
            counts[i] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            prop_assert_eq!(*c, corpus.docs[i].repetitions);
        }
        prop_assert_eq!(corpus.schedule.len(), n_once + n_rep * reps);
    }

    #[test]
    fn masks_depend_only_on_id(id in any::<u64>(), h in 8usize..200, g in 0.1f64..0.9, p in 0.05f64..1.0) {
        if let Ok(spec) = MaskSpec::new(h, g, p) {
            let a = sink_mask(SequenceId(id), &spec);
            prop_assert_eq!(&a, &sink_mask(SequenceId(id), &spec));
            prop_assert!(a.0[..spec.shared_count()].iter().all(|b| *b));
        }
    }
}
