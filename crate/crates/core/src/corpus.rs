//! Synthetic pretraining corpora and the interleaved token/ID stream format.
//!
//! Documents are drawn from a seeded order-2 Markov chain. Each context
//! `(a, b)` picks one of two successor lists of `b` by the parity of `a`, so
//! the language has learnable structure (a bigram table plus one bit of
//! longer context) and a known per-token entropy floor.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqid::{hash_tokens, SequenceId};

pub const STREAM_MAGIC: &[u8; 4] = b"MSTR";
pub const STREAM_VERSION: u32 = 1;

/// Successor weights shared by every context of the Markov chain.
pub const SUCCESSOR_WEIGHTS: [f64; 4] = [0.5, 0.25, 0.15, 0.1];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("deinterleave needs an even-length slice, got {0}")]
    OddLength(usize),
    #[error("document {0} has no assigned sequence id")]
    MissingId(usize),
    #[error("bad stream header: {0}")]
    BadHeader(String),
    #[error("token {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: u64, vocab: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocKind {
    Once,
    Repeated,
    Canary,
}

impl DocKind {
    pub fn is_repeated(self) -> bool {
        !matches!(self, DocKind::Once)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<u32>,
    pub kind: DocKind,
    pub repetitions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdMode {
    /// FNV-1a hash of the document tokens.
    Hash,
    /// Index of the unique document.
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_once: usize,
    pub n_repeated: usize,
    pub repetitions: usize,
    /// Length of the random suffix on repeated documents; 0 keeps them natural.
    pub canary_len: usize,
    pub n_validation: usize,
    pub seed: u64,
    /// Place repeated occurrences at every `spacing`-th schedule slot instead
    /// of shuffling them uniformly.
    pub spacing: Option<usize>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            seq_len: 64,
            n_once: 5000,
            n_repeated: 50,
            repetitions: 64,
            canary_len: 0,
            n_validation: 500,
            seed: 0,
            spacing: None,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size must fit in u32");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be >= 2");
        }
        if self.n_repeated > 0 && self.repetitions < 2 {
            return bad("repetitions must be >= 2 when repeated documents exist");
        }
        if self.canary_len >= self.seq_len {
            return bad("canary_len must be shorter than seq_len");
        }
        if self.spacing == Some(0) {
            return bad("spacing must be positive");
        }
        Ok(())
    }
}

/// Seeded order-2 Markov chain over the vocabulary.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    vocab: usize,
    /// `succ[b][parity]` lists the candidate successors of context `(a, b)`.
    succ: Vec<[[u32; 4]; 2]>,
}

impl MarkovChain {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D41_524B_4F56);
        let succ = (0..vocab)
            .map(|_| {
                let mut draw = || {
                    let mut c = [0u32; 4];
                    for slot in c.iter_mut() {
                        *slot = rng.gen_range(0..vocab as u32);
                    }
                    c
                };
                [draw(), draw()]
            })
            .collect();
        Self { vocab, succ }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Next-token distribution for context `(a, b)` as a dense vector.
    pub fn next_distribution(&self, a: u32, b: u32) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab];
        for (t, w) in self.succ[b as usize][(a & 1) as usize].iter().zip(SUCCESSOR_WEIGHTS) {
            p[*t as usize] += w;
        }
        p
    }

    fn sample_next(&self, a: u32, b: u32, rng: &mut impl Rng) -> u32 {
        let cands = &self.succ[b as usize][(a & 1) as usize];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (t, w) in cands.iter().zip(SUCCESSOR_WEIGHTS) {
            acc += w;
            if u < acc {
                return *t;
            }
        }
        cands[3]
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = if i < 2 {
                rng.gen_range(0..self.vocab as u32)
            } else {
                self.sample_next(out[i - 2], out[i - 1], rng)
            };
            out.push(t);
        }
        out
    }
}

/// Unique training documents, their occurrence schedule and a held-out set.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub docs: Vec<Document>,
    pub validation: Vec<Document>,
    /// Training order as indices into `docs`.
    pub schedule: Vec<usize>,
}

impl Corpus {
    /// Documents in schedule order, one entry per occurrence.
    pub fn occurrences(&self) -> Vec<Document> {
        self.schedule.iter().map(|&i| self.docs[i].clone()).collect()
    }

    pub fn repeated_docs(&self) -> Vec<&Document> {
        self.docs.iter().filter(|d| d.kind.is_repeated()).collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.schedule.iter().map(|&i| self.docs[i].tokens.len()).sum()
    }

    /// Sequence ID of every unique document under `mode`.
    pub fn doc_ids(&self, mode: IdMode) -> Vec<SequenceId> {
        self.docs
            .iter()
            .enumerate()
            .map(|(i, d)| match mode {
                IdMode::Hash => hash_tokens(&d.tokens),
                IdMode::Sequential => SequenceId(i as u64),
            })
            .collect()
    }

    /// Schedule restricted to the first occurrence of every repeated document.
    pub fn deduplicated(&self) -> Corpus {
        let mut seen = HashSet::new();
        let schedule = self
            .schedule
            .iter()
            .copied()
            .filter(|&i| !self.docs[i].kind.is_repeated() || seen.insert(i))
            .collect();
        Corpus {
            schedule,
            ..self.clone()
        }
    }

    /// Packs the schedule into an interleaved stream.
    pub fn to_stream(&self, mode: IdMode) -> Result<InterleavedStream, CorpusError> {
        let ids = self.doc_ids(mode);
        let occ = self.occurrences();
        let occ_ids: Vec<Option<SequenceId>> = self.schedule.iter().map(|&i| Some(ids[i])).collect();
        pack_interleaved(&occ, &occ_ids)
    }
}

/// Builds the corpus described by `spec`. Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let chain = MarkovChain::new(spec.vocab_size, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kind = if spec.canary_len > 0 {
        DocKind::Canary
    } else {
        DocKind::Repeated
    };
    let mut docs = Vec::with_capacity(spec.n_repeated + spec.n_once);
    for _ in 0..spec.n_repeated {
        let mut tokens = chain.sample(spec.seq_len, &mut rng);
        let start = spec.seq_len - spec.canary_len;
        for t in tokens[start..].iter_mut() {
            *t = rng.gen_range(0..spec.vocab_size as u32);
        }
        docs.push(Document {
            tokens,
            kind,
            repetitions: spec.repetitions,
        });
    }
    for _ in 0..spec.n_once {
        docs.push(Document {
            tokens: chain.sample(spec.seq_len, &mut rng),
            kind: DocKind::Once,
            repetitions: 1,
        });
    }
    let train_set: HashSet<&[u32]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    let mut validation = Vec::with_capacity(spec.n_validation);
    while validation.len() < spec.n_validation {
        let tokens = chain.sample(spec.seq_len, &mut rng);
        if train_set.contains(tokens.as_slice()) {
            continue;
        }
        validation.push(Document {
            tokens,
            kind: DocKind::Once,
            repetitions: 1,
        });
    }
    let schedule = build_schedule(spec, &mut rng)?;
    Ok(Corpus {
        vocab_size: spec.vocab_size,
        seq_len: spec.seq_len,
        docs,
        validation,
        schedule,
    })
}

fn build_schedule(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, CorpusError> {
    let n_rep = spec.n_repeated;
    let mut once: Vec<usize> = (n_rep..n_rep + spec.n_once).collect();
    let reps = if n_rep > 0 { spec.repetitions } else { 0 };
    match spec.spacing {
        None => {
            let mut all = once;
            for r in 0..n_rep {
                all.extend(std::iter::repeat(r).take(reps));
            }
            all.shuffle(rng);
            Ok(all)
        }
        Some(spacing) => {
            once.shuffle(rng);
            let total = once.len() + n_rep * reps;
            let mut slots: Vec<Option<usize>> = vec![None; total];
            let mut occ = 0usize;
            for rep in 0..reps {
                for r in 0..n_rep {
                    let at = occ * spacing;
                    if at >= total {
                        return Err(CorpusError::InvalidSpec(format!(
                            "spacing {spacing} needs more once documents to place occurrence {} of doc {r}",
                            rep + 1
                        )));
                    }
                    slots[at] = Some(r);
                    occ += 1;
                }
            }
            let mut once_iter = once.into_iter();
            Ok(slots
                .into_iter()
                .map(|s| s.unwrap_or_else(|| once_iter.next().expect("slot count matches")))
                .collect())
        }
    }
}

/// Keeps the first occurrence of each repeated or canary document; once
/// documents pass through untouched. Order is preserved.
pub fn dedup(docs: &[Document]) -> Vec<Document> {
    let mut seen: HashSet<&[u32]> = HashSet::new();
    docs.iter()
        .filter(|d| !d.kind.is_repeated() || seen.insert(d.tokens.as_slice()))
        .cloned()
        .collect()
}

/// Byte-level tokenisation of UTF-8 text into `seq_len`-token documents.
/// A trailing partial chunk is dropped.
pub fn ingest_text(text: &str, seq_len: usize) -> Vec<Document> {
    text.as_bytes()
        .chunks_exact(seq_len.max(1))
        .map(|c| Document {
            tokens: c.iter().map(|&b| u32::from(b)).collect(),
            kind: DocKind::Once,
            repetitions: 1,
        })
        .collect()
}

/// Tokens at even positions, each followed by its 64-bit sequence ID.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InterleavedStream {
    words: Vec<u64>,
}

impl InterleavedStream {
    pub fn from_words(words: Vec<u64>) -> Result<Self, CorpusError> {
        if words.len() % 2 != 0 {
            return Err(CorpusError::OddLength(words.len()));
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn n_tokens(&self) -> usize {
        self.words.len() / 2
    }

    /// Splits the whole stream into tokens and IDs.
    pub fn split(&self) -> (Vec<u64>, Vec<u64>) {
        deinterleave(&self.words).expect("stream length is even")
    }

    pub fn write_to(&self, vocab_size: u32, mut w: impl Write) -> Result<(), CorpusError> {
        let mut header = [0u8; 16];
        header[..4].copy_from_slice(STREAM_MAGIC);
        header[4..8].copy_from_slice(&STREAM_VERSION.to_le_bytes());
        header[8..12].copy_from_slice(&vocab_size.to_le_bytes());
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.words.len() * 8);
        for v in &self.words {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a stream file, returning it with the recorded vocabulary size.
    pub fn read_from(mut r: impl Read) -> Result<(Self, u32), CorpusError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| CorpusError::BadHeader(e.to_string()))?;
        if &header[..4] != STREAM_MAGIC {
            return Err(CorpusError::BadHeader("magic is not MSTR".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STREAM_VERSION {
            return Err(CorpusError::BadHeader(format!("unsupported version {version}")));
        }
        let vocab = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % 16 != 0 {
            return Err(CorpusError::BadHeader("body is not a whole number of token/id pairs".into()));
        }
        let words: Vec<u64> = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for t in words.iter().step_by(2) {
            if *t >= u64::from(vocab) {
                return Err(CorpusError::TokenOutOfRange { token: *t, vocab });
            }
        }
        Ok((Self { words }, vocab))
    }
}

/// Concatenates documents in order, tagging each token with its document's ID.
pub fn pack_interleaved(docs: &[Document], ids: &[Option<SequenceId>]) -> Result<InterleavedStream, CorpusError> {
    let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
    let mut words = Vec::with_capacity(2 * total);
    for (i, d) in docs.iter().enumerate() {
        let id = ids.get(i).copied().flatten().ok_or(CorpusError::MissingId(i))?;
        for &t in &d.tokens {
            words.push(u64::from(t));
            words.push(id.0);
        }
    }
    Ok(InterleavedStream { words })
}

/// `(tokens, ids)` from even and odd positions of `slice`.
pub fn deinterleave(slice: &[u64]) -> Result<(Vec<u64>, Vec<u64>), CorpusError> {
    if slice.len() % 2 != 0 {
        return Err(CorpusError::OddLength(slice.len()));
    }
    let tokens = slice.iter().step_by(2).copied().collect();
    let ids = slice.iter().skip(1).step_by(2).copied().collect();
    Ok((tokens, ids))
}
