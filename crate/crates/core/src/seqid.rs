//! Sequence IDs, the linear-congruential generator and sink-mask derivation.
//!
//! Every constant here is part of the on-disk/in-process contract and is
//! listed in `FORMATS.md` so ports in other languages stay bit-compatible.

use thiserror::Error;

use crate::corpus::InterleavedStream;

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

pub const LCG_MULTIPLIER: u64 = 6_364_136_223_846_793_005;
pub const LCG_INCREMENT: u64 = 1_442_695_040_888_963_407;

/// Golden-ratio increment used to fold the neuron index into the mix input.
pub const MIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Number of high bits of an LCG output used for a Bernoulli draw.
pub const BERNOULLI_BITS: u32 = 33;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("shared fraction must lie in (0, 1), got {0}")]
    SharedFraction(f64),
    #[error("activation ratio must lie in (0, 1], got {0}")]
    ActivationRatio(f64),
    #[error("hidden size {hidden} leaves an empty shared block or sink pool at g = {g}")]
    EmptyBlock { hidden: usize, g: f64 },
    #[error("perturbation probability must lie in [0, 1], got {0}")]
    NoiseProbability(f64),
    #[error("document length must be positive")]
    ZeroDocLength,
    #[error("stream of {tokens} tokens is not a whole number of {doc_len}-token documents")]
    RaggedStream { tokens: usize, doc_len: usize },
}

/// 64-bit identifier shared by byte-identical documents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceId(pub u64);

/// FNV-1a over the little-endian `u32` encoding of each token.
pub fn hash_tokens(tokens: &[u32]) -> SequenceId {
    let mut h = FNV_OFFSET_BASIS;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    SequenceId(h)
}

/// One step of the 64-bit LCG. Returns the new state, which doubles as the
/// output value.
pub fn lcg_step(state: u64) -> (u64, u64) {
    let next = state
        .wrapping_mul(LCG_MULTIPLIER)
        .wrapping_add(LCG_INCREMENT);
    (next, next)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the draw of neuron `index` under sequence `id`.
pub fn mix(id: u64, index: u64) -> u64 {
    splitmix64(id.wrapping_add(index.wrapping_add(1).wrapping_mul(MIX_GAMMA)))
}

/// Threshold on the top [`BERNOULLI_BITS`] bits for success probability `p`.
fn bernoulli_threshold(p: f64) -> u64 {
    let scale = (1u64 << BERNOULLI_BITS) as f64;
    (p * scale).floor() as u64
}

/// Bernoulli(p) draw from a single LCG output.
pub fn bernoulli_from(value: u64, p: f64) -> bool {
    (value >> (64 - BERNOULLI_BITS)) < bernoulli_threshold(p)
}

/// Uniform `[0, 1)` value from the top 53 bits of an LCG output.
pub fn unit_from(value: u64) -> f64 {
    (value >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Shape of a sequence-tied mask over one MLP hidden layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub hidden_size: usize,
    pub shared_fraction: f64,
    pub activation_ratio: f64,
}

impl MaskSpec {
    pub fn new(hidden_size: usize, shared_fraction: f64, activation_ratio: f64) -> Result<Self, MaskError> {
        let spec = Self {
            hidden_size,
            shared_fraction,
            activation_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let g = self.shared_fraction;
        if !(g > 0.0 && g < 1.0) {
            return Err(MaskError::SharedFraction(g));
        }
        let p = self.activation_ratio;
        if !(p > 0.0 && p <= 1.0) {
            return Err(MaskError::ActivationRatio(p));
        }
        let shared = self.shared_count();
        if shared < 1 || shared >= self.hidden_size {
            return Err(MaskError::EmptyBlock {
                hidden: self.hidden_size,
                g,
            });
        }
        Ok(())
    }

    /// `floor(g * H)` leading neurons that are always active.
    pub fn shared_count(&self) -> usize {
        (self.shared_fraction * self.hidden_size as f64).floor() as usize
    }

    pub fn pool_size(&self) -> usize {
        self.hidden_size - self.shared_count()
    }
}

/// Boolean activity over the hidden layer for one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SinkMask(pub Vec<bool>);

impl SinkMask {
    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Deterministic sequence-tied mask: shared prefix on, each pool neuron on
/// with probability `p` drawn from the LCG seeded by `mix(id, neuron)`.
pub fn sink_mask(id: SequenceId, spec: &MaskSpec) -> SinkMask {
    let shared = spec.shared_count();
    let p = spec.activation_ratio;
    let bits = (0..spec.hidden_size)
        .map(|j| {
            if j < shared {
                true
            } else {
                let (_, v) = lcg_step(mix(id.0, j as u64));
                bernoulli_from(v, p)
            }
        })
        .collect();
    SinkMask(bits)
}

/// ID of occurrence number `occ` after noise: kept with probability `1 - d`,
/// otherwise replaced by a fresh pseudo-random ID.
pub fn perturb_occurrence(id: SequenceId, d: f64, seed: u64, occ: u64) -> SequenceId {
    let (_, v) = lcg_step(mix(seed, occ));
    if unit_from(v) < d {
        let (_, fresh) = lcg_step(mix(seed ^ 0xA5A5_A5A5_A5A5_A5A5, occ));
        SequenceId(splitmix64(fresh))
    } else {
        id
    }
}

fn check_noise(d: f64) -> Result<(), MaskError> {
    if (0.0..=1.0).contains(&d) {
        Ok(())
    } else {
        Err(MaskError::NoiseProbability(d))
    }
}

/// Re-draws each document occurrence's ID with probability `d`.
///
/// The stream is read as consecutive `doc_len`-token occurrences; every token
/// of a perturbed occurrence receives the same fresh ID. Tokens are untouched.
pub fn perturb_ids(
    stream: &InterleavedStream,
    doc_len: usize,
    d: f64,
    seed: u64,
) -> Result<InterleavedStream, MaskError> {
    check_noise(d)?;
    if doc_len == 0 {
        return Err(MaskError::ZeroDocLength);
    }
    let n_tokens = stream.n_tokens();
    if n_tokens % doc_len != 0 {
        return Err(MaskError::RaggedStream {
            tokens: n_tokens,
            doc_len,
        });
    }
    let mut words = stream.words().to_vec();
    for occ in 0..n_tokens / doc_len {
        let first = words[2 * occ * doc_len + 1];
        let new = perturb_occurrence(SequenceId(first), d, seed, occ as u64).0;
        if new != first {
            for t in occ * doc_len..(occ + 1) * doc_len {
                words[2 * t + 1] = new;
            }
        }
    }
    Ok(InterleavedStream::from_words(words).expect("even length preserved"))
}

/// Per-occurrence form of [`perturb_ids`].
pub fn perturb_occurrence_ids(ids: &[SequenceId], d: f64, seed: u64) -> Result<Vec<SequenceId>, MaskError> {
    check_noise(d)?;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(occ, &id)| perturb_occurrence(id, d, seed, occ as u64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_hash_is_offset_basis() {
        assert_eq!(hash_tokens(&[]), SequenceId(14_695_981_039_346_656_037));
    }

    #[test]
    fn hash_is_order_sensitive() {
        assert_ne!(hash_tokens(&[1, 2]), hash_tokens(&[2, 1]));
        assert_eq!(hash_tokens(&[1, 2]), hash_tokens(&[1, 2]));
    }

    #[test]
    fn hash_matches_bytewise_reference() {
        // byte-at-a-time FNV-1a over 01 00 00 00 02 00 00 00
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in [1u8, 0, 0, 0, 2, 0, 0, 0] {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        assert_eq!(hash_tokens(&[1, 2]).0, h);
    }

    #[test]
    fn lcg_from_zero_gives_increment() {
        assert_eq!(lcg_step(0), (LCG_INCREMENT, LCG_INCREMENT));
    }

    #[test]
    fn lcg_no_repeat_in_2_pow_20_steps() {
        let mut s = 0u64;
        let mut seen = Vec::with_capacity(1 << 20);
        for _ in 0..(1 << 20) {
            s = lcg_step(s).0;
            seen.push(s);
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1 << 20);
    }

    #[test]
    fn lcg_high_bit_monobit() {
        let mut s = 12345u64;
        let mut ones = 0u32;
        let n = 1_000_000;
        for _ in 0..n {
            s = lcg_step(s).0;
            ones += (s >> 63) as u32;
        }
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn full_ratio_activates_everything() {
        let spec = MaskSpec::new(50, 0.7, 1.0).unwrap();
        for id in 0..100 {
            assert_eq!(sink_mask(SequenceId(id), &spec).active_count(), 50);
        }
    }

    #[test]
    fn shared_prefix_always_on() {
        let spec = MaskSpec::new(40, 0.25, 0.1).unwrap();
        for id in 0..200u64 {
            let m = sink_mask(SequenceId(splitmix64(id)), &spec);
            assert!(m.0[..10].iter().all(|b| *b));
        }
    }

    #[test]
    fn mask_spec_rejects_degenerate() {
        assert!(MaskSpec::new(10, 0.0, 0.3).is_err());
        assert!(MaskSpec::new(10, 0.7, 0.0).is_err());
        assert!(MaskSpec::new(10, 0.7, 1.5).is_err());
        assert!(MaskSpec::new(10, 0.05, 0.3).is_err());
        assert!(MaskSpec::new(2, 0.4, 0.3).is_err());
    }

    #[test]
    fn perturb_rejects_bad_probability() {
        assert_eq!(
            perturb_occurrence_ids(&[SequenceId(1)], 1.5, 0),
            Err(MaskError::NoiseProbability(1.5))
        );
    }
}
