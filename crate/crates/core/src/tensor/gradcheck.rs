//! Central finite-difference checks for the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Result, Tape, Tensor, Var};

/// Relative error between an analytic and a numeric gradient, with an
/// absolute floor so entries that are both near zero do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Largest relative error over every entry of every parameter.
///
/// `f` records a scalar loss from the parameter leaves on a fresh tape.
pub fn check_gradients<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)?.data()[0])
    };
    let mut tape = Tape::new();
    let vars = params.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect::<Result<Vec<_>>>()?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let x = p.data()[i];
            probe[pi].data_mut()[i] = x + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[i] = x - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// A small random network exercising every differentiable op of the tape:
/// embedding, layer norm, matmul, bias add, causal attention, residual add,
/// GeLU, elementwise product, column scaling, scaling and cross-entropy.
pub struct RandomNet {
    pub params: Vec<Tensor>,
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

impl RandomNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let heads = rng.gen_range(1..=2);
        let d = heads * rng.gen_range(2..=3);
        let vocab = rng.gen_range(3..=5);
        let batch = rng.gen_range(1..=2);
        let seq = rng.gen_range(2..=3);
        let hidden = rng.gen_range(3..=5);
        let mut normal = |shape: &[usize], scale: f64| {
            Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let params = vec![
            normal(&[vocab, d], 0.8),
            Tensor::from_fn(&[d], |_| 1.0 + 0.3 * rng2.sample::<f64, _>(StandardNormal)),
            normal(&[d], 0.3),
            normal(&[d, 3 * d], 0.6),
            normal(&[3 * d], 0.2),
            normal(&[d, hidden], 0.6),
            normal(&[d, hidden], 0.6),
            normal(&[hidden], 0.5),
            normal(&[hidden, vocab], 0.6),
        ];
        let n = batch * seq;
        let tokens = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
        let targets = (0..n)
            .map(|i| (i % seq != seq - 1 || rng.gen_bool(0.5)).then(|| rng.gen_range(0..vocab)))
            .collect();
        Self {
            params,
            tokens,
            targets,
            batch,
            seq,
            heads,
        }
    }

    pub fn record(&self, tape: &mut Tape, p: &[Var]) -> Result<Var> {
        let x = tape.embedding(p[0], &self.tokens)?;
        let h = tape.layer_norm(x, p[1], p[2])?;
        let qkv = tape.matmul(h, p[3])?;
        let qkv = tape.add_row(qkv, p[4])?;
        let a = tape.causal_attention(qkv, self.batch, self.seq, self.heads)?;
        let r = tape.add(x, a)?;
        let u = tape.matmul(r, p[5])?;
        let u = tape.gelu(u)?;
        let v = tape.matmul(r, p[6])?;
        let m = tape.mul(u, v)?;
        let m = tape.scale_cols(m, p[7])?;
        let m = tape.scale(m, 0.7)?;
        let logits = tape.matmul(m, p[8])?;
        tape.cross_entropy(logits, &self.targets)
    }

    /// Worst relative error of the tape gradient against central differences.
    pub fn check(&self) -> Result<f64> {
        check_gradients(&self.params, 1e-5, |t, p| self.record(t, p))
    }
}
