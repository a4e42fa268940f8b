use super::{EngineError, Result, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GeLU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z = exps.iter().fold(0.0, |acc, v| acc + v);
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z = row.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
    let lse = max + z.ln();
    row.iter().map(|&v| v - lse).collect()
}

/// `-log softmax(logits)[target]` for a single logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    let vocab = logits.len();
    if target >= vocab {
        return Err(EngineError::TargetOutOfRange { target, vocab });
    }
    let loss = -log_softmax(logits.data())[target];
    if !loss.is_finite() {
        return Err(EngineError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok(loss)
}

/// `c (+)= op(a) * op(b)` for row-major buffers, where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. Transposition is expressed through strides only.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // a is stored m x k (or k x m when transposed); same for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the buffers whose lengths were
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[4]);
        let l = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let mut logits = Tensor::zeros(&[5]);
        logits.data_mut()[3] = 800.0;
        assert!(softmax_cross_entropy(&logits, 3).unwrap() < 1e-300);
    }

    #[test]
    fn target_out_of_range() {
        let logits = Tensor::zeros(&[3]);
        assert_eq!(
            softmax_cross_entropy(&logits, 3),
            Err(EngineError::TargetOutOfRange { target: 3, vocab: 3 })
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, -3.0, 700.0, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        // a^T b = [[1,3],[2,4]] [[5,6],[7,8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        // a b^T = [[17,23],[39,53]]
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}
