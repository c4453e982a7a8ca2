//! Finite-difference verification of the reverse pass.

use crate::error::{Error, Result};

use super::{Precision, Tape, Tensor};

/// Compares the analytic gradient of `f` at `x` against central differences
/// `(f(x+h) - f(x-h)) / 2h` per coordinate and returns the maximum relative
/// error `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must be deterministic and side-effect free: it is evaluated once on a
/// tape-attached copy of `x` and twice per coordinate on detached copies.
/// Verification is a 64-bit affair; 32-bit inputs are rejected.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            what: format!("step size must be positive and finite, got {h}"),
        });
    }
    if x.precision() != Precision::F64 {
        return Err(Error::PrecisionMismatch { op: "grad_check" });
    }

    let tape = Tape::new();
    let xt = tape.var(&x.detach());
    let y = f(&xt)?;
    if y.len() != 1 {
        return Err(Error::NotScalar { op: "grad_check", shape: y.shape().to_vec() });
    }
    let grads = y.backward()?;
    let analytic = grads.wrt_or_zeros(&xt).values();

    let base = x.values();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape(), plus)?)?.scalar_value()?;
        let fm = f(&Tensor::from_vec(x.shape(), minus)?)?.scalar_value()?;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::concat;

    fn rng_vec(seed: u64, n: usize) -> Vec<f64> {
        // Small deterministic generator; keeps the checker's own tests free
        // of heavier dependencies.
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn two_layer_mlp_with_softmax_cross_entropy_matches_differences() {
        // Weights, biases, and the input are all folded into the single
        // checked vector so every backward rule in the chain is exercised.
        let (din, dh, dc) = (3, 5, 4);
        let n = din + din * dh + dh + dh * dc + dc;
        let x = Tensor::from_vec(&[n], rng_vec(7, n)).unwrap();
        let f = |v: &Tensor| {
            let inp = v.narrow(0, 0, din)?.reshape(&[1, din])?;
            let mut at = din;
            let w1 = v.narrow(0, at, din * dh)?.reshape(&[din, dh])?;
            at += din * dh;
            let b1 = v.narrow(0, at, dh)?;
            at += dh;
            let w2 = v.narrow(0, at, dh * dc)?.reshape(&[dh, dc])?;
            at += dh * dc;
            let b2 = v.narrow(0, at, dc)?;
            let hidden = inp.matmul(&w1)?.add_bias(&b1)?.relu()?;
            let logits = hidden.matmul(&w2)?.add_bias(&b2)?;
            let lsm = logits.log_softmax(1)?;
            // Cross entropy against class 2.
            lsm.narrow(1, 2, 1)?.reduce_sum(None)?.scale(-1.0)
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err:e}");
    }

    #[test]
    fn composed_ops_match_differences() {
        let x = Tensor::from_vec(&[2, 6], rng_vec(11, 12)).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![1.2, 0.8, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let f = move |v: &Tensor| {
            let a = v.narrow(1, 0, 3)?;
            let b = v.narrow(1, 3, 3)?;
            let ln = a.layer_norm(&gamma, &beta, 1e-5)?;
            let s = ln.add(&b.relu()?)?.softmax(1)?;
            let st = crate::tensor::stack(&[&s, &b], 0)?;
            let m = st.mul(&st)?.add_scalar(0.5)?.log()?;
            let joined = concat(&[&m.reshape(&[4, 3])?, &a.exp()?], 0)?;
            joined.gather_rows(&[1, 3, 5, 1])?.reduce_mean(None)
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err:e}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        // A deliberately wrong cotangent (scale by 1.02 on the way down)
        // must show up far above the acceptance threshold.
        let x = Tensor::from_vec(&[4], rng_vec(3, 4)).unwrap();
        let tape = Tape::new();
        let xt = tape.var(&x);
        let y = xt.mul(&xt).unwrap().reduce_sum(None).unwrap();
        let grads = y.backward().unwrap();
        let analytic: Vec<f64> = grads
            .wrt_or_zeros(&xt)
            .values()
            .iter()
            .map(|g| g * 1.02)
            .collect();
        let h = 1e-5;
        let base = x.values();
        let mut max_err = 0.0f64;
        for i in 0..base.len() {
            let numeric = ((base[i] + h).powi(2) - (base[i] - h).powi(2)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
        assert!(max_err >= 1e-2, "corruption went unnoticed: {max_err:e}");
    }

    #[test]
    fn rejects_non_scalar_outputs_and_bad_step() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|v| v.scale(2.0), &x, 1e-5).is_err());
        assert!(grad_check(|v| v.reduce_sum(None), &x, 0.0).is_err());
        assert!(grad_check(|v| v.reduce_sum(None), &x, -1e-5).is_err());
    }
}
