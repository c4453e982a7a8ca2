//! Dot-product alignment between point features and class features, the
//! two training losses, and argmax inference.
//!
//! The supervised term is the mean over labeled points of the negative
//! log-probability of the true class, with the partition running over every
//! class (seen and unseen). The unlabeled term is the mean over unlabeled
//! points of the log of their total seen-class probability mass; minimizing
//! it pushes unlabeled points away from the seen prototypes. Both terms are
//! built from tape ops, so they are differentiable end to end.

use crate::error::{Error, Result};
use crate::semantic_space::UNLABELED;
use crate::tensor::Tensor;

/// `S[t, c] = F[t] . E[c]` for `F: [T, d]`, `E: [C, d]`.
pub fn similarity_matrix(f: &Tensor, e: &Tensor) -> Result<Tensor> {
    f.matmul_nt(e)
}

fn check_labels(op: &'static str, s: &Tensor, labels: &[u32]) -> Result<(usize, usize)> {
    if s.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: s.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    let (t, c) = (s.shape()[0], s.shape()[1]);
    if labels.len() != t {
        return Err(Error::InvalidArgument {
            op,
            what: format!("{} labels for {t} rows", labels.len()),
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= c) {
        return Err(Error::IndexOutOfBounds {
            op,
            index: *l as usize,
            bound: c,
        });
    }
    Ok((t, c))
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument {
            op,
            what: format!("temperature must be positive and finite, got {tau}"),
        });
    }
    Ok(())
}

/// Mean over labeled points of `-log softmax(S/tau)[t, y_t]`, the partition
/// running over all classes. Errors when no point is labeled.
pub fn loss_seen(s: &Tensor, labels: &[u32], tau: f64) -> Result<Tensor> {
    check_tau("loss_seen", tau)?;
    let (t, c) = check_labels("loss_seen", s, labels)?;
    let n_labeled = labels.iter().filter(|&&l| l != UNLABELED).count();
    if n_labeled == 0 {
        return Err(Error::Undefined {
            what: "supervised loss over zero labeled points".into(),
        });
    }
    let lsm = s.scale(1.0 / tau)?.log_softmax(1)?;
    let mut mask = vec![0.0; t * c];
    for (i, &l) in labels.iter().enumerate() {
        if l != UNLABELED {
            mask[i * c + l as usize] = 1.0;
        }
    }
    let mask = Tensor::from_vec_p(&[t, c], mask, s.precision())?;
    lsm.mul(&mask)?
        .reduce_sum(None)?
        .scale(-1.0 / n_labeled as f64)
}

/// Additive bias that removes a column from a log-sum-exp: after shifting a
/// column this far down, its exponential underflows to exactly zero at both
/// working precisions, so the column contributes neither value nor gradient.
const UNSEEN_COLUMN_BIAS: f64 = -1e4;

/// Mean over unlabeled points of `log(sum of seen-class softmax mass)`,
/// always ≤ 0. Returns the scalar loss and the number of unlabeled points;
/// with no unlabeled points the loss is a constant zero and the caller
/// should log that the term was skipped.
///
/// Computed as a difference of log-sum-exps — `LSE(z over seen) − LSE(z)`
/// with `z = S/τ` — so the value and its gradients stay finite even when
/// the seen-class mass itself underflows at working precision.
pub fn loss_unseen(
    s: &Tensor,
    labels: &[u32],
    seen_mask: &[bool],
    tau: f64,
) -> Result<(Tensor, usize)> {
    check_tau("loss_unseen", tau)?;
    let (t, c) = check_labels("loss_unseen", s, labels)?;
    if seen_mask.len() != c {
        return Err(Error::InvalidArgument {
            op: "loss_unseen",
            what: format!("{} seen flags for {c} classes", seen_mask.len()),
        });
    }
    let unlabeled: Vec<usize> = (0..t).filter(|&i| labels[i] == UNLABELED).collect();
    if unlabeled.is_empty() {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let Some(anchor) = seen_mask.iter().position(|&m| m) else {
        return Err(Error::Undefined {
            what: "seen-class mass over an empty seen set".into(),
        });
    };
    let count = unlabeled.len();
    // log Σ_{c seen} p[t,c] = LSE over the seen columns of log_softmax(S/τ).
    // The unseen columns are shifted out of the sum, and the row LSE is read
    // off a second log-softmax at a seen column via the identity
    // x[j] − log_softmax(x)[j] = LSE(x) for every j.
    let lsm = s.scale(1.0 / tau)?.log_softmax(1)?;
    let gate: Vec<f64> = seen_mask
        .iter()
        .map(|&m| if m { 0.0 } else { UNSEEN_COLUMN_BIAS })
        .collect();
    let gate = Tensor::from_vec_p(&[c], gate, s.precision())?;
    let masked = lsm.add_bias(&gate)?;
    let lsm2 = masked.log_softmax(1)?;
    let lse = masked
        .narrow(1, anchor, 1)?
        .sub(&lsm2.narrow(1, anchor, 1)?)?;
    let loss = lse.gather_rows(&unlabeled)?.reduce_mean(None)?;
    Ok((loss, count))
}

/// `L = L_s + L_u`, no weighting.
pub fn loss_total(ls: &Tensor, lu: &Tensor) -> Result<Tensor> {
    ls.add(lu)
}

/// Per-point argmax over classes; ties break toward the lowest index.
/// Softmax is strictly monotone, so this equals the argmax of the softmax.
pub fn predict(s: &Tensor) -> Result<Vec<u32>> {
    if s.rank() != 2 || s.shape()[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "predict",
            left: s.shape().to_vec(),
            right: vec![0, 1],
        });
    }
    let (t, c) = (s.shape()[0], s.shape()[1]);
    let v = s.values();
    let mut out = Vec::with_capacity(t);
    for row in 0..t {
        let vals = &v[row * c..(row + 1) * c];
        let mut best = 0usize;
        for (i, &x) in vals.iter().enumerate().skip(1) {
            if x > vals[best] {
                best = i;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}
