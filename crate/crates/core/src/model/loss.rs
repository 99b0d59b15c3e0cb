//! Training losses with learnable translation/rotation balance.
//!
//! Both losses are sums of L1 terms weighted by `exp(-beta)` for
//! translation and `exp(-gamma)` for rotation, plus one copy of `beta` and
//! `gamma` per term so the balance cannot collapse:
//!
//! ```text
//! d(p, p*) = |t - t*|_1 · e^{-beta} + beta + |r - r*|_1 · e^{-gamma} + gamma
//! ```
//!
//! The single-frame loss sums `d` over the batch. The multi-frame loss
//! additionally sums `d` over the relative poses of every ordered frame
//! pair inside each tuple, with relative pose defined componentwise as
//! `(t_i - t_j, r_i - r_j)`.

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

fn pose_constants(tape: &mut Tape, targets: &[Pose]) -> Result<(NodeId, NodeId)> {
    let n = targets.len();
    let mut t = Vec::with_capacity(n * 3);
    let mut r = Vec::with_capacity(n * 3);
    for p in targets {
        t.extend_from_slice(&p.t);
        r.extend_from_slice(&p.r);
    }
    Ok((
        tape.constant(Tensor::from_vec(&[n, 3], t)?),
        tape.constant(Tensor::from_vec(&[n, 3], r)?),
    ))
}

/// Sum of absolute differences between a prediction and a constant target.
fn l1_sum(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, target)?;
    let mag = tape.abs(diff)?;
    tape.sum(mag)
}

/// `e^{-w} · s + count · w` — one weighted error group of the loss.
fn weighted_term(tape: &mut Tape, s: NodeId, w: NodeId, count: usize) -> Result<NodeId> {
    let neg = tape.neg(w)?;
    let e = tape.exp(neg)?;
    let scaled = tape.mul(s, e)?;
    let reg = tape.scale(w, count as f64)?;
    tape.add(scaled, reg)
}

/// Single-frame loss: the weighted distance summed over `targets.len()`
/// frames. Prediction nodes must be `batch x 3`.
pub fn loss_single(
    tape: &mut Tape,
    pred_t: NodeId,
    pred_r: NodeId,
    targets: &[Pose],
    beta: NodeId,
    gamma: NodeId,
) -> Result<NodeId> {
    let b = targets.len();
    if b == 0 {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    if tape.value(pred_t).rows() != b || tape.value(pred_r).rows() != b {
        return Err(Error::shape(
            "loss_single",
            format!("{b} targets vs {} predictions", tape.value(pred_t).rows()),
        ));
    }
    let (tgt_t, tgt_r) = pose_constants(tape, targets)?;
    let st = l1_sum(tape, pred_t, tgt_t)?;
    let sr = l1_sum(tape, pred_r, tgt_r)?;
    let term_t = weighted_term(tape, st, beta, b)?;
    let term_r = weighted_term(tape, sr, gamma, b)?;
    tape.add(term_t, term_r)
}

/// Multi-frame loss: absolute terms over every frame in the batch plus
/// relative terms over all ordered pairs within each tuple. `tuples` holds
/// row indices into the batch; every tuple needs at least two frames.
pub fn loss_frame(
    tape: &mut Tape,
    pred_t: NodeId,
    pred_r: NodeId,
    targets: &[Pose],
    tuples: &[Vec<u32>],
    beta: NodeId,
    gamma: NodeId,
) -> Result<NodeId> {
    let b = targets.len();
    if b == 0 || tuples.is_empty() {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    if tape.value(pred_t).rows() != b || tape.value(pred_r).rows() != b {
        return Err(Error::shape(
            "loss_frame",
            format!("{b} targets vs {} predictions", tape.value(pred_t).rows()),
        ));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for tuple in tuples {
        if tuple.len() < 2 {
            return Err(Error::Invalid(
                "multi-frame loss needs tuples of at least 2 frames".into(),
            ));
        }
        for &row in tuple {
            if row as usize >= b {
                return Err(Error::Invalid(format!(
                    "tuple row {row} outside batch of {b}"
                )));
            }
        }
        for i in 0..tuple.len() {
            for j in 0..tuple.len() {
                if i != j {
                    src.push(tuple[i]);
                    dst.push(tuple[j]);
                }
            }
        }
    }
    let pairs = src.len();

    let (tgt_t, tgt_r) = pose_constants(tape, targets)?;
    let mut st = l1_sum(tape, pred_t, tgt_t)?;
    let mut sr = l1_sum(tape, pred_r, tgt_r)?;

    // Relative predictions and targets over the ordered pairs.
    let mut rel_t = Vec::with_capacity(pairs * 3);
    let mut rel_r = Vec::with_capacity(pairs * 3);
    for (&i, &j) in src.iter().zip(&dst) {
        let (a, b) = (&targets[i as usize], &targets[j as usize]);
        for d in 0..3 {
            rel_t.push(a.t[d] - b.t[d]);
        }
        for d in 0..3 {
            rel_r.push(a.r[d] - b.r[d]);
        }
    }
    let rel_t = tape.constant(Tensor::from_vec(&[pairs, 3], rel_t)?);
    let rel_r = tape.constant(Tensor::from_vec(&[pairs, 3], rel_r)?);

    let pt_i = tape.gather_rows(pred_t, &src)?;
    let pt_j = tape.gather_rows(pred_t, &dst)?;
    let pd_t = tape.sub(pt_i, pt_j)?;
    let pr_i = tape.gather_rows(pred_r, &src)?;
    let pr_j = tape.gather_rows(pred_r, &dst)?;
    let pd_r = tape.sub(pr_i, pr_j)?;

    let st_rel = l1_sum(tape, pd_t, rel_t)?;
    let sr_rel = l1_sum(tape, pd_r, rel_r)?;
    st = tape.add(st, st_rel)?;
    sr = tape.add(sr, sr_rel)?;

    let count = b + pairs;
    let term_t = weighted_term(tape, st, beta, count)?;
    let term_r = weighted_term(tape, sr, gamma, count)?;
    tape.add(term_t, term_r)
}
