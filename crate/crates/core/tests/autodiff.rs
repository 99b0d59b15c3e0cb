//! Finite-difference validation of every tape operation.
//!
//! Each test builds a small graph ending in a scalar, runs one reverse
//! sweep, and compares every input gradient against central differences
//! `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5`. Inputs are drawn away from
//! the kinks of `abs`/`relu`/`max` so both sides of the difference stay on
//! the same linear piece. Operations with frozen randomness (dropout) or
//! frozen selections (max aggregation) are rebuilt with the same seed, so
//! the finite difference probes the same fixed subgradient the tape uses.

use orgpose_core::numerics::tape::{NodeId, Reduce, Tape};
use orgpose_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Uniform magnitudes in `[0.25, 1.5]` with random signs: large enough
/// that a `±h` probe never crosses zero.
fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data: Vec<f64> = (0..r * c)
        .map(|_| {
            let mag = rng.random_range(0.25..1.5);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(&[r, c], data).unwrap()
}

/// Positive magnitudes in `[0.25, 1.5]` (for batch-norm scale inputs).
fn rand_pos(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.25..1.5)).collect();
    Tensor::from_vec(&[1, n], data).unwrap()
}

/// Dots a node with a fixed ramp of distinct constants and sums, so every
/// output element receives a different upstream gradient.
fn scalar_head(tape: &mut Tape, x: NodeId) -> NodeId {
    let n = tape.value(x).len();
    let shape = tape.value(x).shape().to_vec();
    let ramp: Vec<f64> = (0..n).map(|i| 0.3 + 0.05 * i as f64).collect();
    let c = tape.constant(Tensor::from_vec(&shape, ramp).unwrap());
    let prod = tape.mul(x, c).unwrap();
    tape.sum(prod).unwrap()
}

fn forward_value(leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    tape.value(root).item().unwrap()
}

/// Asserts that reverse-mode gradients of `build`'s scalar output match
/// central differences for every element of every leaf.
fn check_grads(name: &str, leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let root = build(&mut tape, &ids);
    tape.backward(root).unwrap();
    let grads: Vec<Tensor> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, t)| tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += H;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= H;
            let fd = (forward_value(&plus, build) - forward_value(&minus, build)) / (2.0 * H);
            let ad = grads[li].data()[e];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            assert!(
                rel <= TOL,
                "{name}: leaf {li} element {e}: reverse {ad} vs central {fd} (rel {rel:.3e})"
            );
        }
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let leaves = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)];
    check_grads("matmul", &leaves, &|tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn bias_and_elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let leaves = vec![rand_mat(&mut rng, 3, 4), rand_pos(&mut rng, 4)];
    check_grads("add_bias", &leaves, &|tape, ids| {
        let y = tape.add_bias(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });

    let pair = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 3, 4)];
    check_grads("add", &pair, &|tape, ids| {
        let y = tape.add(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("sub", &pair, &|tape, ids| {
        let y = tape.sub(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("mul", &pair, &|tape, ids| {
        let y = tape.mul(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = vec![rand_mat(&mut rng, 4, 3)];
    check_grads("scale", &leaves, &|tape, ids| {
        let y = tape.scale(ids[0], -0.7).unwrap();
        scalar_head(tape, y)
    });
    check_grads("neg", &leaves, &|tape, ids| {
        let y = tape.neg(ids[0]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("exp", &leaves, &|tape, ids| {
        let y = tape.exp(ids[0]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("abs", &leaves, &|tape, ids| {
        let y = tape.abs(ids[0]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("relu", &leaves, &|tape, ids| {
        let y = tape.relu(ids[0]).unwrap();
        scalar_head(tape, y)
    });
    check_grads("sum", &leaves, &|tape, ids| tape.sum(ids[0]).unwrap());
}

#[test]
fn concat_slice_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let parts = vec![
        rand_mat(&mut rng, 3, 2),
        rand_mat(&mut rng, 3, 3),
        rand_mat(&mut rng, 3, 1),
    ];
    check_grads("concat_cols", &parts, &|tape, ids| {
        let y = tape.concat_cols(ids).unwrap();
        scalar_head(tape, y)
    });

    let leaves = vec![rand_mat(&mut rng, 5, 3)];
    check_grads("slice_rows", &leaves, &|tape, ids| {
        let y = tape.slice_rows(ids[0], 1, 3).unwrap();
        scalar_head(tape, y)
    });

    // Repeated indices force gradient accumulation into the same source row.
    let leaves = vec![rand_mat(&mut rng, 4, 3)];
    check_grads("gather_rows", &leaves, &|tape, ids| {
        let y = tape.gather_rows(ids[0], &[2, 0, 2, 3, 1]).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn edge_combine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3)];
    // Includes a self-loop (3, 3), whose difference contribution cancels.
    let edges = [(0u32, 1u32), (1, 2), (2, 0), (3, 3), (1, 0)];
    check_grads("edge_combine", &leaves, &|tape, ids| {
        let y = tape.edge_combine(ids[0], ids[1], &edges).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn segment_reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let segments = [(0u32, 2u32), (2, 5), (5, 6)];
    for mode in [Reduce::Max, Reduce::Sum, Reduce::Mean] {
        let leaves = vec![rand_mat(&mut rng, 6, 3)];
        check_grads(&format!("segment_reduce {mode:?}"), &leaves, &|tape, ids| {
            let y = tape.segment_reduce(ids[0], &segments, mode).unwrap();
            scalar_head(tape, y)
        });
    }
}

#[test]
fn broadcast_and_merge_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let leaves = vec![rand_mat(&mut rng, 1, 4)];
    check_grads("broadcast_row", &leaves, &|tape, ids| {
        let y = tape.broadcast_row(ids[0], 5).unwrap();
        scalar_head(tape, y)
    });

    let leaves = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 1, 4)];
    let mask = [false, true, false, true, false];
    check_grads("merge_rows", &leaves, &|tape, ids| {
        let y = tape.merge_rows(ids[0], ids[1], &mask).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let leaves = vec![
        rand_mat(&mut rng, 5, 3),
        rand_pos(&mut rng, 3),
        rand_mat(&mut rng, 1, 3),
    ];
    check_grads("batchnorm_train", &leaves, &|tape, ids| {
        let r = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
        scalar_head(tape, r.out)
    });
}

#[test]
fn col_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let leaves = vec![rand_mat(&mut rng, 4, 3), rand_pos(&mut rng, 3)];
    check_grads("col_scale", &leaves, &|tape, ids| {
        let y = tape.col_scale(ids[0], ids[1]).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn dropout_gradients_with_frozen_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let leaves = vec![rand_mat(&mut rng, 4, 5)];
    // Every rebuild reseeds the same generator, so the mask — a pure
    // function of the draw sequence — is identical across FD probes.
    check_grads("dropout", &leaves, &|tape, ids| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = tape.dropout(ids[0], 0.4, &mut mask_rng).unwrap();
        scalar_head(tape, y)
    });
}

#[test]
fn composite_graph_gradients() {
    // A miniature edge-message pipeline: two matmuls feeding edge_combine,
    // bias, batch norm, relu, max aggregation, then a linear readout. This
    // exercises gradient accumulation across shared inputs and long chains.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let leaves = vec![
        rand_mat(&mut rng, 4, 3),  // node features
        rand_mat(&mut rng, 3, 4),  // w_self
        rand_mat(&mut rng, 3, 4),  // w_diff
        rand_mat(&mut rng, 1, 4),  // bias
        rand_pos(&mut rng, 4),     // bn gamma
        rand_mat(&mut rng, 1, 4),  // bn beta
        rand_mat(&mut rng, 4, 2),  // readout
    ];
    let edges = [(0u32, 1u32), (0, 2), (1, 0), (2, 3), (3, 2)];
    let segments = [(0u32, 2u32), (2, 3), (3, 4), (4, 5)];
    check_grads("composite", &leaves, &|tape, ids| {
        let a = tape.matmul(ids[0], ids[1]).unwrap();
        let b = tape.matmul(ids[0], ids[2]).unwrap();
        let msg = tape.edge_combine(a, b, &edges).unwrap();
        let msg = tape.add_bias(msg, ids[3]).unwrap();
        let msg = tape.batchnorm_train(msg, ids[4], ids[5], 1e-5).unwrap().out;
        let msg = tape.relu(msg).unwrap();
        let pooled = tape.segment_reduce(msg, &segments, Reduce::Max).unwrap();
        let y = tape.matmul(pooled, ids[6]).unwrap();
        scalar_head(tape, y)
    });
}
