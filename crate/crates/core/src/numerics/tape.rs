//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node list in
//! topological order; [`Tape::backward`] walks the list once in reverse and
//! accumulates gradients into every node that requires them. Tapes are
//! cheap, single-use objects: build one per batch, run backward, read the
//! leaf gradients, drop it.
//!
//! The op set is deliberately small and shaped for graph networks over
//! ragged batches: dense affine pieces (`matmul`, `add_bias`), pointwise
//! maps, column concatenation/slicing, row gathering, an edge-message
//! combiner, and a segment reduction that serves both per-node neighbor
//! aggregation and per-frame global pooling.
//!
//! Non-differentiable choices made during the forward pass — which rows a
//! max reduction picked, which units dropout kept, which neighbors a graph
//! selected — are frozen into the recorded op, so backward treats them as
//! constants of the pass (the usual subgradient convention).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matmul::dgemm_strided;
use crate::numerics::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Reduction mode for [`Tape::segment_reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Sum,
    Mean,
}

/// Output of [`Tape::batchnorm_train`]: the normalized node plus the batch
/// statistics, which the caller folds into its running estimates.
pub struct BatchNormResult {
    pub out: NodeId,
    pub mean: Vec<f64>,
    /// Biased (population) variance used for the normalization itself.
    pub var_biased: Vec<f64>,
}

enum Op {
    MatMul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        out: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
        out: NodeId,
    },
    Exp {
        x: NodeId,
        out: NodeId,
    },
    Abs {
        x: NodeId,
        out: NodeId,
    },
    Relu {
        x: NodeId,
        out: NodeId,
    },
    Sum {
        x: NodeId,
        out: NodeId,
    },
    ConcatCols {
        parts: Vec<NodeId>,
        out: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        out: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<u32>,
        out: NodeId,
    },
    EdgeCombine {
        a: NodeId,
        b: NodeId,
        edges: Vec<(u32, u32)>,
        out: NodeId,
    },
    SegmentReduce {
        x: NodeId,
        segments: Vec<(u32, u32)>,
        mode: Reduce,
        /// For `Max`: flat `segments x cols` matrix of winning row indices.
        argmax: Vec<u32>,
        out: NodeId,
    },
    BroadcastRow {
        x: NodeId,
        out: NodeId,
    },
    MergeRows {
        main: NodeId,
        fill: NodeId,
        use_fill: Vec<bool>,
        out: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        out: NodeId,
    },
    ColScale {
        x: NodeId,
        s: NodeId,
        out: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
        out: NodeId,
    },
}

/// Recorded forward pass over which gradients are computed.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Adds an input node. The tensor's own `requires_grad` flag decides
    /// whether backward will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push_node(t)
    }

    /// Adds an input node that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push_node(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Gradient of the last `backward` root with respect to node `id`,
    /// if one was produced.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out of the tape (avoids a copy when handing it to
    /// the optimizer).
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push_node(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(t);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Internal(format!(
                "{op}: node id {} is not on this tape",
                id.0
            )));
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad())
    }

    /// Records `value` as the output of `op`; the op itself is kept only if
    /// some input tracks gradients, otherwise the subgraph is dead for
    /// backward and recording it would be wasted work.
    fn push_op(&mut self, mut value: Tensor, inputs: &[NodeId], op: impl FnOnce(NodeId) -> Op) -> NodeId {
        let rg = self.any_grad(inputs);
        value.set_requires_grad(rg);
        let out = self.push_node(value);
        if rg {
            self.ops.push(op(out));
        }
        out
    }

    /// `a · b` for `m x k` times `k x n` matrices.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (m, ka) = self.nodes[a.0].dims2();
        let bs = self.nodes[b.0].shape();
        if bs.len() != 2 {
            return Err(Error::shape("matmul", format!("rhs must be rank 2, got {bs:?}")));
        }
        let (kb, n) = (bs[0], bs[1]);
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: lhs {m}x{ka}, rhs {kb}x{n}"),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        crate::numerics::matmul::matmul(
            m,
            ka,
            n,
            self.nodes[a.0].data(),
            self.nodes[b.0].data(),
            out.data_mut(),
        );
        Ok(self.push_op(out, &[a, b], |out| Op::MatMul { a, b, out }))
    }

    /// Adds a length-`c` bias vector to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x, "add_bias")?;
        self.check(bias, "add_bias")?;
        let (r, c) = self.nodes[x.0].dims2();
        if self.nodes[bias.0].len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias len {} vs {c} columns", self.nodes[bias.0].len()),
            ));
        }
        let mut out = self.nodes[x.0].clone();
        let b = self.nodes[bias.0].data();
        for row in out.data_mut().chunks_exact_mut(c.max(1)).take(r) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push_op(out, &[x, bias], |out| Op::AddBias { x, bias, out }))
    }

    fn zip_same_shape(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<Tensor> {
        self.check(a, name)?;
        self.check(b, name)?;
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(Error::shape(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape(),
                    self.nodes[b.0].shape()
                ),
            ));
        }
        Ok(self.nodes[a.0].clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut out = self.zip_same_shape(a, b, "add")?;
        for (v, w) in out.data_mut().iter_mut().zip(self.nodes[b.0].data()) {
            *v += w;
        }
        Ok(self.push_op(out, &[a, b], |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut out = self.zip_same_shape(a, b, "sub")?;
        for (v, w) in out.data_mut().iter_mut().zip(self.nodes[b.0].data()) {
            *v -= w;
        }
        Ok(self.push_op(out, &[a, b], |out| Op::Sub { a, b, out }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut out = self.zip_same_shape(a, b, "mul")?;
        for (v, w) in out.data_mut().iter_mut().zip(self.nodes[b.0].data()) {
            *v *= w;
        }
        Ok(self.push_op(out, &[a, b], |out| Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x, "scale")?;
        let mut out = self.nodes[x.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        Ok(self.push_op(out, &[x], |out| Op::Scale { x, c, out }))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "exp")?;
        let mut out = self.nodes[x.0].clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        Ok(self.push_op(out, &[x], |out| Op::Exp { x, out }))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "abs")?;
        let mut out = self.nodes[x.0].clone();
        for v in out.data_mut() {
            *v = v.abs();
        }
        Ok(self.push_op(out, &[x], |out| Op::Abs { x, out }))
    }

    /// `max(0, x)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "relu")?;
        let mut out = self.nodes[x.0].clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        Ok(self.push_op(out, &[x], |out| Op::Relu { x, out }))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum")?;
        let total: f64 = self.nodes[x.0].data().iter().sum();
        Ok(self.push_op(Tensor::scalar(total), &[x], |out| Op::Sum { x, out }))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        for &p in parts {
            self.check(p, "concat_cols")?;
        }
        let r = self.nodes[parts[0].0].rows();
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.nodes[p.0].dims2();
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {r} vs {pr}"),
                ));
            }
            total_c += pc;
        }
        let mut out = Tensor::zeros(&[r, total_c]);
        {
            let od = out.data_mut();
            let mut off = 0;
            for &p in parts {
                let (_, pc) = self.nodes[p.0].dims2();
                let pd = self.nodes[p.0].data();
                for i in 0..r {
                    od[i * total_c + off..i * total_c + off + pc]
                        .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
                }
                off += pc;
            }
        }
        let parts_vec = parts.to_vec();
        Ok(self.push_op(out, parts, |out| Op::ConcatCols {
            parts: parts_vec,
            out,
        }))
    }

    /// Contiguous row range `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x, "slice_rows")?;
        let (r, c) = self.nodes[x.0].dims2();
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{} out of {r} rows", start + len),
            ));
        }
        let data = self.nodes[x.0].data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(&[len, c], data)?;
        Ok(self.push_op(out, &[x], |out| Op::SliceRows { x, start, out }))
    }

    /// `out[i] = x[idx[i]]` row gather; rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[u32]) -> Result<NodeId> {
        self.check(x, "gather_rows")?;
        let (r, c) = self.nodes[x.0].dims2();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        {
            let xd = self.nodes[x.0].data();
            let od = out.data_mut();
            for (i, &src) in idx.iter().enumerate() {
                let s = src as usize;
                if s >= r {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("index {s} out of {r} rows"),
                    ));
                }
                od[i * c..(i + 1) * c].copy_from_slice(&xd[s * c..(s + 1) * c]);
            }
        }
        let idx_vec = idx.to_vec();
        Ok(self.push_op(out, &[x], |out| Op::GatherRows {
            x,
            idx: idx_vec,
            out,
        }))
    }

    /// Per-edge combination `out[e] = a[src_e] + b[dst_e] - b[src_e]`.
    ///
    /// With `a = x · w_self` and `b = x · w_diff` this evaluates the affine
    /// part of an edge update `f([x_src, x_dst - x_src])` whose weight
    /// matrix was split into row halves — per-node matmuls plus this cheap
    /// combiner, instead of a matmul over materialized per-edge features.
    pub fn edge_combine(&mut self, a: NodeId, b: NodeId, edges: &[(u32, u32)]) -> Result<NodeId> {
        self.check(a, "edge_combine")?;
        self.check(b, "edge_combine")?;
        let (n, c) = self.nodes[a.0].dims2();
        if self.nodes[b.0].dims2() != (n, c) {
            return Err(Error::shape(
                "edge_combine",
                format!(
                    "inputs differ: {:?} vs {:?}",
                    self.nodes[a.0].shape(),
                    self.nodes[b.0].shape()
                ),
            ));
        }
        let mut out = Tensor::zeros(&[edges.len(), c]);
        {
            let ad = self.nodes[a.0].data();
            let bd = self.nodes[b.0].data();
            let od = out.data_mut();
            for (e, &(src, dst)) in edges.iter().enumerate() {
                let (s, d) = (src as usize, dst as usize);
                if s >= n || d >= n {
                    return Err(Error::shape(
                        "edge_combine",
                        format!("edge ({s}, {d}) out of {n} nodes"),
                    ));
                }
                let (sa, sb, sd_) = (&ad[s * c..(s + 1) * c], &bd[s * c..(s + 1) * c], &bd[d * c..(d + 1) * c]);
                let orow = &mut od[e * c..(e + 1) * c];
                for j in 0..c {
                    orow[j] = sa[j] + sd_[j] - sb[j];
                }
            }
        }
        let edges_vec = edges.to_vec();
        Ok(self.push_op(out, &[a, b], |out| Op::EdgeCombine {
            a,
            b,
            edges: edges_vec,
            out,
        }))
    }

    /// Reduces contiguous row ranges of `x` to one output row each.
    ///
    /// `Max` records which row won each column and routes the gradient only
    /// there (first maximum wins ties). Segments must be non-empty.
    pub fn segment_reduce(
        &mut self,
        x: NodeId,
        segments: &[(u32, u32)],
        mode: Reduce,
    ) -> Result<NodeId> {
        self.check(x, "segment_reduce")?;
        let (r, c) = self.nodes[x.0].dims2();
        let s = segments.len();
        let mut out = Tensor::zeros(&[s, c]);
        let mut argmax = vec![0u32; if mode == Reduce::Max { s * c } else { 0 }];
        {
            let xd = self.nodes[x.0].data();
            let od = out.data_mut();
            for (si, &(start, end)) in segments.iter().enumerate() {
                let (start, end) = (start as usize, end as usize);
                if start >= end || end > r {
                    return Err(Error::shape(
                        "segment_reduce",
                        format!("segment {start}..{end} invalid for {r} rows"),
                    ));
                }
                let orow = &mut od[si * c..(si + 1) * c];
                match mode {
                    Reduce::Max => {
                        orow.copy_from_slice(&xd[start * c..(start + 1) * c]);
                        let amrow = &mut argmax[si * c..(si + 1) * c];
                        amrow.fill(start as u32);
                        for row in start + 1..end {
                            for j in 0..c {
                                let v = xd[row * c + j];
                                if v > orow[j] {
                                    orow[j] = v;
                                    amrow[j] = row as u32;
                                }
                            }
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        for row in start..end {
                            for (o, v) in orow.iter_mut().zip(&xd[row * c..(row + 1) * c]) {
                                *o += v;
                            }
                        }
                        if mode == Reduce::Mean {
                            let inv = 1.0 / (end - start) as f64;
                            for o in orow.iter_mut() {
                                *o *= inv;
                            }
                        }
                    }
                }
            }
        }
        let segs = segments.to_vec();
        Ok(self.push_op(out, &[x], |out| Op::SegmentReduce {
            x,
            segments: segs,
            mode,
            argmax,
            out,
        }))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        self.check(x, "broadcast_row")?;
        let (r, c) = self.nodes[x.0].dims2();
        if r != 1 {
            return Err(Error::shape(
                "broadcast_row",
                format!("expected a single row, got {r}"),
            ));
        }
        let mut out = Tensor::zeros(&[rows, c]);
        {
            let src = self.nodes[x.0].data();
            for row in out.data_mut().chunks_exact_mut(c) {
                row.copy_from_slice(src);
            }
        }
        Ok(self.push_op(out, &[x], |out| Op::BroadcastRow { x, out }))
    }

    /// Interleaves rows of `main` with copies of a `fill` row: output row
    /// `b` is the fill row where `use_fill[b]` is set, otherwise the next
    /// unconsumed row of `main`. Used to splice a learned default back into
    /// batch positions whose frame produced no graph.
    pub fn merge_rows(&mut self, main: NodeId, fill: NodeId, use_fill: &[bool]) -> Result<NodeId> {
        self.check(main, "merge_rows")?;
        self.check(fill, "merge_rows")?;
        let (mr, c) = self.nodes[main.0].dims2();
        let (fr, fc) = self.nodes[fill.0].dims2();
        if fr != 1 || fc != c {
            return Err(Error::shape(
                "merge_rows",
                format!("fill must be 1x{c}, got {fr}x{fc}"),
            ));
        }
        let need = use_fill.iter().filter(|&&f| !f).count();
        if need != mr {
            return Err(Error::shape(
                "merge_rows",
                format!("{need} main rows expected, got {mr}"),
            ));
        }
        let mut out = Tensor::zeros(&[use_fill.len(), c]);
        {
            let md = self.nodes[main.0].data();
            let fd = self.nodes[fill.0].data();
            let od = out.data_mut();
            let mut next = 0;
            for (b, &f) in use_fill.iter().enumerate() {
                let dst = &mut od[b * c..(b + 1) * c];
                if f {
                    dst.copy_from_slice(fd);
                } else {
                    dst.copy_from_slice(&md[next * c..(next + 1) * c]);
                    next += 1;
                }
            }
        }
        let mask = use_fill.to_vec();
        Ok(self.push_op(out, &[main, fill], |out| Op::MergeRows {
            main,
            fill,
            use_fill: mask,
            out,
        }))
    }

    /// Batch normalization in training mode: normalizes each column by the
    /// batch mean and biased variance, then applies `gamma` and `beta`.
    /// Returns the batch statistics so the caller can update its running
    /// estimates. Requires at least one row; callers that want the usual
    /// inference behavior for tiny batches should branch before calling.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<BatchNormResult> {
        self.check(x, "batchnorm")?;
        self.check(gamma, "batchnorm")?;
        self.check(beta, "batchnorm")?;
        let (r, c) = self.nodes[x.0].dims2();
        if r == 0 {
            return Err(Error::Invalid("batchnorm on an empty batch".into()));
        }
        if self.nodes[gamma.0].len() != c || self.nodes[beta.0].len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma/beta must have length {c}"),
            ));
        }
        let xd = self.nodes[x.0].data();
        let mut mean = vec![0.0; c];
        for row in xd.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv_r = 1.0 / r as f64;
        for m in mean.iter_mut() {
            *m *= inv_r;
        }
        let mut var = vec![0.0; c];
        for row in xd.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_r;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0.0; r * c];
        for (i, row) in xd.chunks_exact(c).enumerate() {
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.nodes[gamma.0].data();
        let b = self.nodes[beta.0].data();
        let mut out = Tensor::zeros(&[r, c]);
        for (i, orow) in out.data_mut().chunks_exact_mut(c).enumerate() {
            for j in 0..c {
                orow[j] = g[j] * xhat[i * c + j] + b[j];
            }
        }
        let (xh, is) = (xhat, inv_std.clone());
        let out_id = self.push_op(out, &[x, gamma, beta], |out| Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: xh,
            inv_std: is,
            out,
        });
        Ok(BatchNormResult {
            out: out_id,
            mean,
            var_biased: var,
        })
    }

    /// Scales column `j` of a matrix by `s[j]`.
    pub fn col_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(x, "col_scale")?;
        self.check(s, "col_scale")?;
        let (r, c) = self.nodes[x.0].dims2();
        if self.nodes[s.0].len() != c {
            return Err(Error::shape(
                "col_scale",
                format!("scale len {} vs {c} columns", self.nodes[s.0].len()),
            ));
        }
        let mut out = self.nodes[x.0].clone();
        {
            let sd = self.nodes[s.0].data();
            for row in out.data_mut().chunks_exact_mut(c.max(1)).take(r) {
                for (v, sv) in row.iter_mut().zip(sd) {
                    *v *= sv;
                }
            }
        }
        Ok(self.push_op(out, &[x, s], |out| Op::ColScale { x, s, out }))
    }

    /// Inverted dropout: keeps each entry with probability `1 - p`,
    /// scaling survivors by `1 / (1 - p)` so expectations match inference.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        self.check(x, "dropout")?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.nodes[x.0].len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mut out = self.nodes[x.0].clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push_op(out, &[x], |out| Op::Dropout { x, mask, out }))
    }

    /// Runs one reverse sweep from `root` (which must hold one element) and
    /// fills in gradients for every node that requires them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root, "backward")?;
        if self.nodes[root.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, shape is {:?}", self.nodes[root.0].shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad() {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for op in self.ops.iter().rev() {
            let out = op_out(op);
            // Take the output gradient, process, put it back: every consumer
            // of `out` appears later on the tape, so its gradient is already
            // complete here, and restoring it keeps gradients inspectable.
            let go = match grads[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            apply_backward(op, &go, nodes, grads);
            grads[out.0] = Some(go);
        }
        Ok(())
    }
}

fn op_out(op: &Op) -> NodeId {
    match op {
        Op::MatMul { out, .. }
        | Op::AddBias { out, .. }
        | Op::Add { out, .. }
        | Op::Sub { out, .. }
        | Op::Mul { out, .. }
        | Op::Scale { out, .. }
        | Op::Exp { out, .. }
        | Op::Abs { out, .. }
        | Op::Relu { out, .. }
        | Op::Sum { out, .. }
        | Op::ConcatCols { out, .. }
        | Op::SliceRows { out, .. }
        | Op::GatherRows { out, .. }
        | Op::EdgeCombine { out, .. }
        | Op::SegmentReduce { out, .. }
        | Op::BroadcastRow { out, .. }
        | Op::MergeRows { out, .. }
        | Op::BatchNorm { out, .. }
        | Op::ColScale { out, .. }
        | Op::Dropout { out, .. } => *out,
    }
}

/// Gradient slot for `id`, lazily zero-initialized; `None` when the node
/// does not track gradients.
fn slot<'a>(
    grads: &'a mut [Option<Tensor>],
    nodes: &[Tensor],
    id: NodeId,
) -> Option<&'a mut Tensor> {
    if !nodes[id.0].requires_grad() {
        return None;
    }
    let entry = &mut grads[id.0];
    if entry.is_none() {
        *entry = Some(Tensor::zeros_like(&nodes[id.0]));
    }
    entry.as_mut()
}

fn apply_backward(op: &Op, go: &Tensor, nodes: &[Tensor], grads: &mut [Option<Tensor>]) {
    match op {
        Op::MatMul { a, b, .. } => {
            let (m, k) = nodes[a.0].dims2();
            let n = nodes[b.0].dims2().1;
            if let Some(da) = slot(grads, nodes, *a) {
                // da += go · bᵀ
                dgemm_strided(
                    m, n, k, 1.0,
                    go.data(), n as isize, 1,
                    nodes[b.0].data(), 1, n as isize,
                    1.0, da.data_mut(),
                );
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // db += aᵀ · go
                dgemm_strided(
                    k, m, n, 1.0,
                    nodes[a.0].data(), 1, k as isize,
                    go.data(), n as isize, 1,
                    1.0, db.data_mut(),
                );
            }
        }
        Op::AddBias { x, bias, .. } => {
            let c = nodes[x.0].dims2().1;
            if let Some(dx) = slot(grads, nodes, *x) {
                for (v, g) in dx.data_mut().iter_mut().zip(go.data()) {
                    *v += g;
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                let d = db.data_mut();
                for row in go.data().chunks_exact(c) {
                    for (v, g) in d.iter_mut().zip(row) {
                        *v += g;
                    }
                }
            }
        }
        Op::Add { a, b, .. } => {
            for id in [a, b] {
                if let Some(d) = slot(grads, nodes, *id) {
                    for (v, g) in d.data_mut().iter_mut().zip(go.data()) {
                        *v += g;
                    }
                }
            }
        }
        Op::Sub { a, b, .. } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (v, g) in da.data_mut().iter_mut().zip(go.data()) {
                    *v += g;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (v, g) in db.data_mut().iter_mut().zip(go.data()) {
                    *v -= g;
                }
            }
        }
        Op::Mul { a, b, .. } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((v, g), w) in da.data_mut().iter_mut().zip(go.data()).zip(nodes[b.0].data()) {
                    *v += g * w;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((v, g), w) in db.data_mut().iter_mut().zip(go.data()).zip(nodes[a.0].data()) {
                    *v += g * w;
                }
            }
        }
        Op::Scale { x, c, .. } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (v, g) in dx.data_mut().iter_mut().zip(go.data()) {
                    *v += c * g;
                }
            }
        }
        Op::Exp { x, out } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((v, g), e) in dx.data_mut().iter_mut().zip(go.data()).zip(nodes[out.0].data()) {
                    *v += g * e;
                }
            }
        }
        Op::Abs { x, .. } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((v, g), xv) in dx.data_mut().iter_mut().zip(go.data()).zip(nodes[x.0].data()) {
                    let s = if *xv > 0.0 {
                        1.0
                    } else if *xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *v += g * s;
                }
            }
        }
        Op::Relu { x, .. } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((v, g), xv) in dx.data_mut().iter_mut().zip(go.data()).zip(nodes[x.0].data()) {
                    if *xv > 0.0 {
                        *v += g;
                    }
                }
            }
        }
        Op::Sum { x, .. } => {
            let g = go.data()[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                for v in dx.data_mut() {
                    *v += g;
                }
            }
        }
        Op::ConcatCols { parts, .. } => {
            let total_c: usize = parts.iter().map(|p| nodes[p.0].dims2().1).sum();
            let mut off = 0;
            for p in parts {
                let (r, pc) = nodes[p.0].dims2();
                if let Some(dp) = slot(grads, nodes, *p) {
                    let d = dp.data_mut();
                    for i in 0..r {
                        for j in 0..pc {
                            d[i * pc + j] += go.data()[i * total_c + off + j];
                        }
                    }
                }
                off += pc;
            }
        }
        Op::SliceRows { x, start, out } => {
            let c = nodes[x.0].dims2().1;
            let len = nodes[out.0].dims2().0;
            if let Some(dx) = slot(grads, nodes, *x) {
                let d = dx.data_mut();
                for i in 0..len {
                    for j in 0..c {
                        d[(start + i) * c + j] += go.data()[i * c + j];
                    }
                }
            }
        }
        Op::GatherRows { x, idx, .. } => {
            let c = nodes[x.0].dims2().1;
            if let Some(dx) = slot(grads, nodes, *x) {
                let d = dx.data_mut();
                for (i, &src) in idx.iter().enumerate() {
                    let s = src as usize;
                    for j in 0..c {
                        d[s * c + j] += go.data()[i * c + j];
                    }
                }
            }
        }
        Op::EdgeCombine { a, b, edges, .. } => {
            let c = nodes[a.0].dims2().1;
            if let Some(da) = slot(grads, nodes, *a) {
                let d = da.data_mut();
                for (e, &(src, _)) in edges.iter().enumerate() {
                    let s = src as usize;
                    for j in 0..c {
                        d[s * c + j] += go.data()[e * c + j];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let d = db.data_mut();
                for (e, &(src, dst)) in edges.iter().enumerate() {
                    let (s, t) = (src as usize, dst as usize);
                    for j in 0..c {
                        let g = go.data()[e * c + j];
                        d[t * c + j] += g;
                        d[s * c + j] -= g;
                    }
                }
            }
        }
        Op::SegmentReduce {
            x,
            segments,
            mode,
            argmax,
            ..
        } => {
            let c = nodes[x.0].dims2().1;
            if let Some(dx) = slot(grads, nodes, *x) {
                let d = dx.data_mut();
                match mode {
                    Reduce::Max => {
                        for si in 0..segments.len() {
                            for j in 0..c {
                                let row = argmax[si * c + j] as usize;
                                d[row * c + j] += go.data()[si * c + j];
                            }
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        for (si, &(start, end)) in segments.iter().enumerate() {
                            let w = if *mode == Reduce::Mean {
                                1.0 / (end - start) as f64
                            } else {
                                1.0
                            };
                            for row in start as usize..end as usize {
                                for j in 0..c {
                                    d[row * c + j] += w * go.data()[si * c + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BroadcastRow { x, out } => {
            let (rows, c) = nodes[out.0].dims2();
            if let Some(dx) = slot(grads, nodes, *x) {
                let d = dx.data_mut();
                for i in 0..rows {
                    for j in 0..c {
                        d[j] += go.data()[i * c + j];
                    }
                }
            }
        }
        Op::MergeRows {
            main,
            fill,
            use_fill,
            ..
        } => {
            let c = nodes[main.0].dims2().1;
            if let Some(dm) = slot(grads, nodes, *main) {
                let d = dm.data_mut();
                let mut next = 0;
                for (b, &f) in use_fill.iter().enumerate() {
                    if !f {
                        for j in 0..c {
                            d[next * c + j] += go.data()[b * c + j];
                        }
                        next += 1;
                    }
                }
            }
            if let Some(df) = slot(grads, nodes, *fill) {
                let d = df.data_mut();
                for (b, &f) in use_fill.iter().enumerate() {
                    if f {
                        for j in 0..c {
                            d[j] += go.data()[b * c + j];
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            ..
        } => {
            let (r, c) = nodes[x.0].dims2();
            let mut gsum = vec![0.0; c];
            let mut gxsum = vec![0.0; c];
            for (i, row) in go.data().chunks_exact(c).enumerate() {
                for j in 0..c {
                    gsum[j] += row[j];
                    gxsum[j] += row[j] * xhat[i * c + j];
                }
            }
            if let Some(dg) = slot(grads, nodes, *gamma) {
                for (v, g) in dg.data_mut().iter_mut().zip(&gxsum) {
                    *v += g;
                }
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                for (v, g) in db.data_mut().iter_mut().zip(&gsum) {
                    *v += g;
                }
            }
            let gvals = nodes[gamma.0].data().to_vec();
            if let Some(dx) = slot(grads, nodes, *x) {
                let d = dx.data_mut();
                let inv_r = 1.0 / r as f64;
                for i in 0..r {
                    for j in 0..c {
                        let g = go.data()[i * c + j];
                        d[i * c + j] += gvals[j]
                            * inv_std[j]
                            * (g - gsum[j] * inv_r - xhat[i * c + j] * gxsum[j] * inv_r);
                    }
                }
            }
        }
        Op::ColScale { x, s, .. } => {
            let c = nodes[x.0].dims2().1;
            if let Some(dx) = slot(grads, nodes, *x) {
                let sd = nodes[s.0].data();
                for (row, grow) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(go.data().chunks_exact(c))
                {
                    for j in 0..c {
                        row[j] += grow[j] * sd[j];
                    }
                }
            }
            if let Some(ds) = slot(grads, nodes, *s) {
                let d = ds.data_mut();
                for (xrow, grow) in nodes[x.0]
                    .data()
                    .chunks_exact(c)
                    .zip(go.data().chunks_exact(c))
                {
                    for j in 0..c {
                        d[j] += grow[j] * xrow[j];
                    }
                }
            }
        }
        Op::Dropout { x, mask, .. } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((v, g), m) in dx.data_mut().iter_mut().zip(go.data()).zip(mask) {
                    *v += g * m;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_is_zero_left_one_right() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap().with_grad());
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn segment_max_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[4, 2], vec![1.0, 9.0, 5.0, 2.0, 0.0, 0.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let m = tape.segment_reduce(x, &[(0, 2), (2, 4)], Reduce::Max).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 9.0, 3.0, 4.0]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn segment_reduce_rejects_empty_segment() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(tape.segment_reduce(x, &[(1, 1)], Reduce::Sum).is_err());
    }

    #[test]
    fn edge_combine_matches_manual() {
        // x_src + (x_dst - x_src) evaluated through split halves.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let e = tape.edge_combine(a, b, &[(0, 1), (1, 1)]).unwrap();
        // edge (0,1): a[0] + b[1] - b[0] = [1+20, 2+20] = [21, 22]
        // edge (1,1): a[1] + b[1] - b[1] = [3, 4]
        assert_eq!(tape.value(e).data(), &[21.0, 22.0, 3.0, 4.0]);
    }

    #[test]
    fn batchnorm_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let r = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert!((r.mean[0] - 2.5).abs() < 1e-12);
        assert!((r.var_biased[0] - 1.25).abs() < 1e-12);
        let out = tape.value(r.out).data();
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        let v: f64 = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-4); // eps shrinks variance slightly
    }

    #[test]
    fn dropout_scales_survivors() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[100], vec![1.0; 100]).unwrap());
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }
}
