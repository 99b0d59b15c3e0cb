//! Object relation graph: detections → node features → stacked graph
//! updates → one relation vector per frame.
//!
//! Per frame, each surviving detection becomes a node embedding its
//! normalized box geometry and a learned category vector. A directed k-NN
//! graph over node features connects each node to its `k` most similar
//! peers; four graph layers exchange difference messages along those edges
//! (rebuilding the graph from the current features before every layer when
//! `dynamic` is set). The per-node outputs of all layers are concatenated,
//! mapped to an aggregation space, max- and mean-pooled over the frame and
//! fused into the relation feature `x_g`. Frames with no usable detections
//! fall back to a learned default vector.
//!
//! Everything here is permutation invariant: reordering a frame's
//! detections permutes graph nodes but not the pooled result (up to exact
//! feature-distance ties in neighbor selection).

pub mod knn;
pub mod layer;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Affine, BatchNorm, ForwardCtx};
use crate::numerics::params::{Binding, ParamIdx, ParamSet};
use crate::numerics::tape::{NodeId, Reduce, Tape};
use crate::numerics::tensor::Tensor;

pub use knn::{knn_edges, FrameGraph};
pub use layer::{Aggregate, GnnLayer};

/// One 2-D object detection in pixel coordinates (box center, size,
/// category id, detector confidence). Confidence is carried through the
/// data pipeline but does not enter the relation features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "c")]
    pub category: u32,
    #[serde(rename = "conf")]
    pub confidence: f64,
}

/// Keeps static-category detections, then a deterministic random subset of
/// `round(keep_ratio · m)` of them (at least one when any survive).
///
/// The subset is chosen by a generator seeded with `seed` alone, so the
/// same frame filtered twice yields the same detections; survivors keep
/// their original relative order.
pub fn filter_detections(
    dets: &[Detection],
    static_ids: &HashSet<u32>,
    keep_ratio: f64,
    seed: u64,
) -> Vec<Detection> {
    let statics: Vec<&Detection> = dets.iter().filter(|d| static_ids.contains(&d.category)).collect();
    let m = statics.len();
    if m == 0 {
        return Vec::new();
    }
    let n_keep = ((keep_ratio * m as f64).round() as usize).clamp(1, m);
    if n_keep == m {
        return statics.into_iter().copied().collect();
    }
    let mut idx: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(n_keep).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| *statics[i]).collect()
}

/// Architecture of the relation branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrgConfig {
    /// Out-degree of the k-NN graph (clamped to node count minus one).
    pub k: usize,
    /// Number of graph layers actually stacked; 0 disables the branch.
    pub layers: usize,
    /// Width of the learned category embedding.
    pub cat_embed_dim: usize,
    /// Node feature width after the two-block encoder.
    pub d0: usize,
    /// Output widths of the (up to) four graph layers.
    pub layer_dims: Vec<usize>,
    /// Aggregation-space width (per node, before global pooling).
    pub d_a: usize,
    /// Relation feature width (per frame).
    pub d_g: usize,
    pub aggregate: Aggregate,
    /// Rebuild the graph from current features before every layer; when
    /// false, all layers reuse the graph built from encoder output.
    pub dynamic: bool,
    /// Fraction of static detections kept when assembling model inputs.
    pub keep_ratio: f64,
}

impl Default for OrgConfig {
    fn default() -> Self {
        OrgConfig {
            k: 5,
            layers: 4,
            cat_embed_dim: 16,
            d0: 64,
            layer_dims: vec![64, 64, 128, 256],
            d_a: 512,
            d_g: 1024,
            aggregate: Aggregate::Max,
            dynamic: true,
            keep_ratio: 1.0,
        }
    }
}

impl OrgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("org.k", "must be at least 1"));
        }
        if self.layers > self.layer_dims.len() {
            return Err(Error::config(
                "org.layers",
                format!(
                    "{} layers requested but only {} widths given",
                    self.layers,
                    self.layer_dims.len()
                ),
            ));
        }
        for (name, v) in [
            ("org.cat_embed_dim", self.cat_embed_dim),
            ("org.d0", self.d0),
            ("org.d_a", self.d_a),
            ("org.d_g", self.d_g),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("org.layer_dims", "widths must be positive"));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::config(
                "org.keep_ratio",
                format!("must lie in (0, 1], got {}", self.keep_ratio),
            ));
        }
        Ok(())
    }

    /// Node width fed into the aggregation map: concatenation of every
    /// stacked layer's output.
    pub fn fused_dim(&self) -> usize {
        self.layer_dims[..self.layers].iter().sum()
    }
}

struct EncoderBlock {
    aff: Affine,
    bn: BatchNorm,
}

/// The relation network. Owns registry indices only; values live in the
/// shared [`ParamSet`].
pub struct OrgNet {
    pub cfg: OrgConfig,
    pub category_count: usize,
    embed: ParamIdx,
    enc: [EncoderBlock; 2],
    layers: Vec<GnnLayer>,
    fuse: Affine,
    out: Affine,
    /// Learned relation vector for frames with no detections.
    empty: ParamIdx,
}

impl OrgNet {
    /// Registers all parameters (a fixed creation order keeps seeded
    /// initialization reproducible). Requires `cfg.layers >= 1`; a zero
    /// layer count means the caller skips the branch entirely.
    pub fn create<R: Rng>(
        params: &mut ParamSet,
        cfg: &OrgConfig,
        category_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.layers == 0 {
            return Err(Error::config("org.layers", "relation branch needs at least one layer"));
        }
        if category_count == 0 {
            return Err(Error::Invalid("category table is empty".into()));
        }
        let embed = params.add_weight("org.embed", category_count, cfg.cat_embed_dim, rng);
        let enc_in = 4 + cfg.cat_embed_dim;
        let enc = [
            EncoderBlock {
                aff: Affine::create(params, "org.enc1", enc_in, cfg.d0, rng),
                bn: BatchNorm::create(params, "org.enc1", cfg.d0),
            },
            EncoderBlock {
                aff: Affine::create(params, "org.enc2", cfg.d0, cfg.d0, rng),
                bn: BatchNorm::create(params, "org.enc2", cfg.d0),
            },
        ];
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut d_in = cfg.d0;
        for l in 0..cfg.layers {
            let d_out = cfg.layer_dims[l];
            layers.push(GnnLayer::create(
                params,
                &format!("org.gnn{}", l + 1),
                d_in,
                d_out,
                rng,
            ));
            d_in = d_out;
        }
        let fuse = Affine::create(params, "org.fuse", cfg.fused_dim(), cfg.d_a, rng);
        let out = Affine::create(params, "org.out", 2 * cfg.d_a, cfg.d_g, rng);
        let empty = params.add_vector("org.empty", cfg.d_g, 0.0);
        Ok(OrgNet {
            cfg: cfg.clone(),
            category_count,
            embed,
            enc,
            layers,
            fuse,
            out,
            empty,
        })
    }

    /// Encodes detections (one row each) into initial node features:
    /// normalized geometry `[x/W, y/H, w/W, h/H]` concatenated with the
    /// category embedding, through two affine+BN+ReLU blocks.
    pub fn encode(
        &self,
        tape: &mut Tape,
        dets: &[Detection],
        image: (f64, f64),
        params: &mut ParamSet,
        bind: &Binding,
        ctx: &ForwardCtx,
    ) -> Result<NodeId> {
        let (img_w, img_h) = image;
        let n = dets.len();
        let mut geo = Vec::with_capacity(n * 4);
        let mut cats = Vec::with_capacity(n);
        for d in dets {
            if d.category as usize >= self.category_count {
                return Err(Error::Invalid(format!(
                    "detection category {} outside table of {} entries",
                    d.category, self.category_count
                )));
            }
            geo.extend_from_slice(&[d.x / img_w, d.y / img_h, d.w / img_w, d.h / img_h]);
            cats.push(d.category);
        }
        let geo = tape.constant(Tensor::from_vec(&[n, 4], geo)?);
        let emb = tape.gather_rows(bind.node(self.embed), &cats)?;
        let mut x = tape.concat_cols(&[geo, emb])?;
        for block in &self.enc {
            x = block.aff.forward(tape, x, bind)?;
            x = block.bn.forward(tape, x, params, bind, ctx)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// Relation features for a batch of frames: one `d_g` row per frame.
    /// Frames whose detection list is empty receive the learned default.
    pub fn forward(
        &self,
        tape: &mut Tape,
        frames: &[&[Detection]],
        image: (f64, f64),
        params: &mut ParamSet,
        bind: &Binding,
        ctx: &ForwardCtx,
    ) -> Result<NodeId> {
        if frames.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let use_fill: Vec<bool> = frames.iter().map(|f| f.is_empty()).collect();
        let empty_node = bind.node(self.empty);
        if use_fill.iter().all(|&f| f) {
            return tape.broadcast_row(empty_node, frames.len());
        }

        // Flatten non-empty frames into one node table with per-frame ranges.
        let mut flat: Vec<Detection> = Vec::new();
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        for f in frames.iter().filter(|f| !f.is_empty()) {
            let start = flat.len() as u32;
            flat.extend_from_slice(f);
            ranges.push((start, flat.len() as u32));
        }

        let mut x = self.encode(tape, &flat, image, params, bind, ctx)?;
        let mut graph: Option<FrameGraph> = None;
        let mut per_layer: Vec<NodeId> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if self.cfg.dynamic || graph.is_none() {
                graph = Some(batch_knn(tape.value(x), &ranges, self.cfg.k));
            }
            let g = graph.as_ref().expect("graph built above");
            x = layer.forward(tape, x, g, self.cfg.aggregate, params, bind, ctx)?;
            per_layer.push(x);
        }

        let stacked = tape.concat_cols(&per_layer)?;
        let xa = self.fuse.forward(tape, stacked, bind)?;
        let gmax = tape.segment_reduce(xa, &ranges, Reduce::Max)?;
        let gavg = tape.segment_reduce(xa, &ranges, Reduce::Mean)?;
        let pooled = tape.concat_cols(&[gmax, gavg])?;
        let xg = self.out.forward(tape, pooled, bind)?;

        if use_fill.iter().any(|&f| f) {
            tape.merge_rows(xg, empty_node, &use_fill)
        } else {
            Ok(xg)
        }
    }
}

/// k-NN graphs per frame over rows of `x`, merged into one edge list with
/// globally indexed nodes (frames are row ranges of the node table).
fn batch_knn(x: &Tensor, ranges: &[(u32, u32)], k: usize) -> FrameGraph {
    let (_, d) = x.dims2();
    let mut edges = Vec::new();
    let mut segments = Vec::with_capacity(ranges.iter().map(|&(s, e)| (e - s) as usize).sum());
    for &(start, end) in ranges {
        let n = (end - start) as usize;
        let sub = &x.data()[start as usize * d..end as usize * d];
        let g = knn_edges(sub, n, d, k).with_self_loops();
        let offset = edges.len() as u32;
        edges.extend(g.edges.iter().map(|&(a, b)| (a + start, b + start)));
        segments.extend(g.segments.iter().map(|&(s, e)| (s + offset, e + offset)));
    }
    FrameGraph { edges, segments }
}
