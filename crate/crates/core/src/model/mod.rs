//! Full pose-regression model and its surrounding workflows.
//!
//! Per frame the model computes a relation feature from object detections
//! (see [`crate::org`]), a context feature from a configurable second
//! branch, and regresses pose from their concatenation through a small
//! head: one shared affine layer with dropout, then separate linear maps
//! onto translation and log-quaternion rotation.

pub mod ablate;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::numerics::layers::{dropout, Affine, ForwardCtx};
use crate::numerics::params::{ParamIdx, ParamSet};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;
use crate::numerics::{derive_seed, Binding};
use crate::org::{filter_detections, Detection, OrgNet};

/// Salt separating the detection-filter random stream from others.
pub const SALT_FILTER: u64 = 0xF117;
/// Salt for parameter initialization.
pub const SALT_INIT: u64 = 0x1217;
/// Salt for per-epoch shuffling and dropout streams.
pub const SALT_EPOCH: u64 = 0xE70C;

/// How the context branch produces its per-frame feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// All-zero context: the head sees relation features only.
    Null,
    /// A single learned vector shared by every frame.
    Learned,
    /// A two-layer MLP over a coarse detection-occupancy grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub mode: ContextMode,
    /// Context feature width.
    pub d_ctx: usize,
    /// Occupancy grid side length (grid mode only).
    pub grid: usize,
    /// Hidden width of the grid MLP.
    pub hidden: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            mode: ContextMode::Learned,
            d_ctx: 1024,
            grid: 8,
            hidden: 128,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_ctx == 0 {
            return Err(Error::config("context.d_ctx", "must be positive"));
        }
        if self.mode == ContextMode::Grid && (self.grid == 0 || self.hidden == 0) {
            return Err(Error::config(
                "context.grid",
                "grid side and hidden width must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of the shared layer before the two regressors.
    pub hidden: usize,
    /// Dropout rate applied to the shared layer during training.
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 512,
            dropout: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("head.hidden", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("head.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One model input: the (already filtered) detections of a frame and its
/// ground-truth pose.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub detections: Vec<Detection>,
    pub target: Pose,
}

enum ContextNet {
    Null { d: usize },
    Learned { v: ParamIdx },
    Grid { l1: Affine, l2: Affine, g: usize },
}

impl ContextNet {
    fn create<R: Rng>(params: &mut ParamSet, cfg: &ContextConfig, rng: &mut R) -> Self {
        match cfg.mode {
            ContextMode::Null => ContextNet::Null { d: cfg.d_ctx },
            ContextMode::Learned => ContextNet::Learned {
                v: params.add_vector("ctx.constant", cfg.d_ctx, 0.0),
            },
            ContextMode::Grid => ContextNet::Grid {
                l1: Affine::create(params, "ctx.fc1", cfg.grid * cfg.grid, cfg.hidden, rng),
                l2: Affine::create(params, "ctx.fc2", cfg.hidden, cfg.d_ctx, rng),
                g: cfg.grid,
            },
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        frames: &[&FrameInput],
        image: (f64, f64),
        bind: &Binding,
    ) -> Result<NodeId> {
        let b = frames.len();
        match self {
            ContextNet::Null { d } => Ok(tape.constant(Tensor::zeros(&[b, *d]))),
            ContextNet::Learned { v } => tape.broadcast_row(bind.node(*v), b),
            ContextNet::Grid { l1, l2, g } => {
                let g = *g;
                let (w, h) = image;
                let mut occ = vec![0.0; b * g * g];
                for (fi, f) in frames.iter().enumerate() {
                    let n = f.detections.len().max(1) as f64;
                    for d in &f.detections {
                        let cx = ((d.x / w * g as f64).floor() as isize).clamp(0, g as isize - 1);
                        let cy = ((d.y / h * g as f64).floor() as isize).clamp(0, g as isize - 1);
                        occ[fi * g * g + cy as usize * g + cx as usize] += 1.0 / n;
                    }
                }
                let occ = tape.constant(Tensor::from_vec(&[b, g * g], occ)?);
                let hid = l1.forward(tape, occ, bind)?;
                let hid = tape.relu(hid)?;
                l2.forward(tape, hid, bind)
            }
        }
    }
}

struct Head {
    fc: Affine,
    t: Affine,
    r: Affine,
    rate: f64,
}

impl Head {
    fn create<R: Rng>(params: &mut ParamSet, cfg: &HeadConfig, d_in: usize, rng: &mut R) -> Self {
        Head {
            fc: Affine::create(params, "head.fc", d_in, cfg.hidden, rng),
            t: Affine::create(params, "head.t", cfg.hidden, 3, rng),
            r: Affine::create(params, "head.r", cfg.hidden, 3, rng),
            rate: cfg.dropout,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        bind: &Binding,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.fc.forward(tape, x, bind)?;
        let h = dropout(tape, h, self.rate, ctx)?;
        Ok((self.t.forward(tape, h, bind)?, self.r.forward(tape, h, bind)?))
    }
}

/// One forward pass over a batch: the tape (holding all intermediate
/// values), the parameter binding, the relation feature (`batch x d_g`)
/// and the two prediction nodes (`batch x 3` each).
pub struct BatchForward {
    pub tape: Tape,
    pub bind: Binding,
    pub x_g: NodeId,
    pub pred_t: NodeId,
    pub pred_r: NodeId,
}

/// The assembled regression model. All parameters — including the two
/// learnable loss-balance scalars — live in one ordered registry, so
/// checkpoints and the optimizer see a stable layout.
pub struct PoseModel {
    pub params: ParamSet,
    pub category_count: usize,
    /// Image width/height used to normalize detection geometry.
    pub image: (f64, f64),
    d_g: usize,
    org: Option<OrgNet>,
    ctx_net: ContextNet,
    head: Head,
    beta: ParamIdx,
    gamma: ParamIdx,
}

impl PoseModel {
    /// Builds the model for a dataset with `category_count` category ids
    /// and the given image size. Initialization draws from a stream seeded
    /// by `cfg.seed`, so two builds from the same config are identical.
    /// `org.layers == 0` drops the relation branch; its input to the head
    /// is then a fixed zero vector.
    pub fn new(cfg: &RunConfig, category_count: usize, image: (f64, f64)) -> Result<PoseModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_INIT));
        let mut params = ParamSet::new();
        let org = if cfg.org.layers == 0 {
            None
        } else {
            Some(OrgNet::create(&mut params, &cfg.org, category_count, &mut rng)?)
        };
        let ctx_net = ContextNet::create(&mut params, &cfg.context, &mut rng);
        let head = Head::create(
            &mut params,
            &cfg.head,
            cfg.org.d_g + cfg.context.d_ctx,
            &mut rng,
        );
        let beta = params.add("loss.beta", Tensor::scalar(cfg.loss.beta0), true);
        let gamma = params.add("loss.gamma", Tensor::scalar(cfg.loss.gamma0), true);
        Ok(PoseModel {
            params,
            category_count,
            image,
            d_g: cfg.org.d_g,
            org,
            ctx_net,
            head,
            beta,
            gamma,
        })
    }

    pub fn beta_value(&self) -> f64 {
        self.params.get(self.beta).value.data()[0]
    }

    pub fn gamma_value(&self) -> f64 {
        self.params.get(self.gamma).value.data()[0]
    }

    /// Tape nodes of the loss-balance scalars in a given pass.
    pub fn loss_nodes(&self, fwd: &BatchForward) -> (NodeId, NodeId) {
        (fwd.bind.node(self.beta), fwd.bind.node(self.gamma))
    }

    /// Runs the model over a batch of frames, producing `batch x 3`
    /// translation and rotation predictions on a fresh tape.
    pub fn forward_batch(
        &mut self,
        frames: &[&FrameInput],
        ctx: &mut ForwardCtx,
    ) -> Result<BatchForward> {
        if frames.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let xg = match &self.org {
            Some(org) => {
                let slices: Vec<&[Detection]> =
                    frames.iter().map(|f| f.detections.as_slice()).collect();
                org.forward(&mut tape, &slices, self.image, &mut self.params, &bind, ctx)?
            }
            None => tape.constant(Tensor::zeros(&[frames.len(), self.d_g])),
        };
        let xc = self.ctx_net.forward(&mut tape, frames, self.image, &bind)?;
        let fused = tape.concat_cols(&[xg, xc])?;
        let (pred_t, pred_r) = self.head.forward(&mut tape, fused, &bind, ctx)?;
        Ok(BatchForward {
            tape,
            bind,
            x_g: xg,
            pred_t,
            pred_r,
        })
    }

    /// Deterministic single-frame prediction (inference mode).
    pub fn predict(&mut self, detections: &[Detection]) -> Result<Pose> {
        let input = FrameInput {
            detections: detections.to_vec(),
            target: Pose::new([0.0; 3], [0.0; 3]),
        };
        let mut ctx = ForwardCtx::inference();
        let fwd = self.forward_batch(&[&input], &mut ctx)?;
        let t = fwd.tape.value(fwd.pred_t).row(0);
        let r = fwd.tape.value(fwd.pred_r).row(0);
        Ok(Pose::new([t[0], t[1], t[2]], [r[0], r[1], r[2]]))
    }
}

/// Model inputs for a split, grouped by sequence in manifest order. Each
/// frame's detections pass the static-category / keep-ratio filter with a
/// per-frame seed derived from `base_seed`, the sequence position and the
/// frame id — reproducible regardless of traversal order.
pub fn sequence_inputs(
    ds: &Dataset,
    split: Split,
    keep_ratio: f64,
    base_seed: u64,
) -> Result<Vec<(String, Vec<(u64, FrameInput)>)>> {
    let static_ids = ds.manifest.static_ids();
    let filter_base = derive_seed(base_seed, SALT_FILTER);
    let mut out = Vec::new();
    for (seq_idx, (name, frames)) in ds.split_sequences(split)?.into_iter().enumerate() {
        let seq_seed = derive_seed(filter_base, seq_idx as u64);
        let mut items = Vec::with_capacity(frames.len());
        for rec in frames {
            let seed = derive_seed(seq_seed, rec.frame_id);
            let detections = filter_detections(&rec.detections, &static_ids, keep_ratio, seed);
            items.push((
                rec.frame_id,
                FrameInput {
                    detections,
                    target: rec.pose()?,
                },
            ));
        }
        out.push((name.clone(), items));
    }
    Ok(out)
}

/// Flat list of model inputs for a split (sequences concatenated).
pub fn frame_inputs(
    ds: &Dataset,
    split: Split,
    keep_ratio: f64,
    base_seed: u64,
) -> Result<Vec<(u64, FrameInput)>> {
    Ok(sequence_inputs(ds, split, keep_ratio, base_seed)?
        .into_iter()
        .flat_map(|(_, items)| items)
        .collect())
}
