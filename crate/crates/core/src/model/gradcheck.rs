//! Finite-difference validation of the analytic gradients.
//!
//! Builds a miniature model and a two-frame tuple batch from the synthetic
//! generator, computes the multi-frame loss gradient once by reverse-mode
//! differentiation, then compares every trainable parameter element
//! against a central finite difference of the same loss. The pass is
//! deterministic: dropout draws from a fixed stream and batch-norm running
//! statistics are frozen, so repeated evaluations agree to the last bit
//! and the only discrepancy left is honest numerical error.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::loss::loss_frame;
use crate::model::{sequence_inputs, ContextMode, FrameInput, PoseModel};
use crate::numerics::layers::ForwardCtx;
use crate::numerics::tensor::Tensor;
use crate::numerics::derive_seed;
use crate::org::Aggregate;
use crate::synth::generate_dataset;

const SALT_DATA: u64 = 0xDA7A;
const SALT_DROPOUT: u64 = 0xD0;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Name of a parameter whose analytic gradient is deliberately
    /// corrupted before comparison — a self-test that the check can fail.
    pub corrupt_param: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 7,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_param: None,
        }
    }
}

/// Worst relative error over one named parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// The miniature architecture under test: every differentiable component
/// is present (relation branch with graph rebuilds, grid context MLP,
/// dropout head, multi-frame loss with learnable balance).
fn fixture_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.variant = Some(Variant::OrgMapNet);
    cfg.seed = seed;
    cfg.org.k = 3;
    cfg.org.layers = 4;
    cfg.org.cat_embed_dim = 4;
    cfg.org.d0 = 8;
    cfg.org.layer_dims = vec![8, 8, 8, 8];
    cfg.org.d_a = 16;
    cfg.org.d_g = 16;
    cfg.org.aggregate = Aggregate::Max;
    cfg.org.dynamic = true;
    cfg.context.mode = ContextMode::Grid;
    cfg.context.d_ctx = 8;
    cfg.context.grid = 4;
    cfg.context.hidden = 8;
    cfg.head.hidden = 16;
    cfg.head.dropout = 0.5;
    cfg.loss.s = 2;
    cfg.loss.k_f = 1;
    cfg.synth.object_count = 5;
    cfg.synth.frames = 3;
    cfg.synth.test_every = 3;
    cfg.synth.pixel_noise = 0.5;
    cfg.synth.det_dropout = 0.0;
    cfg.synth.min_area = 1.0;
    cfg
}

/// Runs the full check. The relative error of an element is
/// `|ad - fd| / max(|ad|, |fd|, 1e-3)`; the floor keeps near-zero
/// gradients from amplifying round-off into false alarms.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let start = Instant::now();
    let cfg = fixture_config(opts.seed);
    let out = generate_dataset(&cfg.synth, derive_seed(opts.seed, SALT_DATA))?;
    let ds = Dataset::assemble(out.manifest, out.frames)?;
    let image = (ds.manifest.intrinsics.width, ds.manifest.intrinsics.height);

    let sequences = sequence_inputs(&ds, Split::Train, cfg.org.keep_ratio, cfg.seed)?;
    let inputs: Vec<FrameInput> = sequences
        .into_iter()
        .flat_map(|(_, items)| items.into_iter().map(|(_, f)| f))
        .collect();
    if inputs.len() < 2 {
        return Err(Error::Internal(
            "gradient-check fixture produced fewer than two frames".into(),
        ));
    }
    let refs: Vec<&FrameInput> = inputs.iter().take(2).collect();
    let targets: Vec<Pose> = refs.iter().map(|f| f.target).collect();
    let tuples = vec![vec![0u32, 1]];
    let dropout_seed = derive_seed(opts.seed, SALT_DROPOUT);

    let mut model = PoseModel::new(&cfg, ds.manifest.category_count(), image)?;

    let eval = |model: &mut PoseModel, want_grad: bool| -> Result<(f64, Option<Vec<Option<Tensor>>>)> {
        let mut ctx = ForwardCtx {
            training: true,
            update_running: false,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        };
        let mut fwd = model.forward_batch(&refs, &mut ctx)?;
        let (beta, gamma) = model.loss_nodes(&fwd);
        let loss = loss_frame(
            &mut fwd.tape,
            fwd.pred_t,
            fwd.pred_r,
            &targets,
            &tuples,
            beta,
            gamma,
        )?;
        let v = fwd.tape.value(loss).item()?;
        if want_grad {
            fwd.tape.backward(loss)?;
            Ok((v, Some(fwd.bind.collect_grads(&mut fwd.tape))))
        } else {
            Ok((v, None))
        }
    };

    let (_, grads) = eval(&mut model, true)?;
    let mut grads = grads.expect("gradients requested");
    if let Some(name) = &opts.corrupt_param {
        let idx = model
            .params
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        let shape = model.params.get(idx).value.shape().to_vec();
        let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(&shape));
        let mut g = g;
        for v in g.data_mut() {
            *v = 2.0 * *v + 0.05;
        }
        grads[idx] = Some(g);
    }

    let mut groups = Vec::new();
    let mut max_rel_err = 0.0f64;
    for idx in 0..model.params.len() {
        if !model.params.get(idx).trainable {
            continue;
        }
        let name = model.params.get(idx).name.clone();
        let elements = model.params.get(idx).value.len();
        let mut group_max = 0.0f64;
        for e in 0..elements {
            let orig = model.params.get(idx).value.data()[e];
            model.params.get_mut(idx).value.data_mut()[e] = orig + opts.step;
            let (plus, _) = eval(&mut model, false)?;
            model.params.get_mut(idx).value.data_mut()[e] = orig - opts.step;
            let (minus, _) = eval(&mut model, false)?;
            model.params.get_mut(idx).value.data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * opts.step);
            let ad = grads[idx].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            group_max = group_max.max(rel);
        }
        max_rel_err = max_rel_err.max(group_max);
        groups.push(GroupReport {
            name,
            elements,
            max_rel_err: group_max,
        });
    }

    Ok(GradCheckReport {
        groups,
        max_rel_err,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}
