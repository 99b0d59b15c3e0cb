//! Layer modules: affine, batch normalization, dropout.
//!
//! A layer owns registry indices, not values; its `forward` reads bound
//! parameter nodes from a [`Binding`] and appends ops to the tape. The
//! [`ForwardCtx`] threads the two bits of per-pass state every layer needs:
//! whether this is a training pass, and the pass's random stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{filled, Binding, ParamIdx, ParamSet};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Per-pass mode and randomness.
pub struct ForwardCtx {
    /// Training passes use batch statistics and apply dropout; inference
    /// passes use running statistics and are deterministic.
    pub training: bool,
    /// Whether a training pass should fold batch statistics into the
    /// running estimates (gradient checking turns this off so repeated
    /// evaluations see identical state).
    pub update_running: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn training(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            update_running: true,
            rng,
        }
    }

    /// Deterministic inference context (the RNG is never consulted because
    /// dropout and batch statistics are disabled, but a seeded one keeps
    /// the type honest).
    pub fn inference() -> Self {
        use rand::SeedableRng;
        ForwardCtx {
            training: false,
            update_running: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// Affine map `x · w + b` with parameters in the registry.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamIdx,
    pub b: ParamIdx,
}

impl Affine {
    /// Registers weight (`d_in x d_out`, Glorot uniform) and bias (zeros).
    pub fn create<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add_weight(format!("{prefix}.w"), d_in, d_out, rng);
        let b = params.add_vector(format!("{prefix}.b"), d_out, 0.0);
        Affine { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, bind: &Binding) -> Result<NodeId> {
        affine_forward(tape, x, bind.node(self.w), bind.node(self.b))
    }
}

/// `x · w + b` on already-bound nodes.
pub fn affine_forward(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Batch normalization over the row dimension.
///
/// Training passes normalize by batch statistics (biased variance) and fold
/// the batch mean/variance into running estimates with the configured
/// momentum, storing the unbiased variance as PyTorch does. Inference
/// passes — and training batches of a single row, whose batch variance is
/// degenerate — normalize by the running estimates instead.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamIdx,
    pub beta: ParamIdx,
    running_mean: ParamIdx,
    running_var: ParamIdx,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Registers scale (ones), shift (zeros) and running statistics
    /// (mean zeros, variance ones; not trainable).
    pub fn create(params: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        let gamma = params.add_vector(format!("{prefix}.bn.gamma"), dim, 1.0);
        let beta = params.add_vector(format!("{prefix}.bn.beta"), dim, 0.0);
        let running_mean = params.add(format!("{prefix}.bn.running_mean"), filled(&[dim], 0.0), false);
        let running_var = params.add(format!("{prefix}.bn.running_var"), filled(&[dim], 1.0), false);
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &mut ParamSet,
        bind: &Binding,
        ctx: &ForwardCtx,
    ) -> Result<NodeId> {
        let (rows, cols) = tape.value(x).dims2();
        if rows == 0 {
            return Err(Error::Invalid("batchnorm on an empty batch".into()));
        }
        let gamma = bind.node(self.gamma);
        let beta = bind.node(self.beta);
        if ctx.training && rows >= 2 {
            let res = tape.batchnorm_train(x, gamma, beta, self.eps)?;
            if ctx.update_running {
                let m = self.momentum;
                let unbias = rows as f64 / (rows - 1) as f64;
                let rm = params.get_mut(self.running_mean).value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&res.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                let rv = params.get_mut(self.running_var).value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&res.var_biased) {
                    *r = (1.0 - m) * *r + m * (b * unbias);
                }
            }
            Ok(res.out)
        } else {
            // Normalize by running estimates. This is an affine map per
            // column, so it composes from primitive ops and gradients still
            // reach gamma and beta.
            let rm = params.get(self.running_mean).value.data();
            let rv = params.get(self.running_var).value.data();
            let neg_mean = Tensor::from_vec(&[cols], rm.iter().map(|v| -v).collect())?;
            let inv_std = Tensor::from_vec(
                &[cols],
                rv.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
            )?;
            let neg_mean = tape.constant(neg_mean);
            let inv_std = tape.constant(inv_std);
            let centered = tape.add_bias(x, neg_mean)?;
            let g_scaled = tape.mul(gamma, inv_std)?;
            let scaled = tape.col_scale(centered, g_scaled)?;
            tape.add_bias(scaled, beta)
        }
    }
}

/// Inverted dropout around a node; identity outside training.
pub fn dropout(tape: &mut Tape, x: NodeId, rate: f64, ctx: &mut ForwardCtx) -> Result<NodeId> {
    if !ctx.training || rate == 0.0 {
        return Ok(x);
    }
    tape.dropout(x, rate, &mut ctx.rng)
}
