//! Adam optimizer with decoupled-from-nothing classic L2 weight decay:
//! the decay term is added to the gradient before the moment updates, and
//! both moments are bias-corrected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates per parameter (aligned with the registry)
/// plus the shared step counter.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like the registry's parameters. Non-trainable
    /// entries get empty placeholders.
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|p| {
                if p.trainable {
                    Tensor::zeros_like(&p.value)
                } else {
                    Tensor::zeros(&[0])
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, idx: usize) -> (&Tensor, &Tensor) {
        (&self.m[idx], &self.v[idx])
    }

    /// Restores saved moments and step counter (checkpoint resume).
    pub fn restore(&mut self, idx: usize, m: Tensor, v: Tensor, t: u64) -> Result<()> {
        if m.shape() != self.m[idx].shape() || v.shape() != self.v[idx].shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments for parameter #{idx} have wrong shape"
            )));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        self.t = t;
        Ok(())
    }
}

/// Applies one Adam update to every trainable parameter.
///
/// `grads` is aligned with the registry; `None` entries (parameters that did
/// not participate in this pass) are treated as zero gradients. A non-finite
/// gradient aborts the step with the parameter's name.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let zero = Tensor::zeros(&[0]);

    for idx in 0..params.len() {
        if !params.get(idx).trainable {
            continue;
        }
        let grad = grads.get(idx).and_then(|g| g.as_ref()).unwrap_or(&zero);
        if !grad.all_finite() {
            return Err(Error::NonFiniteGrad(params.get(idx).name.clone()));
        }
        let p = params.get_mut(idx);
        let n = p.value.len();
        let gd = grad.data();
        let pd = p.value.data_mut();
        let md = state.m[idx].data_mut();
        let vd = state.v[idx].data_mut();
        for i in 0..n {
            let g = if gd.is_empty() { 0.0 } else { gd[i] } + cfg.weight_decay * pd[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(v), true);
        ps
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // One parameter at 1.0, gradient 0.5, lr 1e-3: bias correction makes
        // the first update almost exactly lr (up to eps).
        let mut ps = single_param(1.0);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &[Some(Tensor::scalar(0.5))], &mut st, &cfg).unwrap();
        let got = ps.get(0).value.data()[0];
        assert!((got - 0.999).abs() < 1e-6, "got {got}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity_on_parameters() {
        let mut ps = single_param(0.7);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &[Some(Tensor::scalar(0.0))], &mut st, &cfg).unwrap();
        assert_eq!(ps.get(0).value.data()[0], 0.7);
        // Missing gradients behave as zeros.
        adam_step(&mut ps, &[None], &mut st, &cfg).unwrap();
        assert_eq!(ps.get(0).value.data()[0], 0.7);
    }

    #[test]
    fn descends_a_quadratic() {
        // 10 steps on f(x) = x^2 from x = 1 with lr 0.1: |x| shrinks every step.
        let mut ps = single_param(1.0);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = ps.get(0).value.data()[0];
            adam_step(&mut ps, &[Some(Tensor::scalar(2.0 * x))], &mut st, &cfg).unwrap();
            let now = ps.get(0).value.data()[0].abs();
            assert!(now < prev.abs(), "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut ps = single_param(1.0);
        let mut st = AdamState::new(&ps);
        let err = adam_step(
            &mut ps,
            &[Some(Tensor::scalar(f64::NAN))],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut ps = single_param(1.0);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig {
            weight_decay: 5e-4,
            ..AdamConfig::default()
        };
        adam_step(&mut ps, &[Some(Tensor::scalar(0.0))], &mut st, &cfg).unwrap();
        let got = ps.get(0).value.data()[0];
        assert!(got < 1.0 && got > 0.99, "got {got}");
    }
}
