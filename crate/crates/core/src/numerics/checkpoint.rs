//! Checkpoint serialization.
//!
//! A checkpoint is a single JSON object: parameter name → record (shape,
//! values, Adam moments, shared step counter), plus the loss balance
//! scalars, the run seed, the completed-epoch count and the full run
//! configuration (kept as opaque JSON so this module stays independent of
//! the config schema). Parameters are keyed in a sorted map and floats use
//! shortest round-trip formatting, so identical state always produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adam::AdamState;
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// First/second Adam moment estimates; empty for non-trainable entries.
    #[serde(default)]
    pub m: Vec<f64>,
    #[serde(default)]
    pub v: Vec<f64>,
    /// Optimizer step counter (shared across parameters, repeated per
    /// record so each entry is self-describing).
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    /// Number of completed training epochs.
    pub epoch: u64,
    /// Convenience copies of the learnable loss balance scalars.
    pub beta: f64,
    pub gamma: f64,
    /// The run configuration that produced this model, verbatim.
    pub config: serde_json::Value,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    /// Snapshots the full training state.
    pub fn capture(
        params: &ParamSet,
        adam: &AdamState,
        seed: u64,
        epoch: u64,
        beta: f64,
        gamma: f64,
        config: serde_json::Value,
    ) -> Self {
        let mut map = BTreeMap::new();
        for (idx, p) in params.iter().enumerate() {
            let (m, v) = adam.moments(idx);
            map.insert(
                p.name.clone(),
                ParamRecord {
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    step: adam.step_count(),
                    trainable: p.trainable,
                },
            );
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            seed,
            epoch,
            beta,
            gamma,
            config,
            params: map,
        }
    }

    /// Restores parameters and optimizer state into a freshly built model.
    /// The checkpoint must cover exactly the model's parameters with
    /// matching shapes; anything else is an incompatibility.
    pub fn apply(&self, params: &mut ParamSet, adam: &mut AdamState) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for name in self.params.keys() {
            if params.index_of(name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} in file has no counterpart in the model"
                )));
            }
        }
        for idx in 0..params.len() {
            let name = params.get(idx).name.clone();
            let rec = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("model parameter {name} missing from file")))?;
            params.restore(&name, Tensor::from_vec(&rec.shape, rec.data.clone())?)?;
            if params.get(idx).trainable {
                let shape = rec.shape.clone();
                adam.restore(
                    idx,
                    Tensor::from_vec(&shape, rec.m.clone()).map_err(|_| {
                        Error::Checkpoint(format!("parameter {name}: moment size mismatch"))
                    })?,
                    Tensor::from_vec(&shape, rec.v.clone()).map_err(|_| {
                        Error::Checkpoint(format!("parameter {name}: moment size mismatch"))
                    })?,
                    rec.step,
                )?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| Error::Internal(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        serde_json::from_str(&body).map_err(|e| {
            Error::Checkpoint(format!(
                "{}:{}: {e}",
                path.display(),
                e.line()
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state() -> (ParamSet, AdamState) {
        let mut ps = ParamSet::new();
        ps.add("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap(), true);
        ps.add("a.stat", Tensor::from_vec(&[2], vec![0.1, 0.9]).unwrap(), false);
        let adam = AdamState::new(&ps);
        (ps, adam)
    }

    #[test]
    fn round_trip_preserves_values_exactly() {
        let (ps, adam) = tiny_state();
        let ck = Checkpoint::capture(&ps, &adam, 7, 3, 0.0, -3.0, serde_json::json!({}));
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let (mut ps2, mut adam2) = tiny_state();
        ps2.get_mut(0).value.data_mut()[0] = 999.0;
        back.apply(&mut ps2, &mut adam2).unwrap();
        assert_eq!(ps2.get(0).value, ps.get(0).value);
        assert_eq!(ps2.get(1).value, ps.get(1).value);
    }

    #[test]
    fn serialization_is_deterministic() {
        let (ps, adam) = tiny_state();
        let a = serde_json::to_string(&Checkpoint::capture(&ps, &adam, 1, 0, 0.0, -3.0, serde_json::json!({}))).unwrap();
        let b = serde_json::to_string(&Checkpoint::capture(&ps, &adam, 1, 0, 0.0, -3.0, serde_json::json!({}))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extra_and_missing_parameters_are_rejected() {
        let (ps, adam) = tiny_state();
        let mut ck = Checkpoint::capture(&ps, &adam, 1, 0, 0.0, -3.0, serde_json::json!({}));
        ck.params.insert(
            "ghost".into(),
            ParamRecord {
                shape: vec![1],
                data: vec![0.0],
                m: vec![],
                v: vec![],
                step: 0,
                trainable: false,
            },
        );
        let (mut ps2, mut adam2) = tiny_state();
        assert!(ck.apply(&mut ps2, &mut adam2).is_err());

        let mut ck2 = Checkpoint::capture(&ps, &adam, 1, 0, 0.0, -3.0, serde_json::json!({}));
        ck2.params.remove("a.w");
        assert!(ck2.apply(&mut ps2, &mut adam2).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_incompatibility() {
        let (ps, adam) = tiny_state();
        let mut ck = Checkpoint::capture(&ps, &adam, 1, 0, 0.0, -3.0, serde_json::json!({}));
        let rec = ck.params.get_mut("a.w").unwrap();
        rec.shape = vec![4];
        let (mut ps2, mut adam2) = tiny_state();
        let err = ck.apply(&mut ps2, &mut adam2).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
