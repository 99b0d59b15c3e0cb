//! End-to-end training loop.
//!
//! Single-frame runs optimize the per-frame loss over shuffled frames;
//! multi-frame runs optimize the tuple loss over shuffled tuples sampled
//! with a fixed gap inside each training sequence. Everything random —
//! shuffling, dropout — draws from streams derived from the run seed and
//! the epoch index, so a run is reproducible and a resumed run continues
//! exactly where the checkpoint left off.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::dataio::{sample_tuples, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::loss::{loss_frame, loss_single};
use crate::model::{sequence_inputs, FrameInput, PoseModel, SALT_EPOCH};
use crate::numerics::layers::ForwardCtx;
use crate::numerics::{adam_step, derive_seed, AdamConfig, AdamState, Checkpoint};

/// One line of the training log (serialized as JSONL when an output
/// directory is given). `epoch` counts completed epochs, starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean loss per optimization item (frame or tuple) this epoch.
    pub loss: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
}

/// Everything a finished run hands back to the caller.
pub struct TrainArtifacts {
    pub model: PoseModel,
    pub adam: AdamState,
    pub logs: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
    /// Path of the final checkpoint file when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DIAGNOSTIC_CHECKPOINT_FILE: &str = "checkpoint-diagnostic.json";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains a model on the train split of `ds` according to `cfg`.
///
/// With an output directory, a checkpoint is written every
/// `optim.checkpoint_every` epochs (and at the end) and epoch logs are
/// appended to `train_log.jsonl`. Passing a checkpoint resumes from its
/// recorded epoch with optimizer state intact. If the loss turns
/// non-finite, the current state is dumped to a diagnostic checkpoint and
/// training aborts with an error naming it.
pub fn train(
    ds: &Dataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let category_count = ds.manifest.category_count();
    if category_count == 0 {
        return Err(Error::Invalid("dataset has no categories".into()));
    }
    let image = (ds.manifest.intrinsics.width, ds.manifest.intrinsics.height);
    let mut model = PoseModel::new(cfg, category_count, image)?;
    let mut adam = AdamState::new(&model.params);
    let mut start_epoch = 0;
    if let Some(ck) = resume {
        ck.apply(&mut model.params, &mut adam)?;
        start_epoch = ck.epoch;
        if start_epoch > cfg.optim.epochs {
            return Err(Error::Config {
                field: "optim.epochs".into(),
                message: format!(
                    "checkpoint has {} completed epochs, config asks for {}",
                    start_epoch, cfg.optim.epochs
                ),
            });
        }
    }

    // Flatten the split into frames plus index tuples (singletons for the
    // single-frame variant).
    let sequences = sequence_inputs(ds, Split::Train, cfg.org.keep_ratio, cfg.seed)?;
    let mut inputs: Vec<FrameInput> = Vec::new();
    let mut items: Vec<Vec<usize>> = Vec::new();
    for (_, seq_items) in sequences {
        let base = inputs.len();
        let len = seq_items.len();
        match cfg.variant() {
            Variant::OrgPoseNet => items.extend((0..len).map(|i| vec![base + i])),
            Variant::OrgMapNet => items.extend(
                sample_tuples(len, cfg.loss.s, cfg.loss.k_f)
                    .into_iter()
                    .map(|t| t.into_iter().map(|i| base + i).collect::<Vec<_>>()),
            ),
        }
        inputs.extend(seq_items.into_iter().map(|(_, f)| f));
    }
    if items.is_empty() {
        return Err(Error::Invalid(
            "training split yields no optimization items (too few frames?)".into(),
        ));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let f = if start_epoch > 0 {
                std::fs::OpenOptions::new().create(true).append(true).open(path)?
            } else {
                std::fs::File::create(path)?
            };
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let batch = cfg.batch_size();
    let drop_epoch = cfg.optim.drop_epoch();
    let mut logs = Vec::new();
    let mut checkpoint_path = None;
    let epoch_base = derive_seed(cfg.seed, SALT_EPOCH);

    for epoch in start_epoch..cfg.optim.epochs {
        let lr = if epoch >= drop_epoch {
            cfg.optim.lr * cfg.optim.lr_drop
        } else {
            cfg.optim.lr
        };
        let adam_cfg = AdamConfig {
            lr,
            weight_decay: cfg.optim.weight_decay,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_base, epoch));
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut ctx = ForwardCtx::training(ChaCha8Rng::seed_from_u64(rng.random::<u64>()));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let mut batch_frames: Vec<&FrameInput> = Vec::new();
            let mut tuples: Vec<Vec<u32>> = Vec::with_capacity(chunk.len());
            for &it in chunk {
                let rows = items[it]
                    .iter()
                    .map(|&fi| {
                        batch_frames.push(&inputs[fi]);
                        (batch_frames.len() - 1) as u32
                    })
                    .collect();
                tuples.push(rows);
            }
            let targets: Vec<Pose> = batch_frames.iter().map(|f| f.target).collect();

            let mut fwd = model.forward_batch(&batch_frames, &mut ctx)?;
            let (beta, gamma) = model.loss_nodes(&fwd);
            let loss = match cfg.variant() {
                Variant::OrgPoseNet => {
                    loss_single(&mut fwd.tape, fwd.pred_t, fwd.pred_r, &targets, beta, gamma)?
                }
                Variant::OrgMapNet => loss_frame(
                    &mut fwd.tape,
                    fwd.pred_t,
                    fwd.pred_r,
                    &targets,
                    &tuples,
                    beta,
                    gamma,
                )?,
            };
            let loss_val = fwd.tape.value(loss).item()?;
            if !loss_val.is_finite() {
                let ck = snapshot(&model, &adam, cfg, epoch)?;
                let mut detail = format!("non-finite loss ({loss_val}) in epoch {}", epoch + 1);
                if let Some(dir) = out_dir {
                    let path = dir.join(DIAGNOSTIC_CHECKPOINT_FILE);
                    ck.save(&path)?;
                    detail.push_str(&format!("; state dumped to {}", path.display()));
                }
                return Err(Error::TrainAbort(detail));
            }
            fwd.tape.backward(loss)?;
            let grads = fwd.bind.collect_grads(&mut fwd.tape);
            adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
            loss_sum += loss_val;
        }

        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / items.len() as f64,
            beta: model.beta_value(),
            gamma: model.gamma_value(),
            lr,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::Internal(format!("log serialization: {e}")))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        logs.push(entry);

        let completed = epoch + 1;
        if completed % cfg.optim.checkpoint_every == 0 || completed == cfg.optim.epochs {
            if let Some(dir) = out_dir {
                let ck = snapshot(&model, &adam, cfg, completed)?;
                let path = dir.join(CHECKPOINT_FILE);
                ck.save(&path)?;
                checkpoint_path = Some(path);
            }
        }
    }

    let checkpoint = snapshot(&model, &adam, cfg, cfg.optim.epochs.max(start_epoch))?;
    if checkpoint_path.is_none() {
        if let Some(dir) = out_dir {
            let path = dir.join(CHECKPOINT_FILE);
            checkpoint.save(&path)?;
            checkpoint_path = Some(path);
        }
    }
    Ok(TrainArtifacts {
        model,
        adam,
        logs,
        checkpoint,
        checkpoint_path,
    })
}

/// Captures the full training state as a checkpoint.
pub fn snapshot(
    model: &PoseModel,
    adam: &AdamState,
    cfg: &RunConfig,
    epoch: u64,
) -> Result<Checkpoint> {
    Ok(Checkpoint::capture(
        &model.params,
        adam,
        cfg.seed,
        epoch,
        model.beta_value(),
        model.gamma_value(),
        cfg.to_value()?,
    ))
}
