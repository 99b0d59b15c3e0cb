//! Evaluation: per-frame pose errors and split-level summaries.
//!
//! Predictions run in inference mode (running batch-norm statistics, no
//! dropout), so evaluation never mutates the model and repeated calls give
//! identical results. Summary statistics are computed on sorted copies of
//! the error lists, making them independent of frame order.

use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_error_deg, translation_error, Pose};
use crate::model::{FrameInput, PoseModel};
use crate::numerics::layers::ForwardCtx;

/// Ground truth, prediction and errors for one frame.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub frame_id: u64,
    pub gt: Pose,
    pub pred: Pose,
    /// Euclidean translation error in meters.
    pub t_err: f64,
    /// Geodesic rotation error in degrees.
    pub r_err_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub median_t_m: f64,
    pub mean_t_m: f64,
    pub median_r_deg: f64,
    pub mean_r_deg: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub summary: EvalSummary,
}

/// Median of already-sorted values; even lengths average the two middles.
fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median/mean over a list, via a sorted copy so the result does not
/// depend on input order (summation order included).
fn stats(errors: &[f64]) -> (f64, f64) {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    (median_sorted(&sorted), mean)
}

/// Evaluates the model on labelled frames, in batches of `batch_size`.
pub fn evaluate(
    model: &mut PoseModel,
    items: &[(u64, FrameInput)],
    batch_size: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Invalid("evaluation over an empty split".into()));
    }
    let batch_size = batch_size.max(1);
    let mut frames = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size) {
        let refs: Vec<&FrameInput> = chunk.iter().map(|(_, f)| f).collect();
        let mut ctx = ForwardCtx::inference();
        let fwd = model.forward_batch(&refs, &mut ctx)?;
        let pt = fwd.tape.value(fwd.pred_t);
        let pr = fwd.tape.value(fwd.pred_r);
        for (i, (frame_id, input)) in chunk.iter().enumerate() {
            let t = pt.row(i);
            let r = pr.row(i);
            let pred = Pose::new([t[0], t[1], t[2]], [r[0], r[1], r[2]]);
            let gt = input.target;
            frames.push(FrameEval {
                frame_id: *frame_id,
                gt,
                pred,
                t_err: translation_error(gt.t, pred.t),
                r_err_deg: rotation_error_deg(gt.quat(), pred.quat())?,
            });
        }
    }
    let t_errs: Vec<f64> = frames.iter().map(|f| f.t_err).collect();
    let r_errs: Vec<f64> = frames.iter().map(|f| f.r_err_deg).collect();
    let (median_t_m, mean_t_m) = stats(&t_errs);
    let (median_r_deg, mean_r_deg) = stats(&r_errs);
    Ok(EvalReport {
        summary: EvalSummary {
            count: frames.len(),
            median_t_m,
            mean_t_m,
            median_r_deg,
            mean_r_deg,
        },
        frames,
    })
}

/// Writes the summary as a small JSON document.
pub fn write_metrics(path: &Path, summary: &EvalSummary) -> Result<()> {
    let body = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
    std::fs::write(path, body + "\n")?;
    Ok(())
}

/// Writes one CSV row per frame: ground truth, prediction, errors.
pub fn write_trajectory_csv(path: &Path, frames: &[FrameEval]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "frame_id,gt_tx,gt_ty,gt_tz,gt_rx,gt_ry,gt_rz,\
         pred_tx,pred_ty,pred_tz,pred_rx,pred_ry,pred_rz,t_err_m,r_err_deg"
    )?;
    for f in frames {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f.frame_id,
            f.gt.t[0],
            f.gt.t[1],
            f.gt.t[2],
            f.gt.r[0],
            f.gt.r[1],
            f.gt.r[2],
            f.pred.t[0],
            f.pred.t[1],
            f.pred.t[2],
            f.pred.r[0],
            f.pred.r[1],
            f.pred.r[2],
            f.t_err,
            f.r_err_deg
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(stats(&[3.0, 1.0, 2.0]).0, 2.0);
        assert_eq!(stats(&[4.0, 1.0, 2.0, 3.0]).0, 2.5);
        assert_eq!(stats(&[5.0]).0, 5.0);
    }

    #[test]
    fn stats_are_order_invariant() {
        let a = stats(&[0.3, 0.1, 0.7, 0.2, 0.9, 0.4]);
        let b = stats(&[0.9, 0.7, 0.4, 0.3, 0.2, 0.1]);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_is_rejected() {
        let cfg = crate::config::RunConfig::default();
        let mut small = cfg.clone();
        small.org.layers = 0;
        small.org.d_g = 4;
        small.context.d_ctx = 4;
        small.head.hidden = 4;
        let mut model = PoseModel::new(&small, 1, (640.0, 480.0)).unwrap();
        assert!(evaluate(&mut model, &[], 8).is_err());
    }
}
