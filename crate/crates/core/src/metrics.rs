//! Evaluation criteria: endpoint error, mean IoU, steering MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::FlowField;

/// Mean endpoint error over the pixels selected by `mask` (all when `None`).
pub fn epe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let (sum, n) = epe_sum(pred, gt, mask)?;
    if n == 0 {
        return Err(Error::Evaluation("endpoint error over an empty selection".into()));
    }
    Ok(sum / n as f64)
}

/// Sum of endpoint errors and the number of selected pixels.
pub fn epe_sum(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    pred.check_dims(gt.height, gt.width)?;
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                gt.len()
            )));
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for p in 0..gt.len() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        let du = (pred.u[p] - gt.u[p]) as f64;
        let dv = (pred.v[p] - gt.v[p]) as f64;
        sum += (du * du + dv * dv).sqrt();
        n += 1;
    }
    Ok((sum, n))
}

/// Pixel counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds one image. Pixels whose ground truth equals `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} labels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Domain(format!("label pair ({g}, {p}) outside {c} classes")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both prediction and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let pred: u64 = (0..c).map(|r| self.counts[r * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Evaluation("no class present in prediction or ground truth".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Mean IoU of one label map pair, plus the per-class values.
pub fn miou(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    ignore: Option<u8>,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok((cm.miou()?, cm.per_class_iou()))
}

pub fn steering_mse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Usage(format!(
            "steering_mse over {} predictions and {} targets",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Aggregate evaluation over a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub epe: Option<f64>,
    pub epe_moving: Option<f64>,
    pub epe_static: Option<f64>,
    pub epe_other: Option<f64>,
    pub steering_mse: Option<f64>,
    pub n_frames: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
