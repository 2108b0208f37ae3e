//! Dataset-level evaluation of models and baselines.
//!
//! Each sequence is scored once, on its last frame (always annotated). A
//! `horizon`-step evaluation starts the rollout `horizon` frames earlier
//! so that its final prediction lands on that frame.

use crate::baselines::{Baseline, Window};
use crate::error::{Error, Result};
use crate::metrics::{epe_sum, ConfusionMatrix, EvalReport};
use crate::nets::JointModel;
use crate::synthgen::VideoSample;
use crate::trainer::rollout;
use crate::types::{FlowField, Group, SegMap};

/// Anything that turns a history window into `T` future predictions.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a JointModel),
    Baseline(Baseline),
}

impl Predictor<'_> {
    pub fn rollout(&self, window: &Window, horizon: usize) -> Result<Vec<(FlowField, SegMap)>> {
        match self {
            Predictor::Model(m) => rollout(m, window, horizon),
            Predictor::Baseline(b) => b.rollout(window, horizon),
        }
    }
}

/// Running sums behind an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct Accumulator {
    pub confusion: ConfusionMatrix,
    epe: (f64, usize),
    group_epe: [(f64, usize); 3],
    frames: usize,
}

impl Accumulator {
    pub fn new(classes: usize) -> Self {
        Accumulator {
            confusion: ConfusionMatrix::new(classes),
            epe: (0.0, 0),
            group_epe: [(0.0, 0); 3],
            frames: 0,
        }
    }

    /// Adds one predicted frame against ground truth; groups come from the
    /// ground-truth labels.
    pub fn add(
        &mut self,
        flow: &FlowField,
        seg: &SegMap,
        gt_flow: &FlowField,
        gt_labels: &[u8],
        table: &crate::types::ClassTable,
    ) -> Result<()> {
        self.confusion.accumulate(&seg.labels(), gt_labels, None)?;
        let (s, n) = epe_sum(flow, gt_flow, None)?;
        self.epe.0 += s;
        self.epe.1 += n;
        let mask = table.mask_from_labels(gt_labels, gt_flow.height, gt_flow.width)?;
        for grp in Group::ALL {
            let (s, n) = epe_sum(flow, gt_flow, Some(&mask.selector(grp)))?;
            self.group_epe[grp.index()].0 += s;
            self.group_epe[grp.index()].1 += n;
        }
        self.frames += 1;
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.frames == 0 {
            return Err(Error::Evaluation("no frames evaluated".into()));
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        Ok(EvalReport {
            miou: Some(self.confusion.miou()?),
            per_class_iou: self.confusion.per_class_iou(),
            epe: mean(self.epe),
            epe_moving: mean(self.group_epe[Group::Mov.index()]),
            epe_static: mean(self.group_epe[Group::Sta.index()]),
            epe_other: mean(self.group_epe[Group::Oth.index()]),
            steering_mse: None,
            n_frames: self.frames,
        })
    }
}

/// First target frame of a `horizon`-step rollout ending on the last frame.
pub fn rollout_start(sample: &VideoSample, k: usize, horizon: usize) -> Result<usize> {
    let last = sample.len() - 1;
    if horizon == 0 || horizon > last || last + 1 - horizon < k.max(2) {
        return Err(Error::Usage(format!(
            "{horizon}-step evaluation with k={k} does not fit a {}-frame sequence",
            sample.len()
        )));
    }
    Ok(last + 1 - horizon)
}

/// Scores `pred` on the last frame of every sequence after `horizon` recursive steps.
pub fn evaluate(pred: Predictor, data: &[VideoSample], k: usize, horizon: usize) -> Result<EvalReport> {
    let first = data
        .first()
        .ok_or_else(|| Error::Evaluation("empty evaluation set".into()))?;
    let mut acc = Accumulator::new(first.num_classes());
    for s in data {
        let t0 = rollout_start(s, k, horizon)?;
        let window = Window::from_sample(s, t0, k)?;
        let steps = pred.rollout(&window, horizon)?;
        let (flow, seg) = steps.last().expect("horizon >= 1");
        let e = s.len() - 1;
        acc.add(flow, seg, s.flow_at(e), &s.segs[e].labels(), &s.table)?;
    }
    acc.report()
}
