//! Prediction windows cut from a sequence and the two non-learned baselines.

use jant_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::VideoSample;
use crate::types::{FlowField, SegMap};
use crate::warp::{backward_warp, warp_flow};

/// The `k` observations preceding a target time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `X_{t-k} .. X_{t-1}`, each `[3, H, W]`.
    pub frames: Vec<Tensor<f32>>,
    /// `S_{t-k} .. S_{t-1}`.
    pub segs: Vec<SegMap>,
    /// `O_{t-1}`, when `t - 1 >= 1`.
    pub last_flow: Option<FlowField>,
}

/// Ground truth at one target time.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub flow: FlowField,
    pub seg: SegMap,
    pub labels: Vec<u8>,
    pub annotated: bool,
}

impl Window {
    /// History for predicting frame `t` from the `k` frames before it.
    pub fn from_sample(sample: &VideoSample, t: usize, k: usize) -> Result<Self> {
        if k == 0 || t < k || t > sample.len() {
            return Err(Error::Usage(format!(
                "window with k={k} ending before t={t} in a {}-frame sequence",
                sample.len()
            )));
        }
        Ok(Window {
            frames: sample.frames[t - k..t].to_vec(),
            segs: sample.segs[t - k..t].to_vec(),
            last_flow: (t >= 2).then(|| sample.flow_at(t - 1).clone()),
        })
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn last_seg(&self) -> Result<&SegMap> {
        self.segs
            .last()
            .ok_or_else(|| Error::Usage("empty history".into()))
    }

    /// Drops the oldest observation and appends a new one.
    pub fn push(&mut self, frame: Tensor<f32>, seg: SegMap, flow: FlowField) {
        if !self.frames.is_empty() {
            self.frames.remove(0);
            self.segs.remove(0);
        }
        self.frames.push(frame);
        self.segs.push(seg);
        self.last_flow = Some(flow);
    }
}

impl Target {
    pub fn from_sample(sample: &VideoSample, t: usize) -> Result<Self> {
        if t == 0 || t >= sample.len() {
            return Err(Error::Usage(format!("no flow target at frame {t}")));
        }
        Ok(Target {
            flow: sample.flow_at(t).clone(),
            seg: sample.segs[t].clone(),
            labels: sample.segs[t].labels(),
            annotated: sample.annotated[t],
        })
    }
}

/// Backward-warps every score channel of `seg` by `flow`.
pub fn warp_seg(seg: &SegMap, flow: &FlowField) -> Result<SegMap> {
    let t = Tensor::new(&[seg.classes, seg.height, seg.width], seg.scores.clone())?;
    let out = backward_warp(&t, flow)?;
    SegMap::new(seg.classes, seg.height, seg.width, out.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    CopyLast,
    WarpLast,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::CopyLast => "copy_last",
            Baseline::WarpLast => "warp_last",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "copy_last" | "copy-last" => Ok(Baseline::CopyLast),
            "warp_last" | "warp-last" => Ok(Baseline::WarpLast),
            _ => Err(Error::Config(format!("unknown baseline {name:?}"))),
        }
    }

    /// One prediction step from the last flow and score map.
    pub fn step(self, flow: &FlowField, seg: &SegMap) -> Result<(FlowField, SegMap)> {
        match self {
            Baseline::CopyLast => Ok((flow.clone(), seg.clone())),
            Baseline::WarpLast => Ok((warp_flow(flow, flow)?, warp_seg(seg, flow)?)),
        }
    }

    /// `steps` predictions, each fed back as the next step's last observation.
    pub fn rollout(self, window: &Window, steps: usize) -> Result<Vec<(FlowField, SegMap)>> {
        let mut flow = window
            .last_flow
            .clone()
            .ok_or_else(|| Error::Usage("history holds no flow".into()))?;
        let mut seg = window.last_seg()?.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (f, s) = self.step(&flow, &seg)?;
            flow = f.clone();
            seg = s.clone();
            out.push((f, s));
        }
        Ok(out)
    }
}

/// `(O_{t-1}, S_{t-1})` unchanged.
pub fn baseline_copy_last(window: &Window) -> Result<(FlowField, SegMap)> {
    one_step(Baseline::CopyLast, window)
}

/// `(warp_flow(O_{t-1}, O_{t-1}), warp(S_{t-1}, O_{t-1}))`.
pub fn baseline_warp_last(window: &Window) -> Result<(FlowField, SegMap)> {
    one_step(Baseline::WarpLast, window)
}

fn one_step(b: Baseline, window: &Window) -> Result<(FlowField, SegMap)> {
    Ok(b.rollout(window, 1)?.remove(0))
}
