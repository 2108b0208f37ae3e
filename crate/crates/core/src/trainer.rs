//! Optimization: batches, SGD with momentum, single-step training,
//! recursive rollout and unrolled (BPTT) fine-tuning.

use std::io::Write;
use std::time::Instant;

use jant_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{Target, Window};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::nets::{Bound, JointModel, JointOutputs};
use crate::synthgen::VideoSample;
use crate::types::{FlowField, SegMap};
use crate::warp::warp_var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of updates; 0 means no cap.
    pub max_steps: usize,
    pub seed: u64,
    pub bptt_steps: usize,
    pub rollout_horizon: usize,
    /// Fraction of the run after which the learning rate drops ×0.1.
    pub lr_decay_at: f64,
    /// Random training crops `[height, width]`; `None` trains on full frames.
    pub crop: Option<[usize; 2]>,
    pub seg_weight: f64,
    /// Let unrolled gradients pass through the warped-frame input.
    pub grad_through_warp: bool,
    /// Global gradient-norm clip; `None` disables.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            epochs: 1,
            max_steps: 0,
            seed: 0,
            bptt_steps: 2,
            rollout_horizon: 10,
            lr_decay_at: 2.0 / 3.0,
            crop: Some([32, 64]),
            seg_weight: 1.0,
            grad_through_warp: true,
            clip_grad_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.bptt_steps == 0 {
            return bad("bptt_steps must be >= 1");
        }
        if self.rollout_horizon == 0 {
            return bad("rollout_horizon must be >= 1");
        }
        if self.clip_grad_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_grad_norm must be > 0");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total > 0 && step as f64 >= self.lr_decay_at * total as f64 {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

/// SGD with momentum and L2 weight decay: `v ← μv + (∇ + λθ)`, `θ ← θ − η v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(model: &JointModel, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            step: 0,
            velocity: model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_config(model: &JointModel, cfg: &TrainConfig) -> Self {
        Sgd::new(model, cfg.momentum, cfg.weight_decay)
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn apply(&mut self, model: &mut JointModel, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        // a head attached after the optimizer was created
        while self.velocity.len() < model.params.len() {
            let i = self.velocity.len();
            self.velocity.push(Tensor::zeros(model.params.tensors[i].shape()));
        }
        let lr = lr as f32;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let theta = model.params.tensors[i].data_mut();
            let v = self.velocity[i].data_mut();
            for ((t, vel), &gr) in theta.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + (gr + self.weight_decay * *t);
                *t -= lr * *vel;
            }
        }
        self.step += 1;
        if !model.params.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after step {}", self.step)));
        }
        Ok(())
    }
}

/// Batched history plus targets for one or more consecutive steps.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `k` tensors of shape `[N,3,H,W]`, oldest first.
    pub frames: Vec<Tensor<f32>>,
    /// `k` tensors of shape `[N,C,H,W]`.
    pub segs: Vec<Tensor<f32>>,
    /// `[N,2,H,W]` flow into the newest history frame; zeros where unknown.
    pub last_flow: Tensor<f32>,
    /// `targets[s][i]`: ground truth of item `i` at step `s`.
    pub targets: Vec<Vec<Target>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }

    /// Stacks windows and their per-step targets (`targets[i][s]`).
    pub fn from_items(windows: &[Window], targets: &[Vec<Target>]) -> Result<Batch> {
        let Some(first) = windows.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let k = first.k();
        let steps = targets.first().map_or(0, |t| t.len());
        if targets.len() != windows.len() || targets.iter().any(|t| t.len() != steps) || steps == 0 {
            return Err(Error::Usage("every batch item needs the same number of targets".into()));
        }
        let stack = |f: &dyn Fn(&Window) -> Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<Tensor<f32>> = windows.iter().map(|w| f(w).unsqueeze0()).collect();
            Ok(Tensor::concat_batch(&items)?)
        };
        let mut frames = Vec::with_capacity(k);
        let mut segs = Vec::with_capacity(k);
        for j in 0..k {
            frames.push(stack(&|w| w.frames[j].clone())?);
            segs.push(stack(&|w| {
                let s = &w.segs[j];
                Tensor::new(&[s.classes, s.height, s.width], s.scores.clone()).expect("seg shape")
            })?);
        }
        let last_flow = stack(&|w| window_last_flow(w))?;
        let targets = (0..steps)
            .map(|s| targets.iter().map(|t| t[s].clone()).collect())
            .collect();
        Ok(Batch {
            frames,
            segs,
            last_flow,
            targets,
        })
    }

    /// Window ending before `t` with `steps` targets starting at `t`, optionally cropped.
    pub fn item(
        sample: &VideoSample,
        t: usize,
        k: usize,
        steps: usize,
        crop: Option<CropRect>,
    ) -> Result<(Window, Vec<Target>)> {
        let mut w = Window::from_sample(sample, t, k)?;
        let mut ts = (t..t + steps)
            .map(|s| Target::from_sample(sample, s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(r) = crop {
            w.frames = w.frames.iter().map(|f| crop_chw(f, r)).collect::<Result<_>>()?;
            w.segs = w.segs.iter().map(|s| crop_seg(s, r)).collect::<Result<_>>()?;
            w.last_flow = w.last_flow.as_ref().map(|f| crop_flow(f, r)).transpose()?;
            for tg in &mut ts {
                tg.flow = crop_flow(&tg.flow, r)?;
                tg.seg = crop_seg(&tg.seg, r)?;
                tg.labels = tg.seg.labels();
            }
        }
        Ok((w, ts))
    }
}

/// `[2,H,W]` last flow of a window, zeros when the history starts at frame 0.
pub fn window_last_flow(w: &Window) -> Tensor<f32> {
    match &w.last_flow {
        Some(f) => Tensor::new(&[2, f.height, f.width], [f.u.as_slice(), &f.v].concat()).expect("flow shape"),
        None => {
            let s = &w.frames[0].shape();
            Tensor::zeros(&[2, s[1], s[2]])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

fn crop_planes(data: &[f32], c: usize, h: usize, w: usize, r: CropRect) -> Result<Vec<f32>> {
    if r.y + r.h > h || r.x + r.w > w {
        return Err(Error::Dimension(format!("crop {r:?} outside {h}x{w}")));
    }
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&data[row + r.x..row + r.x + r.w]);
        }
    }
    Ok(out)
}

pub fn crop_chw(t: &Tensor<f32>, r: CropRect) -> Result<Tensor<f32>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("crop of shape {:?}", t.shape())));
    };
    Ok(Tensor::new(&[c, r.h, r.w], crop_planes(t.data(), c, h, w, r)?)?)
}

pub fn crop_seg(s: &SegMap, r: CropRect) -> Result<SegMap> {
    SegMap::new(s.classes, r.h, r.w, crop_planes(&s.scores, s.classes, s.height, s.width, r)?)
}

pub fn crop_flow(f: &FlowField, r: CropRect) -> Result<FlowField> {
    FlowField::new(
        r.h,
        r.w,
        crop_planes(&f.u, 1, f.height, f.width, r)?,
        crop_planes(&f.v, 1, f.height, f.width, r)?,
    )
}

/// Per-parameter gradients (`None` where a parameter did not influence the loss).
pub type ParamGrads = Vec<Option<Tensor<f32>>>;

fn collect_grads(g: &Graph<f32>, bound: &Bound, loss: Var) -> Result<ParamGrads> {
    let mut grads = g.backward(loss)?;
    Ok(bound.0.iter().map(|&v| grads.take(v)).collect())
}

fn clip(grads: &mut ParamGrads, max_norm: Option<f64>) {
    let Some(max) = max_norm else { return };
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if !b.combined.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {b:?}")));
    }
    Ok(())
}

/// Single-step loss and parameter gradients.
pub fn single_step_gradients(model: &JointModel, batch: &Batch, seg_weight: f64) -> Result<(ParamGrads, LossBreakdown)> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, true);
    let frames: Vec<Var> = batch.frames.iter().map(|t| g.constant(t.clone())).collect();
    let segs: Vec<Var> = batch.segs.iter().map(|t| g.constant(t.clone())).collect();
    let last_flow = g.constant(batch.last_flow.clone());
    let out = model.joint_forward(&mut g, &bound, &frames, &segs, Some(last_flow))?;
    let targets: Vec<&Target> = batch.targets[0].iter().collect();
    let loss = total_loss(&mut g, out.flow.branches, out.seg, &out.masks, &targets, seg_weight)?;
    let breakdown = loss.breakdown(&g);
    check_finite(&breakdown)?;
    Ok((collect_grads(&g, &bound, loss.combined)?, breakdown))
}

/// Forward, loss, backward and one SGD update on the first target of `batch`.
pub fn train_one_step(model: &mut JointModel, opt: &mut Sgd, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<LossBreakdown> {
    let (mut grads, breakdown) = single_step_gradients(model, batch, cfg.seg_weight)?;
    clip(&mut grads, cfg.clip_grad_norm);
    opt.apply(model, &grads, lr)?;
    Ok(breakdown)
}

/// How an unrolled prediction is differentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct Unroll {
    pub steps: usize,
    pub grad_through_warp: bool,
    /// Let gradients pass through predicted score maps fed back as input.
    pub grad_through_seg: bool,
    /// Per-step loss weights; all 1 when `None`.
    pub step_weights: Option<Vec<f64>>,
}

impl Unroll {
    pub fn new(steps: usize, grad_through_warp: bool) -> Self {
        Unroll {
            steps,
            grad_through_warp,
            grad_through_seg: true,
            step_weights: None,
        }
    }
}

/// Runs `steps` recursive predictions in one graph. Each step warps the most
/// recent frame by the predicted flow and feeds it, with the predicted score
/// map, back as the newest history item; the predicted flow becomes the next
/// step's last flow.
#[allow(clippy::too_many_arguments)]
pub fn unroll<T: Scalar>(
    model: &JointModel,
    g: &mut Graph<T>,
    bound: &Bound,
    mut frames: Vec<Var>,
    mut segs: Vec<Var>,
    mut last_flow: Option<Var>,
    steps: usize,
    grad_through_warp: bool,
    grad_through_seg: bool,
) -> Result<Vec<JointOutputs>> {
    if steps == 0 {
        return Err(Error::Usage("rollout horizon must be >= 1".into()));
    }
    let mut outs = Vec::with_capacity(steps);
    for s in 0..steps {
        let out = model.joint_forward(g, bound, &frames, &segs, last_flow)?;
        if s + 1 < steps {
            let last = *frames.last().expect("history");
            let mut xhat = warp_var(g, last, out.flow.merged)?;
            let mut flow = out.flow.merged;
            if !grad_through_warp {
                xhat = g.constant(g.value(xhat).clone());
                flow = g.constant(g.value(flow).clone());
            }
            last_flow = Some(flow);
            let shat = if grad_through_seg {
                out.seg
            } else {
                g.constant(g.value(out.seg).clone())
            };
            frames.remove(0);
            frames.push(xhat);
            segs.remove(0);
            segs.push(shat);
        }
        outs.push(out);
    }
    Ok(outs)
}

/// Sum of per-step losses over an unrolled prediction and its parameter gradients.
pub fn unrolled_gradients(
    model: &JointModel,
    batch: &Batch,
    unroll_cfg: &Unroll,
    seg_weight: f64,
) -> Result<(ParamGrads, Vec<LossBreakdown>)> {
    if batch.steps() < unroll_cfg.steps {
        return Err(Error::Usage(format!(
            "batch has {} targets, unroll needs {}",
            batch.steps(),
            unroll_cfg.steps
        )));
    }
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, true);
    let frames: Vec<Var> = batch.frames.iter().map(|t| g.constant(t.clone())).collect();
    let segs: Vec<Var> = batch.segs.iter().map(|t| g.constant(t.clone())).collect();
    let last_flow = g.constant(batch.last_flow.clone());
    let outs = unroll(
        model,
        &mut g,
        &bound,
        frames,
        segs,
        Some(last_flow),
        unroll_cfg.steps,
        unroll_cfg.grad_through_warp,
        unroll_cfg.grad_through_seg,
    )?;
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(outs.len());
    for (s, out) in outs.iter().enumerate() {
        let targets: Vec<&Target> = batch.targets[s].iter().collect();
        let loss = total_loss(&mut g, out.flow.branches, out.seg, &out.masks, &targets, seg_weight)?;
        let b = loss.breakdown(&g);
        check_finite(&b)?;
        parts.push(b);
        let w = unroll_cfg.step_weights.as_ref().map_or(1.0, |w| w[s]);
        let term = if w == 1.0 {
            loss.combined
        } else {
            g.scale(loss.combined, w as f32)
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let grads = collect_grads(&g, &bound, total.expect("steps >= 1"))?;
    Ok((grads, parts))
}

/// One update on the summed loss of `steps` recursive predictions.
pub fn bptt_finetune(model: &mut JointModel, opt: &mut Sgd, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<LossBreakdown> {
    let u = Unroll::new(cfg.bptt_steps, cfg.grad_through_warp);
    let (mut grads, parts) = unrolled_gradients(model, batch, &u, cfg.seg_weight)?;
    clip(&mut grads, cfg.clip_grad_norm);
    opt.apply(model, &grads, lr)?;
    Ok(LossBreakdown::accumulate(&parts).expect("at least one step"))
}

/// `T` recursive predictions from a window, without tracking gradients.
pub fn rollout(model: &JointModel, window: &Window, horizon: usize) -> Result<Vec<(FlowField, SegMap)>> {
    if horizon == 0 {
        return Err(Error::Usage("rollout horizon must be >= 1".into()));
    }
    let mut frames: Vec<Tensor<f32>> = window.frames.iter().map(|f| f.clone().unsqueeze0()).collect();
    let mut segs: Vec<Tensor<f32>> = window.segs.iter().map(|s| s.to_tensor()).collect();
    let mut last_flow = window_last_flow(window).unsqueeze0();
    let mut out = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, false);
        let fv: Vec<Var> = frames.iter().map(|t| g.constant(t.clone())).collect();
        let sv: Vec<Var> = segs.iter().map(|t| g.constant(t.clone())).collect();
        let lf = g.constant(last_flow.clone());
        let o = model.joint_forward(&mut g, &bound, &fv, &sv, Some(lf))?;
        let flow = FlowField::from_tensor(g.value(o.flow.merged), 0)?;
        let seg = SegMap::from_tensor(g.value(o.seg), 0)?;
        if s + 1 < horizon {
            let last = *fv.last().expect("history");
            let xhat = warp_var(&mut g, last, o.flow.merged)?;
            frames.remove(0);
            frames.push(g.value(xhat).clone());
            segs.remove(0);
            segs.push(g.value(o.seg).clone());
            last_flow = g.value(o.flow.merged).clone();
        }
        out.push((flow, seg));
    }
    Ok(out)
}

/// One-step prediction `(Ô_t, Ŝ_t)`.
pub fn predict(model: &JointModel, window: &Window) -> Result<(FlowField, SegMap)> {
    Ok(rollout(model, window, 1)?.remove(0))
}

/// A training-log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: String,
    pub step: usize,
    pub lr: f64,
    pub wall_time: f64,
    pub loss: LossBreakdown,
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean combined loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Every `(sample, t)` with a full history and `steps` targets.
pub fn window_index(data: &[VideoSample], k: usize, steps: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::new();
    for (i, s) in data.iter().enumerate() {
        for t in k.max(1)..s.len() {
            if t + steps <= s.len() {
                idx.push((i, t));
            }
        }
    }
    idx
}

fn random_crop(rng: &mut ChaCha8Rng, crop: Option<[usize; 2]>, h: usize, w: usize) -> Option<CropRect> {
    let [ch, cw] = crop?;
    if ch >= h && cw >= w {
        return None;
    }
    let (ch, cw) = (ch.min(h), cw.min(w));
    Some(CropRect {
        y: rng.random_range(0..=h - ch),
        x: rng.random_range(0..=w - cw),
        h: ch,
        w: cw,
    })
}

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// One-step prediction from ground-truth histories.
    Single,
    /// `bptt_steps` recursive predictions per update.
    Bptt,
}

/// Shuffled minibatch training over every window of `data`.
pub fn train(
    model: &mut JointModel,
    opt: &mut Sgd,
    data: &[VideoSample],
    cfg: &TrainConfig,
    phase: Phase,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let steps_per_item = match phase {
        Phase::Single => 1,
        Phase::Bptt => cfg.bptt_steps,
    };
    let k = model.config.history_len;
    let mut index = window_index(data, k, steps_per_item);
    if index.is_empty() {
        return Err(Error::Usage("no training windows: sequences too short for the history".into()));
    }
    let per_epoch = index.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut summary = TrainSummary {
        steps: 0,
        first_loss: f64::NAN,
        last_loss: f64::NAN,
        epoch_loss: Vec::new(),
    };
    let phase_name = match phase {
        Phase::Single => "single",
        Phase::Bptt => "bptt",
    };
    for _ in 0..cfg.epochs {
        if summary.steps >= total {
            break;
        }
        index.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for chunk in index.chunks(cfg.batch_size) {
            if summary.steps >= total {
                break;
            }
            let (h, w) = (data[0].height(), data[0].width());
            let crop = random_crop(&mut rng, cfg.crop, h, w);
            let (windows, targets): (Vec<_>, Vec<_>) = chunk
                .iter()
                .map(|&(i, t)| Batch::item(&data[i], t, k, steps_per_item, crop))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let batch = Batch::from_items(&windows, &targets)?;
            let lr = cfg.lr_at(summary.steps, total);
            let b = match phase {
                Phase::Single => train_one_step(model, opt, &batch, cfg, lr)?,
                Phase::Bptt => bptt_finetune(model, opt, &batch, cfg, lr)?,
            };
            if summary.steps == 0 {
                summary.first_loss = b.combined;
            }
            summary.last_loss = b.combined;
            epoch_sum += b.combined;
            epoch_n += 1;
            if let Some(w) = log.as_deref_mut() {
                let entry = LogEntry {
                    phase: phase_name.into(),
                    step: summary.steps,
                    lr,
                    wall_time: start.elapsed().as_secs_f64(),
                    loss: b,
                };
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            }
            summary.steps += 1;
        }
        summary.epoch_loss.push(epoch_sum / epoch_n.max(1) as f64);
    }
    Ok(summary)
}
