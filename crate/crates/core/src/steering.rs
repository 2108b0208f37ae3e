//! Steering-angle regression from the static-group flow branch.
//!
//! The head is `angle = w · GAP(a) + b`, where `a` is the static branch's
//! last activation before its flow head.

use jant_autograd::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Window;
use crate::error::{Error, Result};
use crate::metrics::steering_mse;
use crate::nets::{masks_from_scores, steering_linear, JointModel};
use crate::synthgen::VideoSample;
use crate::trainer::{window_last_flow, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Also update the encoder and static branch (otherwise only the head).
    pub finetune_backbone: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            epochs: 300,
            learning_rate: 0.0,
            momentum: 0.9,
            finetune_backbone: false,
            batch_size: 8,
            seed: 0,
        }
    }
}

fn window_vars(g: &mut Graph<f32>, windows: &[&Window]) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let k = windows[0].k();
    let mut frames = Vec::with_capacity(k);
    let mut segs = Vec::with_capacity(k);
    for j in 0..k {
        let f: Vec<Tensor<f32>> = windows.iter().map(|w| w.frames[j].clone().unsqueeze0()).collect();
        frames.push(g.constant(Tensor::concat_batch(&f)?));
        let s: Vec<Tensor<f32>> = windows.iter().map(|w| w.segs[j].to_tensor()).collect();
        segs.push(g.constant(Tensor::concat_batch(&s)?));
    }
    let lf: Vec<Tensor<f32>> = windows.iter().map(|w| window_last_flow(w).unsqueeze0()).collect();
    let last_flow = g.constant(Tensor::concat_batch(&lf)?);
    Ok((frames, segs, last_flow))
}

/// Pooled static-branch activations `[N, base_channels]` for a batch of windows.
pub fn pooled_features(model: &JointModel, windows: &[&Window]) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, false);
    let (frames, segs, last_flow) = window_vars(&mut g, windows)?;
    let masks = masks_from_scores(g.value(*segs.last().expect("history")), &model.config.class_table())?;
    let flow = model.flow_forward(&mut g, &b, &frames, &masks, Some(last_flow))?;
    let pooled = g.global_avg_pool(flow.sta_penultimate)?;
    Ok(g.value(pooled).clone())
}

/// Predicted steering angle in degrees.
pub fn steering_forward(model: &JointModel, window: &Window) -> Result<f32> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, false);
    let (frames, segs, last_flow) = window_vars(&mut g, &[window])?;
    let masks = masks_from_scores(g.value(segs[segs.len() - 1]), &model.config.class_table())?;
    let flow = model.flow_forward(&mut g, &b, &frames, &masks, Some(last_flow))?;
    let out = model.steering_forward(&mut g, &b, &flow)?;
    Ok(g.value(out).data()[0])
}

/// The evaluation window of each sequence: history ending before its last frame.
pub fn eval_windows(data: &[VideoSample], k: usize) -> Result<Vec<Window>> {
    data.iter().map(|s| Window::from_sample(s, s.len() - 1, k)).collect()
}

/// Steering predictions and ground truth on the evaluation window of each sequence.
pub fn evaluate_steering(model: &JointModel, data: &[VideoSample]) -> Result<(Vec<f32>, Vec<f32>, f64)> {
    let windows = eval_windows(data, model.config.history_len)?;
    let pred = windows
        .iter()
        .map(|w| steering_forward(model, w))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<f32> = data.iter().map(|s| s.steering_angle).collect();
    let mse = steering_mse(&pred, &gt)?;
    Ok((pred, gt, mse))
}

/// Fits the steering head with the MSE loss; returns held-out MSE after each epoch.
///
/// With a frozen backbone the pooled features are computed once and the
/// head is fitted by full-batch gradient descent; `learning_rate` 0 picks a
/// step from the feature scale. With backbone fine-tuning every parameter
/// the loss reaches is updated by minibatch SGD.
pub fn train_steering(
    model: &mut JointModel,
    train: &[VideoSample],
    heldout: &[VideoSample],
    cfg: &SteeringConfig,
) -> Result<Vec<f64>> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Usage("steering training needs train and held-out sequences".into()));
    }
    if !model.has_steering_head() {
        model.attach_steering_head(cfg.seed);
    }
    let k = model.config.history_len;
    let windows: Vec<Window> = train
        .iter()
        .flat_map(|s| (k..s.len()).map(move |t| Window::from_sample(s, t, k)))
        .collect::<Result<_>>()?;
    let angles: Vec<f32> = train
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.steering_angle, s.len() - k))
        .collect();
    let held_windows = eval_windows(heldout, k)?;
    let held_angles: Vec<f32> = heldout.iter().map(|s| s.steering_angle).collect();
    let w_idx = model.params.index_of("steer.w").expect("head attached");
    let b_idx = model.params.index_of("steer.b").expect("head attached");
    let mut curve = Vec::with_capacity(cfg.epochs);

    if !cfg.finetune_backbone {
        let refs: Vec<&Window> = windows.iter().collect();
        let feats = batched_features(model, &refs, cfg.batch_size)?;
        let held_refs: Vec<&Window> = held_windows.iter().collect();
        let held_feats = batched_features(model, &held_refs, cfg.batch_size)?;
        let d = feats.shape()[1];
        let lr = if cfg.learning_rate > 0.0 {
            cfg.learning_rate
        } else {
            // 1 / (trace of the second-moment matrix + 1) bounds the largest eigenvalue
            let n = feats.shape()[0] as f64;
            let tr: f64 = feats.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
            1.0 / (tr + 1.0)
        };
        let target = Tensor::new(&[angles.len(), 1], angles.clone())?;
        let mut vel = [vec![0f32; d], vec![0f32]];
        for _ in 0..cfg.epochs {
            // 200 full-batch steps per epoch: the head is tiny
            for _ in 0..200 {
                let mut g = Graph::<f32>::new();
                let x = g.constant(feats.clone());
                let w = g.param(model.params.tensors[w_idx].clone());
                let b = g.param(model.params.tensors[b_idx].clone());
                let y = steering_linear(&mut g, x, w, b)?;
                let t = g.constant(target.clone());
                let diff = g.sub(y, t)?;
                let sq = g.mul(diff, diff)?;
                let loss = g.mean(sq);
                let grads = g.backward(loss)?;
                for (slot, (idx, var)) in [(w_idx, w), (b_idx, b)].into_iter().enumerate() {
                    let gr = grads.get(var).expect("head gradient");
                    let p = model.params.tensors[idx].data_mut();
                    for ((pv, v), &gv) in p.iter_mut().zip(vel[slot].iter_mut()).zip(gr.data()) {
                        *v = cfg.momentum as f32 * *v + gv;
                        *pv -= lr as f32 * *v;
                    }
                }
            }
            let mut g = Graph::<f32>::new();
            let x = g.constant(held_feats.clone());
            let w = g.constant(model.params.tensors[w_idx].clone());
            let b = g.constant(model.params.tensors[b_idx].clone());
            let y = steering_linear(&mut g, x, w, b)?;
            curve.push(steering_mse(g.value(y).data(), &held_angles)?);
            if !model.params.all_finite() {
                return Err(Error::Divergence("steering head diverged".into()));
            }
        }
        return Ok(curve);
    }

    let lr = if cfg.learning_rate > 0.0 { cfg.learning_rate } else { 1e-4 };
    let mut opt = Sgd::new(model, cfg.momentum, 0.0);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, true);
            let (frames, segs, last_flow) = window_vars(&mut g, &batch)?;
            let masks = masks_from_scores(g.value(segs[segs.len() - 1]), &model.config.class_table())?;
            let flow = model.flow_forward(&mut g, &bound, &frames, &masks, Some(last_flow))?;
            let y = model.steering_forward(&mut g, &bound, &flow)?;
            let t = g.constant(Tensor::new(&[chunk.len(), 1], chunk.iter().map(|&i| angles[i]).collect())?);
            let diff = g.sub(y, t)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq);
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Divergence("non-finite steering loss".into()));
            }
            let mut grads = g.backward(loss)?;
            let pg: Vec<_> = bound.0.iter().map(|&v| grads.take(v)).collect();
            opt.apply(model, &pg, lr)?;
        }
        let (_, _, mse) = evaluate_steering(model, heldout)?;
        curve.push(mse);
    }
    Ok(curve)
}

fn batched_features(model: &JointModel, windows: &[&Window], batch: usize) -> Result<Tensor<f32>> {
    let parts = windows
        .chunks(batch.max(1))
        .map(|c| pooled_features(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_batch(&parts)?)
}
