//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit if any fails. The training benchmark dominates the runtime.

use std::time::Instant;

use jant::baselines::{Baseline, Target, Window};
use jant::checkpoint::{decode, encode};
use jant::dataset::{read_dataset, write_dataset};
use jant::eval::{evaluate, Predictor};
use jant::flowio::{decode_flo, encode_flo};
use jant::losses::{flow_group_loss, flow_group_loss_value, seg_ce_loss, seg_l1_gdl_loss, seg_loss, SegMode};
use jant::metrics::{epe, miou, EvalReport};
use jant::nets::{JointModel, ModelConfig};
use jant::steering::{evaluate_steering, train_steering, SteeringConfig};
use jant::synthgen::{DatasetConfig, SceneConfig, VideoSample};
use jant::trainer::{
    bptt_finetune, rollout, single_step_gradients, train, train_one_step, unrolled_gradients, window_last_flow, Batch,
    Phase, Sgd, TrainConfig, Unroll,
};
use jant::warp::{backward_warp, warp_var};
use jant::{FlowField, Group, GroupMask, SegMap};
use jant_autograd::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GroupMask {
    GroupMask {
        height: h,
        width: w,
        groups: (0..h * w).map(|_| Group::ALL[rng.random_range(0..3)]).collect(),
    }
}

fn rand_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f32) -> FlowField {
    let n = h * w;
    FlowField::new(
        h,
        w,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- gradients

const SEEDS: u64 = 20;
const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

/// Worst relative error of `f` over `SEEDS` random input sets.
fn worst<F>(mk: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F) -> std::result::Result<f64, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> jant::Result<Var> + Copy,
{
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = mk(&mut rng);
        worst = worst.max(grad_check(f, &inputs, EPS).map_err(e2s)?);
    }
    Ok(worst)
}

/// Prediction/teacher pair whose ℓ1 and gradient-difference terms stay clear of their kinks.
fn kink_free_pair(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> (Tensor<f64>, Tensor<f64>) {
    let [n, c, h, w] = shape;
    let far = |x: f64| x.abs() > 0.01;
    loop {
        let p = rand_tensor(rng, &shape);
        let t = rand_tensor(rng, &shape);
        let (pd, td) = (p.data(), t.data());
        let mut ok = pd.iter().zip(td).all(|(a, b)| far(a - b));
        for plane in 0..n * c {
            let at = |d: &[f64], y: usize, x: usize| d[(plane * h + y) * w + x];
            for y in 0..h {
                for x in 0..w {
                    for (dy, dx) in [(0, 1), (1, 0)] {
                        if y + dy < h && x + dx < w {
                            let dp = at(pd, y + dy, x + dx) - at(pd, y, x);
                            let dt = at(td, y + dy, x + dx) - at(td, y, x);
                            ok &= far(dp) && far(dp.abs() - dt.abs());
                        }
                    }
                }
            }
        }
        if ok {
            return (p, t);
        }
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        history_len: 2,
        num_classes: 4,
        base_channels: 3,
        encoder_blocks: 2,
        branch_blocks: 1,
        // the warped parsing base detaches the flow on purpose, so it is left out here
        flow_prior: true,
        ..Default::default()
    }
}

fn jittered(cfg: ModelConfig, seed: u64) -> JointModel {
    let mut m = JointModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut m.params.tensors {
        for x in t.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    m
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut results: Vec<(&str, f64)> = Vec::new();
    macro_rules! op {
        ($name:expr, $mk:expr, $f:expr) => {
            results.push(($name, worst($mk, $f)?));
        };
    }
    op!("add/sub/mul/scale", |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        let m = g.scale(m, 1.7);
        let m2 = g.mul(m, m)?;
        Ok(g.sum(m2))
    });
    op!("relu", |r| vec![off_zero(r, &[12]), rand_tensor(r, &[12])], |g, v| {
        let a = g.relu(v[0]);
        let m = g.mul(a, v[1])?;
        Ok(g.sum(m))
    });
    op!("abs/mean", |r| vec![off_zero(r, &[12]), rand_tensor(r, &[12])], |g, v| {
        let a = g.abs(v[0]);
        let m = g.mul(a, v[1])?;
        Ok(g.mean(m))
    });
    op!("conv2d", |r| vec![rand_tensor(r, &[2, 2, 6, 5]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3]), rand_tensor(r, &[2, 3, 3, 3])], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        let m = g.mul(y, v[3])?;
        Ok(g.sum(m))
    });
    op!("upsample", |r| vec![rand_tensor(r, &[1, 2, 3, 4]), rand_tensor(r, &[1, 2, 6, 8])], |g, v| {
        let y = g.upsample_bilinear(v[0], 2)?;
        let m = g.mul(y, v[1])?;
        Ok(g.sum(m))
    });
    op!("softmax", |r| vec![rand_tensor(r, &[2, 4, 2, 3]), rand_tensor(r, &[2, 4, 2, 3])], |g, v| {
        let y = g.softmax_channels(v[0])?;
        let m = g.mul(y, v[1])?;
        Ok(g.sum(m))
    });
    op!("cross_entropy", |r| vec![rand_tensor(r, &[2, 5, 2, 2])], |g, v| {
        let labels = vec![Some(0), Some(4), None, Some(2), Some(1), Some(1), Some(3), None];
        let y = g.cross_entropy_map(v[0], labels)?;
        Ok(g.sum(y))
    });
    op!("channel_norm", |r| vec![off_zero(r, &[2, 2, 3, 3]), rand_tensor(r, &[2, 1, 3, 3])], |g, v| {
        let n = g.channel_norm(v[0])?;
        let m = g.mul(n, v[1])?;
        Ok(g.sum(m))
    });
    op!("concat/slice", |r| vec![rand_tensor(r, &[2, 2, 2, 3]), rand_tensor(r, &[2, 3, 2, 3]), rand_tensor(r, &[2, 3, 2, 3])], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 3)?;
        let m = g.mul(s, v[2])?;
        let m = g.mul(m, s)?;
        Ok(g.sum(m))
    });
    op!("linear/pool", |r| vec![rand_tensor(r, &[3, 4, 2, 2]), rand_tensor(r, &[2, 4]), rand_tensor(r, &[2])], |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let y = g.linear(p, v[1], v[2])?;
        let y2 = g.mul(y, y)?;
        Ok(g.mean(y2))
    });
    op!("diff_x/diff_y", |r| vec![rand_tensor(r, &[1, 2, 3, 4]), rand_tensor(r, &[1, 2, 2, 4]), rand_tensor(r, &[1, 2, 3, 3])], |g, v| {
        let dy = g.diff_y(v[0])?;
        let dx = g.diff_x(v[0])?;
        let a = g.mul(dy, v[1])?;
        let b = g.mul(dx, v[2])?;
        let (a, b) = (g.sum(a), g.sum(b));
        Ok(g.add(a, b)?)
    });
    op!("warp", |r| {
        // fractional parts kept off the integer kinks of the bilinear weights
        let flow = Tensor::from_fn(&[1, 2, 5, 6], |_| {
            let whole = r.random_range(-1i32..=1) as f64;
            whole + r.random_range(0.2..0.8) * if r.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        vec![rand_tensor(r, &[1, 2, 5, 6]), flow, rand_tensor(r, &[1, 2, 5, 6])]
    }, |g, v| {
        let y = warp_var(g, v[0], v[1])?;
        let m = g.mul(y, v[2])?;
        Ok(g.sum(m))
    });

    // losses: masks and labels are fixed per seed through the rng stream
    let mut flow_worst = 0f64;
    let mut seg_worst = [0f64; 3];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let masks: Vec<GroupMask> = (0..2).map(|_| rand_mask(&mut rng, 3, 3)).collect();
        let target = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| off_zero(&mut rng, &[2, 2, 3, 3])).collect();
        let err = grad_check(
            |g, v| -> jant::Result<Var> {
                let t = g.constant(target.clone());
                Ok(flow_group_loss(g, [v[0], v[1], v[2]], t, &masks)?.1)
            },
            &inputs,
            EPS,
        )
        .map_err(e2s)?;
        flow_worst = flow_worst.max(err);
        let labels: Vec<Vec<Option<usize>>> = (0..2)
            .map(|_| (0..9).map(|_| Some(rng.random_range(0..4))).collect())
            .collect();
        let (pred, teacher) = kink_free_pair(&mut rng, [2, 4, 3, 3]);
        for (i, annotated) in [[true, true], [false, false], [true, false]].iter().enumerate() {
            let err = grad_check(
                |g, v| -> jant::Result<Var> {
                    let t = g.constant(teacher.clone());
                    Ok(seg_loss(g, v[0], t, &labels, annotated)?.0)
                },
                std::slice::from_ref(&pred),
                EPS,
            )
            .map_err(e2s)?;
            seg_worst[i] = seg_worst[i].max(err);
        }
    }
    results.push(("flow loss", flow_worst));
    results.push(("seg loss CE", seg_worst[0]));
    results.push(("seg loss L1+GDL", seg_worst[1]));
    results.push(("seg loss mixed", seg_worst[2]));

    // both networks end to end, with respect to their inputs
    let model = jittered(tiny_model_config(), 11);
    let mut net_worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut inputs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(0.0..1.0))).collect();
        inputs.extend((0..2).map(|_| {
            // well-separated logits keep the argmax group masks fixed under ±eps
            Tensor::from_fn(&[1, 4, 4, 4], |i| ((i % 4) as f64) * 1.5 + rng.random_range(-0.3..0.3))
        }));
        // fractional displacements keep the self-warp of the last flow off its kinks
        inputs.push(Tensor::from_fn(&[1, 2, 4, 4], |_| {
            rng.random_range(0.2..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        }));
        let probe_f = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let probe_s = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let err = grad_check(
            |g, v| -> jant::Result<Var> {
                let b = model.bind(g, false);
                let out = model.joint_forward(g, &b, &v[..2], &v[2..4], Some(v[4]))?;
                let pf = g.constant(probe_f.clone());
                let ps = g.constant(probe_s.clone());
                let a = g.mul(out.flow.merged, pf)?;
                let c = g.mul(out.seg, ps)?;
                let (a, c) = (g.sum(a), g.sum(c));
                Ok(g.add(a, c)?)
            },
            &inputs,
            EPS,
        )
        .map_err(e2s)?;
        net_worst = net_worst.max(err);
    }
    results.push(("joint network", net_worst));

    let secs = start.elapsed().as_secs_f64();
    let max = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let (name, _) = results.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    ensure(max < TOL, || format!("{name}: relative error {max:.2e} >= {TOL:e}"))?;
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!("{} checks x {SEEDS} seeds, worst {max:.1e} ({name}), {secs:.1}s", results.len()))
}

// ------------------------------------------------------------------ metrics

fn brute_epe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..gt.height {
        for x in 0..gt.width {
            let p = y * gt.width + x;
            if mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let du = pred.u[p] as f64 - gt.u[p] as f64;
            let dv = pred.v[p] as f64 - gt.v[p] as f64;
            sum += (du * du + dv * dv).sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

fn brute_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let mut inter = 0;
        let mut union = 0;
        for i in 0..gt.len() {
            let (p, g) = (pred[i] == c, gt[i] == c);
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn metric_oracles() -> Check {
    let mut worst = 0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rand_flow(&mut rng, 8, 8, 5.0), rand_flow(&mut rng, 8, 8, 5.0));
        let mask: Vec<bool> = (0..64).map(|i| i == 0 || rng.random_bool(0.4)).collect();
        worst = worst.max((epe(&a, &b, None).map_err(e2s)? - brute_epe(&a, &b, None)).abs());
        worst = worst.max((epe(&a, &b, Some(&mask)).map_err(e2s)? - brute_epe(&a, &b, Some(&mask))).abs());
        let classes = rng.random_range(2..9);
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes) as u8).collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..classes) as u8 })
            .collect();
        let (m, _) = miou(&pred, &gt, classes, None).map_err(e2s)?;
        worst = worst.max((m - brute_miou(&pred, &gt, classes)).abs());
    }
    let (hand, _) = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).map_err(e2s)?;
    ensure((hand - 7.0 / 12.0).abs() < 1e-12, || format!("2x2 hand case gave {hand}"))?;
    ensure(worst <= 1e-6, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

// --------------------------------------------------------------------- warp

fn warp_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let src = Tensor::from_fn(&[3, h, w], |_| rng.random_range(-2.0f32..2.0));
        let out = backward_warp(&src, &FlowField::zeros(h, w)).map_err(e2s)?;
        ensure(out.data().iter().zip(src.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            "zero flow changed the image".into()
        })?;
        let (du, dv) = (rng.random_range(-4i32..5), rng.random_range(-4i32..5));
        let shifted = backward_warp(&src, &FlowField::constant(h, w, du as f32, dv as f32)).map_err(e2s)?;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x as i32 - du).clamp(0, w as i32 - 1) as usize;
                    let sy = (y as i32 - dv).clamp(0, h as i32 - 1) as usize;
                    let want = src.data()[(c * h + sy) * w + sx];
                    let got = shifted.data()[(c * h + y) * w + x];
                    ensure(got.to_bits() == want.to_bits(), || format!("shift ({du},{dv}) at c{c} y{y} x{x}"))?;
                }
            }
        }
    }
    let data = DatasetConfig {
        num_samples: 6,
        seed: 21,
        ..Default::default()
    }
    .generate()
    .map_err(e2s)?;
    let mut worst = 0f32;
    let mut checked = 0usize;
    for s in &data {
        let plane = s.height() * s.width();
        for t in 1..s.len() {
            let warped = backward_warp(&s.frames[t - 1], s.flow_at(t)).map_err(e2s)?;
            let valid = s.valid_at(t);
            for c in 0..3 {
                for p in (0..plane).filter(|&p| valid[p]) {
                    worst = worst.max((warped.data()[c * plane + p] - s.frames[t].data()[c * plane + p]).abs());
                    checked += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("generator frames deviate by {worst:e} on valid pixels"))?;
    Ok(format!("identity and 20 integer shifts bitwise; generator max deviation {worst:e} over {checked} values"))
}

// ------------------------------------------------------------------ formats

fn format_fidelity() -> Check {
    let one = encode_flo(&FlowField::constant(1, 1, 1.0, -2.0)).map_err(e2s)?;
    let mut want = b"PIEH".to_vec();
    for x in [1u32.to_le_bytes(), 1u32.to_le_bytes(), 1f32.to_le_bytes(), (-2f32).to_le_bytes()] {
        want.extend_from_slice(&x);
    }
    ensure(one == want, || format!("1x1 layout {one:02x?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let f = FlowField::new(
            h,
            w,
            (0..h * w).map(|_| f32::from_bits(rng.random::<u32>() & 0xBFFF_FFFF)).collect(),
            (0..h * w).map(|_| rng.random_range(-1e6f32..1e6)).collect(),
        )
        .map_err(e2s)?;
        let bytes = encode_flo(&f).map_err(e2s)?;
        let back = decode_flo(&bytes).map_err(e2s)?;
        let same = back.u.iter().chain(&back.v).zip(f.u.iter().chain(&f.v)).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && encode_flo(&back).map_err(e2s)? == bytes, || ".flo roundtrip changed bits".into())?;
    }

    let data = DatasetConfig {
        scene: SceneConfig {
            height: 16,
            width: 32,
            sequence_length: 6,
            ..Default::default()
        },
        num_samples: 2,
        seed: 4,
        ..Default::default()
    }
    .generate()
    .map_err(e2s)?;
    let cfg = ModelConfig {
        history_len: 2,
        base_channels: 4,
        encoder_blocks: 2,
        branch_blocks: 1,
        flow_prior: true,
        ..Default::default()
    };
    let mut m = JointModel::new(cfg).map_err(e2s)?;
    m.attach_steering_head(1);
    let tc = TrainConfig {
        crop: None,
        ..Default::default()
    };
    let mut opt = Sgd::from_config(&m, &tc);
    let b = batch(&data, 3, 2, 1);
    for _ in 0..2 {
        train_one_step(&mut m, &mut opt, &b, &tc, 0.01).map_err(e2s)?;
    }
    let bytes = encode(&m, Some(&opt)).map_err(e2s)?;
    let (m2, opt2) = decode(&bytes).map_err(e2s)?;
    ensure(m2.params == m.params && m2.config == m.config, || "checkpoint changed the model".into())?;
    let again = encode(&m2, opt2.as_ref()).map_err(e2s)?;
    ensure(again == bytes, || "re-encoded checkpoint differs".into())?;
    Ok(format!("50 .flo roundtrips bitwise, 20-byte 1x1 layout, {}-byte checkpoint roundtrip bitwise", bytes.len()))
}

// ------------------------------------------------------------------- losses

fn flow_loss_semantics() -> Check {
    let mut worst_sum = 0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<GroupMask> = (0..2).map(|_| rand_mask(&mut rng, 3, 4)).collect();
        let mut g = Graph::<f64>::new();
        let br: Vec<Var> = (0..3).map(|_| g.param(rand_tensor(&mut rng, &[2, 2, 3, 4]))).collect();
        let target = g.constant(rand_tensor(&mut rng, &[2, 2, 3, 4]));
        let (per, total) = flow_group_loss(&mut g, [br[0], br[1], br[2]], target, &masks).map_err(e2s)?;
        let sum: f64 = per.iter().map(|&v| g.value(v).data()[0]).sum();
        worst_sum = worst_sum.max((g.value(total).data()[0] - sum).abs());
        let grads = g.backward(total).map_err(e2s)?;
        for grp in Group::ALL {
            let gr = grads.get(br[grp.index()]).ok_or("missing branch gradient")?;
            for (i, m) in masks.iter().enumerate() {
                for (p, &x) in m.groups.iter().enumerate() {
                    for ch in 0..2 {
                        let v = gr.data()[(i * 2 + ch) * 12 + p];
                        ensure(x == grp || v == 0.0, || format!("{grp:?} gradient {v} outside its group"))?;
                    }
                }
            }
        }
    }
    ensure(worst_sum <= 1e-6, || format!("total deviates from the group sum by {worst_sum:e}"))?;
    let target = FlowField::new(1, 2, vec![0.0, 0.0], vec![0.0, 0.0]).map_err(e2s)?;
    let pred = FlowField::new(1, 2, vec![3.0, 0.0], vec![4.0, 1.0]).map_err(e2s)?;
    let mask = GroupMask {
        height: 1,
        width: 2,
        groups: vec![Group::Mov, Group::Sta],
    };
    let l = flow_group_loss_value(&[pred.clone(), pred.clone(), pred], &target, &mask).map_err(e2s)?;
    ensure(l == [5.0, 1.0, 0.0], || format!("hand case gave {l:?}"))?;
    Ok(format!("zero outside groups on 20 seeds, sum deviation {worst_sum:.0e}, hand case MOV=5 STA=1"))
}

fn seg_loss_semantics() -> Check {
    let mut worst_ce = 0f64;
    for c in [2usize, 4, 8, 19] {
        let pred = SegMap::new(c, 3, 5, vec![0.7; c * 15]).map_err(e2s)?;
        let labels: Vec<u8> = (0..15).map(|i| (i % c) as u8).collect();
        worst_ce = worst_ce.max((seg_ce_loss(&pred, &labels, None).map_err(e2s)? - (c as f64).ln()).abs());
    }
    ensure(worst_ce <= 1e-5, || format!("uniform CE off by {worst_ce:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let teacher = SegMap::new(5, 6, 7, (0..210).map(|_| rng.random_range(-5.0..5.0)).collect()).map_err(e2s)?;
    let mut worst_l1 = 0f64;
    for c in [-2.5f32, -0.5, 0.125, 1.0, 3.0] {
        let pred = SegMap::new(5, 6, 7, teacher.scores.iter().map(|x| x + c).collect()).map_err(e2s)?;
        worst_l1 = worst_l1.max((seg_l1_gdl_loss(&pred, &teacher).map_err(e2s)? - c.abs() as f64).abs());
    }
    ensure(worst_l1 <= 1e-6, || format!("shifted teacher off by {worst_l1:e}"))?;
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::zeros(&[2, 3, 2, 2]));
    let labels = vec![vec![Some(0); 4]; 2];
    let modes: Vec<SegMode> = [[true, true], [false, false], [true, false]]
        .iter()
        .map(|a| seg_loss(&mut g, p, p, &labels, a).map(|r| r.1))
        .collect::<jant::Result<_>>()
        .map_err(e2s)?;
    ensure(modes == [SegMode::CrossEntropy, SegMode::L1Gdl, SegMode::Mixed], || format!("modes {modes:?}"))?;
    Ok(format!("uniform CE = ln C within {worst_ce:.0e}, L1+GDL shift within {worst_l1:.0e}, modes follow annotation"))
}

// ------------------------------------------------------------ rollout/BPTT

fn batch(data: &[VideoSample], t: usize, k: usize, steps: usize) -> Batch {
    let (w, tg): (Vec<Window>, Vec<Vec<Target>>) = data.iter().map(|s| Batch::item(s, t, k, steps, None).unwrap()).unzip();
    Batch::from_items(&w, &tg).unwrap()
}

fn rollout_semantics() -> Check {
    let data = DatasetConfig {
        scene: SceneConfig {
            height: 16,
            width: 32,
            sequence_length: 8,
            num_shapes: 2,
            min_shape_size: 3,
            max_shape_size: 6,
            ..Default::default()
        },
        num_samples: 2,
        seed: 7,
        max_yaw: 1,
    }
    .generate()
    .map_err(e2s)?;
    let cfg = ModelConfig {
        history_len: 2,
        base_channels: 4,
        encoder_blocks: 2,
        branch_blocks: 1,
        flow_prior: true,
        warp_parse_base: true,
        ..Default::default()
    };
    let tc = TrainConfig::default();
    let mut m = JointModel::new(cfg).map_err(e2s)?;
    let mut opt = Sgd::from_config(&m, &tc);
    let b2 = batch(&data, 3, 2, 2);
    for _ in 0..3 {
        bptt_finetune(&mut m, &mut opt, &b2, &tc, 0.01).map_err(e2s)?;
    }

    let w = Window::from_sample(&data[0], 4, 2).map_err(e2s)?;
    let one = rollout(&m, &w, 1).map_err(e2s)?.remove(0);
    let ten = rollout(&m, &w, 4).map_err(e2s)?.remove(0);
    let mut g = Graph::<f32>::new();
    let bound = m.bind(&mut g, false);
    let fv: Vec<Var> = w.frames.iter().map(|f| g.constant(f.clone().unsqueeze0())).collect();
    let sv: Vec<Var> = w.segs.iter().map(|s| g.constant(s.to_tensor())).collect();
    let lf = g.constant(window_last_flow(&w).unsqueeze0());
    let out = m.joint_forward(&mut g, &bound, &fv, &sv, Some(lf)).map_err(e2s)?;
    let fwd = (
        FlowField::from_tensor(g.value(out.flow.merged), 0).map_err(e2s)?,
        SegMap::from_tensor(g.value(out.seg), 0).map_err(e2s)?,
    );
    ensure(one == fwd, || "T=1 rollout differs from the forward pass".into())?;
    ensure(ten == fwd, || "first step of a longer rollout differs".into())?;

    let b1 = batch(&data, 3, 2, 1);
    let (single, _) = single_step_gradients(&m, &b1, 1.0).map_err(e2s)?;
    let (unrolled, _) = unrolled_gradients(&m, &b1, &Unroll::new(1, true), 1.0).map_err(e2s)?;
    ensure(single == unrolled, || "1-step unrolled gradients differ".into())?;
    let one_step = TrainConfig { bptt_steps: 1, ..tc.clone() };
    let (mut ma, mut oa) = (m.clone(), opt.clone());
    let (mut mb, mut ob) = (m.clone(), opt.clone());
    train_one_step(&mut ma, &mut oa, &b1, &one_step, 0.01).map_err(e2s)?;
    bptt_finetune(&mut mb, &mut ob, &b1, &one_step, 0.01).map_err(e2s)?;
    ensure(ma.params == mb.params, || "bptt with one step updates differently".into())?;

    let both = Unroll::new(2, true);
    let first_only = Unroll {
        step_weights: Some(vec![1.0, 0.0]),
        ..both.clone()
    };
    let (ga, _) = unrolled_gradients(&m, &b2, &both, 1.0).map_err(e2s)?;
    let (gf, _) = unrolled_gradients(&m, &b2, &first_only, 1.0).map_err(e2s)?;
    let idx = m.params.index_of("flow.enc.0.down.w").ok_or("no encoder weight")?;
    let (a, f) = (ga[idx].as_ref().ok_or("no gradient")?, gf[idx].as_ref().ok_or("no gradient")?);
    let diff: f32 = a.data().iter().zip(f.data()).map(|(x, y)| (x - y).abs()).sum();
    ensure(diff > 0.0, || "step-2 loss left the first-step encoder gradient unchanged".into())?;
    Ok(format!("T=1 bitwise, 1-step BPTT update bitwise, step-2 contribution |dg|={diff:.2e}"))
}

// ---------------------------------------------------------------- benchmark

/// The fixed training schedule of the benchmark.
fn bench_model(seed: u64, transform_blocks: usize) -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        transform_blocks,
        flow_prior: true,
        warp_parse_base: true,
        seed,
        ..Default::default()
    }
}

fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        seed,
        ..Default::default()
    }
}

fn bench_bptt(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        learning_rate: 0.001,
        seed: seed + 7,
        ..Default::default()
    }
}

struct SeedResult {
    seed: u64,
    copy: EvalReport,
    warp: EvalReport,
    full: EvalReport,
    ablation: EvalReport,
    full10: EvalReport,
    bptt10: EvalReport,
}

struct Bench {
    results: Vec<SeedResult>,
    secs: f64,
    /// Seed-1 model and data, reused by the steering check.
    kept: Option<(JointModel, Vec<VideoSample>, Vec<VideoSample>)>,
}

fn run_bench() -> jant::Result<Bench> {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut kept = None;
    for seed in [1u64, 2, 3] {
        let train_d = DatasetConfig {
            num_samples: 200,
            seed,
            ..Default::default()
        }
        .generate()?;
        let eval_d = DatasetConfig {
            num_samples: 40,
            seed: seed + 1000,
            ..Default::default()
        }
        .generate()?;
        let k = ModelConfig::default().history_len;
        let copy = evaluate(Predictor::Baseline(Baseline::CopyLast), &eval_d, k, 1)?;
        let warp = evaluate(Predictor::Baseline(Baseline::WarpLast), &eval_d, k, 1)?;
        let mut trained = Vec::new();
        for tb in [1, 0] {
            let mut m = JointModel::new(bench_model(seed, tb))?;
            let tc = bench_train(seed);
            let mut opt = Sgd::from_config(&m, &tc);
            train(&mut m, &mut opt, &train_d, &tc, Phase::Single, None)?;
            trained.push((m, opt));
        }
        let (ablation_model, _) = trained.pop().unwrap();
        let (mut m, mut opt) = trained.pop().unwrap();
        let ablation = evaluate(Predictor::Model(&ablation_model), &eval_d, k, 1)?;
        let full = evaluate(Predictor::Model(&m), &eval_d, k, 1)?;
        let full10 = evaluate(Predictor::Model(&m), &eval_d, k, 10)?;
        train(&mut m, &mut opt, &train_d, &bench_bptt(seed), Phase::Bptt, None)?;
        let bptt10 = evaluate(Predictor::Model(&m), &eval_d, k, 10)?;
        eprintln!(
            "  seed {seed} ({:.0}s): copy {:.4}/{:.4} warp {:.4}/{:.4} full {:.4}/{:.4} w/o-transform {:.4}/{:.4} | 10-step mIoU {:.4} -> bptt {:.4}",
            start.elapsed().as_secs_f64(),
            copy.epe.unwrap(),
            copy.miou.unwrap(),
            warp.epe.unwrap(),
            warp.miou.unwrap(),
            full.epe.unwrap(),
            full.miou.unwrap(),
            ablation.epe.unwrap(),
            ablation.miou.unwrap(),
            full10.miou.unwrap(),
            bptt10.miou.unwrap(),
        );
        results.push(SeedResult {
            seed,
            copy,
            warp,
            full,
            ablation,
            full10,
            bptt10,
        });
        if seed == 1 {
            kept = Some((m, train_d, eval_d));
        }
    }
    Ok(Bench {
        results,
        secs: start.elapsed().as_secs_f64(),
        kept,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(bench: &jant::Result<Bench>) -> Check {
    let b = bench.as_ref().map_err(e2s)?;
    let r = &b.results;
    let mut fails = Vec::new();
    for s in r {
        let (e, m) = (s.full.epe.unwrap(), s.full.miou.unwrap());
        for (name, base) in [("copy-last", &s.copy), ("warp-last", &s.warp)] {
            if !(e < base.epe.unwrap() && m > base.miou.unwrap()) {
                fails.push(format!(
                    "(a) seed {}: model {e:.4}/{m:.4} vs {name} {:.4}/{:.4}",
                    s.seed,
                    base.epe.unwrap(),
                    base.miou.unwrap()
                ));
            }
        }
    }
    let full = mean(r.iter().map(|s| s.full.miou.unwrap()));
    let abl = mean(r.iter().map(|s| s.ablation.miou.unwrap()));
    if full < abl {
        fails.push(format!("(b) mean mIoU {full:.4} < w/o-transform {abl:.4}"));
    }
    let no = mean(r.iter().map(|s| s.full10.miou.unwrap()));
    let yes = mean(r.iter().map(|s| s.bptt10.miou.unwrap()));
    if yes < no {
        fails.push(format!("(c) 10-step mIoU with BPTT {yes:.4} < without {no:.4}"));
    }
    if b.secs >= 1800.0 {
        fails.push(format!("took {:.0}s", b.secs));
    }
    let summary = format!(
        "mIoU full {full:.4} vs w/o-transform {abl:.4}; 10-step {no:.4} -> {yes:.4} with BPTT; {:.0}s",
        b.secs
    );
    if fails.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", fails.join("; ")))
    }
}

fn steering(bench: &jant::Result<Bench>) -> Check {
    let b = bench.as_ref().map_err(e2s)?;
    let (model, train_d, eval_d) = b.kept.as_ref().ok_or("no trained model")?;
    let start = Instant::now();
    let mut m = model.clone();
    train_steering(&mut m, train_d, eval_d, &SteeringConfig::default()).map_err(e2s)?;
    let (_, gt, mse) = evaluate_steering(&m, eval_d).map_err(e2s)?;
    let mu = gt.iter().map(|&a| a as f64).sum::<f64>() / gt.len() as f64;
    let var = gt.iter().map(|&a| (a as f64 - mu).powi(2)).sum::<f64>() / gt.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure(mse < 0.25 * var, || format!("held-out MSE {mse:.3} vs variance {var:.3}"))?;
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!("held-out MSE {mse:.3} = {:.1}% of variance {var:.1}, {secs:.0}s", 100.0 * mse / var))
}

// -------------------------------------------------------------- determinism

fn pipeline_report() -> jant::Result<String> {
    let dir = tempfile::tempdir()?;
    let scene = SceneConfig {
        height: 32,
        width: 64,
        sequence_length: 8,
        ..Default::default()
    };
    let gen = |n, seed, sub: &str| -> jant::Result<Vec<VideoSample>> {
        let root = dir.path().join(sub);
        write_dataset(
            &DatasetConfig {
                scene: scene.clone(),
                num_samples: n,
                seed,
                ..Default::default()
            },
            &root,
        )?;
        Ok(read_dataset(&root)?.1)
    };
    let train_d = gen(6, 31, "train")?;
    let eval_d = gen(3, 32, "eval")?;
    let mut m = JointModel::new(ModelConfig {
        base_channels: 4,
        encoder_blocks: 2,
        flow_prior: true,
        warp_parse_base: true,
        seed: 5,
        ..Default::default()
    })?;
    let tc = TrainConfig {
        epochs: 2,
        seed: 5,
        crop: Some([16, 32]),
        ..Default::default()
    };
    let mut opt = Sgd::from_config(&m, &tc);
    train(&mut m, &mut opt, &train_d, &tc, Phase::Single, None)?;
    train(&mut m, &mut opt, &train_d, &TrainConfig { epochs: 1, ..tc }, Phase::Bptt, None)?;
    let r1 = evaluate(Predictor::Model(&m), &eval_d, 4, 1)?.to_json();
    let r3 = evaluate(Predictor::Model(&m), &eval_d, 4, 3)?.to_json();
    Ok(format!("{r1}\n{r3}"))
}

fn determinism() -> Check {
    let a = pipeline_report().map_err(e2s)?;
    let b = pipeline_report().map_err(e2s)?;
    ensure(a == b, || "reports differ between runs".into())?;
    Ok(format!("two gen/train/finetune/eval runs, {}-byte reports identical", a.len()))
}

// ------------------------------------------------------------------- driver

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // numeric arguments pick criteria; everything else (libtest flags) is ignored
    let picked: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let mut lines: Vec<(u32, &str, Check)> = Vec::new();
    let mut record = |n: u32, name: &'static str, run: &dyn Fn() -> Check| {
        if !wanted(n) {
            return;
        }
        let r = run();
        let status = if r.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &r {
            Ok(s) | Err(s) => s.clone(),
        };
        println!("[{n:>2}] {status} {name}: {detail}");
        lines.push((n, name, r));
    };
    record(1, "gradient suite", &gradient_suite);
    record(2, "metric oracles", &metric_oracles);
    record(3, "warp exactness", &warp_exactness);
    record(4, "format fidelity", &format_fidelity);
    record(5, "flow loss semantics", &flow_loss_semantics);
    record(6, "segmentation loss semantics", &seg_loss_semantics);
    record(7, "rollout and BPTT", &rollout_semantics);
    record(10, "pipeline determinism", &determinism);
    if wanted(8) || wanted(9) {
        let bench = run_bench();
        record(8, "directional training result", &|| directional(&bench));
        record(9, "steering regression", &|| steering(&bench));
    }

    lines.sort_by_key(|l| l.0);
    println!("\nsummary:");
    for (n, name, r) in &lines {
        println!("[{n:>2}] {} {name}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed = lines.iter().filter(|l| l.2.is_err()).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
