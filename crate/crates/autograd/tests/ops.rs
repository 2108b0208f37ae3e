use jant_autograd::{grad_check, Graph, Result, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu/abs kinks are not straddled by ±eps.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;
const EPS: f64 = 1e-4;

fn check_all_seeds(name: &str, mk: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = mk(&mut rng);
        let err = grad_check(f, &inputs, EPS).unwrap();
        assert!(err < TOL, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::<f32>::new();
    let x = Tensor::from_fn(&[2, 1, 3, 5], |i| i as f32 * 0.5 - 3.0);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_all_ones_kernel_interior_and_corner() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    let out = g.value(y).data();
    assert_eq!(out[5], 9.0);
    assert_eq!(out[0], 4.0);
    assert_eq!(out[15], 4.0);
    assert_eq!(out[1], 6.0);
}

#[test]
fn conv2d_strided_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 4]);
}

#[test]
fn conv2d_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::Dimension(_))));
    let w = g.constant(Tensor::zeros(&[2, 3, 7, 7]));
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::Config(_))));
    let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, b, 0, 1), Err(TensorError::Config(_))));
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 4]);
    assert_eq!(&g.value(y).data()[..4], &[0.0, 0.5, 1.5, 2.0]);
    assert_eq!(&g.value(y).data()[4..], &[0.0, 0.5, 1.5, 2.0]);

    let c = g.constant(Tensor::full(&[1, 2, 3, 5], 0.7));
    let y = g.upsample_bilinear(c, 3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));

    let r = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32).sin());
    let rv = g.constant(r.clone());
    let y = g.upsample_bilinear(rv, 1).unwrap();
    assert_eq!(g.value(y), &r);
    assert!(matches!(g.upsample_bilinear(rv, 0), Err(TensorError::Config(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 4, 2, 2], 1.3));
    let y = g.softmax_channels(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax_channels(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

    let logits = Tensor::<f64>::new(&[1, 3, 1, 2], vec![0.1, -2.0, 1.5, 0.3, 700.0, 4.0]).unwrap();
    let shifted = logits.map(|v| v + 123.0);
    let a = jant_autograd::softmax_channels(&logits).unwrap();
    let b = jant_autograd::softmax_channels(&shifted).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-9);
        assert!(p.is_finite());
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);

    assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
}

#[test]
fn backward_mean_conv_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![rand_tensor(&mut rng, &[1, 2, 5, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3])];
    let err = grad_check(
        |g, v| -> Result<Var> {
            let b = g.constant(Tensor::zeros(&[3]));
            let y = g.conv2d(v[0], v[1], b, 1, 1)?;
            Ok(g.mean(y))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[6]);
    let err = grad_check(|g, v| -> Result<Var> {
        let s = g.mul(v[0], v[0])?;
        Ok(g.sum(s))
    }, &[x.clone()], 1e-4)
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let x = rand_off_zero(&mut rng, &[10]);
    let err = grad_check(|g, v| -> Result<Var> {
        let r = g.relu(v[0]);
        let s = g.mul(r, v[0])?;
        Ok(g.sum(s))
    }, &[x], 1e-4)
    .unwrap();
    assert!(err < 1e-3, "{err}");

    let err = grad_check(|g, _| -> Result<Var> { Ok(g.constant(Tensor::scalar(3.0))) }, &[rand_tensor(&mut rng, &[3])], 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fan_out_gradients_sum() {
    let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let single = |use_a: bool, use_b: bool| {
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let a = g.scale(xv, 3.0);
        let b = g.mul(xv, xv).unwrap();
        let mut terms = Vec::new();
        if use_a {
            terms.push(g.sum(a));
        }
        if use_b {
            terms.push(g.sum(b));
        }
        let loss = if terms.len() == 2 { g.add(terms[0], terms[1]).unwrap() } else { terms[0] };
        g.backward(loss).unwrap().get(xv).unwrap().clone()
    };
    let both = single(true, true);
    let a = single(true, false);
    let b = single(false, true);
    for i in 0..3 {
        assert_eq!(both.data()[i], a.data()[i] + b.data()[i]);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let (x, w) = (g.constant(x), g.param(w));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let y = g.upsample_bilinear(y, 2).unwrap();
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        (g.value(y).clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_every_op() {
    check_all_seeds("add/sub/mul/scale", |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        let m = g.scale(m, 1.7);
        let m2 = g.mul(m, m)?;
        Ok(g.sum(m2))
    });
    check_all_seeds("relu", |r| vec![rand_off_zero(r, &[12]), rand_tensor(r, &[12])], |g, v| {
        let a = g.relu(v[0]);
        let m = g.mul(a, v[1])?;
        Ok(g.sum(m))
    });
    check_all_seeds("abs", |r| vec![rand_off_zero(r, &[12]), rand_tensor(r, &[12])], |g, v| {
        let a = g.abs(v[0]);
        let m = g.mul(a, v[1])?;
        Ok(g.mean(m))
    });
    check_all_seeds("conv2d", |r| {
        vec![rand_tensor(r, &[2, 2, 6, 5]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3]), rand_tensor(r, &[2, 3, 3, 3])]
    }, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        let m = g.mul(y, v[3])?;
        Ok(g.sum(m))
    });
    check_all_seeds("upsample", |r| vec![rand_tensor(r, &[1, 2, 3, 4]), rand_tensor(r, &[1, 2, 6, 8])], |g, v| {
        let y = g.upsample_bilinear(v[0], 2)?;
        let m = g.mul(y, v[1])?;
        Ok(g.sum(m))
    });
    check_all_seeds("softmax", |r| vec![rand_tensor(r, &[2, 4, 2, 3]), rand_tensor(r, &[2, 4, 2, 3])], |g, v| {
        let y = g.softmax_channels(v[0])?;
        let m = g.mul(y, v[1])?;
        Ok(g.sum(m))
    });
    check_all_seeds("cross_entropy", |r| vec![rand_tensor(r, &[2, 5, 2, 2])], |g, v| {
        let labels = vec![Some(0), Some(4), None, Some(2), Some(1), Some(1), Some(3), None];
        let y = g.cross_entropy_map(v[0], labels)?;
        Ok(g.sum(y))
    });
    check_all_seeds("channel_norm", |r| vec![rand_off_zero(r, &[2, 2, 3, 3]), rand_tensor(r, &[2, 1, 3, 3])], |g, v| {
        let n = g.channel_norm(v[0])?;
        let m = g.mul(n, v[1])?;
        Ok(g.sum(m))
    });
    check_all_seeds("concat/slice", |r| {
        vec![rand_tensor(r, &[2, 2, 2, 3]), rand_tensor(r, &[2, 3, 2, 3]), rand_tensor(r, &[2, 3, 2, 3])]
    }, |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 3)?;
        let m = g.mul(s, v[2])?;
        let m = g.mul(m, s)?;
        Ok(g.sum(m))
    });
    check_all_seeds("linear/pool", |r| {
        vec![rand_tensor(r, &[3, 4, 2, 2]), rand_tensor(r, &[2, 4]), rand_tensor(r, &[2])]
    }, |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let y = g.linear(p, v[1], v[2])?;
        let y2 = g.mul(y, y)?;
        Ok(g.mean(y2))
    });
    check_all_seeds("diff_x/diff_y", |r| vec![rand_tensor(r, &[1, 2, 3, 4]), rand_tensor(r, &[1, 2, 2, 4]), rand_tensor(r, &[1, 2, 3, 3])], |g, v| {
        let dy = g.diff_y(v[0])?;
        let dx = g.diff_x(v[0])?;
        let a = g.mul(dy, v[1])?;
        let b = g.mul(dx, v[2])?;
        let (a, b) = (g.sum(a), g.sum(b));
        g.add(a, b)
    });
}
