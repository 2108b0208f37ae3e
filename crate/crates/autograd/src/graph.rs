//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once from the end.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{dim_err, Result, TensorError};
use crate::resample::{upsample_backward, upsample_forward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside this crate.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product for each input; `None` for inputs that need no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: ConvGeometry,
    },
    Upsample(Var, usize),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
    },
    ChannelNorm(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    DiffX(Var),
    DiffY(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. One graph per forward pass; it is dropped after `backward`.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn for_each_plane<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    Ok((n, c, h * w))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked (parameters, inputs under test).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that is never differentiated (data, masks, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Zero-padded 2-D convolution. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let out = conv2d_forward(&geo, self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geo }, rg))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::Config("upsample factor must be >= 1".into()));
        }
        self.value(x).dims4()?;
        let out = upsample_forward(self.value(x), factor);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample(x, factor), rg))
    }

    /// Softmax over the channel axis of `[N,C,H,W]`, computed with max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-pixel `-log softmax(logits)[label]` as `[N,1,H,W]`; `None` labels give 0.
    pub fn cross_entropy_map(&mut self, logits: Var, labels: Vec<Option<usize>>) -> Result<Var> {
        let (n, c, hw) = for_each_plane(self.value(logits))?;
        if labels.len() != n * hw {
            return dim_err(format!(
                "cross_entropy: {} labels for {} pixels",
                labels.len(),
                n * hw
            ));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
            return dim_err(format!("cross_entropy: label {bad} >= {c} classes"));
        }
        let x = self.value(logits).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for p in 0..hw {
                let Some(label) = labels[b * hw + p] else { continue };
                let at = |ch: usize| x[(b * c + ch) * hw + p];
                let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|ch| (at(ch) - m).exp()).sum::<T>().ln() + m;
                out[b * hw + p] = lse - at(label);
            }
        }
        let shape = [n, 1, self.shape(logits)[2], self.shape(logits)[3]];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::CrossEntropy { logits, labels },
            rg,
        ))
    }

    /// Per-pixel Euclidean norm over channels: `[N,C,H,W] -> [N,1,H,W]`.
    /// The subgradient at the origin is 0.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = for_each_plane(self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for p in 0..hw {
                let ss: T = (0..c).map(|ch| d[(b * c + ch) * hw + p].powi(2)).sum();
                out[b * hw + p] = ss.sqrt();
            }
        }
        let shape = [n, 1, self.shape(x)[2], self.shape(x)[3]];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ChannelNorm(x), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat_channels of nothing");
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return dim_err(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                ));
            }
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(&[n, total, h, w], out)?,
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start+len` of `[N,C,H,W]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return dim_err(format!("slice_channels {start}..{} of {c}", start + len));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&d[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[n, len, h, w], out)?,
            Op::Slice { x, start, len },
            rg,
        ))
    }

    /// Affine map `x · wᵀ + b` with `x: [N,D]`, `w: [O,D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ([n, d], [o, wd], [bo]) = (xs, ws, bs) else {
            return dim_err(format!("linear: shapes {xs:?}, {ws:?}, {bs:?}"));
        };
        let (n, d, o) = (*n, *d, *o);
        if *wd != d || *bo != o {
            return dim_err(format!("linear: shapes {xs:?}, {ws:?}, {bs:?}"));
        }
        let mut out = vec![T::zero(); n * o];
        for i in 0..n {
            out[i * o..(i + 1) * o].copy_from_slice(self.value(b).data());
        }
        T::gemm(n, d, o, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = for_each_plane(self.value(x))?;
        let inv = T::one() / T::from_f64(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Horizontal forward difference `x[.., j+1] - x[.., j]`: width shrinks by one.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if w < 2 {
            return dim_err("diff_x needs width >= 2");
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * (w - 1));
        for row in d.chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, h, w - 1], out)?, Op::DiffX(x), rg))
    }

    /// Vertical forward difference `x[.., i+1, :] - x[.., i, :]`: height shrinks by one.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 {
            return dim_err("diff_y needs height >= 2");
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * (h - 1) * w);
        for plane in d.chunks(h * w) {
            for i in 0..h - 1 {
                out.extend((0..w).map(|j| plane[(i + 1) * w + j] - plane[i * w + j]));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, h - 1, w], out)?, Op::DiffY(x), rg))
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar. Gradients of fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (v, dv) in self.vjp(node, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv)?,
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, zip(g, val(*b), |p, q| p * q)));
                }
                if need(*b) {
                    out.push((*b, zip(g, val(*a), |p, q| p * q)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| x * *c))),
            Op::Relu(a) => out.push((
                *a,
                zip(g, val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() }),
            )),
            Op::Abs(a) => out.push((*a, zip(g, val(*a), |gi, x| gi * sign(x)))),
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
            Op::Mean(a) => {
                let n = T::from_f64(val(*a).numel().max(1) as f64);
                out.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
            }
            Op::Conv2d { x, w, b, geo } => {
                let grads = conv2d_backward(geo, val(*x), val(*w), g, [need(*x), need(*w), need(*b)]);
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                out.extend(grads.bias.map(|t| (*b, t)));
            }
            Op::Upsample(x, f) => out.push((*x, upsample_backward(val(*x).shape(), g, *f))),
            Op::Softmax(x) => {
                let y = &node.value;
                let (n, c, hw) = for_each_plane(y)?;
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); y.numel()];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let dot: T = (0..c).map(|ch| yd[at(ch)] * gd[at(ch)]).sum();
                        for ch in 0..c {
                            dx[at(ch)] = yd[at(ch)] * (gd[at(ch)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), dx)?));
            }
            Op::CrossEntropy { logits, labels } => {
                let x = val(*logits);
                let sm = softmax_channels(x)?;
                let (n, c, hw) = for_each_plane(x)?;
                let mut dx = vec![T::zero(); x.numel()];
                for b in 0..n {
                    for p in 0..hw {
                        let Some(label) = labels[b * hw + p] else { continue };
                        let gp = g.data()[b * hw + p];
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            let onehot = if ch == label { T::one() } else { T::zero() };
                            dx[i] = gp * (sm.data()[i] - onehot);
                        }
                    }
                }
                out.push((*logits, Tensor::new(x.shape(), dx)?));
            }
            Op::ChannelNorm(x) => {
                let xv = val(*x);
                let (n, c, hw) = for_each_plane(xv)?;
                let norm = node.value.data();
                let mut dx = vec![T::zero(); xv.numel()];
                for b in 0..n {
                    for p in 0..hw {
                        let r = norm[b * hw + p];
                        if r == T::zero() {
                            continue;
                        }
                        let s = g.data()[b * hw + p] / r;
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            dx[i] = s * xv.data()[i];
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.shape(), dx)?));
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = val(v).shape()[1];
                    if need(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            d.extend_from_slice(
                                &g.data()[(b * total + offset) * hw..(b * total + offset + c) * hw],
                            );
                        }
                        out.push((v, Tensor::new(val(v).shape(), d)?));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start, len } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                out.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[0];
                if need(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, o, d, g.data(), false, val(*w).data(), false, T::zero(), &mut dx);
                    out.push((*x, Tensor::new(&[n, d], dx)?));
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(o, n, d, g.data(), true, val(*x).data(), false, T::zero(), &mut dw);
                    out.push((*w, Tensor::new(&[o, d], dw)?));
                }
                if need(*b) {
                    let db = (0..o)
                        .map(|j| (0..n).map(|i| g.data()[i * o + j]).sum())
                        .collect();
                    out.push((*b, Tensor::new(&[o], db)?));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, hw) = for_each_plane(val(*x))?;
                let inv = T::one() / T::from_f64(hw as f64);
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat_n(gi * inv, hw));
                }
                out.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::DiffX(x) => {
                let w = val(*x).shape()[3];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (row_g, row_dx) in g.data().chunks(w - 1).zip(dx.chunks_mut(w)) {
                    for (j, &gj) in row_g.iter().enumerate() {
                        row_dx[j + 1] = row_dx[j + 1] + gj;
                        row_dx[j] = row_dx[j] - gj;
                    }
                }
                out.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::DiffY(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (pg, pdx) in g.data().chunks((h - 1) * w).zip(dx.chunks_mut(h * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gj = pg[i * w + j];
                            pdx[(i + 1) * w + j] = pdx[(i + 1) * w + j] + gj;
                            pdx[i * w + j] = pdx[i * w + j] - gj;
                        }
                    }
                }
                out.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let grads = op.backward(&ins, &node.value, g, &needs);
                if grads.len() != inputs.len() {
                    return Err(TensorError::Usage(format!(
                        "custom op {} returned {} grads for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, dv) in inputs.iter().zip(grads) {
                    if let Some(dv) = dv {
                        val(v).expect_same_shape(&dv)?;
                        out.push((v, dv));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Channel softmax of a plain tensor (no tape).
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c == 0 {
        return dim_err("softmax over zero channels");
    }
    let hw = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (b * c + ch) * hw + p;
            let m = (0..c).map(|ch| d[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for ch in 0..c {
                let e = (d[at(ch)] - m).exp();
                out[at(ch)] = e;
                s = s + e;
            }
            for ch in 0..c {
                out[at(ch)] = out[at(ch)] / s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}
