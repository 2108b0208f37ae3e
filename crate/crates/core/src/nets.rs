//! The two coupled anticipation networks.
//!
//! Flow network: the `k` history frames, stacked on channels, go through a
//! stride-2 encoder; three group branches (moving, static, other) each run
//! residual blocks on the deepest features and decode back up with skip
//! connections to a full-resolution two-channel flow. The merged flow takes
//! at every pixel the branch of that pixel's group in `S_{t-1}`.
//!
//! Parsing network: the `k` history score maps go through their own encoder;
//! the flow network's deepest shared features pass through the transform
//! layer (residual blocks) and are concatenated onto the deepest parsing
//! features before decoding to `C` logits. The logits are a correction added
//! to `S_{t-1}`.
//!
//! Every network is generic over the float type so the same code runs in
//! `f32` for training and `f64` for gradient checks.

use jant_autograd::init::he_normal;
use jant_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassTable, Group, GroupMask, SegMap};
use crate::warp::warp_var;

/// Score maps are logits of magnitude ~5; the parsing network sees them
/// scaled into roughly unit range.
pub const SCORE_INPUT_SCALE: f64 = 0.2;

/// Scale of the flow prior when it is stacked onto the input frames.
pub const FLOW_INPUT_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub history_len: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Stride-2 encoder stages; inputs must be divisible by `2^encoder_blocks`.
    pub encoder_blocks: usize,
    /// Residual blocks in each group branch.
    pub branch_blocks: usize,
    /// Residual blocks in the transform layer; 0 passes raw flow features.
    pub transform_blocks: usize,
    /// Feed flow features into the parsing decoder; off gives independent networks.
    pub inject_flow_features: bool,
    /// Parsing output is a correction of `S_{t-1}` warped by a flow instead of
    /// `S_{t-1}` itself: the last flow with `flow_prior`, else the predicted one.
    pub warp_parse_base: bool,
    /// Branches predict a correction of the last flow warped by itself, which
    /// is also stacked onto the input frames.
    pub flow_prior: bool,
    pub steering_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history_len: 4,
            num_classes: 8,
            base_channels: 16,
            encoder_blocks: 3,
            branch_blocks: 2,
            transform_blocks: 1,
            inject_flow_features: true,
            warp_parse_base: false,
            flow_prior: false,
            steering_head: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.history_len == 0 {
            return bad("history_len must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1");
        }
        if self.encoder_blocks == 0 {
            return bad("encoder_blocks must be >= 1");
        }
        if self.encoder_blocks > 6 {
            return bad("encoder_blocks must be <= 6");
        }
        Ok(())
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::for_classes(self.num_classes)
    }

    fn flow_input_channels(&self) -> usize {
        3 * self.history_len + if self.flow_prior { 2 } else { 0 }
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Closed-form parameter count; must agree with the built model.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let res = |c: usize| 2 * conv(c, c);
        let e = self.encoder_blocks;
        let ch = |i| self.stage_channels(i);
        let encoder = |cin: usize| -> usize {
            (0..e)
                .map(|i| conv(if i == 0 { cin } else { ch(i - 1) }, ch(i)) + res(ch(i)))
                .sum()
        };
        let decoder: usize = (0..e - 1).map(|l| conv(ch(l + 1) + ch(l), ch(l))).sum();
        let deep = ch(e - 1);
        let branch = self.branch_blocks * res(deep) + decoder + conv(ch(0), 2);
        let c = self.num_classes;
        let fuse_in = if self.inject_flow_features { 2 * deep } else { deep };
        let mut n = encoder(self.flow_input_channels())
            + 3 * branch
            + encoder(c * self.history_len)
            + conv(fuse_in, deep)
            + decoder
            + conv(ch(0) + c, c);
        if self.inject_flow_features {
            n += self.transform_blocks * res(deep);
        }
        if self.steering_head {
            n += ch(0) + 1;
        }
        n
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub c1: Conv,
    pub c2: Conv,
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<(Conv, Residual)>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// One conv per level, deepest skip level first.
    levels: Vec<Conv>,
}

#[derive(Clone, Debug)]
struct Branch {
    blocks: Vec<Residual>,
    decoder: Decoder,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    flow_encoder: Encoder,
    branches: Vec<Branch>,
    parse_encoder: Encoder,
    transform: Vec<Residual>,
    fuse: Conv,
    parse_decoder: Decoder,
    parse_head: Conv,
    steer: Option<(usize, usize)>,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, zero: bool) -> Conv {
        let shape = [cout, cin, 3, 3];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            he_normal(&shape, cin * 9, &mut self.rng)
        };
        Conv {
            w: self.store.push(format!("{name}.w"), w),
            b: self.store.push(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    fn residual(&mut self, name: &str, c: usize) -> Residual {
        Residual {
            c1: self.conv(&format!("{name}.c1"), c, c, 1, false),
            c2: self.conv(&format!("{name}.c2"), c, c, 1, true),
        }
    }

    fn encoder(&mut self, name: &str, cfg: &ModelConfig, cin: usize) -> Encoder {
        let stages = (0..cfg.encoder_blocks)
            .map(|i| {
                let prev = if i == 0 { cin } else { cfg.stage_channels(i - 1) };
                let c = cfg.stage_channels(i);
                (
                    self.conv(&format!("{name}.{i}.down"), prev, c, 2, false),
                    self.residual(&format!("{name}.{i}.res"), c),
                )
            })
            .collect();
        Encoder { stages }
    }

    fn decoder(&mut self, name: &str, cfg: &ModelConfig) -> Decoder {
        let levels = (0..cfg.encoder_blocks - 1)
            .rev()
            .map(|l| {
                let cin = cfg.stage_channels(l + 1) + cfg.stage_channels(l);
                self.conv(&format!("{name}.{l}"), cin, cfg.stage_channels(l), 1, false)
            })
            .collect();
        Decoder { levels }
    }
}

/// Parameters bound into one graph, by store index.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Result of the flow network for a batch.
#[derive(Clone, Debug)]
pub struct FlowOutputs {
    /// `[N,2,H,W]` pointwise selection of the branches by group.
    pub merged: Var,
    /// Branch outputs in `Group::index` order.
    pub branches: [Var; 3],
    /// Deepest shared encoder features (input of the transform layer).
    pub features: Var,
    /// Static-group branch activations just before its head.
    pub sta_penultimate: Var,
}

#[derive(Clone, Debug)]
pub struct JointOutputs {
    pub flow: FlowOutputs,
    /// `[N,C,H,W]` predicted logits.
    pub seg: Var,
    /// Transform-layer output, when features are injected.
    pub transformed: Option<Var>,
    /// Per-sample group masks used for the merge (from the last score map).
    pub masks: Vec<GroupMask>,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, c: Conv, x: Var) -> Result<Var> {
    Ok(g.conv2d(x, b.at(c.w), b.at(c.b), c.stride, 1)?)
}

/// `y = x + conv2(relu(conv1(x)))`.
pub fn residual_block<T: Scalar>(g: &mut Graph<T>, b: &Bound, r: Residual, x: Var) -> Result<Var> {
    let h = conv(g, b, r.c1, x)?;
    let h = g.relu(h);
    let h = conv(g, b, r.c2, h)?;
    Ok(g.add(x, h)?)
}

impl JointModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut bld = Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let cfg = &config;
        let (k, c) = (cfg.history_len, cfg.num_classes);
        let deep = cfg.stage_channels(cfg.encoder_blocks - 1);
        let flow_encoder = bld.encoder("flow.enc", cfg, cfg.flow_input_channels());
        let branches = Group::ALL
            .iter()
            .map(|grp| {
                let name = format!("flow.branch.{}", grp.name().to_lowercase());
                Branch {
                    blocks: (0..cfg.branch_blocks)
                        .map(|j| bld.residual(&format!("{name}.res.{j}"), deep))
                        .collect(),
                    decoder: bld.decoder(&format!("{name}.dec"), cfg),
                    head: bld.conv(&format!("{name}.head"), cfg.base_channels, 2, 1, true),
                }
            })
            .collect();
        let parse_encoder = bld.encoder("parse.enc", cfg, c * k);
        let transform = if cfg.inject_flow_features {
            (0..cfg.transform_blocks)
                .map(|j| bld.residual(&format!("transform.{j}"), deep))
                .collect()
        } else {
            Vec::new()
        };
        let fuse_in = if cfg.inject_flow_features { 2 * deep } else { deep };
        let fuse = bld.conv("parse.fuse", fuse_in, deep, 1, false);
        let parse_decoder = bld.decoder("parse.dec", cfg);
        let parse_head = bld.conv("parse.head", cfg.base_channels + c, c, 1, true);
        let steer = cfg.steering_head.then(|| {
            let w = he_normal(&[1, cfg.base_channels], cfg.base_channels, &mut bld.rng);
            (
                bld.store.push("steer.w".into(), w),
                bld.store.push("steer.b".into(), Tensor::zeros(&[1])),
            )
        });
        let model = JointModel {
            config,
            params: bld.store,
            layout: Layout {
                flow_encoder,
                branches,
                parse_encoder,
                transform,
                fuse,
                parse_decoder,
                parse_head,
                steer,
            },
        };
        debug_assert_eq!(model.params.count(), model.config.param_count());
        Ok(model)
    }

    /// Rebuilds a model from a config and stored parameters (checked by name and shape).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = JointModel::new(config)?;
        if params.names != model.params.names {
            return Err(Error::Format("parameter names do not match the config".into()));
        }
        for (i, (have, want)) in params.tensors.iter().zip(&model.params.tensors).enumerate() {
            if have.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names[i],
                    have.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn has_steering_head(&self) -> bool {
        self.layout.steer.is_some()
    }

    /// Adds a freshly initialized steering head (no-op if present).
    pub fn attach_steering_head(&mut self, seed: u64) {
        if self.layout.steer.is_some() {
            return;
        }
        let c = self.config.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = he_normal(&[1, c], c, &mut rng);
        let wi = self.params.push("steer.w".into(), w);
        let bi = self.params.push("steer.b".into(), Tensor::zeros(&[1]));
        self.layout.steer = Some((wi, bi));
        self.config.steering_head = true;
    }

    /// Binds every parameter as a graph leaf, tracked when `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .tensors
                .iter()
                .map(|t| {
                    let t = t.cast::<T>();
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t)
                    }
                })
                .collect(),
        )
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.config.encoder_blocks;
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} not divisible by {m} ({} encoder stages)",
                self.config.encoder_blocks
            )));
        }
        Ok(())
    }

    fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, enc: &Encoder, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(enc.stages.len());
        let mut x = x;
        for &(down, res) in &enc.stages {
            x = conv(g, b, down, x)?;
            x = g.relu(x);
            x = residual_block(g, b, res, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Decodes from the deepest level to level 0 (half resolution).
    fn decode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, dec: &Decoder, z: Var, skips: &[Var]) -> Result<Var> {
        let mut z = z;
        let deepest = skips.len() - 1;
        for (i, &cv) in dec.levels.iter().enumerate() {
            let level = deepest - 1 - i;
            z = g.upsample_bilinear(z, 2)?;
            z = g.concat_channels(&[z, skips[level]])?;
            z = conv(g, b, cv, z)?;
            z = g.relu(z);
        }
        Ok(z)
    }

    /// Stacks per-time `[N,c,H,W]` inputs on channels after checking the history length.
    fn stack<T: Scalar>(&self, g: &mut Graph<T>, xs: &[Var], per: usize, what: &str) -> Result<Var> {
        if xs.len() != self.config.history_len {
            return Err(Error::Usage(format!(
                "{what}: got {} history items, model expects {}",
                xs.len(),
                self.config.history_len
            )));
        }
        for &x in xs {
            let (_, c, h, w) = g.value(x).dims4()?;
            if c != per {
                return Err(Error::Dimension(format!("{what}: item has {c} channels, expected {per}")));
            }
            self.check_spatial(h, w)?;
        }
        Ok(g.concat_channels(xs)?)
    }

    /// Flow network over `k` frames `[N,3,H,W]`, merged by per-sample group masks.
    pub fn flow_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        frames: &[Var],
        masks: &[GroupMask],
        last_flow: Option<Var>,
    ) -> Result<FlowOutputs> {
        let x = self.stack(g, frames, 3, "flow_forward")?;
        // centre intensities on zero
        let half = g.constant(Tensor::full(g.shape(x), T::from_f64(0.5)));
        let mut x = g.sub(x, half)?;
        let (n, _, h, w) = g.value(x).dims4()?;
        if masks.len() != n || masks.iter().any(|m| (m.height, m.width) != (h, w)) {
            return Err(Error::Dimension(format!(
                "flow_forward: {} masks for a batch of {n} at {h}x{w}",
                masks.len()
            )));
        }
        let prior = if self.config.flow_prior {
            let last = match last_flow {
                Some(v) if g.shape(v) == [n, 2, h, w] => v,
                Some(v) => {
                    return Err(Error::Dimension(format!(
                        "flow_forward: last flow {:?} for a batch of {n} at {h}x{w}",
                        g.shape(v)
                    )))
                }
                None => g.constant(Tensor::zeros(&[n, 2, h, w])),
            };
            let p = warp_var(g, last, last)?;
            let p_in = g.scale(p, T::from_f64(FLOW_INPUT_SCALE));
            x = g.concat_channels(&[x, p_in])?;
            Some(p)
        } else {
            None
        };
        let feats = self.encode(g, b, &self.layout.flow_encoder, x)?;
        let deep = *feats.last().expect("at least one stage");
        let mut outs = Vec::with_capacity(3);
        let mut sta_penultimate = None;
        for (gi, br) in self.layout.branches.iter().enumerate() {
            let mut z = deep;
            for &r in &br.blocks {
                z = residual_block(g, b, r, z)?;
            }
            let z = self.decode(g, b, &br.decoder, z, &feats)?;
            if gi == Group::Sta.index() {
                sta_penultimate = Some(z);
            }
            let f = conv(g, b, br.head, z)?;
            let f = g.upsample_bilinear(f, 2)?;
            outs.push(match prior {
                Some(p) => g.add(p, f)?,
                None => f,
            });
        }
        let branches = [outs[0], outs[1], outs[2]];
        let merged = merge_branches(g, branches, masks)?;
        Ok(FlowOutputs {
            merged,
            branches,
            features: deep,
            sta_penultimate: sta_penultimate.expect("static branch exists"),
        })
    }

    /// Residual-block adapter from flow features to the parsing feature space.
    pub fn transform_layer<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<Var> {
        let mut z = features;
        for &r in &self.layout.transform {
            z = residual_block(g, b, r, z)?;
        }
        Ok(z)
    }

    /// Parsing network over `k` score maps `[N,C,H,W]`; `transformed` is
    /// required exactly when flow features are injected.
    pub fn parse_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        segs: &[Var],
        transformed: Option<Var>,
    ) -> Result<Var> {
        self.parse_forward_on(g, b, segs, transformed, None)
    }

    /// [`Self::parse_forward`] with an explicit residual base (default: the last score map).
    pub fn parse_forward_on<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        segs: &[Var],
        transformed: Option<Var>,
        base: Option<Var>,
    ) -> Result<Var> {
        let c = self.config.num_classes;
        let x = self.stack(g, segs, c, "parse_forward")?;
        let x = g.scale(x, T::from_f64(SCORE_INPUT_SCALE));
        let last = *segs.last().expect("non-empty history");
        let last_in = g.scale(last, T::from_f64(SCORE_INPUT_SCALE));
        let feats = self.encode(g, b, &self.layout.parse_encoder, x)?;
        let deep = *feats.last().expect("at least one stage");
        let fused_in = match (self.config.inject_flow_features, transformed) {
            (true, Some(t)) => {
                if g.shape(t) != g.shape(deep) {
                    return Err(Error::Dimension(format!(
                        "transformed features {:?} vs parsing features {:?}",
                        g.shape(t),
                        g.shape(deep)
                    )));
                }
                g.concat_channels(&[deep, t])?
            }
            (false, None) => deep,
            (true, None) => return Err(Error::Usage("model injects flow features but none given".into())),
            (false, Some(_)) => return Err(Error::Usage("model does not take flow features".into())),
        };
        let z = conv(g, b, self.layout.fuse, fused_in)?;
        let z = g.relu(z);
        let z = self.decode(g, b, &self.layout.parse_decoder, z, &feats)?;
        let z = g.upsample_bilinear(z, 2)?;
        let z = g.concat_channels(&[z, last_in])?;
        let delta = conv(g, b, self.layout.parse_head, z)?;
        Ok(g.add(base.unwrap_or(last), delta)?)
    }

    /// Both networks: masks from the last score map, flow, transform, parsing.
    /// `last_flow` (`[N,2,H,W]`, zeros when absent) is read only with `flow_prior`.
    pub fn joint_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        frames: &[Var],
        segs: &[Var],
        last_flow: Option<Var>,
    ) -> Result<JointOutputs> {
        let last = *segs
            .last()
            .ok_or_else(|| Error::Usage("empty score-map history".into()))?;
        let masks = masks_from_scores(g.value(last), &self.config.class_table())?;
        let flow = self.flow_forward(g, b, frames, &masks, last_flow)?;
        let transformed = if self.config.inject_flow_features {
            Some(self.transform_layer(g, b, flow.features)?)
        } else {
            None
        };
        let base = if self.config.warp_parse_base {
            // the flow is treated as fixed here; the flow loss alone trains it
            let by = match (self.config.flow_prior, last_flow) {
                (true, Some(lf)) => g.constant(g.value(lf).clone()),
                _ => g.constant(g.value(flow.merged).clone()),
            };
            Some(warp_var(g, last, by)?)
        } else {
            None
        };
        let seg = self.parse_forward_on(g, b, segs, transformed, base)?;
        Ok(JointOutputs {
            flow,
            seg,
            transformed,
            masks,
        })
    }

    /// Steering angle per batch item from the static branch's pooled activations.
    pub fn steering_forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, flow: &FlowOutputs) -> Result<Var> {
        let (w, bias) = self
            .layout
            .steer
            .ok_or_else(|| Error::Usage("model has no steering head".into()))?;
        let pooled = g.global_avg_pool(flow.sta_penultimate)?;
        steering_linear(g, pooled, b.at(w), b.at(bias))
    }
}

/// The steering regressor: `[N,D] -> [N,1]`.
pub fn steering_linear<T: Scalar>(g: &mut Graph<T>, pooled: Var, w: Var, b: Var) -> Result<Var> {
    Ok(g.linear(pooled, w, b)?)
}

/// Per-sample group masks from `[N,C,H,W]` scores.
pub fn masks_from_scores<T: Scalar>(scores: &Tensor<T>, table: &ClassTable) -> Result<Vec<GroupMask>> {
    let (n, c, h, w) = scores.dims4()?;
    if c != table.len() {
        return Err(Error::Dimension(format!("{c} score channels for {} classes", table.len())));
    }
    (0..n)
        .map(|i| {
            let seg = SegMap::from_tensor(scores, i)?;
            table.mask_from_labels(&seg.labels(), h, w)
        })
        .collect()
}

/// `[N,reps,H,W]` indicator of group `grp`, repeated over `reps` channels.
pub fn group_indicator<T: Scalar>(masks: &[GroupMask], grp: Group, reps: usize) -> Tensor<T> {
    let (h, w) = (masks[0].height, masks[0].width);
    let mut data = Vec::with_capacity(masks.len() * reps * h * w);
    for m in masks {
        for _ in 0..reps {
            data.extend(m.groups.iter().map(|&x| if x == grp { T::one() } else { T::zero() }));
        }
    }
    Tensor::new(&[masks.len(), reps, h, w], data).expect("indicator shape")
}

/// `merged = Σ_g 1[group = g] ⊙ branch_g`.
pub fn merge_branches<T: Scalar>(g: &mut Graph<T>, branches: [Var; 3], masks: &[GroupMask]) -> Result<Var> {
    let mut merged: Option<Var> = None;
    for grp in Group::ALL {
        let m = g.constant(group_indicator(masks, grp, 2));
        let part = g.mul(m, branches[grp.index()])?;
        merged = Some(match merged {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    Ok(merged.expect("three groups"))
}
