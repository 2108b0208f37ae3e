//! Synthetic driving-like video with exact ground truth.
//!
//! Every frame is composed of three kinds of surfaces:
//!
//! * a background (static-group classes: sky above a horizon, road below,
//!   optional posts) that slides horizontally with the camera yaw,
//! * static textured patches (other-group classes) fixed in the image,
//! * rectangles and circles (moving-group classes) with constant integer
//!   velocities.
//!
//! Texture is a function of each surface's own integer coordinates, so
//! backward-warping frame `t-1` by the analytic flow reproduces frame `t`
//! exactly wherever the same surface is visible in both frames.

use jant_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::Palette;
use crate::types::{ClassTable, FlowField, Group, SegMap};

/// Degrees of steering per pixel/frame of camera yaw.
pub const STEERING_PER_YAW: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub sequence_length: usize,
    pub num_shapes: usize,
    /// Largest per-axis shape speed, pixels/frame.
    pub max_speed: i32,
    /// Horizontal ego-motion, pixels/frame.
    pub camera_yaw_rate: i32,
    pub annotate_every: usize,
    pub seed: u64,
    pub logit_magnitude: f32,
    pub num_patches: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Amplitude of the per-pixel texture noise, in [0, 1] intensity units.
    pub noise: f32,
    /// Amplitude of the smooth texture on background and static patches.
    pub texture: f32,
    /// Lattice spacing of the smooth texture, pixels.
    pub texture_scale: i32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            num_classes: 8,
            sequence_length: 14,
            num_shapes: 6,
            max_speed: 3,
            camera_yaw_rate: 0,
            annotate_every: 5,
            seed: 0,
            logit_magnitude: 5.0,
            num_patches: 3,
            min_shape_size: 6,
            max_shape_size: 16,
            noise: 0.06,
            texture: 0.25,
            texture_scale: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 4 || self.num_classes > 255 {
            return bad(format!("num_classes must be in [4, 255], got {}", self.num_classes));
        }
        if self.sequence_length < 2 {
            return bad("sequence_length must be >= 2".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("frame {}x{} too small", self.height, self.width));
        }
        if self.max_speed < 0 {
            return bad("max_speed must be >= 0".into());
        }
        if self.annotate_every == 0 {
            return bad("annotate_every must be >= 1".into());
        }
        if self.min_shape_size == 0 || self.min_shape_size > self.max_shape_size {
            return bad("need 1 <= min_shape_size <= max_shape_size".into());
        }
        if !(self.logit_magnitude > 0.0 && self.logit_magnitude.is_finite()) {
            return bad("logit_magnitude must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise must be in [0, 0.5]".into());
        }
        if !(0.0..=0.5).contains(&self.texture) || self.texture_scale < 1 {
            return bad("texture must be in [0, 0.5] with texture_scale >= 1".into());
        }
        Ok(())
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::for_classes(self.num_classes)
    }

    /// Annotation flags: the last frame and every `annotate_every`-th frame before it.
    pub fn annotation_flags(&self) -> Vec<bool> {
        let n = self.sequence_length;
        (0..n).map(|t| (n - 1 - t).is_multiple_of(self.annotate_every)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Circle,
}

/// A moving object: position of its anchor at frame 0 plus constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingShape {
    pub kind: ShapeKind,
    pub class: usize,
    /// Top-left corner (rect) or centre (circle) at frame 0.
    pub x0: i32,
    pub y0: i32,
    /// Width/height (rect) or radius in both (circle).
    pub w: i32,
    pub h: i32,
    pub vx: i32,
    pub vy: i32,
}

impl MovingShape {
    fn contains(&self, lx: i32, ly: i32) -> bool {
        match self.kind {
            ShapeKind::Rect => lx >= 0 && ly >= 0 && lx < self.w && ly < self.h,
            ShapeKind::Circle => lx * lx + ly * ly <= self.w * self.w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticPatch {
    pub class: usize,
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

/// Everything random about a sequence, drawn once from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub horizon: i32,
    pub post_period: i32,
    pub post_width: i32,
    pub post_top: i32,
    pub patches: Vec<StaticPatch>,
    pub shapes: Vec<MovingShape>,
}

pub fn sample_layout(cfg: &SceneConfig) -> Result<SceneLayout> {
    cfg.validate()?;
    let table = cfg.class_table();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let horizon = rng.random_range(h * 35 / 100..=h * 55 / 100);
    let post_period = rng.random_range(24..=40);
    let post_width = rng.random_range(2..=3);
    let post_top = rng.random_range(0..=horizon / 2);

    let oth = table.classes_in(Group::Oth);
    let patches = (0..cfg.num_patches)
        .map(|_| {
            let pw = rng.random_range(10..=24).min(w);
            let ph = rng.random_range(8..=20).min(h);
            StaticPatch {
                class: oth[rng.random_range(0..oth.len())],
                x: rng.random_range(0..=w - pw),
                y: rng.random_range(0..=(horizon + 4).min(h - ph)),
                w: pw,
                h: ph,
            }
        })
        .collect();

    let mov = table.classes_in(Group::Mov);
    let (smin, smax) = (cfg.min_shape_size as i32, cfg.max_shape_size as i32);
    let mid = cfg.sequence_length as i32 / 2;
    let shapes = (0..cfg.num_shapes)
        .map(|_| {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Circle
            };
            let (sw, sh) = match kind {
                ShapeKind::Rect => (rng.random_range(smin..=smax), rng.random_range(smin..=smax)),
                ShapeKind::Circle => {
                    let r = rng.random_range((smin / 2).max(1)..=(smax / 2).max(1));
                    (r, r)
                }
            };
            let vx = rng.random_range(-cfg.max_speed..=cfg.max_speed);
            let vy = rng.random_range(-cfg.max_speed..=cfg.max_speed);
            // place the shape so it is inside the frame mid-sequence
            let cx = rng.random_range(0..w);
            let cy = rng.random_range(horizon / 2..h);
            MovingShape {
                kind,
                class: mov[rng.random_range(0..mov.len())],
                x0: cx - vx * mid,
                y0: cy - vy * mid,
                w: sw,
                h: sh,
                vx,
                vy,
            }
        })
        .collect();

    Ok(SceneLayout {
        horizon,
        post_period,
        post_width,
        post_top,
        patches,
        shapes,
    })
}

/// One generated sequence with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[3, H, W]` intensities in `[0, 1]`, multiples of `1/255`.
    pub frames: Vec<Tensor<f32>>,
    pub segs: Vec<SegMap>,
    /// `flows[i]` maps frame `i` to frame `i + 1`.
    pub flows: Vec<FlowField>,
    /// `valid[i]`: pixels of frame `i + 1` whose source under `flows[i]` shows the same surface.
    pub valid: Vec<Vec<bool>>,
    pub annotated: Vec<bool>,
    pub steering_angle: f32,
    pub camera_yaw_rate: i32,
    pub seed: u64,
    pub table: ClassTable,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.segs[0].height
    }

    pub fn width(&self) -> usize {
        self.segs[0].width
    }

    pub fn num_classes(&self) -> usize {
        self.segs[0].classes
    }

    /// The flow `O_t` from frame `t-1` to frame `t` (`t >= 1`).
    pub fn flow_at(&self, t: usize) -> &FlowField {
        &self.flows[t - 1]
    }

    pub fn valid_at(&self, t: usize) -> &[bool] {
        &self.valid[t - 1]
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-sample seed derivation.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5EED)))
}

/// Noise in `[-1, 1]` attached to a surface point.
fn texel(seed: u64, surface: u64, x: i32, y: i32, ch: usize) -> f32 {
    let key = mix(seed ^ mix(surface ^ mix(((x as u32 as u64) << 32) | y as u32 as u64) ^ ch as u64));
    (key >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

/// Bilinearly interpolated lattice noise in `[-1, 1]`; `scale` pixels per cell.
fn smooth_texel(seed: u64, surface: u64, x: i32, y: i32, ch: usize, scale: i32) -> f32 {
    let (cx, cy) = (x.div_euclid(scale), y.div_euclid(scale));
    let fx = x.rem_euclid(scale) as f32 / scale as f32;
    let fy = y.rem_euclid(scale) as f32 / scale as f32;
    // distinct key space from the per-pixel noise
    let s = surface ^ 0xA5A5_0000;
    let at = |dx: i32, dy: i32| texel(seed, s, cx + dx, cy + dy, ch);
    let top = at(0, 0) * (1.0 - fx) + at(1, 0) * fx;
    let bot = at(0, 1) * (1.0 - fx) + at(1, 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// What is visible at one pixel.
#[derive(Clone, Copy, PartialEq, Eq)]
struct Hit {
    surface: u32,
    class: u8,
    flow: (i32, i32),
    /// Surface-local coordinates, used for texture.
    lx: i32,
    ly: i32,
    moving: bool,
}

struct Renderer<'a> {
    cfg: &'a SceneConfig,
    layout: &'a SceneLayout,
    sky: usize,
    road: usize,
    posts: Vec<usize>,
    colors: Vec<[f32; 3]>,
}

impl<'a> Renderer<'a> {
    fn new(cfg: &'a SceneConfig, layout: &'a SceneLayout, table: &ClassTable) -> Self {
        let sta = table.classes_in(Group::Sta);
        let road = sta[0];
        let sky = *sta.get(1).unwrap_or(&road);
        let posts = sta.iter().skip(2).copied().collect();
        let colors = Palette::for_table(table)
            .0
            .iter()
            .map(|c| c.map(|v| v as f32 / 255.0))
            .collect();
        Renderer {
            cfg,
            layout,
            sky,
            road,
            posts,
            colors,
        }
    }

    fn hit(&self, x: i32, y: i32, t: i32) -> Hit {
        let lay = self.layout;
        let base = 1 + lay.patches.len() as u32;
        for (i, s) in lay.shapes.iter().enumerate().rev() {
            let (ax, ay) = (s.x0 + s.vx * t, s.y0 + s.vy * t);
            let (lx, ly) = (x - ax, y - ay);
            if s.contains(lx, ly) {
                return Hit {
                    surface: base + i as u32,
                    class: s.class as u8,
                    flow: (s.vx, s.vy),
                    lx,
                    ly,
                    moving: true,
                };
            }
        }
        for (i, p) in lay.patches.iter().enumerate().rev() {
            let (lx, ly) = (x - p.x, y - p.y);
            if lx >= 0 && ly >= 0 && lx < p.w && ly < p.h {
                return Hit {
                    surface: 1 + i as u32,
                    class: p.class as u8,
                    flow: (0, 0),
                    lx,
                    ly,
                    moving: false,
                };
            }
        }
        let yaw = self.cfg.camera_yaw_rate;
        let wx = x - yaw * t;
        let mut class = if y < lay.horizon { self.sky } else { self.road };
        if !self.posts.is_empty() && y >= lay.post_top && y < lay.horizon + 4 {
            let slot = wx.div_euclid(lay.post_period);
            if wx.rem_euclid(lay.post_period) < lay.post_width {
                class = self.posts[slot.rem_euclid(self.posts.len() as i32) as usize];
            }
        }
        Hit {
            surface: 0,
            class: class as u8,
            flow: (yaw, 0),
            lx: wx,
            ly: y,
            moving: false,
        }
    }

    fn color(&self, hit: &Hit) -> [u8; 3] {
        let base = self.colors[hit.class as usize];
        // lane dashes on the road give the background a strong horizontal signal
        let dash = hit.surface == 0
            && hit.class as usize == self.road
            && hit.ly % 6 < 2
            && hit.lx.rem_euclid(16) < 8;
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let mut v = base[ch] + self.cfg.noise * texel(self.cfg.seed, hit.surface as u64, hit.lx, hit.ly, ch);
            if !hit.moving {
                v += self.cfg.texture
                    * smooth_texel(self.cfg.seed, hit.surface as u64, hit.lx, hit.ly, ch, self.cfg.texture_scale);
            }
            if dash {
                v = 0.9 - 0.5 * v;
            }
            out[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        out
    }
}

/// Generates one sequence from `cfg`.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<VideoSample> {
    let layout = sample_layout(cfg)?;
    render_sequence(cfg, &layout)
}

/// Renders a sequence for an explicit layout.
pub fn render_sequence(cfg: &SceneConfig, layout: &SceneLayout) -> Result<VideoSample> {
    cfg.validate()?;
    let table = cfg.class_table();
    let ren = Renderer::new(cfg, layout, &table);
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut frames = Vec::with_capacity(cfg.sequence_length);
    let mut segs = Vec::with_capacity(cfg.sequence_length);
    let mut flows = Vec::new();
    let mut valid = Vec::new();
    let mut prev_hits: Vec<Hit> = Vec::new();
    for t in 0..cfg.sequence_length {
        let hits: Vec<Hit> = (0..hw)
            .map(|p| ren.hit((p % w) as i32, (p / w) as i32, t as i32))
            .collect();
        let mut pix = vec![0f32; 3 * hw];
        for (p, hit) in hits.iter().enumerate() {
            let c = ren.color(hit);
            for ch in 0..3 {
                pix[ch * hw + p] = c[ch] as f32 / 255.0;
            }
        }
        frames.push(Tensor::new(&[3, h, w], pix)?);
        let labels: Vec<u8> = hits.iter().map(|h| h.class).collect();
        segs.push(SegMap::from_labels(&labels, cfg.num_classes, h, w, cfg.logit_magnitude)?);
        if t > 0 {
            let u = hits.iter().map(|h| h.flow.0 as f32).collect();
            let v = hits.iter().map(|h| h.flow.1 as f32).collect();
            flows.push(FlowField::new(h, w, u, v)?);
            let ok = hits
                .iter()
                .enumerate()
                .map(|(p, hit)| {
                    let sx = (p % w) as i32 - hit.flow.0;
                    let sy = (p / w) as i32 - hit.flow.1;
                    if sx < 0 || sy < 0 || sx >= w as i32 || sy >= h as i32 {
                        return false;
                    }
                    prev_hits[sy as usize * w + sx as usize].surface == hit.surface
                })
                .collect();
            valid.push(ok);
        }
        prev_hits = hits;
    }
    Ok(VideoSample {
        frames,
        segs,
        flows,
        valid,
        annotated: cfg.annotation_flags(),
        steering_angle: STEERING_PER_YAW * cfg.camera_yaw_rate as f32,
        camera_yaw_rate: cfg.camera_yaw_rate,
        seed: cfg.seed,
        table,
    })
}

/// A set of sequences sharing one scene template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub num_samples: usize,
    /// Per-sample yaw is drawn uniformly from `[-max_yaw, max_yaw]`; when 0 the
    /// scene's `camera_yaw_rate` is used for every sample.
    pub max_yaw: i32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            num_samples: 16,
            max_yaw: 2,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_yaw < 0 {
            return Err(Error::Config("max_yaw must be >= 0".into()));
        }
        self.scene.validate()
    }

    /// The scene configuration of sample `i`.
    pub fn sample_config(&self, i: usize) -> SceneConfig {
        let seed = derive_seed(self.seed, i as u64);
        let mut scene = self.scene.clone();
        scene.seed = seed;
        if self.max_yaw > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
            scene.camera_yaw_rate = rng.random_range(-self.max_yaw..=self.max_yaw);
        }
        scene
    }

    pub fn generate(&self) -> Result<Vec<VideoSample>> {
        self.validate()?;
        (0..self.num_samples)
            .map(|i| generate_sequence(&self.sample_config(i)))
            .collect()
    }
}
