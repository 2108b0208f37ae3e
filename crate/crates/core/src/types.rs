//! Dense per-pixel containers shared by every stage: flow fields, score
//! maps and object-group masks, plus the class → group table.

use jant_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel displacement in pixels: `u` along x (right), `v` along y (down).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        FlowField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Dimension(format!(
                "flow {height}x{width} needs {} entries per component",
                height * width
            )));
        }
        Ok(FlowField { height, width, u, v })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Dimension(format!(
                "flow is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `[1, 2, H, W]` with `u` in channel 0 and `v` in channel 1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .u
            .iter()
            .chain(&self.v)
            .map(|&x| T::from_f64(x as f64))
            .collect();
        Tensor::new(&[1, 2, self.height, self.width], data).expect("flow tensor shape")
    }

    /// Inverse of [`FlowField::to_tensor`] for batch item `n` of a `[N, 2, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if c != 2 || n >= batch {
            return Err(Error::Dimension(format!(
                "flow tensor item {n} from shape {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let base = n * 2 * plane;
        let conv = |s: &[T]| s.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        FlowField::new(
            h,
            w,
            conv(&t.data()[base..base + plane]),
            conv(&t.data()[base + plane..base + 2 * plane]),
        )
    }
}

/// Per-pixel class scores (pre-softmax logits), stored channel-major `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
}

impl SegMap {
    pub fn new(classes: usize, height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != classes * height * width {
            return Err(Error::Dimension(format!(
                "seg map {classes}x{height}x{width} given {} scores",
                scores.len()
            )));
        }
        Ok(SegMap {
            classes,
            height,
            width,
            scores,
        })
    }

    /// Teacher-style logits: `+magnitude` on the labelled class, `-magnitude` elsewhere.
    pub fn from_labels(
        labels: &[u8],
        classes: usize,
        height: usize,
        width: usize,
        magnitude: f32,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension("label count != height*width".into()));
        }
        let plane = height * width;
        let mut scores = vec![-magnitude; classes * plane];
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::Domain(format!("label {l} >= {classes} classes")));
            }
            scores[l * plane + p] = magnitude;
        }
        SegMap::new(classes, height, width, scores)
    }

    /// Argmax label per pixel; ties go to the lowest class index.
    pub fn labels(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.scores[p];
                for c in 1..self.classes {
                    let v = self.scores[c * plane + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.scores.iter().map(|&x| T::from_f64(x as f64)).collect();
        Tensor::new(&[1, self.classes, self.height, self.width], data).expect("seg tensor shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if n >= batch {
            return Err(Error::Dimension(format!("seg item {n} of {batch}")));
        }
        let len = c * h * w;
        let scores = t.data()[n * len..(n + 1) * len]
            .iter()
            .map(|x| x.as_f64() as f32)
            .collect();
        SegMap::new(c, h, w, scores)
    }
}

/// The three motion groups each class belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Moving objects (cars, people, ...): own motion plus ego-motion.
    #[serde(rename = "MOV")]
    Mov,
    /// Static objects (road, sky, ...): ego-motion only.
    #[serde(rename = "STA")]
    Sta,
    /// Other objects (buildings, vegetation, ...).
    #[serde(rename = "OTH")]
    Oth,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Mov, Group::Sta, Group::Oth];

    pub fn index(self) -> usize {
        match self {
            Group::Mov => 0,
            Group::Sta => 1,
            Group::Oth => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Mov => "MOV",
            Group::Sta => "STA",
            Group::Oth => "OTH",
        }
    }
}

/// Per-pixel group assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMask {
    pub height: usize,
    pub width: usize,
    pub groups: Vec<Group>,
}

impl GroupMask {
    pub fn uniform(height: usize, width: usize, g: Group) -> Self {
        GroupMask {
            height,
            width,
            groups: vec![g; height * width],
        }
    }

    pub fn count(&self, g: Group) -> usize {
        self.groups.iter().filter(|&&x| x == g).count()
    }

    pub fn selector(&self, g: Group) -> Vec<bool> {
        self.groups.iter().map(|&x| x == g).collect()
    }
}

/// Class names and their group assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub groups: Vec<Group>,
}

impl ClassTable {
    fn build(entries: &[(&str, Group)]) -> Self {
        ClassTable {
            names: entries.iter().map(|(n, _)| n.to_string()).collect(),
            groups: entries.iter().map(|(_, g)| *g).collect(),
        }
    }

    /// The 8-class table used by the synthetic scenes.
    pub fn desk() -> Self {
        use Group::*;
        Self::build(&[
            ("road", Sta),
            ("sky", Sta),
            ("pole", Sta),
            ("building", Oth),
            ("vegetation", Oth),
            ("person", Mov),
            ("car", Mov),
            ("bicycle", Mov),
        ])
    }

    /// Cityscapes' 19 evaluation classes in their usual train-id order.
    pub fn cityscapes() -> Self {
        use Group::*;
        Self::build(&[
            ("road", Sta),
            ("sidewalk", Sta),
            ("building", Oth),
            ("wall", Oth),
            ("fence", Oth),
            ("pole", Sta),
            ("traffic light", Sta),
            ("traffic sign", Sta),
            ("vegetation", Oth),
            ("terrain", Oth),
            ("sky", Sta),
            ("person", Mov),
            ("rider", Mov),
            ("car", Mov),
            ("truck", Mov),
            ("bus", Mov),
            ("train", Mov),
            ("motorcycle", Mov),
            ("bicycle", Mov),
        ])
    }

    /// The desk table for 8 classes, Cityscapes for 19, otherwise the first
    /// `3/8` of the ids static, the next `2/8` other and the rest moving.
    pub fn for_classes(c: usize) -> Self {
        match c {
            8 => Self::desk(),
            19 => Self::cityscapes(),
            c => {
                let sta = (3 * c / 8).max(1);
                let oth = (2 * c / 8).max(1);
                let groups = (0..c)
                    .map(|i| {
                        if i < sta {
                            Group::Sta
                        } else if i < sta + oth {
                            Group::Oth
                        } else {
                            Group::Mov
                        }
                    })
                    .collect();
                ClassTable {
                    names: (0..c).map(|i| format!("class{i}")).collect(),
                    groups,
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn class_to_group(&self, class_id: usize) -> Result<Group> {
        self.groups.get(class_id).copied().ok_or_else(|| {
            Error::Domain(format!(
                "class id {class_id} outside [0, {})",
                self.groups.len()
            ))
        })
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn classes_in(&self, g: Group) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.groups[c] == g).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.groups.len() {
            return Err(Error::Config("class table names/groups length mismatch".into()));
        }
        if self.len() > 255 {
            return Err(Error::Config("at most 255 classes are supported".into()));
        }
        for g in Group::ALL {
            if self.classes_in(g).is_empty() {
                return Err(Error::Config(format!("no class assigned to group {}", g.name())));
            }
        }
        Ok(())
    }

    /// Group mask from a label map.
    pub fn mask_from_labels(&self, labels: &[u8], height: usize, width: usize) -> Result<GroupMask> {
        let groups = labels
            .iter()
            .map(|&l| self.class_to_group(l as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupMask {
            height,
            width,
            groups,
        })
    }
}

/// Per-pixel argmax label mapped through the class table.
pub fn group_mask_from_seg(seg: &SegMap, table: &ClassTable) -> Result<GroupMask> {
    if seg.classes != table.len() {
        return Err(Error::Dimension(format!(
            "seg has {} classes, table has {}",
            seg.classes,
            table.len()
        )));
    }
    table.mask_from_labels(&seg.labels(), seg.height, seg.width)
}
