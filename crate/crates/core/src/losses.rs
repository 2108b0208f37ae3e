//! Training objectives.
//!
//! * Flow: for each group `g`, the mean over the pixels `N_g` of that group
//!   of `‖O_t − Ô_t^g‖₂`, evaluated on branch `g` only; summed over groups.
//! * Parsing: cross-entropy against the labels on annotated frames,
//!   otherwise `ℓ1 + GDL` against the teacher score map.
//!
//! Batched losses are means over batch items of the per-item losses, built
//! from per-pixel weight maps so that one graph serves every item.

use jant_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::baselines::Target;
use crate::error::{Error, Result};
use crate::types::{FlowField, Group, GroupMask, SegMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegMode {
    #[serde(rename = "CE")]
    CrossEntropy,
    #[serde(rename = "L1+GDL")]
    L1Gdl,
    /// A batch holding both annotated and unannotated items.
    #[serde(rename = "mixed")]
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow_total: f64,
    /// In `Group::index` order: MOV, STA, OTH.
    pub flow_per_group: [f64; 3],
    pub seg_total: f64,
    pub seg_mode: SegMode,
    pub combined: f64,
}

impl LossBreakdown {
    /// Sums per-step breakdowns (used by unrolled training).
    pub fn accumulate(parts: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = parts.first()?;
        let mut out = first.clone();
        for p in &parts[1..] {
            out.flow_total += p.flow_total;
            for g in 0..3 {
                out.flow_per_group[g] += p.flow_per_group[g];
            }
            out.seg_total += p.seg_total;
            out.combined += p.combined;
            if p.seg_mode != out.seg_mode {
                out.seg_mode = SegMode::Mixed;
            }
        }
        Some(out)
    }
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub flow_per_group: [Var; 3],
    pub flow_total: Var,
    pub seg: Var,
    pub combined: Var,
    pub seg_mode: SegMode,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossBreakdown {
            flow_total: v(self.flow_total),
            flow_per_group: self.flow_per_group.map(v),
            seg_total: v(self.seg),
            seg_mode: self.seg_mode,
            combined: v(self.combined),
        }
    }
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: Var, weights: Tensor<T>) -> Result<Var> {
    let w = g.constant(weights);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

/// Group-masked flow loss. `branches` are `[N,2,H,W]`, `target` the
/// ground-truth flows, `masks` the per-item group masks.
pub fn flow_group_loss<T: Scalar>(
    g: &mut Graph<T>,
    branches: [Var; 3],
    target: Var,
    masks: &[GroupMask],
) -> Result<([Var; 3], Var)> {
    let (n, c, h, w) = g.value(target).dims4()?;
    if c != 2 || masks.len() != n || masks.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Dimension(format!(
            "flow loss: target {:?} with {} masks",
            g.shape(target),
            masks.len()
        )));
    }
    let hw = h * w;
    let mut per = Vec::with_capacity(3);
    for grp in Group::ALL {
        let diff = g.sub(branches[grp.index()], target)?;
        let norm = g.channel_norm(diff)?;
        let mut wts = vec![T::zero(); n * hw];
        for (i, m) in masks.iter().enumerate() {
            let count = m.count(grp);
            if count == 0 {
                continue;
            }
            let wt = T::one() / T::from_f64((count * n) as f64);
            for (p, &x) in m.groups.iter().enumerate() {
                if x == grp {
                    wts[i * hw + p] = wt;
                }
            }
        }
        per.push(weighted_sum(g, norm, Tensor::new(&[n, 1, h, w], wts)?)?);
    }
    let s = g.add(per[0], per[1])?;
    let total = g.add(s, per[2])?;
    Ok(([per[0], per[1], per[2]], total))
}

/// Per-item seg loss weights: CE for annotated items, `ℓ1 + GDL` otherwise.
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    teacher: Var,
    labels: &[Vec<Option<usize>>],
    annotated: &[bool],
) -> Result<(Var, SegMode)> {
    let (n, c, h, w) = g.value(pred).dims4()?;
    if g.shape(teacher) != g.shape(pred) {
        return Err(Error::Dimension(format!(
            "seg loss: prediction {:?} vs teacher {:?}",
            g.shape(pred),
            g.shape(teacher)
        )));
    }
    if annotated.len() != n || labels.len() != n {
        return Err(Error::Dimension("seg loss: per-item flags/labels do not match batch".into()));
    }
    let hw = h * w;
    let nf = T::from_f64(n as f64);
    let mut terms = Vec::new();
    let n_ann = annotated.iter().filter(|&&a| a).count();
    if n_ann > 0 {
        let mut flat = Vec::with_capacity(n * hw);
        let mut wts = vec![T::zero(); n * hw];
        for i in 0..n {
            if annotated[i] {
                if labels[i].len() != hw {
                    return Err(Error::Dimension("seg loss: label map size".into()));
                }
                let valid = labels[i].iter().filter(|l| l.is_some()).count();
                if valid == 0 {
                    return Err(Error::Evaluation("cross-entropy with every pixel ignored".into()));
                }
                let wt = T::one() / (T::from_f64(valid as f64) * nf);
                for (p, l) in labels[i].iter().enumerate() {
                    if l.is_some() {
                        wts[i * hw + p] = wt;
                    }
                }
                flat.extend_from_slice(&labels[i]);
            } else {
                flat.extend(std::iter::repeat_n(None, hw));
            }
        }
        let ce = g.cross_entropy_map(pred, flat)?;
        terms.push(weighted_sum(g, ce, Tensor::new(&[n, 1, h, w], wts)?)?);
    }
    if n_ann < n {
        let item_weights = |cnt: usize, shape: [usize; 4]| {
            let per = shape[1] * shape[2] * shape[3];
            let wt = T::one() / (T::from_f64(cnt as f64) * nf);
            let data = (0..n)
                .flat_map(|i| std::iter::repeat_n(if annotated[i] { T::zero() } else { wt }, per))
                .collect();
            Tensor::new(&shape, data)
        };
        let d = g.sub(pred, teacher)?;
        let a = g.abs(d);
        terms.push(weighted_sum(g, a, item_weights(c * hw, [n, c, h, w])?)?);
        if w > 1 {
            let gx = gdl_axis(g, pred, teacher, true)?;
            terms.push(weighted_sum(g, gx, item_weights(c * h * (w - 1), [n, c, h, w - 1])?)?);
        }
        if h > 1 {
            let gy = gdl_axis(g, pred, teacher, false)?;
            terms.push(weighted_sum(g, gy, item_weights(c * (h - 1) * w, [n, c, h - 1, w])?)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let mode = match n_ann {
        0 => SegMode::L1Gdl,
        k if k == n => SegMode::CrossEntropy,
        _ => SegMode::Mixed,
    };
    Ok((total, mode))
}

/// `||∇S| − |∇Ŝ||` along one axis.
fn gdl_axis<T: Scalar>(g: &mut Graph<T>, pred: Var, teacher: Var, horizontal: bool) -> Result<Var> {
    let (dp, dt) = if horizontal {
        (g.diff_x(pred)?, g.diff_x(teacher)?)
    } else {
        (g.diff_y(pred)?, g.diff_y(teacher)?)
    };
    let ap = g.abs(dp);
    let at = g.abs(dt);
    let d = g.sub(ap, at)?;
    Ok(g.abs(d))
}

/// Flow loss plus `seg_weight` times the parsing loss for a batch of targets.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    branches: [Var; 3],
    seg_pred: Var,
    masks: &[GroupMask],
    targets: &[&Target],
    seg_weight: f64,
) -> Result<LossVars> {
    if targets.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    let flows: Vec<Tensor<T>> = targets.iter().map(|t| t.flow.to_tensor()).collect();
    let tflow = g.constant(Tensor::concat_batch(&flows)?);
    let segs: Vec<Tensor<T>> = targets.iter().map(|t| t.seg.to_tensor()).collect();
    let tseg = g.constant(Tensor::concat_batch(&segs)?);
    let labels: Vec<Vec<Option<usize>>> = targets
        .iter()
        .map(|t| t.labels.iter().map(|&l| Some(l as usize)).collect())
        .collect();
    let annotated: Vec<bool> = targets.iter().map(|t| t.annotated).collect();
    let (per, flow_total) = flow_group_loss(g, branches, tflow, masks)?;
    let (seg, seg_mode) = seg_loss(g, seg_pred, tseg, &labels, &annotated)?;
    let weighted = if seg_weight == 1.0 {
        seg
    } else {
        g.scale(seg, T::from_f64(seg_weight))
    };
    let combined = g.add(flow_total, weighted)?;
    Ok(LossVars {
        flow_per_group: per,
        flow_total,
        seg,
        combined,
        seg_mode,
    })
}

/// Scalar flow loss on plain fields: per-group means of endpoint distances.
pub fn flow_group_loss_value(branches: &[FlowField; 3], target: &FlowField, mask: &GroupMask) -> Result<[f64; 3]> {
    let mut g = Graph::<f64>::new();
    let b = branches.each_ref().map(|f| g.constant(f.to_tensor()));
    let t = g.constant(target.to_tensor());
    let (per, _) = flow_group_loss(&mut g, b, t, std::slice::from_ref(mask))?;
    Ok(per.map(|v| g.value(v).data()[0]))
}

/// Mean cross-entropy of `pred` against `labels`, skipping `ignore`.
pub fn seg_ce_loss(pred: &SegMap, labels: &[u8], ignore: Option<u8>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.to_tensor());
    let lab = labels
        .iter()
        .map(|&l| (Some(l) != ignore).then_some(l as usize))
        .collect();
    let (loss, _) = seg_loss(&mut g, p, p, &[lab], &[true])?;
    Ok(g.value(loss).data()[0])
}

/// `ℓ1 + GDL` between two score maps.
pub fn seg_l1_gdl_loss(pred: &SegMap, teacher: &SegMap) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.to_tensor());
    let t = g.constant(teacher.to_tensor());
    let (loss, _) = seg_loss(&mut g, p, t, &[vec![]], &[false])?;
    Ok(g.value(loss).data()[0])
}
