//! Detection losses: complete-IoU box regression, binary cross-entropy and
//! distribution focal loss, as plain scalar functions and as tape
//! compositions for training.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probability clamp used by [`bce`] and [`dfl`].
pub const PROB_EPS: f64 = 1e-12;
/// Guards the `α` denominator of CIoU when IoU = 1 and the aspect term vanishes.
const ALPHA_EPS: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 16;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    Ok(inter / (a.area() + b.area() - inter))
}

fn aspect_term(a: &BBox, b: &BBox) -> f64 {
    let d = (b.width() / b.height()).atan() - (a.width() / a.height()).atan();
    4.0 / (PI * PI) * d * d
}

/// Complete IoU: `IoU − ρ²/c² − α·v`.
pub fn ciou(a: &BBox, b: &BBox) -> Result<f64> {
    let iou = iou(a, b)?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let rho2 = (ax - bx).powi(2) + (ay - by).powi(2);
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let c2 = cw * cw + ch * ch;
    let v = aspect_term(a, b);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) };
    Ok(iou - rho2 / c2 - alpha * v)
}

pub fn ciou_loss(pred: &BBox, target: &BBox) -> Result<f64> {
    Ok(1.0 - ciou(pred, target)?)
}

/// `−t·ln p − (1−t)·ln(1−p)` with `p` clamped to `[ε, 1−ε]`.
/// Exact hard-label agreement (`p = t ∈ {0,1}`) is zero rather than the clamp floor.
pub fn bce(p: f64, t: f64) -> f64 {
    if p == t && (t == 0.0 || t == 1.0) {
        return 0.0;
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (-t * p.ln() - (1.0 - t) * (1.0 - p).ln()).max(0.0)
}

/// Numerically stable BCE on a logit.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Elementwise-mean BCE over matching slices.
pub fn bce_mean(p: &[f64], t: &[f64]) -> f64 {
    assert_eq!(p.len(), t.len());
    p.iter().zip(t).map(|(&p, &t)| bce(p, t)).sum::<f64>() / p.len().max(1) as f64
}

/// Bracketing bins and their weights for a continuous target `y`.
pub fn dfl_bins(y: f64, n_bins: usize) -> Result<[(usize, f64); 2]> {
    if n_bins < 2 || !(y >= 0.0 && y <= (n_bins - 1) as f64) {
        return Err(TensorError::Domain(format!(
            "dfl target {y} outside [0, {}]",
            n_bins.saturating_sub(1)
        )));
    }
    let i = y.floor() as usize;
    if i == n_bins - 1 {
        return Ok([(i, 1.0), (i, 0.0)]);
    }
    Ok([(i, (i + 1) as f64 - y), (i + 1, y - i as f64)])
}

/// Distribution focal loss of a discrete distribution against target `y`.
pub fn dfl(dist: &[f64], y: f64) -> Result<f64> {
    let bins = dfl_bins(y, dist.len())?;
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > 1e-6 || dist.iter().any(|&p| !(p >= 0.0)) {
        return Err(TensorError::Domain(format!(
            "dfl distribution must be non-negative and sum to 1 (sum {s})"
        )));
    }
    let nll = |i: usize| -dist[i].max(PROB_EPS).ln();
    Ok(bins
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(i, w)| w * nll(i))
        .sum::<f64>()
        .max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub bbox: f64,
    pub cls: f64,
    pub dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bbox: 7.5,
            cls: 0.5,
            dfl: 1.5,
        }
    }
}

/// One prediction matched to a ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedBox {
    pub pred: BBox,
    /// Predicted class probability.
    pub score: f64,
    /// Distributions over distance bins for the left, top, right and bottom sides.
    pub side_dists: [Vec<f64>; 4],
    pub target: BBox,
    /// Continuous side distances of the target, in bin units.
    pub side_targets: [f64; 4],
}

/// `[Σ_matches (λ_box·(1−CIoU) + λ_dfl·DFL) + λ_cls·Σ_all BCE] / max(1, #matches)`.
///
/// Matched predictions have classification target 1, `background` scores target 0.
/// DFL per box is the mean over its four sides.
pub fn detection_loss(matches: &[MatchedBox], background: &[f64], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for m in matches {
        let reg = ciou_loss(&m.pred, &m.target)?;
        let mut d = 0.0;
        for (dist, &y) in m.side_dists.iter().zip(&m.side_targets) {
            d += dfl(dist, y)?;
        }
        total += w.bbox * reg + w.dfl * d / 4.0 + w.cls * bce(m.score, 1.0);
    }
    total += w.cls * background.iter().map(|&p| bce(p, 0.0)).sum::<f64>();
    Ok(total / matches.len().max(1) as f64)
}

// ------------------------------------------------------------------ tape

fn col(tape: &mut Tape, boxes: Var, j: usize) -> Result<Var> {
    tape.slice_cols(boxes, j, j + 1)
}

/// Per-row CIoU between `M×4` corner-format boxes, returns `M×1`.
pub fn ciou_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if ps.len() != 2 || ps[1] != 4 || ps != ts {
        return Err(TensorError::dim("ciou", &ps, &ts));
    }
    let [ax1, ay1, ax2, ay2] = [0, 1, 2, 3].map(|j| col(tape, pred, j));
    let [bx1, by1, bx2, by2] = [0, 1, 2, 3].map(|j| col(tape, target, j));
    let (ax1, ay1, ax2, ay2) = (ax1?, ay1?, ax2?, ay2?);
    let (bx1, by1, bx2, by2) = (bx1?, by1?, bx2?, by2?);

    let aw = tape.sub(ax2, ax1)?;
    let ah = tape.sub(ay2, ay1)?;
    let bw = tape.sub(bx2, bx1)?;
    let bh = tape.sub(by2, by1)?;

    let ix2 = tape.minimum(ax2, bx2)?;
    let ix1 = tape.maximum(ax1, bx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.clamp(iw, 0.0, f64::INFINITY);
    let iy2 = tape.minimum(ay2, by2)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.clamp(ih, 0.0, f64::INFINITY);
    let inter = tape.mul(iw, ih)?;
    let area_a = tape.mul(aw, ah)?;
    let area_b = tape.mul(bw, bh)?;
    let union = tape.add(area_a, area_b)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let cx2 = tape.maximum(ax2, bx2)?;
    let cx1 = tape.minimum(ax1, bx1)?;
    let cw = tape.sub(cx2, cx1)?;
    let cy2 = tape.maximum(ay2, by2)?;
    let cy1 = tape.minimum(ay1, by1)?;
    let ch = tape.sub(cy2, cy1)?;
    let cw2 = tape.square(cw);
    let ch2 = tape.square(ch);
    let c2 = tape.add(cw2, ch2)?;

    // 2·(center_a − center_b) per axis, squared and scaled by 1/4.
    let sa = tape.add(ax1, ax2)?;
    let sb = tape.add(bx1, bx2)?;
    let dx = tape.sub(sb, sa)?;
    let sa = tape.add(ay1, ay2)?;
    let sb = tape.add(by1, by2)?;
    let dy = tape.sub(sb, sa)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2)?;
    let rho2 = tape.scale(rho2, 0.25);
    let dist = tape.div(rho2, c2)?;

    let ra = tape.div(aw, ah)?;
    let ra = tape.atan(ra);
    let rb = tape.div(bw, bh)?;
    let rb = tape.atan(rb);
    let dr = tape.sub(rb, ra)?;
    let v = tape.square(dr);
    let v = tape.scale(v, 4.0 / (PI * PI));
    let eps = tape.leaf(Tensor::scalar(1.0 + ALPHA_EPS));
    let denom = tape.sub(v, iou)?;
    let denom = tape.add(denom, eps)?;
    let alpha = tape.div(v, denom)?;
    let av = tape.mul(alpha, v)?;

    let out = tape.sub(iou, dist)?;
    tape.sub(out, av)
}

/// Mean BCE of probabilities against constant targets, probabilities clamped to `[ε, 1−ε]`.
pub fn bce_tape(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(probs) != targets.shape() {
        return Err(TensorError::dim("bce", tape.shape(probs), targets.shape()));
    }
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let t = tape.leaf(targets.clone());
    let one_minus_t = tape.leaf(targets.map(|v| 1.0 - v));
    let one = tape.leaf(Tensor::scalar(1.0));
    let lp = tape.log(p);
    let q = tape.sub(one, p)?;
    let lq = tape.log(q);
    let a = tape.mul(t, lp)?;
    let b = tape.mul(one_minus_t, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// DFL summed over rows: `logits` is `R×n_bins` (softmax taken per row), one target per row.
pub fn dfl_tape(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(TensorError::dim("dfl", &s, &[targets.len()]));
    }
    let n = s[1];
    let mut idx = Vec::with_capacity(2 * targets.len());
    let mut wts = Vec::with_capacity(2 * targets.len());
    for (r, &y) in targets.iter().enumerate() {
        for (i, w) in dfl_bins(y, n)? {
            idx.push(r * n + i);
            wts.push(w);
        }
    }
    let p = tape.softmax_rows(logits);
    let p = tape.clamp(p, PROB_EPS, 1.0);
    let lp = tape.log(p);
    let picked = tape.gather(lp, &idx)?;
    let w = tape.leaf(Tensor::from_vec(wts));
    let wl = tape.mul(picked, w)?;
    let s = tape.sum(wl);
    Ok(tape.scale(s, -1.0))
}
