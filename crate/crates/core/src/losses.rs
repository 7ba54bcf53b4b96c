//! Training objective: OHEM cross-entropy on the text-region map,
//! cross-entropy on TCL, masked smoothed-L1 on the five geometry channels.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::fox::GeometryMaps;
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
pub const NEG_POS_RATIO: usize = 3;
/// With no positives, at least this many hard negatives are kept.
pub const MIN_HARD_NEGATIVES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub tis: f64,
    pub tcl: f64,
    pub s: f64,
    pub sin_t: f64,
    pub cos_t: f64,
    pub sin_p: f64,
    pub cos_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(v: f64) -> Self {
        Self {
            tis: v,
            tcl: v,
            s: v,
            sin_t: v,
            cos_t: v,
            sin_p: v,
            cos_p: v,
        }
    }

    /// Weights of the six FOX terms in channel order.
    pub fn fox(&self) -> [f64; 6] {
        [self.tcl, self.s, self.sin_t, self.cos_t, self.sin_p, self.cos_p]
    }
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_TIS")]
    pub tis: f64,
    #[serde(rename = "L_tcl")]
    pub tcl: f64,
    #[serde(rename = "L_s")]
    pub s: f64,
    #[serde(rename = "L_sin_t")]
    pub sin_t: f64,
    #[serde(rename = "L_cos_t")]
    pub cos_t: f64,
    #[serde(rename = "L_sin_p")]
    pub sin_p: f64,
    #[serde(rename = "L_cos_p")]
    pub cos_p: f64,
    pub total: f64,
    /// TCL pixels left out of the scale term because their target scale is 0.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub scale_excluded: usize,
}

impl LossReport {
    /// Builds a report from the TIS term and the six FOX terms, filling in
    /// the weighted total.
    pub fn from_terms(tis: f64, fox: [f64; 6], weights: &LossWeights, scale_excluded: usize) -> Self {
        let total = weights.tis * tis + fox.iter().zip(weights.fox()).map(|(t, w)| t * w).sum::<f64>();
        Self {
            tis,
            tcl: fox[0],
            s: fox[1],
            sin_t: fox[2],
            cos_t: fox[3],
            sin_p: fox[4],
            cos_p: fox[5],
            total,
            scale_excluded,
        }
    }

    pub fn fox_terms(&self) -> [f64; 6] {
        [self.tcl, self.s, self.sin_t, self.cos_t, self.sin_p, self.cos_p]
    }
}

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return dim_err(format!("{what}: {a} vs {b} elements"));
    }
    Ok(())
}

/// 0/1 weights of the pixels kept by online hard example mining.
///
/// Every positive (`gt > 0.5`) is kept. Negatives are ranked by their loss,
/// ties broken by index, and the hardest `min(ratio·#pos, #neg)` are kept, or
/// `max(64, #neg/100)` when there are no positives.
pub fn ohem_mask(pred: &[f64], gt: &[f64], neg_pos_ratio: usize) -> Result<Vec<f64>> {
    check_len("ohem", pred.len(), gt.len())?;
    let mut keep = vec![0.0; pred.len()];
    let mut negs = Vec::new();
    for i in 0..pred.len() {
        if gt[i] > 0.5 {
            keep[i] = 1.0;
        } else {
            negs.push((bce(pred[i], 0.0), i));
        }
    }
    let pos = pred.len() - negs.len();
    let k = if pos == 0 {
        MIN_HARD_NEGATIVES.max(negs.len() / 100)
    } else {
        neg_pos_ratio.saturating_mul(pos)
    }
    .min(negs.len());
    negs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &negs[..k] {
        keep[i] = 1.0;
    }
    Ok(keep)
}

/// Mean binary cross-entropy over the pixels selected by [`ohem_mask`].
pub fn ohem_cross_entropy(pred: &[f64], gt: &[f64], neg_pos_ratio: usize) -> Result<f64> {
    let keep = ohem_mask(pred, gt, neg_pos_ratio)?;
    Ok(masked_bce(pred, gt, &keep))
}

/// Mean cross-entropy over pixels with nonzero `mask`; 0 if there are none.
fn masked_bce(pred: &[f64], gt: &[f64], mask: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] > 0.5 {
            sum += bce(pred[i], gt[i]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Smoothed-L1 of `pred − gt` summed over `mask > 0.5` and divided by
/// `max(1, #mask)`.
pub fn smoothed_l1(pred: &[f64], gt: &[f64], mask: &[f64]) -> Result<f64> {
    check_len("smoothed_l1", pred.len(), gt.len())?;
    check_len("smoothed_l1 mask", pred.len(), mask.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] > 0.5 {
            sum += smooth_l1(pred[i] - gt[i]);
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Pixel masks shared by the eager and taped FOX terms.
struct FoxMasks {
    region: Vec<f64>,
    tcl: Vec<f64>,
    scale: Vec<f64>,
    scale_div: Vec<f64>,
    excluded: usize,
}

fn fox_masks(gt: &GeometryMaps) -> FoxMasks {
    let n = gt.h * gt.w;
    let region: Vec<f64> = gt.tr.iter().map(|&v| f64::from(u8::from(v > 0.5))).collect();
    let tcl: Vec<f64> = gt.tcl.iter().map(|&v| f64::from(u8::from(v > 0.5))).collect();
    let mut scale = tcl.clone();
    let mut excluded = 0;
    for i in 0..n {
        if scale[i] > 0.5 && gt.scale[i] == 0.0 {
            scale[i] = 0.0;
            excluded += 1;
        }
    }
    let scale_div = gt.scale.iter().map(|&s| if s == 0.0 { 1.0 } else { s }).collect();
    FoxMasks {
        region,
        tcl,
        scale,
        scale_div,
        excluded,
    }
}

fn check_maps(pred: &GeometryMaps, gt: &GeometryMaps) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return dim_err(format!(
            "prediction is {}×{}, ground truth {}×{}",
            pred.h, pred.w, gt.h, gt.w
        ));
    }
    Ok(())
}

/// The six FOX terms in channel order and the number of TCL pixels left
/// out of the scale term.
pub fn fox_losses(pred: &GeometryMaps, gt: &GeometryMaps) -> Result<([f64; 6], usize)> {
    check_maps(pred, gt)?;
    let m = fox_masks(gt);
    let rel_pred: Vec<f64> = pred.scale.iter().zip(&m.scale_div).map(|(p, d)| p / d).collect();
    let rel_gt: Vec<f64> = gt.scale.iter().zip(&m.scale_div).map(|(g, d)| g / d).collect();
    Ok((
        [
            masked_bce(&pred.tcl, &gt.tcl, &m.region),
            smoothed_l1(&rel_pred, &rel_gt, &m.scale)?,
            smoothed_l1(&pred.sin_t, &gt.sin_t, &m.tcl)?,
            smoothed_l1(&pred.cos_t, &gt.cos_t, &m.tcl)?,
            smoothed_l1(&pred.sin_p, &gt.sin_p, &m.tcl)?,
            smoothed_l1(&pred.cos_p, &gt.cos_p, &m.tcl)?,
        ],
        m.excluded,
    ))
}

/// Full objective on maps of equal size; `pred.tr` is the first-stage map.
pub fn total_loss(pred: &GeometryMaps, gt: &GeometryMaps, weights: &LossWeights) -> Result<LossReport> {
    check_maps(pred, gt)?;
    let tis = ohem_cross_entropy(&pred.tr, &gt.tr, NEG_POS_RATIO)?;
    let (fox, excluded) = fox_losses(pred, gt)?;
    Ok(LossReport::from_terms(tis, fox, weights, excluded))
}

/// Taped OHEM cross-entropy. The selection is made on current values and
/// held fixed for the backward pass.
pub fn ohem_cross_entropy_tape(tape: &mut Tape, pred: Var, gt: &[f64], neg_pos_ratio: usize) -> Result<Var> {
    let keep = ohem_mask(tape.value(pred).data(), gt, neg_pos_ratio)?;
    tape.weighted_bce(pred, gt, &keep, PROB_EPS)
}

/// Taped FOX terms. `fox` holds six channels `[6, h, w]` in the order
/// tcl, s, sin θ, cos θ, sin φ, cos φ.
pub fn fox_losses_tape(tape: &mut Tape, fox: Var, gt: &GeometryMaps) -> Result<([Var; 6], usize)> {
    let shape = tape.shape(fox).to_vec();
    if shape != [6, gt.h, gt.w] {
        return dim_err(format!("fox prediction {shape:?}, expected [6, {}, {}]", gt.h, gt.w));
    }
    let m = fox_masks(gt);
    let ch: Vec<Var> = (0..6)
        .map(|k| tape.slice_channels(fox, k, 1))
        .collect::<Result<_>>()?;
    let norm = |mask: &[f64]| (mask.iter().filter(|&&v| v > 0.5).count()).max(1) as f64;
    let tcl = tape.weighted_bce(ch[0], &gt.tcl, &m.region, PROB_EPS)?;
    let s = tape.weighted_smooth_l1(ch[1], &gt.scale, &m.scale, Some(&m.scale_div), norm(&m.scale))?;
    let tn = norm(&m.tcl);
    let sin_t = tape.weighted_smooth_l1(ch[2], &gt.sin_t, &m.tcl, None, tn)?;
    let cos_t = tape.weighted_smooth_l1(ch[3], &gt.cos_t, &m.tcl, None, tn)?;
    let sin_p = tape.weighted_smooth_l1(ch[4], &gt.sin_p, &m.tcl, None, tn)?;
    let cos_p = tape.weighted_smooth_l1(ch[5], &gt.cos_p, &m.tcl, None, tn)?;
    Ok(([tcl, s, sin_t, cos_t, sin_p, cos_p], m.excluded))
}

/// Taped full objective; `tr` is `[h, w]` or `[1, h, w]`.
pub fn total_loss_tape(
    tape: &mut Tape,
    tr: Var,
    fox: Var,
    gt: &GeometryMaps,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    if tape.value(tr).len() != gt.h * gt.w {
        return dim_err("tr prediction does not match ground-truth size");
    }
    let tis = ohem_cross_entropy_tape(tape, tr, &gt.tr, NEG_POS_RATIO)?;
    let (terms, excluded) = fox_losses_tape(tape, fox, gt)?;
    let mut all = vec![tis];
    all.extend_from_slice(&terms);
    let mut coeffs = vec![weights.tis];
    coeffs.extend_from_slice(&weights.fox());
    let total = tape.weighted_sum(&all, &coeffs)?;
    let fox_vals = terms.map(|v| tape.value(v).data()[0]);
    let report = LossReport::from_terms(tape.value(tis).data()[0], fox_vals, weights, excluded);
    Ok((total, report))
}
