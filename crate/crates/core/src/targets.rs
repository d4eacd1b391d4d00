//! Multi-scale anchor targets for the regression model, its three losses as
//! pure functions of given predictions, and pseudo-label refinement.
//!
//! Level `l` of the pyramid has stride `2^l` snippets and `ceil(T / 2^l)`
//! anchors; anchor `j` sits at the center of base snippets
//! `[j 2^l, (j+1) 2^l)`. Regression offsets are distances to the pseudo
//! boundaries in units of the level stride.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::{fuse_ricker, segments_from_wavelet};
use crate::mask::{mask_for_proposals, MaskParams, SnippetMask};
use crate::temporal::{tiou, Interval, Proposal, PseudoProposal, TimeGrid, VideoLabel};
use crate::weak::LOG_EPS;

/// Duration ranges (in snippets) routed to each pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    ranges: Vec<(f64, f64)>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            ranges: vec![
                (0.0, 4.0),
                (4.0, 8.0),
                (8.0, 16.0),
                (16.0, 32.0),
                (32.0, 64.0),
                (64.0, f64::INFINITY),
            ],
        }
    }
}

impl PyramidConfig {
    /// Ranges must start at 0, be contiguous and ascending, and end at +inf.
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        let field = "regression_ranges";
        let (Some(first), Some(last)) = (ranges.first(), ranges.last()) else {
            return Err(Error::constraint(field, "need at least one level"));
        };
        if first.0 != 0.0 {
            return Err(Error::constraint(field, "first range must start at 0"));
        }
        if last.1 != f64::INFINITY {
            return Err(Error::constraint(field, "last range must be open-ended"));
        }
        for (i, r) in ranges.iter().enumerate() {
            if !(r.0 < r.1) {
                return Err(Error::constraint(field, format!("range {i} is empty")));
            }
            if i > 0 && ranges[i - 1].1 != r.0 {
                return Err(Error::constraint(field, format!("range {i} is not contiguous")));
            }
        }
        if ranges.len() > 20 {
            return Err(Error::constraint(field, "at most 20 levels"));
        }
        Ok(Self { ranges })
    }

    pub fn num_levels(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn stride_snippets(&self, level: usize) -> usize {
        1 << level
    }

    /// Total anchor count over all levels.
    pub fn anchor_count(&self, num_snippets: usize) -> usize {
        (0..self.num_levels())
            .map(|l| num_snippets.div_ceil(self.stride_snippets(l)))
            .sum()
    }
}

/// Level whose range contains the proposal's duration in snippets.
pub fn assign_level(p: &PseudoProposal, cfg: &PyramidConfig, grid: &TimeGrid) -> usize {
    let len = p.interval.duration_s() / grid.snippet_duration_s();
    cfg.ranges
        .iter()
        .position(|&(lo, hi)| len >= lo && len < hi)
        .unwrap_or(cfg.num_levels() - 1)
}

/// Supervision for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub level: usize,
    pub position: usize,
    pub time_s: f64,
    /// Level stride in seconds.
    pub stride_s: f64,
    /// 0 = background, otherwise the class id.
    pub class_label: usize,
    pub reg_left: f64,
    pub reg_right: f64,
    pub iou_weight: f64,
    pub mask_bit: bool,
}

impl AnchorTarget {
    pub fn is_positive(&self) -> bool {
        self.class_label > 0
    }

    /// The pseudo interval this anchor regresses to, for positive anchors.
    pub fn target_interval(&self) -> Option<Interval> {
        if !self.is_positive() {
            return None;
        }
        Interval::new(
            self.time_s - self.reg_left * self.stride_s,
            self.time_s + self.reg_right * self.stride_s,
        )
        .ok()
    }
}

/// Targets for every anchor of every level, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub anchors: Vec<AnchorTarget>,
    pub class_count: usize,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.anchors.iter().filter(|a| a.is_positive()).count()
    }

    /// Copy with each positive anchor's IoU weight set to the tIoU between
    /// its decoded prediction and its pseudo interval.
    pub fn with_predicted_iou(&self, pred: &AnchorPredictions) -> Result<AnchorTargets> {
        check_shapes(pred, self)?;
        let mut out = self.clone();
        for (a, p) in out.anchors.iter_mut().zip(&pred.anchors) {
            if let Some(target) = a.target_interval() {
                a.iou_weight = decode(a, p).map(|d| tiou(&d, &target)).unwrap_or(0.0);
            }
        }
        Ok(out)
    }
}

pub fn build_targets(
    pseudos: &[PseudoProposal],
    mask_params: &MaskParams,
    cfg: &PyramidConfig,
    grid: &TimeGrid,
) -> AnchorTargets {
    let mask = mask_for_proposals(pseudos, mask_params, grid);
    build_targets_with_mask(pseudos, &mask, cfg, grid)
}

/// Anchor targets with a precomputed base-grid mask.
///
/// An anchor is positive for the pseudo proposal assigned to its level that
/// strictly contains its time point; among several, the shortest wins.
pub fn build_targets_with_mask(
    pseudos: &[PseudoProposal],
    mask: &SnippetMask,
    cfg: &PyramidConfig,
    grid: &TimeGrid,
) -> AnchorTargets {
    let t = grid.num_snippets();
    let d = grid.snippet_duration_s();
    let mut by_level: Vec<Vec<&PseudoProposal>> = vec![Vec::new(); cfg.num_levels()];
    for p in pseudos {
        by_level[assign_level(p, cfg, grid)].push(p);
    }
    for ps in &mut by_level {
        ps.sort_by(|a, b| {
            a.interval
                .duration_s()
                .total_cmp(&b.interval.duration_s())
                .then(a.interval.start_s().total_cmp(&b.interval.start_s()))
                .then(a.class_id.cmp(&b.class_id))
        });
    }

    let mut anchors = Vec::with_capacity(cfg.anchor_count(t));
    for (level, candidates) in by_level.iter().enumerate() {
        let stride = cfg.stride_snippets(level);
        let stride_s = stride as f64 * d;
        for position in 0..t.div_ceil(stride) {
            let time_s = (position as f64 + 0.5) * stride_s;
            let base = (position * stride + stride / 2).min(t - 1);
            let mut a = AnchorTarget {
                level,
                position,
                time_s,
                stride_s,
                class_label: 0,
                reg_left: 0.0,
                reg_right: 0.0,
                iou_weight: 0.0,
                mask_bit: mask.bits()[base],
            };
            if let Some(p) = candidates
                .iter()
                .find(|p| p.interval.start_s() < time_s && time_s < p.interval.end_s())
            {
                a.class_label = p.class_id;
                a.reg_left = (time_s - p.interval.start_s()) / stride_s;
                a.reg_right = (p.interval.end_s() - time_s) / stride_s;
                a.iou_weight = 1.0;
            }
            anchors.push(a);
        }
    }
    AnchorTargets {
        anchors,
        class_count: grid.class_count(),
    }
}

/// Model head output for one anchor. `class_probs` has `C+1` entries with
/// background last.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    pub class_probs: Vec<f64>,
    pub reg_left: f64,
    pub reg_right: f64,
}

impl AnchorPrediction {
    /// Probability of `label` (0 = background).
    pub fn prob_of(&self, label: usize) -> f64 {
        let c = self.class_probs.len() - 1;
        if label == 0 {
            self.class_probs[c]
        } else {
            self.class_probs[label - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPredictions {
    pub anchors: Vec<AnchorPrediction>,
}

impl AnchorPredictions {
    pub fn new(anchors: Vec<AnchorPrediction>) -> Result<Self> {
        for (i, a) in anchors.iter().enumerate() {
            check_simplex(&a.class_probs, "class_probs", i)?;
            if !(a.reg_left >= 0.0 && a.reg_right >= 0.0) {
                return Err(Error::constraint("reg_left", format!("anchor {i} has negative offsets")));
            }
        }
        Ok(Self { anchors })
    }

    /// Predictions that reproduce `targets` exactly.
    pub fn perfect(targets: &AnchorTargets) -> Self {
        let c = targets.class_count;
        let anchors = targets
            .anchors
            .iter()
            .map(|a| {
                let mut class_probs = vec![0.0; c + 1];
                class_probs[if a.class_label == 0 { c } else { a.class_label - 1 }] = 1.0;
                AnchorPrediction {
                    class_probs,
                    reg_left: a.reg_left,
                    reg_right: a.reg_right,
                }
            })
            .collect();
        Self { anchors }
    }
}

fn check_simplex(row: &[f64], field: &'static str, i: usize) -> Result<()> {
    if row.len() < 2 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::constraint(field, format!("row {i} is not a probability vector")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::constraint(field, format!("row {i} sums to {sum}")));
    }
    Ok(())
}

fn check_shapes(pred: &AnchorPredictions, tgt: &AnchorTargets) -> Result<()> {
    if pred.anchors.len() != tgt.anchors.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} anchors",
            pred.anchors.len(),
            tgt.anchors.len()
        )));
    }
    if let Some(p) = pred.anchors.iter().find(|p| p.class_probs.len() != tgt.class_count + 1) {
        return Err(Error::Shape(format!(
            "class_probs has {} entries, expected {}",
            p.class_probs.len(),
            tgt.class_count + 1
        )));
    }
    Ok(())
}

fn decode(a: &AnchorTarget, p: &AnchorPrediction) -> Option<Interval> {
    Interval::new(a.time_s - p.reg_left * a.stride_s, a.time_s + p.reg_right * a.stride_s).ok()
}

/// `-(1 - p)^gamma ln p` with `p` clamped to `[1e-12, 1]`.
pub fn focal_loss(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(LOG_EPS, 1.0);
    let l = -(1.0 - p).powf(gamma) * p.ln();
    // -0.0 at p = 1
    l.max(0.0)
}

/// IoU-weighted focal classification loss over masked-in anchors, with
/// positives and negatives normalized by their own counts.
pub fn cls_loss(pred: &AnchorPredictions, tgt: &AnchorTargets, gamma: f64) -> Result<f64> {
    check_shapes(pred, tgt)?;
    let (mut pos_sum, mut n_pos, mut neg_sum, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (a, p) in tgt.anchors.iter().zip(&pred.anchors) {
        if !a.mask_bit {
            continue;
        }
        if a.is_positive() {
            pos_sum += a.iou_weight * focal_loss(p.prob_of(a.class_label), gamma);
            n_pos += 1;
        } else {
            neg_sum += focal_loss(p.prob_of(0), gamma);
            n_neg += 1;
        }
    }
    let pos = if n_pos > 0 { pos_sum / n_pos as f64 } else { 0.0 };
    let neg = if n_neg > 0 { neg_sum / n_neg as f64 } else { 0.0 };
    Ok(pos + neg)
}

/// Regression loss and whether there were no masked-in positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegLoss {
    pub value: f64,
    pub empty_positives: bool,
}

/// Mean of `1 - tiou(decoded, pseudo)` over masked-in positive anchors.
pub fn reg_loss(pred: &AnchorPredictions, tgt: &AnchorTargets) -> Result<RegLoss> {
    check_shapes(pred, tgt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, p) in tgt.anchors.iter().zip(&pred.anchors) {
        let Some(target) = a.target_interval().filter(|_| a.mask_bit) else {
            continue;
        };
        let overlap = decode(a, p).map(|d| tiou(&d, &target)).unwrap_or(0.0);
        sum += 1.0 - overlap;
        n += 1;
    }
    Ok(RegLoss {
        value: if n > 0 { sum / n as f64 } else { 0.0 },
        empty_positives: n == 0,
    })
}

/// Snippet-level focal loss on confident SP entries (`Z > tau`) whose
/// foreground class is in the video label; background entries always
/// qualify. `snippet_probs` and `z` are `T x (C+1)`, background last.
pub fn att_loss(
    snippet_probs: &Array2<f64>,
    z: &Array2<f64>,
    tau: f64,
    label: &VideoLabel,
    gamma: f64,
) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::constraint("tau", "must lie in (0, 1)"));
    }
    if snippet_probs.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "snippet probabilities {:?} vs SPs {:?}",
            snippet_probs.dim(),
            z.dim()
        )));
    }
    let c = z.ncols() - 1;
    if label.class_count() != c {
        return Err(Error::Shape("video label length differs from SP classes".into()));
    }
    let (mut sum, mut m) = (0.0, 0usize);
    for ((t, l), &v) in z.indexed_iter() {
        if v > tau && (l == c || label.contains(l + 1)) {
            sum += focal_loss(snippet_probs[[t, l]], gamma);
            m += 1;
        }
    }
    Ok(if m > 0 { sum / m as f64 } else { 0.0 })
}

pub fn total_loss(l_reg: f64, l_cls: f64, l_att: f64, lambda: f64) -> f64 {
    l_reg + l_cls + lambda * l_att
}

/// Settings for [`refine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Multiplier on model-output scores relative to pseudo confidences.
    pub model_weight: f64,
    pub min_duration_s: f64,
}

/// Fuses current pseudo proposals with model output and rebuilds the
/// uncertainty mask with the scheduled ratios.
pub fn refine(
    pseudos: &[PseudoProposal],
    model_out: &[Proposal],
    grid: &TimeGrid,
    mask_params: &MaskParams,
    cfg: &RefineConfig,
) -> Result<(Vec<PseudoProposal>, SnippetMask)> {
    let pool: Vec<Proposal> = pseudos
        .iter()
        .map(PseudoProposal::to_proposal)
        .chain(model_out.iter().map(|p| Proposal {
            score: p.score * cfg.model_weight,
            ..*p
        }))
        .collect();
    let wavelet = fuse_ricker(&pool, grid)?;
    let refined = segments_from_wavelet(&wavelet, cfg.min_duration_s);
    let mask = mask_for_proposals(&refined, mask_params, grid);
    Ok((refined, mask))
}
