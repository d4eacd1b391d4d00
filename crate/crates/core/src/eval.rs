//! Detection evaluation: per-class AP with greedy tIoU matching, mAP tables,
//! inference post-processing and pseudo-label quality.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::temporal::{tiou, ClassId, Interval, Proposal, PseudoProposal, SnippetPredictions};
use crate::weak::{soft_nms, sort_by_score_desc, topk_aggregate};

/// Ground-truth actions per video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub videos: BTreeMap<String, Vec<(Interval, ClassId)>>,
}

impl GroundTruthSet {
    pub fn push(&mut self, video_id: impl Into<String>, interval: Interval, class_id: ClassId) {
        self.videos.entry(video_id.into()).or_default().push((interval, class_id));
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.videos.values().flatten().map(|(_, c)| *c).collect()
    }

    pub fn len(&self) -> usize {
        self.videos.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scored predictions per video.
pub type Predictions = BTreeMap<String, Vec<Proposal>>;

/// One prediction of a single class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment<'a> {
    pub video_id: &'a str,
    pub interval: Interval,
    pub score: f64,
}

/// One ground-truth instance of a single class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtSegment<'a> {
    pub video_id: &'a str,
    pub interval: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Set when there were no ground-truth instances (AP reported as 0).
    pub no_ground_truth: bool,
}

/// Greedy matching in score order (ties keep input order). Each prediction
/// takes the unmatched same-video GT with the highest tIoU at or above
/// `thresh`; tIoU ties go to the earlier GT start. Returns the sorted
/// prediction order and the TP flag of each sorted prediction.
fn greedy_match(preds: &[ScoredSegment<'_>], gts: &[GtSegment<'_>], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));

    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(f64, usize)> = None;
            for &j in by_video.get(p.video_id).map(Vec::as_slice).unwrap_or(&[]) {
                if used[j] {
                    continue;
                }
                let o = tiou(&p.interval, &gts[j].interval);
                if o < thresh {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bo, bj)) => {
                        o > bo || (o == bo && gts[j].interval.start_s() < gts[bj].interval.start_s())
                    }
                };
                if better {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision with all-point interpolation of the PR curve.
pub fn average_precision(preds: &[ScoredSegment<'_>], gts: &[GtSegment<'_>], tiou_thresh: f64) -> ApResult {
    if gts.is_empty() {
        return ApResult {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let tp = greedy_match(preds, gts, tiou_thresh);
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += is_tp as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // interpolated precision: best precision at this recall or beyond
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum = tp.iter().zip(&precision).filter(|(t, _)| **t).fold(0.0, |acc, (_, p)| acc + p);
    ApResult {
        ap: sum / gts.len() as f64,
        no_ground_truth: false,
    }
}

/// Standard tIoU grid `[0.1:0.1:0.7]`.
pub fn default_tiou_thresholds() -> Vec<f64> {
    (1..=7).map(|i| i as f64 / 10.0).collect()
}

/// mAP at each threshold, per-class APs and range averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassId>,
    /// `per_class_ap[k][i]`: AP of `classes[k]` at `thresholds[i]`.
    pub per_class_ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub avg_01_05: Option<f64>,
    pub avg_03_07: Option<f64>,
    pub avg_01_07: Option<f64>,
    /// No ground truth at all; every cell is 0.
    pub no_ground_truth: bool,
}

impl EvalReport {
    /// Mean of the mAP cells whose threshold lies in `[lo, hi]`.
    pub fn range_average(&self, lo: f64, hi: f64) -> Option<f64> {
        let cells: Vec<f64> = self
            .thresholds
            .iter()
            .zip(&self.map)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .map(|(_, m)| *m)
            .collect();
        if cells.is_empty() {
            None
        } else {
            Some(cells.iter().sum::<f64>() / cells.len() as f64)
        }
    }

    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - thresh).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// Aligned text table: one column per threshold, then the averages, in
    /// percent.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<10}", "mAP@tIoU");
        let mut row = format!("{:<10}", "");
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = write!(header, " {:>7}", format!("{t:.2}"));
            let _ = write!(row, " {:>7.1}", 100.0 * m);
        }
        header.push_str(" |");
        row.push_str(" |");
        for (name, v) in [
            ("(0.1:0.5)", self.avg_01_05),
            ("(0.3:0.7)", self.avg_03_07),
            ("(0.1:0.7)", self.avg_01_07),
        ] {
            let _ = write!(header, " {name:>9}");
            match v {
                Some(v) => {
                    let _ = write!(row, " {:>9.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(row, " {:>9}", "-");
                }
            }
        }
        format!("{header}\n{row}\n")
    }
}

fn segments_of_class<'a>(preds: &'a Predictions, class_id: ClassId) -> Vec<ScoredSegment<'a>> {
    preds
        .iter()
        .flat_map(|(v, ps)| {
            ps.iter().filter(move |p| p.class_id == class_id).map(move |p| ScoredSegment {
                video_id: v.as_str(),
                interval: p.interval,
                score: p.score,
            })
        })
        .collect()
}

fn gts_of_class(gts: &GroundTruthSet, class_id: ClassId) -> Vec<GtSegment<'_>> {
    gts.videos
        .iter()
        .flat_map(|(v, gs)| {
            gs.iter().filter(move |(_, c)| *c == class_id).map(move |(iv, _)| GtSegment {
                video_id: v.as_str(),
                interval: *iv,
            })
        })
        .collect()
}

pub fn map_table(preds: &Predictions, gts: &GroundTruthSet, thresholds: &[f64]) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::constraint("tiou_thresholds", "must be non-empty"));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::constraint("tiou_thresholds", "must lie in [0, 1]"));
    }
    let classes: Vec<ClassId> = gts.classes().into_iter().collect();
    let per_class_ap: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let p = segments_of_class(preds, c);
            let g = gts_of_class(gts, c);
            thresholds.iter().map(|&t| average_precision(&p, &g, t).ap).collect()
        })
        .collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            if classes.is_empty() {
                0.0
            } else {
                per_class_ap.iter().map(|row| row[i]).sum::<f64>() / classes.len() as f64
            }
        })
        .collect();
    let mut report = EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        per_class_ap,
        map,
        avg_01_05: None,
        avg_03_07: None,
        avg_01_07: None,
        no_ground_truth: gts.is_empty(),
    };
    report.avg_01_05 = report.range_average(0.1, 0.5);
    report.avg_03_07 = report.range_average(0.3, 0.7);
    report.avg_01_07 = report.range_average(0.1, 0.7);
    Ok(report)
}

/// Soft-NMS settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub sigma: f64,
    pub min_score: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            min_score: 0.001,
        }
    }
}

/// Video-level class scores for inference: top-k mean of the
/// attention-suppressed class scores, foreground classes only.
pub fn video_class_scores(sps: &SnippetPredictions, k_ratio: f64) -> Result<Vec<f64>> {
    let mut s = topk_aggregate(sps, k_ratio)?.suppressed;
    s.truncate(sps.class_count());
    Ok(s)
}

/// Drops proposals of classes scoring below `class_thresh` at video level,
/// then applies soft-NMS.
pub fn postprocess_inference(
    proposals: &[Proposal],
    video_scores: &[f64],
    class_thresh: f64,
    nms: &NmsParams,
) -> Vec<Proposal> {
    let kept: Vec<Proposal> = proposals
        .iter()
        .filter(|p| {
            video_scores
                .get(p.class_id.wrapping_sub(1))
                .is_some_and(|&s| s >= class_thresh)
        })
        .copied()
        .collect();
    let mut out = soft_nms(&kept, nms.sigma, nms.min_score);
    sort_by_score_desc(&mut out);
    out
}

/// Pseudo-label quality: ranked mAP plus set-level precision and recall.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuality {
    pub report: EvalReport,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// No pseudo proposals; precision reported as 0.
    pub precision_undefined: bool,
}

pub fn pseudo_quality(
    pseudos: &BTreeMap<String, Vec<PseudoProposal>>,
    gts: &GroundTruthSet,
    thresholds: &[f64],
) -> Result<PseudoQuality> {
    let preds: Predictions = pseudos
        .iter()
        .map(|(v, ps)| (v.clone(), ps.iter().map(PseudoProposal::to_proposal).collect()))
        .collect();
    let report = map_table(&preds, gts, thresholds)?;

    let n_pred: usize = pseudos.values().map(Vec::len).sum();
    let n_gt = gts.len();
    let mut classes = gts.classes();
    classes.extend(preds.values().flatten().map(|p| p.class_id));
    let mut precision = Vec::with_capacity(thresholds.len());
    let mut recall = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let tp: usize = classes
            .iter()
            .map(|&c| {
                greedy_match(&segments_of_class(&preds, c), &gts_of_class(gts, c), t)
                    .into_iter()
                    .filter(|&b| b)
                    .count()
            })
            .sum();
        precision.push(if n_pred > 0 { tp as f64 / n_pred as f64 } else { 0.0 });
        recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
    }
    Ok(PseudoQuality {
        report,
        precision,
        recall,
        precision_undefined: n_pred == 0,
    })
}
