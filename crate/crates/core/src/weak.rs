//! Weak-branch math: top-k MIL aggregation and loss, snippet predictions,
//! multi-threshold proposal extraction, outer-inner contrastive scoring and
//! Gaussian soft-NMS.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::temporal::{tiou, ClassId, Interval, Proposal, SnippetPredictions, TimeGrid, VideoLabel};

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Video-level scores from top-k pooling, length `C+1` each (background
/// last).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLevelScores {
    pub base: Vec<f64>,
    pub suppressed: Vec<f64>,
}

/// `k = max(1, floor(T / k_ratio))`, capped at `T`.
pub fn topk_count(num_snippets: usize, k_ratio: f64) -> usize {
    let k = (num_snippets as f64 / k_ratio).floor();
    if k < 1.0 {
        1
    } else {
        (k as usize).min(num_snippets)
    }
}

/// Mean of the `k` largest values.
pub fn topk_mean<'a>(values: impl IntoIterator<Item = &'a f64>, k: usize) -> f64 {
    let mut v: Vec<f64> = values.into_iter().copied().collect();
    if v.is_empty() || k == 0 {
        return 0.0;
    }
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

fn column_topk(m: &Array2<f64>, k: usize) -> Vec<f64> {
    m.columns()
        .into_iter()
        .map(|col: ArrayView1<f64>| topk_mean(col.iter(), k))
        .collect()
}

pub fn topk_aggregate(sps: &SnippetPredictions, k_ratio: f64) -> Result<VideoLevelScores> {
    if !(k_ratio.is_finite() && k_ratio > 0.0) {
        return Err(Error::constraint("k_ratio", "must be positive"));
    }
    let k = topk_count(sps.num_snippets(), k_ratio);
    let z = compute_sps(sps.attention(), sps.class_scores())?;
    Ok(VideoLevelScores {
        base: column_topk(sps.class_scores(), k),
        suppressed: column_topk(&z, k),
    })
}

/// MIL loss over the extended labels `[y, 1]` (base) and `[y, 0]`
/// (suppressed).
pub fn mil_loss(scores: &VideoLevelScores, label: &VideoLabel) -> Result<f64> {
    let c = label.class_count();
    if scores.base.len() != c + 1 || scores.suppressed.len() != c + 1 {
        return Err(Error::Shape(format!(
            "video scores must have C+1 = {} entries",
            c + 1
        )));
    }
    let log = |p: f64| p.clamp(LOG_EPS, 1.0).ln();
    let mut loss = 0.0;
    for (i, &pos) in label.onehot().iter().enumerate() {
        if pos {
            loss -= log(scores.base[i]) + log(scores.suppressed[i]);
        }
    }
    // background: y_base = 1, y_supp = 0
    loss -= log(scores.base[c]);
    Ok(loss)
}

/// `Z = attention ⊙ class_scores`, broadcasting attention over columns.
pub fn compute_sps(attention: &[f64], class_scores: &Array2<f64>) -> Result<Array2<f64>> {
    if attention.len() != class_scores.nrows() {
        return Err(Error::Shape(format!(
            "attention length {} vs {} score rows",
            attention.len(),
            class_scores.nrows()
        )));
    }
    let mut z = class_scores.clone();
    for (mut row, &a) in z.rows_mut().into_iter().zip(attention) {
        row *= a;
    }
    Ok(z)
}

/// Signal the threshold ladder runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdSource {
    /// Per-class columns of `Z`.
    #[default]
    Sps,
    /// The class-agnostic attention, with runs emitted for every labelled
    /// class.
    Attention,
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::constraint("thresholds", "must be non-empty"));
    }
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::constraint("thresholds", "each must lie in (0, 1)"));
    }
    Ok(())
}

/// Maximal runs `[start, end)` of indices where `signal >= threshold`.
pub fn runs_above(signal: impl IntoIterator<Item = f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    let mut n = 0;
    for (i, v) in signal.into_iter().enumerate() {
        n = i + 1;
        match (v >= threshold, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, n));
    }
    runs
}

fn runs_to_proposals(
    keys: BTreeSet<(ClassId, usize, usize)>,
    grid: &TimeGrid,
) -> Result<Vec<Proposal>> {
    let d = grid.snippet_duration_s();
    keys.into_iter()
        .map(|(class_id, s, e)| {
            Ok(Proposal {
                interval: Interval::new(s as f64 * d, e as f64 * d)?,
                score: 0.0,
                class_id,
            })
        })
        .collect()
}

/// Multi-threshold proposal extraction on `Z`.
///
/// Returned proposals carry score 0; scoring is [`oic_score`]'s job. Output
/// is ordered by (class, start, end) and holds each snippet run once per
/// class.
pub fn extract_proposals(
    z: &Array2<f64>,
    grid: &TimeGrid,
    thresholds: &[f64],
    label: &VideoLabel,
) -> Result<Vec<Proposal>> {
    validate_thresholds(thresholds)?;
    if z.nrows() != grid.num_snippets() || z.ncols() < grid.class_count() {
        return Err(Error::Shape(format!(
            "SP matrix {:?} does not match grid T={} C={}",
            z.dim(),
            grid.num_snippets(),
            grid.class_count()
        )));
    }
    let mut keys = BTreeSet::new();
    for class_id in label.classes().filter(|&c| c <= grid.class_count()) {
        let col = z.column(class_id - 1);
        for &th in thresholds {
            for (s, e) in runs_above(col.iter().copied(), th) {
                keys.insert((class_id, s, e));
            }
        }
    }
    runs_to_proposals(keys, grid)
}

/// Threshold ladder on the attention sequence instead of `Z`.
pub fn extract_proposals_from_attention(
    attention: &[f64],
    grid: &TimeGrid,
    thresholds: &[f64],
    label: &VideoLabel,
) -> Result<Vec<Proposal>> {
    validate_thresholds(thresholds)?;
    if attention.len() != grid.num_snippets() {
        return Err(Error::Shape("attention length does not match grid".into()));
    }
    let mut keys = BTreeSet::new();
    for &th in thresholds {
        for (s, e) in runs_above(attention.iter().copied(), th) {
            for class_id in label.classes().filter(|&c| c <= grid.class_count()) {
                keys.insert((class_id, s, e));
            }
        }
    }
    runs_to_proposals(keys, grid)
}

/// Outer-inner contrastive score: mean of `z_c` over snippets whose centers
/// lie in `p`, minus the mean over the flanks `[s - w, s)` and `(e, e + w]`
/// with `w = inflation * |p|`. Flanks are clipped to the video; when both
/// are empty the outer mean is 0.
pub fn oic_score(z_c: &[f64], p: &Interval, grid: &TimeGrid, inflation: f64) -> Result<f64> {
    if !(inflation > 0.0 && inflation <= 1.0) {
        return Err(Error::constraint("oic_inflation", "must lie in (0, 1]"));
    }
    if z_c.len() != grid.num_snippets() {
        return Err(Error::Shape("SP column length does not match grid".into()));
    }
    let tol = 1e-9 * grid.extent_s().max(1.0);
    if p.start_s() < -tol || p.end_s() > grid.extent_s() + tol {
        return Err(Error::constraint("proposal", "must lie within the video"));
    }
    let mut inner = grid.centers_inside(p.start_s(), p.end_s());
    if inner.is_empty() {
        let i = grid.snippet_at(p.midpoint_s());
        inner = i..i + 1;
    }
    let inner_mean = z_c[inner.clone()].iter().sum::<f64>() / inner.len() as f64;

    let w = inflation * p.duration_s();
    let outer: Vec<f64> = grid
        .centers_inside(p.start_s() - w, p.end_s() + w)
        .filter(|i| !inner.contains(i))
        .map(|i| z_c[i])
        .collect();
    let outer_mean = if outer.is_empty() {
        0.0
    } else {
        outer.iter().sum::<f64>() / outer.len() as f64
    };
    Ok(inner_mean - outer_mean)
}

/// Classwise Gaussian soft-NMS.
///
/// Repeatedly keeps the highest-scoring remaining proposal of a class and
/// multiplies every other same-class score by `exp(-tiou^2 / sigma_nms)`.
/// Proposals whose score falls below `min_score` are dropped. Output is
/// sorted by score descending, ties by (class, start, end).
pub fn soft_nms(proposals: &[Proposal], sigma_nms: f64, min_score: f64) -> Vec<Proposal> {
    let mut by_class: std::collections::BTreeMap<ClassId, Vec<Proposal>> = Default::default();
    for p in proposals {
        by_class.entry(p.class_id).or_default().push(*p);
    }
    let mut kept = Vec::with_capacity(proposals.len());
    for (_, mut remaining) in by_class {
        remaining.retain(|p| p.score >= min_score);
        while !remaining.is_empty() {
            let best = remaining
                .iter()
                .enumerate()
                .fold(0, |bi, (i, p)| if p.score > remaining[bi].score { i } else { bi });
            let top = remaining.swap_remove(best);
            for p in remaining.iter_mut() {
                let o = tiou(&top.interval, &p.interval);
                p.score *= (-(o * o) / sigma_nms).exp();
            }
            remaining.retain(|p| p.score >= min_score);
            kept.push(top);
        }
    }
    sort_by_score_desc(&mut kept);
    kept
}

/// Score descending, then class, start, end ascending.
pub fn sort_by_score_desc(proposals: &mut [Proposal]) {
    proposals.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.interval.start_s().total_cmp(&b.interval.start_s()))
            .then(a.interval.end_s().total_cmp(&b.interval.end_s()))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(t: usize, c: usize) -> TimeGrid {
        TimeGrid::new(t, 1.0, c).unwrap()
    }

    fn prop(s: f64, e: f64, score: f64, class_id: ClassId) -> Proposal {
        Proposal {
            interval: Interval::new(s, e).unwrap(),
            score,
            class_id,
        }
    }

    #[test]
    fn topk_examples() {
        let col = [0.9, 0.1, 0.5, 0.7];
        assert!((topk_mean(&col, 2) - 0.8).abs() < 1e-15);
        assert_eq!(topk_mean(&col, 1), 0.9);
        assert!((topk_mean(&col, 4) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn topk_count_rule() {
        assert_eq!(topk_count(100, 8.0), 12);
        assert_eq!(topk_count(7, 8.0), 1);
        assert_eq!(topk_count(4, 0.5), 4);
        assert_eq!(topk_count(4, 1.0), 4);
    }

    #[test]
    fn aggregate_uses_attention_for_suppressed() {
        let psi = Array2::from_shape_vec((2, 2), vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let sps = SnippetPredictions::new("v", vec![1.0, 0.5], psi).unwrap();
        let s = topk_aggregate(&sps, 2.0).unwrap();
        assert_eq!(s.base, vec![0.8, 0.6]);
        assert_eq!(s.suppressed, vec![0.8, 0.3]);
        assert!(topk_aggregate(&sps, 0.0).is_err());
    }

    #[test]
    fn mil_loss_examples() {
        let y = VideoLabel::new(vec![true, false]).unwrap();
        let perfect = VideoLevelScores {
            base: vec![1.0, 0.0, 1.0],
            suppressed: vec![1.0, 0.0, 0.0],
        };
        assert_eq!(mil_loss(&perfect, &y).unwrap(), 0.0);

        let s = VideoLevelScores {
            base: vec![0.5, 0.2, 0.5],
            suppressed: vec![0.5, 0.3, 0.1],
        };
        let expected = 3.0 * -(0.5f64.ln());
        assert!((mil_loss(&s, &y).unwrap() - expected).abs() < 1e-12);
        assert!((mil_loss(&s, &y).unwrap() - 2.0794).abs() < 1e-4);

        let zero = VideoLevelScores {
            base: vec![0.0, 0.0, 1.0],
            suppressed: vec![1.0, 0.0, 0.0],
        };
        let l = mil_loss(&zero, &y).unwrap();
        assert!((l - 27.631021115928547).abs() < 1e-9, "{l}");

        let short = VideoLevelScores {
            base: vec![1.0],
            suppressed: vec![1.0],
        };
        assert!(mil_loss(&short, &y).is_err());
    }

    #[test]
    fn sps_examples() {
        let psi = Array2::from_shape_vec((1, 2), vec![0.4, 0.6]).unwrap();
        let z = compute_sps(&[0.5], &psi).unwrap();
        assert_eq!(z.as_slice().unwrap(), &[0.2, 0.3]);
        assert_eq!(compute_sps(&[1.0], &psi).unwrap(), psi);
        assert_eq!(compute_sps(&[0.0], &psi).unwrap().sum(), 0.0);
        assert!(compute_sps(&[1.0, 1.0], &psi).is_err());
    }

    fn z_from_column(col: &[f64]) -> Array2<f64> {
        let mut z = Array2::zeros((col.len(), 2));
        for (t, v) in col.iter().enumerate() {
            z[[t, 0]] = *v;
        }
        z
    }

    #[test]
    fn extract_single_run() {
        let z = z_from_column(&[0.0, 0.9, 0.9, 0.0, 0.0]);
        let y = VideoLabel::new(vec![true]).unwrap();
        let ps = extract_proposals(&z, &grid(5, 1), &[0.5], &y).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!((ps[0].interval.start_s(), ps[0].interval.end_s()), (1.0, 3.0));
    }

    #[test]
    fn extract_two_thresholds() {
        let z = z_from_column(&[0.3, 0.9, 0.9, 0.3, 0.0]);
        let y = VideoLabel::new(vec![true]).unwrap();
        let ps = extract_proposals(&z, &grid(5, 1), &[0.2, 0.5], &y).unwrap();
        let ivs: Vec<_> = ps.iter().map(|p| (p.interval.start_s(), p.interval.end_s())).collect();
        assert_eq!(ivs, vec![(0.0, 4.0), (1.0, 3.0)]);
    }

    #[test]
    fn extract_below_all_thresholds_is_empty() {
        let z = z_from_column(&[0.05, 0.01, 0.0]);
        let y = VideoLabel::new(vec![true]).unwrap();
        assert!(extract_proposals(&z, &grid(3, 1), &[0.1, 0.5], &y).unwrap().is_empty());
        assert!(extract_proposals(&z, &grid(3, 1), &[], &y).is_err());
        assert!(extract_proposals(&z, &grid(3, 1), &[1.0], &y).is_err());
    }

    #[test]
    fn extract_skips_unlabelled_classes_and_dedups() {
        let mut z = Array2::zeros((4, 3));
        for t in 1..3 {
            z[[t, 0]] = 0.9;
            z[[t, 1]] = 0.9;
        }
        let y = VideoLabel::new(vec![false, true]).unwrap();
        let ps = extract_proposals(&z, &grid(4, 2), &[0.1, 0.2, 0.5], &y).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].class_id, 2);
    }

    #[test]
    fn extract_from_attention_emits_every_labelled_class() {
        let y = VideoLabel::new(vec![true, true]).unwrap();
        let ps = extract_proposals_from_attention(&[0.0, 0.8, 0.8, 0.0], &grid(4, 2), &[0.5], &y).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!((ps[0].class_id, ps[1].class_id), (1, 2));
    }

    #[test]
    fn oic_examples() {
        let g = grid(4, 1);
        let z = [0.1, 0.8, 0.8, 0.1];
        let p = Interval::new(1.0, 3.0).unwrap();
        assert!((oic_score(&z, &p, &g, 0.5).unwrap() - 0.7).abs() < 1e-12);

        let whole = Interval::new(0.0, 4.0).unwrap();
        assert!((oic_score(&z, &whole, &g, 0.25).unwrap() - 0.45).abs() < 1e-12);

        let flat = [0.5; 10];
        let g10 = grid(10, 1);
        for (s, e) in [(2.0, 5.0), (1.0, 9.0), (4.0, 6.0)] {
            let p = Interval::new(s, e).unwrap();
            assert!(oic_score(&flat, &p, &g10, 0.25).unwrap().abs() < 1e-12);
        }
        assert!(oic_score(&z, &Interval::new(2.0, 5.0).unwrap(), &g, 0.25).is_err());
        assert!(oic_score(&z, &p, &g, 0.0).is_err());
    }

    #[test]
    fn soft_nms_examples() {
        // [0,10] vs [5,15] has tiou 1/3; build a pair with tiou exactly 0.5
        let a = prop(0.0, 10.0, 0.9, 1);
        let b = prop(0.0, 5.0, 0.8, 1);
        let out = soft_nms(&[a, b], 0.5, 0.001);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.4852).abs() < 1e-4);

        let disjoint = soft_nms(&[prop(0.0, 1.0, 0.5, 1), prop(2.0, 3.0, 0.4, 1)], 0.5, 0.001);
        assert_eq!(disjoint.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.5, 0.4]);

        let classwise = soft_nms(&[prop(0.0, 1.0, 0.5, 1), prop(0.0, 1.0, 0.4, 2)], 0.5, 0.001);
        assert_eq!(classwise.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.5, 0.4]);
    }

    #[test]
    fn soft_nms_drops_low_scores() {
        let out = soft_nms(&[prop(0.0, 1.0, 0.9, 1), prop(0.0, 1.0, 0.002, 1), prop(3.0, 4.0, -0.2, 1)], 0.5, 0.001);
        assert_eq!(out.len(), 1);
    }

    proptest! {
        #[test]
        fn topk_bounds(col in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((topk_mean(&col, col.len()) - mean).abs() < 1e-12);
            prop_assert_eq!(topk_mean(&col, 1), max);
        }

        #[test]
        fn mil_loss_nonnegative(
            base in proptest::collection::vec(0.0f64..=1.0, 4),
            supp in proptest::collection::vec(0.0f64..=1.0, 4),
            mask in proptest::collection::vec(any::<bool>(), 3),
        ) {
            prop_assume!(mask.iter().any(|&b| b));
            let y = VideoLabel::new(mask).unwrap();
            let l = mil_loss(&VideoLevelScores { base, suppressed: supp }, &y).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }

        #[test]
        fn extracted_runs_respect_threshold(
            col in proptest::collection::vec(0.0f64..1.0, 1..60),
            ths in proptest::collection::btree_set(1u32..19, 1..5),
        ) {
            let ths: Vec<f64> = ths.into_iter().map(|t| t as f64 * 0.05).collect();
            let t = col.len();
            let z = z_from_column(&col);
            let y = VideoLabel::new(vec![true]).unwrap();
            let g = TimeGrid::new(t, 0.5, 1).unwrap();
            let min_th = ths.iter().cloned().fold(f64::MAX, f64::min);
            for p in extract_proposals(&z, &g, &ths, &y).unwrap() {
                let s = p.interval.start_s() / 0.5;
                let e = p.interval.end_s() / 0.5;
                prop_assert!((s - s.round()).abs() < 1e-9 && (e - e.round()).abs() < 1e-9);
                for i in s.round() as usize..e.round() as usize {
                    prop_assert!(col[i] >= min_th);
                }
            }
        }

        #[test]
        fn soft_nms_never_raises_scores(
            raw in proptest::collection::vec((0.0f64..50.0, 0.5f64..10.0, 0.0f64..1.0, 1usize..3), 0..20),
        ) {
            let ps: Vec<Proposal> = raw.iter().map(|&(s, d, sc, c)| prop(s, s + d, sc, c)).collect();
            let out = soft_nms(&ps, 0.5, 0.001);
            for q in &out {
                let orig = ps.iter().find(|p| p.interval == q.interval && p.class_id == q.class_id && p.score >= q.score);
                prop_assert!(orig.is_some());
            }
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn oic_ignores_far_values(
            col in proptest::collection::vec(0.0f64..1.0, 20),
            noise in proptest::collection::vec(0.0f64..1.0, 20),
        ) {
            let g = grid(20, 1);
            let p = Interval::new(8.0, 12.0).unwrap();
            // flanks reach [7, 13]; snippets 0..7 and 13.. are untouched
            let mut other = col.clone();
            for i in (0..7).chain(13..20) {
                other[i] = noise[i];
            }
            prop_assert_eq!(oic_score(&col, &p, &g, 0.25).unwrap(), oic_score(&other, &p, &g, 0.25).unwrap());
        }
    }
}
