//! Temporal grid, intervals, proposal types and temporal IoU.
//!
//! Public boundaries are in seconds. Snippet indices only show up where a
//! value is sampled on the grid (snippet centers) or rasterized back onto it.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sampling grid of one video: `num_snippets` snippets of equal duration
/// and `class_count` foreground classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    num_snippets: usize,
    snippet_duration_s: f64,
    class_count: usize,
}

impl TimeGrid {
    pub fn new(num_snippets: usize, snippet_duration_s: f64, class_count: usize) -> Result<Self> {
        if num_snippets == 0 {
            return Err(Error::constraint("num_snippets", "must be at least 1"));
        }
        if !(snippet_duration_s.is_finite() && snippet_duration_s > 0.0) {
            return Err(Error::constraint(
                "snippet_duration_s",
                format!("must be positive and finite, got {snippet_duration_s}"),
            ));
        }
        if class_count == 0 {
            return Err(Error::constraint("class_count", "must be at least 1"));
        }
        Ok(Self {
            num_snippets,
            snippet_duration_s,
            class_count,
        })
    }

    pub fn num_snippets(&self) -> usize {
        self.num_snippets
    }

    pub fn snippet_duration_s(&self) -> f64 {
        self.snippet_duration_s
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Video length in seconds.
    pub fn extent_s(&self) -> f64 {
        self.num_snippets as f64 * self.snippet_duration_s
    }

    /// Time of the center of snippet `i` (no bounds check).
    pub fn center_s(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.snippet_duration_s
    }

    pub fn snippet_interval(&self, i: usize) -> Result<Interval> {
        snippet_index_to_interval(self, i)
    }

    /// Index of the snippet containing `t`, clamped to the grid.
    pub fn snippet_at(&self, t: f64) -> usize {
        let idx = (t / self.snippet_duration_s).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.num_snippets - 1)
        }
    }

    /// Indices of snippets whose centers satisfy `lo < center < hi`.
    pub fn centers_strictly_inside(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        self.center_range(lo, hi, false)
    }

    /// Indices of snippets whose centers satisfy `lo <= center <= hi`.
    pub fn centers_inside(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        self.center_range(lo, hi, true)
    }

    fn center_range(&self, lo: f64, hi: f64, closed: bool) -> std::ops::Range<usize> {
        // centers increase with the index, so members form one contiguous run
        let inside = |i: &usize| {
            let c = self.center_s(*i);
            if closed {
                c >= lo && c <= hi
            } else {
                c > lo && c < hi
            }
        };
        match (0..self.num_snippets).find(inside) {
            Some(first) => {
                let last = (first..self.num_snippets)
                    .take_while(inside)
                    .last()
                    .unwrap_or(first);
                first..last + 1
            }
            None => 0..0,
        }
    }
}

/// Closed time interval `[start_s, end_s]` with positive length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    start_s: f64,
    end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !start_s.is_finite() || !end_s.is_finite() {
            return Err(Error::constraint("interval", "bounds must be finite"));
        }
        if start_s >= end_s {
            return Err(Error::constraint(
                "interval",
                format!("start {start_s} must be < end {end_s}"),
            ));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn midpoint_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }

    pub fn intersection_s(&self, other: &Interval) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }

    /// Clip to `[lo, hi]`; `None` when nothing of positive length remains.
    pub fn clip(&self, lo: f64, hi: f64) -> Option<Interval> {
        Interval::new(self.start_s.max(lo), self.end_s.min(hi)).ok()
    }
}

/// Temporal intersection over union.
pub fn tiou(a: &Interval, b: &Interval) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_s(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.duration_s() + b.duration_s() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn snippet_index_to_interval(grid: &TimeGrid, i: usize) -> Result<Interval> {
    if i >= grid.num_snippets {
        return Err(Error::SnippetOutOfGrid {
            index: i,
            len: grid.num_snippets,
        });
    }
    let d = grid.snippet_duration_s;
    Interval::new(i as f64 * d, (i + 1) as f64 * d)
}

/// Foreground class id, `1..=C`.
pub type ClassId = usize;

fn check_class(class_id: ClassId, class_count: usize) -> Result<()> {
    if class_id == 0 || class_id > class_count {
        return Err(Error::constraint(
            "class_id",
            format!("{class_id} outside 1..={class_count}"),
        ));
    }
    Ok(())
}

/// A scored, classified interval: weak-branch output or model prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub interval: Interval,
    pub score: f64,
    pub class_id: ClassId,
}

impl Proposal {
    pub fn new(interval: Interval, score: f64, class_id: ClassId, class_count: usize) -> Result<Self> {
        check_class(class_id, class_count)?;
        if !score.is_finite() {
            return Err(Error::constraint("score", "must be finite"));
        }
        Ok(Self {
            interval,
            score,
            class_id,
        })
    }
}

/// A fused segment used as a training label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoProposal {
    pub interval: Interval,
    pub class_id: ClassId,
    pub confidence: f64,
}

impl PseudoProposal {
    pub fn new(interval: Interval, class_id: ClassId, confidence: f64, class_count: usize) -> Result<Self> {
        check_class(class_id, class_count)?;
        if !(confidence.is_finite() && confidence >= 0.0) {
            return Err(Error::constraint("confidence", "must be finite and >= 0"));
        }
        Ok(Self {
            interval,
            class_id,
            confidence,
        })
    }

    pub fn to_proposal(&self) -> Proposal {
        Proposal {
            interval: self.interval,
            score: self.confidence,
            class_id: self.class_id,
        }
    }
}

/// Multi-hot video-level label over the `C` foreground classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoLabel {
    onehot: Vec<bool>,
}

impl VideoLabel {
    pub fn new(onehot: Vec<bool>) -> Result<Self> {
        if !onehot.iter().any(|&b| b) {
            return Err(Error::constraint("video_label", "needs at least one positive class"));
        }
        Ok(Self { onehot })
    }

    pub fn from_classes(classes: &[ClassId], class_count: usize) -> Result<Self> {
        let mut onehot = vec![false; class_count];
        for &c in classes {
            check_class(c, class_count)?;
            onehot[c - 1] = true;
        }
        Self::new(onehot)
    }

    pub fn class_count(&self) -> usize {
        self.onehot.len()
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        class_id >= 1 && self.onehot.get(class_id - 1).copied().unwrap_or(false)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.onehot
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i + 1)
    }

    pub fn onehot(&self) -> &[bool] {
        &self.onehot
    }
}

/// Snippet-level outputs of the weak branch for one video.
///
/// `class_scores` is `T x (C+1)`, foreground classes in columns `0..C`
/// (column `c-1` for class id `c`) and background in column `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetPredictions {
    pub video_id: String,
    attention: Vec<f64>,
    class_scores: Array2<f64>,
}

impl SnippetPredictions {
    pub fn new(video_id: impl Into<String>, attention: Vec<f64>, class_scores: Array2<f64>) -> Result<Self> {
        let (rows, cols) = class_scores.dim();
        if attention.is_empty() {
            return Err(Error::constraint("attention", "must be non-empty"));
        }
        if rows != attention.len() {
            return Err(Error::Shape(format!(
                "attention has {} snippets, class_scores has {rows}",
                attention.len()
            )));
        }
        if cols < 2 {
            return Err(Error::Shape("class_scores needs at least C+1 = 2 columns".into()));
        }
        if attention.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::constraint("attention", "values must lie in [0, 1]"));
        }
        for (t, row) in class_scores.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::constraint("class_scores", format!("row {t} has values outside [0, 1]")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::constraint("class_scores", format!("row {t} sums to {sum}")));
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            attention,
            class_scores,
        })
    }

    pub fn attention(&self) -> &[f64] {
        &self.attention
    }

    pub fn class_scores(&self) -> &Array2<f64> {
        &self.class_scores
    }

    pub fn num_snippets(&self) -> usize {
        self.attention.len()
    }

    /// Number of foreground classes `C`.
    pub fn class_count(&self) -> usize {
        self.class_scores.ncols() - 1
    }
}
