//! Ricker-wavelet proposal fusion and the baseline pseudo-label strategies.
//!
//! Every proposal is mapped to a Ricker wavelet centred on its midpoint with
//! width equal to its half-length, so the wavelet is positive strictly inside
//! the proposal, zero at its boundaries and negative outside. Weighted sums
//! of these wavelets per class form a shared per-class sequence, and the
//! positive runs of that sequence become pseudo proposals.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::temporal::{tiou, ClassId, Interval, Proposal, PseudoProposal, TimeGrid, VideoLabel};
use crate::weak::sort_by_score_desc;

/// Per-class fused wavelet sampled at snippet centers, `T x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWavelet {
    values: Array2<f64>,
    grid: TimeGrid,
}

impl FusedWavelet {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            values: Array2::zeros((grid.num_snippets(), grid.class_count())),
            grid,
        }
    }

    pub fn from_values(values: Array2<f64>, grid: TimeGrid) -> Result<Self> {
        if values.dim() != (grid.num_snippets(), grid.class_count()) {
            return Err(Error::Shape(format!(
                "wavelet {:?} vs grid T={} C={}",
                values.dim(),
                grid.num_snippets(),
                grid.class_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::constraint("wavelet", "entries must be finite"));
        }
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Values of class `class_id` over time.
    pub fn channel(&self, class_id: ClassId) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(class_id - 1)
    }
}

/// Width and center of one proposal's wavelet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RickerParams {
    sigma: f64,
    center: f64,
}

impl RickerParams {
    pub fn new(sigma: f64, center: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::constraint("sigma", "must be positive"));
        }
        if !center.is_finite() {
            return Err(Error::constraint("center", "must be finite"));
        }
        Ok(Self { sigma, center })
    }

    pub fn from_interval(p: &Interval) -> Self {
        Self {
            sigma: 0.5 * p.duration_s(),
            center: p.midpoint_s(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    /// Value at the center, `2 / (sqrt(3 sigma) pi^(1/4))`.
    pub fn peak(&self) -> f64 {
        2.0 / ((3.0 * self.sigma).sqrt() * PI.powf(0.25))
    }
}

pub fn ricker_value(t: f64, params: &RickerParams) -> f64 {
    let x = (t - params.center) / params.sigma;
    let x2 = x * x;
    params.peak() * (1.0 - x2) * (-0.5 * x2).exp()
}

fn check_classes(proposals: &[Proposal], grid: &TimeGrid) -> Result<()> {
    for p in proposals {
        if p.class_id == 0 || p.class_id > grid.class_count() {
            return Err(Error::constraint(
                "class_id",
                format!("{} outside 1..={}", p.class_id, grid.class_count()),
            ));
        }
    }
    Ok(())
}

/// Score-weighted sum of per-proposal wavelets, routed to each proposal's
/// class channel. Proposals with non-positive score do not contribute.
pub fn fuse_ricker(proposals: &[Proposal], grid: &TimeGrid) -> Result<FusedWavelet> {
    check_classes(proposals, grid)?;
    let mut w = FusedWavelet::zeros(*grid);
    let centers: Vec<f64> = (0..grid.num_snippets()).map(|i| grid.center_s(i)).collect();
    for p in proposals.iter().filter(|p| p.score > 0.0) {
        let params = RickerParams::from_interval(&p.interval);
        let mut col = w.values.column_mut(p.class_id - 1);
        for (v, &t) in col.iter_mut().zip(&centers) {
            *v += ricker_value(t, &params) * p.score;
        }
    }
    Ok(w)
}

/// [`fuse_ricker`] restricted to classes present in the video label.
pub fn fuse_ricker_for_label(proposals: &[Proposal], grid: &TimeGrid, label: &VideoLabel) -> Result<FusedWavelet> {
    let kept: Vec<Proposal> = proposals
        .iter()
        .filter(|p| label.contains(p.class_id))
        .copied()
        .collect();
    fuse_ricker(&kept, grid)
}

/// Linear zero crossing between `(t0, v0)` and `(t1, v1)` with opposite
/// signs (or `v0 == 0`).
fn zero_crossing(t0: f64, v0: f64, t1: f64, v1: f64) -> f64 {
    if v0 == v1 {
        return t0;
    }
    t0 + (t1 - t0) * (v0 / (v0 - v1))
}

/// Pseudo proposals from the positive runs of each wavelet channel.
///
/// Run boundaries are refined to the linearly interpolated zero crossing
/// between the outermost positive snippet center and its non-positive
/// neighbour; runs touching the video edge stop at the edge. Confidence is
/// the run's maximum.
pub fn segments_from_wavelet(w: &FusedWavelet, min_duration_s: f64) -> Vec<PseudoProposal> {
    let grid = w.grid;
    let n = grid.num_snippets();
    let mut out = Vec::new();
    for class_id in 1..=grid.class_count() {
        let col = w.channel(class_id);
        let mut i = 0;
        while i < n {
            if col[i] <= 0.0 {
                i += 1;
                continue;
            }
            let first = i;
            while i < n && col[i] > 0.0 {
                i += 1;
            }
            let last = i - 1;
            let start = if first == 0 {
                0.0
            } else {
                zero_crossing(grid.center_s(first - 1), col[first - 1], grid.center_s(first), col[first])
            };
            let end = if last + 1 == n {
                grid.extent_s()
            } else {
                zero_crossing(grid.center_s(last), col[last], grid.center_s(last + 1), col[last + 1])
            };
            let confidence = col
                .iter()
                .skip(first)
                .take(last - first + 1)
                .cloned()
                .fold(f64::MIN, f64::max);
            if end - start < min_duration_s {
                continue;
            }
            if let Ok(interval) = Interval::new(start, end) {
                out.push(PseudoProposal {
                    interval,
                    class_id,
                    confidence,
                });
            }
        }
    }
    out
}

/// Baseline pseudo-label strategies compared against Ricker fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    /// Per-snippet winner-takes-all across all proposals, then
    /// re-segmentation into runs of one owner.
    Hard,
    /// Every proposal that owns at least one snippet (per class, highest
    /// score wins) is kept with its full interval.
    Soft,
    /// The K highest-scoring proposals of the video.
    TopK,
    /// Proposals with score at or above a threshold.
    Threshold,
    /// Greedy tIoU grouping around the current top proposal with
    /// score-weighted mean boundaries.
    Gauss,
}

/// Any pseudo-label strategy: Ricker fusion or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionStrategy {
    Ricker,
    Baseline(Baseline),
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::Ricker,
        FusionStrategy::Baseline(Baseline::Hard),
        FusionStrategy::Baseline(Baseline::Soft),
        FusionStrategy::Baseline(Baseline::TopK),
        FusionStrategy::Baseline(Baseline::Threshold),
        FusionStrategy::Baseline(Baseline::Gauss),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::Ricker => "ricker",
            FusionStrategy::Baseline(Baseline::Hard) => "hard",
            FusionStrategy::Baseline(Baseline::Soft) => "soft",
            FusionStrategy::Baseline(Baseline::TopK) => "topk",
            FusionStrategy::Baseline(Baseline::Threshold) => "threshold",
            FusionStrategy::Baseline(Baseline::Gauss) => "gauss",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        FusionStrategy::ALL
            .into_iter()
            .find(|st| st.name() == key || (key == "rickerfusion" && *st == FusionStrategy::Ricker))
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Parameters of the baseline strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineParams {
    pub top_k: usize,
    pub score_threshold: f64,
    pub gauss_group_tiou: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            top_k: 10,
            score_threshold: 0.3,
            gauss_group_tiou: 0.5,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::constraint("top_k", "must be at least 1"));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::constraint("score_threshold", "must be finite"));
        }
        if !(self.gauss_group_tiou > 0.0 && self.gauss_group_tiou < 1.0) {
            return Err(Error::constraint("gauss_group_tiou", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn as_pseudo(p: &Proposal) -> PseudoProposal {
    PseudoProposal {
        interval: p.interval,
        class_id: p.class_id,
        confidence: p.score.max(0.0),
    }
}

/// Index into `sorted` of the highest-score proposal covering each snippet
/// (center inside the closed interval), restricted by `eligible`.
fn snippet_owners(sorted: &[Proposal], grid: &TimeGrid, eligible: impl Fn(&Proposal) -> bool) -> Vec<Option<usize>> {
    let mut owner = vec![None; grid.num_snippets()];
    // sorted by score descending: the first writer wins
    for (k, p) in sorted.iter().enumerate().filter(|(_, p)| eligible(p)) {
        for i in grid.centers_inside(p.interval.start_s(), p.interval.end_s()) {
            owner[i].get_or_insert(k);
        }
    }
    owner
}

pub fn fuse_baseline(
    strategy: Baseline,
    proposals: &[Proposal],
    params: &BaselineParams,
    grid: &TimeGrid,
) -> Result<Vec<PseudoProposal>> {
    params.validate()?;
    check_classes(proposals, grid)?;
    let mut sorted = proposals.to_vec();
    sort_by_score_desc(&mut sorted);

    let out = match strategy {
        Baseline::Hard => hard(&sorted, grid),
        Baseline::Soft => {
            let mut owned = vec![false; sorted.len()];
            for class_id in 1..=grid.class_count() {
                for k in snippet_owners(&sorted, grid, |p| p.class_id == class_id).into_iter().flatten() {
                    owned[k] = true;
                }
            }
            sorted
                .iter()
                .zip(owned)
                .filter(|(_, o)| *o)
                .map(|(p, _)| as_pseudo(p))
                .collect()
        }
        Baseline::TopK => sorted.iter().take(params.top_k).map(as_pseudo).collect(),
        Baseline::Threshold => sorted
            .iter()
            .filter(|p| p.score >= params.score_threshold)
            .map(as_pseudo)
            .collect(),
        Baseline::Gauss => gauss(&sorted, params.gauss_group_tiou),
    };
    Ok(out)
}

fn hard(sorted: &[Proposal], grid: &TimeGrid) -> Vec<PseudoProposal> {
    let owner = snippet_owners(sorted, grid, |_| true);
    let d = grid.snippet_duration_s();
    let mut out = Vec::new();
    let mut i = 0;
    while i < owner.len() {
        let Some(k) = owner[i] else {
            i += 1;
            continue;
        };
        let first = i;
        while i < owner.len() && owner[i] == Some(k) {
            i += 1;
        }
        let p = &sorted[k];
        // keep the proposal's own boundary where the run reaches it,
        // otherwise cut at the snippet edge
        let covered = grid.centers_inside(p.interval.start_s(), p.interval.end_s());
        let start = if first == covered.start {
            p.interval.start_s()
        } else {
            first as f64 * d
        };
        let end = if i == covered.end { p.interval.end_s() } else { i as f64 * d };
        if let Ok(interval) = Interval::new(start, end) {
            out.push(PseudoProposal {
                interval,
                class_id: p.class_id,
                confidence: p.score.max(0.0),
            });
        }
    }
    out
}

fn gauss(sorted: &[Proposal], group_tiou: f64) -> Vec<PseudoProposal> {
    let mut out = Vec::new();
    let mut remaining: Vec<Proposal> = sorted.to_vec();
    while !remaining.is_empty() {
        let top = remaining.remove(0);
        let (group, rest): (Vec<Proposal>, Vec<Proposal>) = remaining
            .into_iter()
            .partition(|p| p.class_id == top.class_id && tiou(&top.interval, &p.interval) >= group_tiou);
        remaining = rest;

        let members = std::iter::once(&top).chain(group.iter());
        let (mut ws, mut ss, mut es) = (0.0, 0.0, 0.0);
        for p in members {
            let w = p.score.max(0.0);
            ws += w;
            ss += w * p.interval.start_s();
            es += w * p.interval.end_s();
        }
        let interval = if ws > 0.0 {
            Interval::new(ss / ws, es / ws).unwrap_or(top.interval)
        } else {
            top.interval
        };
        out.push(PseudoProposal {
            interval,
            class_id: top.class_id,
            confidence: top.score.max(0.0),
        });
    }
    out
}
