//! Per-video pseudo-label pipeline shared by the CLI and the benchmark:
//! SPs, threshold ladder, OIC scoring, soft-NMS, then one fusion strategy.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::eval::{pseudo_quality, video_class_scores, PseudoQuality};
use crate::fusion::{fuse_baseline, fuse_ricker, fuse_ricker_for_label, segments_from_wavelet, FusionStrategy};
use crate::sim::{corrupt_predictions, gen_corpus, SimConfig};
use crate::temporal::{Proposal, PseudoProposal, SnippetPredictions, TimeGrid, VideoLabel};
use crate::weak::{compute_sps, extract_proposals, extract_proposals_from_attention, oic_score, soft_nms, ThresholdSource};

/// Label from video-level scores: classes at or above `class_thresh`, or the
/// best class when none qualifies.
pub fn derive_label(sps: &SnippetPredictions, cfg: &PipelineConfig) -> Result<VideoLabel> {
    let scores = video_class_scores(sps, cfg.k_ratio)?;
    let mut classes: Vec<usize> = (1..=scores.len()).filter(|&c| scores[c - 1] >= cfg.class_thresh).collect();
    if classes.is_empty() {
        let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        classes.push(best + 1);
    }
    VideoLabel::from_classes(&classes, scores.len())
}

/// Thresholded, OIC-scored and soft-NMS'd proposals of one video.
pub fn scored_proposals(
    sps: &SnippetPredictions,
    grid: &TimeGrid,
    label: &VideoLabel,
    cfg: &PipelineConfig,
) -> Result<Vec<Proposal>> {
    let z = compute_sps(sps.attention(), sps.class_scores())?;
    let mut proposals = match cfg.threshold_source() {
        ThresholdSource::Sps => extract_proposals(&z, grid, &cfg.thresholds, label)?,
        ThresholdSource::Attention => extract_proposals_from_attention(sps.attention(), grid, &cfg.thresholds, label)?,
    };
    let columns: BTreeMap<usize, Vec<f64>> = label
        .classes()
        .filter(|&c| c <= grid.class_count())
        .map(|c| (c, z.column(c - 1).to_vec()))
        .collect();
    for p in &mut proposals {
        p.score = oic_score(&columns[&p.class_id], &p.interval, grid, cfg.oic_inflation)?;
    }
    Ok(soft_nms(&proposals, cfg.sigma_nms, cfg.min_score))
}

/// Pseudo proposals from scored proposals with one strategy.
pub fn fuse_with(
    strategy: FusionStrategy,
    proposals: &[Proposal],
    grid: &TimeGrid,
    label: Option<&VideoLabel>,
    cfg: &PipelineConfig,
) -> Result<Vec<PseudoProposal>> {
    match strategy {
        FusionStrategy::Ricker => {
            let wavelet = match label {
                Some(l) if cfg.fusion_label_filter => fuse_ricker_for_label(proposals, grid, l)?,
                _ => fuse_ricker(proposals, grid)?,
            };
            Ok(segments_from_wavelet(&wavelet, cfg.min_duration_s(grid.snippet_duration_s())))
        }
        FusionStrategy::Baseline(b) => fuse_baseline(b, proposals, &cfg.baseline_params(), grid),
    }
}

/// One strategy's row of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkEntry {
    pub strategy: FusionStrategy,
    pub quality: PseudoQuality,
    /// Wall-clock fusion time; not deterministic.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub sim: SimConfig,
    pub entries: Vec<BenchmarkEntry>,
}

impl BenchmarkReport {
    pub fn entry(&self, strategy: FusionStrategy) -> Option<&BenchmarkEntry> {
        self.entries.iter().find(|e| e.strategy == strategy)
    }
}

/// Simulates a corpus and scores the pseudo labels of every strategy
/// against its ground truth. Videos use their true labels, as weak
/// supervision provides them.
pub fn run_benchmark(sim: &SimConfig, strategies: &[FusionStrategy], cfg: &PipelineConfig) -> Result<BenchmarkReport> {
    if strategies.is_empty() {
        return Err(crate::Error::constraint("strategies", "must be non-empty"));
    }
    let corpus = gen_corpus(sim)?;
    let sps = corrupt_predictions(&corpus, sim)?;
    let gts = corpus.ground_truth();
    let scored: Vec<Vec<Proposal>> = corpus
        .videos
        .par_iter()
        .zip(&sps)
        .map(|(v, sp)| scored_proposals(sp, &v.grid, &v.label, cfg))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let started = Instant::now();
        let pseudos: Vec<Vec<PseudoProposal>> = corpus
            .videos
            .par_iter()
            .zip(&scored)
            .map(|(v, ps)| fuse_with(strategy, ps, &v.grid, Some(&v.label), cfg))
            .collect::<Result<_>>()?;
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let by_video: BTreeMap<String, Vec<PseudoProposal>> = corpus
            .videos
            .iter()
            .map(|v| v.video_id.clone())
            .zip(pseudos)
            .collect();
        entries.push(BenchmarkEntry {
            strategy,
            quality: pseudo_quality(&by_video, &gts, &cfg.eval_tious)?,
            elapsed_ms,
        });
    }
    Ok(BenchmarkReport {
        sim: sim.clone(),
        entries,
    })
}
