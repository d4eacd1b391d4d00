//! Seeded synthetic corpus: ground-truth action layouts and corrupted snippet
//! predictions standing in for a trained weak branch.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Video `i` draws its layout from stream `2i` and
//! its corruption from stream `2i + 1`, so every video is independent of the
//! others and of thread scheduling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthSet;
use crate::temporal::{ClassId, Interval, SnippetPredictions, TimeGrid, VideoLabel};

pub use crate::pipeline::{run_benchmark, BenchmarkEntry, BenchmarkReport};

/// Name of the generator, reported alongside simulated outputs.
pub const RNG_NAME: &str = "ChaCha8Rng(seed_from_u64(seed)); stream 2i layout, 2i+1 corruption";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub class_count: usize,
    /// Inclusive `[min, max]` snippet count per video.
    pub snippets_per_video: [usize; 2],
    /// Inclusive `[min, max]` action count per video.
    pub actions_per_video: [usize; 2],
    /// `[min, max]` action duration in seconds.
    pub duration_range_s: [f64; 2],
    pub snippet_duration_s: f64,
    pub attention_noise_std: f64,
    /// Std of each boundary shift as a fraction of the action duration.
    pub boundary_jitter_frac: f64,
    /// Expected false-positive segments per video.
    pub false_positive_rate: f64,
    pub score_temperature: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 50,
            class_count: 5,
            snippets_per_video: [100, 200],
            actions_per_video: [1, 4],
            duration_range_s: [4.0, 20.0],
            snippet_duration_s: 1.0,
            attention_noise_std: 0.1,
            boundary_jitter_frac: 0.1,
            false_positive_rate: 0.5,
            score_temperature: 0.2,
        }
    }
}

impl SimConfig {
    /// Same layout settings with every corruption switched off.
    pub fn noiseless(mut self) -> Self {
        self.attention_noise_std = 0.0;
        self.boundary_jitter_frac = 0.0;
        self.false_positive_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [tmin, tmax] = self.snippets_per_video;
        if tmin == 0 || tmin > tmax {
            return Err(Error::constraint("snippets_per_video", "need 1 <= min <= max"));
        }
        let [amin, amax] = self.actions_per_video;
        if amin > amax {
            return Err(Error::constraint("actions_per_video", "need min <= max"));
        }
        let [dmin, dmax] = self.duration_range_s;
        if !(dmin.is_finite() && dmax.is_finite() && dmin > 0.0 && dmin <= dmax) {
            return Err(Error::constraint("duration_range_s", "need 0 < min <= max"));
        }
        if self.class_count == 0 {
            return Err(Error::constraint("class_count", "must be at least 1"));
        }
        if !(self.snippet_duration_s.is_finite() && self.snippet_duration_s > 0.0) {
            return Err(Error::constraint("snippet_duration_s", "must be positive"));
        }
        for (field, v) in [
            ("attention_noise_std", self.attention_noise_std),
            ("boundary_jitter_frac", self.boundary_jitter_frac),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::constraint(field, "must be finite and >= 0"));
            }
        }
        if !(self.score_temperature.is_finite() && self.score_temperature > 0.0) {
            return Err(Error::constraint("score_temperature", "must be positive"));
        }
        Ok(())
    }

    fn rng(&self, video_index: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * video_index as u64 + stream);
        rng
    }
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

/// One simulated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SimVideo {
    pub video_id: String,
    pub grid: TimeGrid,
    pub label: VideoLabel,
    /// Actions ordered by start time.
    pub actions: Vec<(Interval, ClassId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub videos: Vec<SimVideo>,
}

impl Corpus {
    pub fn ground_truth(&self) -> GroundTruthSet {
        let mut gt = GroundTruthSet::default();
        for v in &self.videos {
            for &(iv, c) in &v.actions {
                gt.push(v.video_id.clone(), iv, c);
            }
        }
        gt
    }
}

/// Lays out non-overlapping actions per video.
pub fn gen_corpus(cfg: &SimConfig) -> Result<Corpus> {
    cfg.validate()?;
    let videos = (0..cfg.num_videos)
        .into_par_iter()
        .map(|i| gen_video(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { videos })
}

fn gen_video(cfg: &SimConfig, index: usize) -> Result<SimVideo> {
    let mut rng = cfg.rng(index, 0);
    let t = rng.random_range(cfg.snippets_per_video[0]..=cfg.snippets_per_video[1]);
    let grid = TimeGrid::new(t, cfg.snippet_duration_s, cfg.class_count)?;
    let n = rng.random_range(cfg.actions_per_video[0]..=cfg.actions_per_video[1]).max(1);
    let [dmin, dmax] = cfg.duration_range_s;
    let durations: Vec<f64> = (0..n)
        .map(|_| if dmin < dmax { rng.random_range(dmin..=dmax) } else { dmin })
        .collect();
    let free = grid.extent_s() - durations.iter().sum::<f64>();
    if free < 0.0 {
        return Err(Error::InfeasiblePacking { video: index, actions: n });
    }
    // split the free time into n + 1 gaps with random proportions
    let weights: Vec<f64> = (0..=n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let wsum: f64 = weights.iter().sum();
    let mut actions = Vec::with_capacity(n);
    let mut cursor = 0.0;
    for (k, &d) in durations.iter().enumerate() {
        cursor += free * weights[k] / wsum;
        let class_id = rng.random_range(1..=cfg.class_count);
        let end = (cursor + d).min(grid.extent_s());
        actions.push((Interval::new(cursor, end)?, class_id));
        cursor = end;
    }
    let classes: Vec<ClassId> = actions.iter().map(|(_, c)| *c).collect();
    Ok(SimVideo {
        video_id: video_id(index),
        grid,
        label: VideoLabel::from_classes(&classes, cfg.class_count)?,
        actions,
    })
}

/// Ideal snippet predictions for `corpus`, corrupted per `cfg`.
///
/// Jittered actions and Poisson false-positive segments are rasterized by
/// snippet center; ground truth is painted over false positives. Attention is
/// 1 on painted snippets and 0 elsewhere before Gaussian noise and clamping.
/// Foreground class scores are a softmax of the painted one-hot row divided
/// by `score_temperature`, background is `1 - max foreground`, and the row is
/// then renormalized.
pub fn corrupt_predictions(corpus: &Corpus, cfg: &SimConfig) -> Result<Vec<SnippetPredictions>> {
    cfg.validate()?;
    corpus
        .videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| corrupt_video(v, i, cfg))
        .collect()
}

fn corrupt_video(v: &SimVideo, index: usize, cfg: &SimConfig) -> Result<SnippetPredictions> {
    let mut rng = cfg.rng(index, 1);
    let grid = &v.grid;
    let extent = grid.extent_s();
    let mut painted: Vec<Option<ClassId>> = vec![None; grid.num_snippets()];

    let mut jittered = Vec::with_capacity(v.actions.len());
    for &(iv, c) in &v.actions {
        let std = cfg.boundary_jitter_frac * iv.duration_s();
        let (ds, de) = if std > 0.0 {
            let n = Normal::new(0.0, std).expect("std is positive and finite");
            (n.sample(&mut rng), n.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let s = (iv.start_s() + ds).clamp(0.0, extent);
        let e = (iv.end_s() + de).clamp(0.0, extent);
        jittered.push((if s < e { Interval::new(s, e)? } else { iv }, c));
    }

    let fp_count = if cfg.false_positive_rate > 0.0 {
        Poisson::new(cfg.false_positive_rate)
            .expect("rate is positive and finite")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let labelled: Vec<ClassId> = v.label.classes().collect();
    let [dmin, dmax] = cfg.duration_range_s;
    for _ in 0..fp_count {
        let d = if dmin < dmax { rng.random_range(dmin..=dmax) } else { dmin }.min(extent);
        let s = rng.random_range(0.0..=(extent - d));
        let c = labelled[rng.random_range(0..labelled.len())];
        for i in grid.centers_inside(s, s + d) {
            painted[i] = Some(c);
        }
    }
    for &(iv, c) in &jittered {
        for i in grid.centers_inside(iv.start_s(), iv.end_s()) {
            painted[i] = Some(c);
        }
    }

    let noise = (cfg.attention_noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.attention_noise_std).expect("std is positive and finite"));
    let attention: Vec<f64> = painted
        .iter()
        .map(|p| {
            let base = if p.is_some() { 1.0 } else { 0.0 };
            let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            (base + n).clamp(0.0, 1.0)
        })
        .collect();

    let c = cfg.class_count;
    let mut scores = Array2::<f64>::zeros((grid.num_snippets(), c + 1));
    let hot = (1.0 / cfg.score_temperature).exp();
    for (mut row, p) in scores.rows_mut().into_iter().zip(&painted) {
        // softmax of onehot / temperature; an unpainted row is uniform
        let (on, off) = match p {
            Some(_) => (hot / (hot + (c - 1) as f64), 1.0 / (hot + (c - 1) as f64)),
            None => (1.0 / c as f64, 1.0 / c as f64),
        };
        for k in 0..c {
            row[k] = if *p == Some(k + 1) { on } else { off };
        }
        let max_fg = if p.is_some() { on } else { off };
        row[c] = 1.0 - max_fg;
        let sum: f64 = row.sum();
        row /= sum;
    }
    SnippetPredictions::new(v.video_id.clone(), attention, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            num_videos: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn corpus_is_seeded() {
        let cfg = small();
        assert_eq!(gen_corpus(&cfg).unwrap(), gen_corpus(&cfg).unwrap());
        let other = SimConfig { seed: 1, ..cfg.clone() };
        assert_ne!(gen_corpus(&cfg).unwrap(), gen_corpus(&other).unwrap());
        let a = corrupt_predictions(&gen_corpus(&cfg).unwrap(), &cfg).unwrap();
        let b = corrupt_predictions(&gen_corpus(&cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_action_counts() {
        let cfg = SimConfig {
            actions_per_video: [1, 1],
            ..small()
        };
        assert_eq!(gen_corpus(&cfg).unwrap().ground_truth().len(), 5);
    }

    #[test]
    fn durations_and_layout() {
        let cfg = SimConfig {
            num_videos: 30,
            duration_range_s: [2.0, 4.0],
            ..small()
        };
        for v in gen_corpus(&cfg).unwrap().videos {
            for w in v.actions.windows(2) {
                assert!(w[0].0.end_s() <= w[1].0.start_s());
            }
            for (iv, c) in &v.actions {
                assert!((2.0 - 1e-9..=4.0 + 1e-9).contains(&iv.duration_s()));
                assert!(v.label.contains(*c));
                assert!(iv.end_s() <= v.grid.extent_s());
            }
        }
    }

    #[test]
    fn infeasible_packing_names_video() {
        let cfg = SimConfig {
            snippets_per_video: [10, 10],
            actions_per_video: [3, 3],
            duration_range_s: [5.0, 5.0],
            ..small()
        };
        assert!(matches!(gen_corpus(&cfg), Err(Error::InfeasiblePacking { video: 0, actions: 3 })));
    }

    #[test]
    fn noiseless_predictions_are_ideal() {
        let cfg = small().noiseless();
        let corpus = gen_corpus(&cfg).unwrap();
        let sps = corrupt_predictions(&corpus, &cfg).unwrap();
        for (v, sp) in corpus.videos.iter().zip(&sps) {
            for i in 0..v.grid.num_snippets() {
                let t = v.grid.center_s(i);
                let inside = v.actions.iter().find(|(iv, _)| iv.start_s() <= t && t <= iv.end_s());
                assert_eq!(sp.attention()[i], if inside.is_some() { 1.0 } else { 0.0 });
                if let Some((_, c)) = inside {
                    let row = sp.class_scores().row(i);
                    let best = (0..cfg.class_count).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                    assert_eq!(best + 1, *c);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SimConfig {
            score_temperature: 0.0,
            ..small()
        };
        assert!(gen_corpus(&bad).is_err());
        let bad = SimConfig {
            snippets_per_video: [10, 5],
            ..small()
        };
        assert!(matches!(bad.validate(), Err(Error::Constraint { field: "snippets_per_video", .. })));
    }
}
