use std::collections::BTreeMap;

use wtal::config::PipelineConfig;
use wtal::eval::pseudo_quality;
use wtal::fusion::FusionStrategy;
use wtal::pipeline::scored_proposals;
use wtal::sim::{corrupt_predictions, gen_corpus, run_benchmark, SimConfig};
use wtal::temporal::PseudoProposal;

fn ricker_avg(sim: &SimConfig) -> f64 {
    let r = run_benchmark(sim, &[FusionStrategy::Ricker], &PipelineConfig::default()).unwrap();
    r.entries[0].quality.report.avg_01_07.unwrap()
}

#[test]
fn noiseless_pipeline_reproduces_ground_truth() {
    for seed in 0..3 {
        let sim = SimConfig { seed, num_videos: 20, ..SimConfig::default() }.noiseless();
        let r = run_benchmark(&sim, &[FusionStrategy::Ricker], &PipelineConfig::default()).unwrap();
        let q = &r.entries[0].quality;
        assert_eq!(q.report.map_at(0.5), Some(1.0), "seed {seed}");
        assert!(q.report.avg_01_07.unwrap() >= 0.95, "seed {seed}");
    }
}

#[test]
fn quality_degrades_with_jitter() {
    let mut last = f64::INFINITY;
    for jitter in [0.0, 0.05, 0.1, 0.2] {
        let avg: f64 = (0..5)
            .map(|seed| {
                ricker_avg(&SimConfig {
                    seed,
                    boundary_jitter_frac: jitter,
                    ..SimConfig::default().noiseless()
                })
            })
            .sum::<f64>()
            / 5.0;
        assert!(avg <= last + 1e-12, "jitter {jitter}: {avg} > {last}");
        last = avg;
    }
}

#[test]
fn jitter_hurts_tight_matching() {
    let cfg = PipelineConfig {
        eval_tious: vec![0.5, 0.9],
        ..Default::default()
    };
    let sim = SimConfig {
        boundary_jitter_frac: 0.1,
        ..SimConfig::default().noiseless()
    };
    let r = run_benchmark(&sim, &[FusionStrategy::Ricker], &cfg).unwrap();
    let recall = &r.entries[0].quality.recall;
    assert!(recall[1] < recall[0], "{recall:?}");
}

#[test]
fn false_positives_lower_precision_before_fusion() {
    let sim = SimConfig {
        false_positive_rate: 2.0,
        ..SimConfig::default().noiseless()
    };
    let cfg = PipelineConfig::default();
    let corpus = gen_corpus(&sim).unwrap();
    let sps = corrupt_predictions(&corpus, &sim).unwrap();
    let mut raw: BTreeMap<String, Vec<PseudoProposal>> = BTreeMap::new();
    for (v, sp) in corpus.videos.iter().zip(&sps) {
        let ps = scored_proposals(sp, &v.grid, &v.label, &cfg).unwrap();
        raw.insert(
            v.video_id.clone(),
            ps.iter()
                .map(|p| PseudoProposal { interval: p.interval, class_id: p.class_id, confidence: p.score })
                .collect(),
        );
    }
    let q = pseudo_quality(&raw, &corpus.ground_truth(), &[0.5]).unwrap();
    assert!(q.precision[0] < 1.0);
}

#[test]
fn benchmark_is_reproducible() {
    let sim = SimConfig { num_videos: 10, ..SimConfig::default() };
    let cfg = PipelineConfig::default();
    let a = run_benchmark(&sim, &FusionStrategy::ALL, &cfg).unwrap();
    let b = run_benchmark(&sim, &FusionStrategy::ALL, &cfg).unwrap();
    for (x, y) in a.entries.iter().zip(&b.entries) {
        assert_eq!(x.quality, y.quality);
    }
    assert_eq!(a.entries.len(), 6);
}
