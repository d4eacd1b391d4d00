//! Command-line front end. Every subcommand reads JSON inputs, writes
//! byte-stable outputs and maps errors to exit status 2 (input) or 3
//! (constraint violation).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Map};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{map_table, GroundTruthSet};
use crate::fusion::{fuse_ricker, FusionStrategy};
use crate::io::{
    eval_metrics, ground_truth_records, group_proposals, group_pseudos, pseudo_quality_metrics, read_ground_truth,
    read_jsonl, wavelet_csv, write_jsonl, write_report, write_text, GridRecord, Header, MaskRecord, PredictionRecord,
    ProposalRecord, SpRecord, TargetsRecord,
};
use crate::mask::{mask_for_proposals, SnippetMask};
use crate::pipeline::{derive_label, fuse_with, run_benchmark, scored_proposals};
use crate::sim::{corrupt_predictions, gen_corpus, RNG_NAME};
use crate::targets::{att_loss, build_targets_with_mask, cls_loss, reg_loss, total_loss};
use crate::temporal::{PseudoProposal, TimeGrid, VideoLabel};
use crate::weak::{compute_sps, sort_by_score_desc};

#[derive(Debug, Parser)]
#[command(name = "wtal", version, about = "Pseudo-label pipeline for weakly-supervised temporal action localization")]
pub struct Cli {
    /// Pipeline config (JSON); every field optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Snippet predictions to scored, soft-NMS'd proposals.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Proposals to pseudo proposals.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// ricker, hard, soft, topk, threshold or gauss.
        #[arg(long, default_value = "ricker")]
        strategy: String,
        /// Directory receiving one `<video_id>.csv` wavelet dump per video
        /// (ricker only).
        #[arg(long)]
        wavelet_csv: Option<PathBuf>,
    },
    /// Pseudo proposals to uncertainty masks.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Training epoch selecting the decayed mask ratios.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Pseudo proposals (and masks) to anchor targets.
    Targets {
        #[arg(long)]
        input: PathBuf,
        /// Mask file; when absent masks are built at `--epoch`.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Anchor predictions and targets to a loss report.
    Losses {
        /// Prediction file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Snippet predictions, needed for the attention loss.
        #[arg(long)]
        sps: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Detections against ground truth.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also print the mAP table.
        #[arg(long)]
        table: bool,
    },
    /// Synthetic corpus: writes `sps.jsonl` and `gt.jsonl` into `--output`.
    Simulate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pseudo-label quality of each fusion strategy on a synthetic corpus.
    Benchmark {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated strategies; defaults to the config list.
        #[arg(long)]
        strategy: Option<String>,
        /// Record wall-clock timings (makes the report non-reproducible).
        #[arg(long)]
        timings: bool,
        #[arg(long)]
        table: bool,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Schema { .. } | Error::Shape(_) => 2,
        _ => 3,
    }
}

/// Runs the parsed command line and reports errors on stderr.
pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::constraint("jobs", e.to_string()))?;
    pool.install(|| dispatch(cli.command, cfg))
}

fn dispatch(command: Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::Extract { input, output } => extract(&input, &output, &cfg),
        Command::Fuse {
            input,
            output,
            strategy,
            wavelet_csv,
        } => fuse(&input, &output, &strategy, wavelet_csv.as_deref(), &cfg),
        Command::Mask { input, output, epoch } => mask(&input, &output, epoch, &cfg),
        Command::Targets {
            input,
            mask,
            output,
            epoch,
        } => targets(&input, mask.as_deref(), &output, epoch, &cfg),
        Command::Losses {
            input,
            targets,
            sps,
            output,
        } => losses(&input, &targets, sps.as_deref(), &output, &cfg),
        Command::Eval { input, gt, output, table } => eval(&input, &gt, &output, table, &cfg),
        Command::Simulate { output, seed } => {
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            simulate(&output, &cfg)
        }
        Command::Benchmark {
            output,
            seed,
            strategy,
            timings,
            table,
        } => {
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            if let Some(list) = strategy {
                cfg.strategies = list.split(',').map(|s| s.trim().to_string()).collect();
            }
            cfg.validate()?;
            benchmark(&output, timings, table, &cfg)
        }
    }
}

fn read_sps(path: &Path) -> Result<Vec<SpRecord>> {
    let mut records: Vec<SpRecord> = read_jsonl(path)?.records.into_iter().map(|(_, r)| r).collect();
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(records)
}

fn label_of(record: &SpRecord, sps: &crate::temporal::SnippetPredictions, cfg: &PipelineConfig) -> Result<VideoLabel> {
    match &record.video_label {
        Some(classes) => VideoLabel::from_classes(classes, sps.class_count()),
        None => derive_label(sps, cfg),
    }
}

fn extract(input: &Path, output: &Path, cfg: &PipelineConfig) -> Result<()> {
    let records = read_sps(input)?;
    let per_video = records
        .par_iter()
        .map(|r| {
            let (sps, grid) = r.to_predictions()?;
            let label = label_of(r, &sps, cfg)?;
            let mut ps = scored_proposals(&sps, &grid, &label, cfg)?;
            sort_by_score_desc(&mut ps);
            Ok((grid, ps))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = Header::new("proposals", &cfg.hash());
    let mut out = Vec::new();
    for (r, (grid, ps)) in records.iter().zip(&per_video) {
        header.class_count = Some(grid.class_count());
        header.videos.insert(r.video_id.clone(), grid_record(grid));
        out.extend(ps.iter().map(|p| ProposalRecord::from_proposal(&r.video_id, p)));
    }
    write_jsonl(output, &header, &out)
}

fn grid_record(g: &TimeGrid) -> GridRecord {
    GridRecord {
        num_snippets: g.num_snippets(),
        snippet_duration_s: g.snippet_duration_s(),
    }
}

/// Grid of every video named in the header or the records. Without header
/// information the grid is inferred from the largest end time and the
/// configured snippet duration.
fn video_grids(header: Option<&Header>, records: &[(usize, ProposalRecord)], cfg: &PipelineConfig) -> Result<BTreeMap<String, TimeGrid>> {
    let max_class = records.iter().map(|(_, r)| r.class_id).max().unwrap_or(1);
    let class_count = header.and_then(|h| h.class_count).unwrap_or(max_class).max(1);
    let mut max_end: BTreeMap<&str, f64> = BTreeMap::new();
    for (_, r) in records {
        let e = max_end.entry(&r.video_id).or_insert(0.0);
        *e = e.max(r.end_s);
    }
    let mut grids = BTreeMap::new();
    if let Some(h) = header {
        for (v, g) in &h.videos {
            grids.insert(v.clone(), TimeGrid::new(g.num_snippets, g.snippet_duration_s, class_count)?);
        }
    }
    for (v, end) in max_end {
        if !grids.contains_key(v) {
            let d = cfg.snippet_duration_s;
            let t = ((end / d) - 1e-9).ceil().max(1.0) as usize;
            grids.insert(v.to_string(), TimeGrid::new(t, d, class_count)?);
        }
    }
    Ok(grids)
}

fn header_with_grids(format: &str, cfg: &PipelineConfig, grids: &BTreeMap<String, TimeGrid>) -> Header {
    let mut h = Header::new(format, &cfg.hash());
    h.class_count = grids.values().next().map(|g| g.class_count());
    h.videos = grids.iter().map(|(v, g)| (v.clone(), grid_record(g))).collect();
    h
}

fn sorted_pseudos(mut ps: Vec<PseudoProposal>) -> Vec<PseudoProposal> {
    ps.sort_by(|a, b| {
        a.interval
            .start_s()
            .total_cmp(&b.interval.start_s())
            .then(a.class_id.cmp(&b.class_id))
            .then(a.interval.end_s().total_cmp(&b.interval.end_s()))
    });
    ps
}

fn fuse(input: &Path, output: &Path, strategy: &str, csv_dir: Option<&Path>, cfg: &PipelineConfig) -> Result<()> {
    let strategy: FusionStrategy = strategy.parse()?;
    let file = read_jsonl::<ProposalRecord>(input)?;
    let grids = video_grids(file.header.as_ref(), &file.records, cfg)?;
    let proposals = group_proposals(&file.records)?;
    let videos: Vec<(&String, &TimeGrid)> = grids.iter().collect();
    let fused = videos
        .par_iter()
        .map(|(v, g)| {
            let ps = proposals.get(*v).map(Vec::as_slice).unwrap_or(&[]);
            let pseudos = sorted_pseudos(fuse_with(strategy, ps, g, None, cfg)?);
            let csv = match (csv_dir, strategy) {
                (Some(_), FusionStrategy::Ricker) => Some(wavelet_csv(&fuse_ricker(ps, g)?)),
                _ => None,
            };
            Ok((pseudos, csv))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for ((v, _), (pseudos, csv)) in videos.iter().zip(&fused) {
        out.extend(pseudos.iter().map(|p| ProposalRecord::from_pseudo(v, p)));
        if let (Some(dir), Some(text)) = (csv_dir, csv) {
            write_text(&dir.join(format!("{v}.csv")), text)?;
        }
    }
    write_jsonl(output, &header_with_grids("pseudo_proposals", cfg, &grids), &out)
}

fn read_pseudos(input: &Path, cfg: &PipelineConfig) -> Result<(BTreeMap<String, TimeGrid>, BTreeMap<String, Vec<PseudoProposal>>)> {
    let file = read_jsonl::<ProposalRecord>(input)?;
    let grids = video_grids(file.header.as_ref(), &file.records, cfg)?;
    Ok((grids, group_pseudos(&file.records)?))
}

fn mask(input: &Path, output: &Path, epoch: usize, cfg: &PipelineConfig) -> Result<()> {
    let params = cfg.mask_params_at(epoch)?;
    let (grids, pseudos) = read_pseudos(input, cfg)?;
    let out: Vec<MaskRecord> = grids
        .iter()
        .map(|(v, g)| {
            let ps = pseudos.get(v).map(Vec::as_slice).unwrap_or(&[]);
            MaskRecord::from_mask(v, &mask_for_proposals(ps, &params, g))
        })
        .collect();
    write_jsonl(output, &header_with_grids("mask", cfg, &grids), &out)
}

fn targets(input: &Path, mask_path: Option<&Path>, output: &Path, epoch: usize, cfg: &PipelineConfig) -> Result<()> {
    let pyramid = cfg.pyramid()?;
    let params = cfg.mask_params_at(epoch)?;
    let (grids, pseudos) = read_pseudos(input, cfg)?;
    let masks: BTreeMap<String, MaskRecord> = match mask_path {
        Some(p) => read_jsonl::<MaskRecord>(p)?
            .records
            .into_iter()
            .map(|(_, r)| (r.video_id.clone(), r))
            .collect(),
        None => BTreeMap::new(),
    };
    let out = grids
        .par_iter()
        .map(|(v, g)| {
            let ps = pseudos.get(v).map(Vec::as_slice).unwrap_or(&[]);
            let mask: SnippetMask = match (mask_path, masks.get(v)) {
                (Some(_), Some(r)) => r.to_mask(*g)?,
                (Some(_), None) => return Err(Error::Shape(format!("mask file has no entry for video {v}"))),
                (None, _) => mask_for_proposals(ps, &params, g),
            };
            Ok(TargetsRecord::from_targets(v, g, &build_targets_with_mask(ps, &mask, &pyramid, g)))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(output, &header_with_grids("targets", cfg, &grids), &out)
}

fn losses(input: &Path, targets_path: &Path, sps_path: Option<&Path>, output: &Path, cfg: &PipelineConfig) -> Result<()> {
    let preds: BTreeMap<String, PredictionRecord> = read_jsonl::<PredictionRecord>(input)?
        .records
        .into_iter()
        .map(|(_, r)| (r.video_id.clone(), r))
        .collect();
    let targets: BTreeMap<String, TargetsRecord> = read_jsonl::<TargetsRecord>(targets_path)?
        .records
        .into_iter()
        .map(|(_, r)| (r.video_id.clone(), r))
        .collect();
    let sps: BTreeMap<String, SpRecord> = match sps_path {
        Some(p) => read_sps(p)?.into_iter().map(|r| (r.video_id.clone(), r)).collect(),
        None => BTreeMap::new(),
    };

    let mut per_video = Map::new();
    let (mut sums, mut n) = ([0.0; 4], 0usize);
    for (v, tr) in &targets {
        let pr = preds
            .get(v)
            .ok_or_else(|| Error::Shape(format!("prediction file has no entry for video {v}")))?;
        let pred = pr.to_predictions()?;
        let tgt = tr.to_targets()?.with_predicted_iou(&pred)?;
        let l_cls = cls_loss(&pred, &tgt, cfg.gamma_focal)?;
        let reg = reg_loss(&pred, &tgt)?;
        let l_att = match (pr.snippet_matrix()?, sps.get(v)) {
            (Some(probs), Some(sr)) => {
                let (sp, _) = sr.to_predictions()?;
                let z = compute_sps(sp.attention(), sp.class_scores())?;
                att_loss(&probs, &z, cfg.tau, &label_of(sr, &sp, cfg)?, cfg.gamma_focal)?
            }
            _ => 0.0,
        };
        let total = total_loss(reg.value, l_cls, l_att, cfg.lambda);
        for (s, x) in sums.iter_mut().zip([l_cls, reg.value, l_att, total]) {
            *s += x;
        }
        n += 1;
        per_video.insert(
            v.clone(),
            json!({"cls": l_cls, "reg": reg.value, "att": l_att, "total": total, "empty_positives": reg.empty_positives}),
        );
    }
    let mean = |s: f64| if n > 0 { s / n as f64 } else { 0.0 };
    let metrics = json!({
        "videos": per_video,
        "mean": {"cls": mean(sums[0]), "reg": mean(sums[1]), "att": mean(sums[2]), "total": mean(sums[3])},
        "lambda": cfg.lambda,
    });
    write_report(output, &cfg.hash(), metrics, Map::new())
}

fn eval(input: &Path, gt_path: &Path, output: &Path, table: bool, cfg: &PipelineConfig) -> Result<()> {
    let preds = group_proposals(&read_jsonl::<ProposalRecord>(input)?.records)?;
    let gt: GroundTruthSet = read_ground_truth(gt_path)?;
    let report = map_table(&preds, &gt, &cfg.eval_tious)?;
    if report.no_ground_truth {
        eprintln!("warning: ground truth is empty; every AP is reported as 0");
    }
    if table {
        print!("{}", report.to_table());
    }
    write_report(output, &cfg.hash(), eval_metrics(&report), Map::new())
}

fn simulate(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let corpus = gen_corpus(&cfg.sim)?;
    let sps = corrupt_predictions(&corpus, &cfg.sim)?;
    let mut header = Header::new("snippet_predictions", &cfg.hash());
    header.class_count = Some(cfg.sim.class_count);
    let records: Vec<SpRecord> = corpus
        .videos
        .iter()
        .zip(&sps)
        .map(|(v, sp)| {
            header.videos.insert(v.video_id.clone(), grid_record(&v.grid));
            SpRecord::from_predictions(sp, &v.grid, Some(v.label.classes().collect()))
        })
        .collect();
    write_jsonl(&dir.join("sps.jsonl"), &header, &records)?;
    let mut gt_header = Header::new("ground_truth", &cfg.hash());
    gt_header.class_count = header.class_count;
    gt_header.videos = header.videos.clone();
    write_jsonl(&dir.join("gt.jsonl"), &gt_header, &ground_truth_records(&corpus.ground_truth()))
}

fn benchmark(output: &Path, timings: bool, table: bool, cfg: &PipelineConfig) -> Result<()> {
    let strategies = cfg.fusion_strategies()?;
    let report = run_benchmark(&cfg.sim, &strategies, cfg)?;
    let mut per_strategy = Map::new();
    let mut timing_map = Map::new();
    for e in &report.entries {
        per_strategy.insert(e.strategy.name().to_string(), pseudo_quality_metrics(&e.quality));
        if timings {
            timing_map.insert(e.strategy.name().to_string(), json!(e.elapsed_ms));
        }
        if table {
            println!("{}", e.strategy);
            print!("{}", e.quality.report.to_table());
        }
    }
    let metrics = json!({
        "rng": RNG_NAME,
        "sim": serde_json::to_value(&cfg.sim).expect("sim config serializes"),
        "strategies": per_strategy,
    });
    write_report(output, &cfg.hash(), metrics, timing_map)
}
