//! JSON Lines and JSON file formats. Layouts are documented in FORMATS.md.
//!
//! Written files are byte-stable: object keys are sorted, floats are rounded
//! to 6 significant digits and records are ordered by video id.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, GroundTruthSet, Predictions, PseudoQuality};
use crate::fusion::FusedWavelet;
use crate::mask::SnippetMask;
use crate::targets::{AnchorPrediction, AnchorPredictions, AnchorTarget, AnchorTargets};
use crate::temporal::{ClassId, Interval, Proposal, PseudoProposal, SnippetPredictions, TimeGrid};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Rounds `x` to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 {
        // folds -0.0 into 0.0
        return 0.0;
    }
    if !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(round_floats),
        Value::Object(m) => m.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Canonical single-line JSON text of `value`.
pub fn canonical_line<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("records serialize");
    round_floats(&mut v);
    v.to_string()
}

/// Grid of one video as stored in file headers and records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub num_snippets: usize,
    pub snippet_duration_s: f64,
}

/// First line of every JSON Lines output, wrapped as `{"header": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Header {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub videos: BTreeMap<String, GridRecord>,
}

impl Header {
    pub fn new(format: &str, config_hash: &str) -> Self {
        Self {
            format: format.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }
}

/// Records of a JSON Lines file with their 1-based line numbers, plus the
/// header when present. Blank lines are skipped.
pub struct JsonlFile<T> {
    pub header: Option<Header>,
    pub records: Vec<(usize, T)>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlFile<T>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let schema = |line: usize, message: String| Error::Schema {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: Value = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
        if let Some(h) = value.as_object_mut().and_then(|o| o.remove("header")) {
            header = Some(serde_json::from_value(h).map_err(|e| schema(i + 1, format!("header: {e}")))?);
            continue;
        }
        records.push((i + 1, serde_json::from_value(value).map_err(|e| schema(i + 1, e.to_string()))?));
    }
    Ok(JsonlFile { header, records })
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    let mut text = canonical_line(&serde_json::json!({ "header": header }));
    text.push('\n');
    for r in records {
        text.push_str(&canonical_line(r));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Report object `{"config_hash", "metrics", "timings_ms", "tool_version"}`.
pub fn write_report(path: &Path, config_hash: &str, metrics: Value, timings_ms: Map<String, Value>) -> Result<()> {
    let mut v = serde_json::json!({
        "config_hash": config_hash,
        "tool_version": TOOL_VERSION,
        "metrics": metrics,
        "timings_ms": timings_ms,
    });
    round_floats(&mut v);
    let mut text = serde_json::to_string_pretty(&v).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

/// One video's snippet predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpRecord {
    pub video_id: String,
    pub num_snippets: usize,
    pub snippet_duration_s: f64,
    pub attention: Vec<f64>,
    /// `T` rows of `C+1` scores, background last.
    pub class_scores: Vec<Vec<f64>>,
    /// Classes in the video-level label, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_label: Option<Vec<ClassId>>,
}

impl SpRecord {
    pub fn from_predictions(sps: &SnippetPredictions, grid: &TimeGrid, label: Option<Vec<ClassId>>) -> Self {
        Self {
            video_id: sps.video_id.clone(),
            num_snippets: grid.num_snippets(),
            snippet_duration_s: grid.snippet_duration_s(),
            attention: sps.attention().to_vec(),
            class_scores: sps.class_scores().rows().into_iter().map(|r| r.to_vec()).collect(),
            video_label: label,
        }
    }

    pub fn to_predictions(&self) -> Result<(SnippetPredictions, TimeGrid)> {
        let t = self.class_scores.len();
        if t != self.num_snippets {
            return Err(Error::Shape(format!(
                "video {}: num_snippets {} but {t} class-score rows",
                self.video_id, self.num_snippets
            )));
        }
        let width = self.class_scores.first().map_or(0, Vec::len);
        if self.class_scores.iter().any(|r| r.len() != width) {
            return Err(Error::Shape(format!("video {}: ragged class_scores", self.video_id)));
        }
        let flat: Vec<f64> = self.class_scores.iter().flatten().copied().collect();
        let scores = Array2::from_shape_vec((t, width), flat).map_err(|e| Error::Shape(e.to_string()))?;
        let sps = SnippetPredictions::new(self.video_id.clone(), self.attention.clone(), scores)?;
        let grid = TimeGrid::new(t, self.snippet_duration_s, sps.class_count())?;
        Ok((sps, grid))
    }
}

/// Scored proposal or pseudo proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    pub class_id: ClassId,
}

impl ProposalRecord {
    pub fn from_proposal(video_id: &str, p: &Proposal) -> Self {
        Self {
            video_id: video_id.to_string(),
            start_s: p.interval.start_s(),
            end_s: p.interval.end_s(),
            score: p.score,
            class_id: p.class_id,
        }
    }

    pub fn from_pseudo(video_id: &str, p: &PseudoProposal) -> Self {
        Self::from_proposal(video_id, &p.to_proposal())
    }

    pub fn to_proposal(&self) -> Result<Proposal> {
        if self.class_id == 0 {
            return Err(Error::constraint("class_id", "class ids start at 1"));
        }
        if !self.score.is_finite() {
            return Err(Error::constraint("score", "must be finite"));
        }
        Ok(Proposal {
            interval: Interval::new(self.start_s, self.end_s)?,
            score: self.score,
            class_id: self.class_id,
        })
    }

    pub fn to_pseudo(&self) -> Result<PseudoProposal> {
        let p = self.to_proposal()?;
        if p.score < 0.0 {
            return Err(Error::constraint("score", "pseudo confidence must be >= 0"));
        }
        Ok(PseudoProposal {
            interval: p.interval,
            class_id: p.class_id,
            confidence: p.score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub video_id: String,
    pub num_snippets: usize,
    pub snippet_duration_s: f64,
    /// Run-length pairs `[value, count]`, value 1 = certain.
    pub bits: Vec<[usize; 2]>,
}

impl MaskRecord {
    pub fn from_mask(video_id: &str, mask: &SnippetMask) -> Self {
        Self {
            video_id: video_id.to_string(),
            num_snippets: mask.grid().num_snippets(),
            snippet_duration_s: mask.grid().snippet_duration_s(),
            bits: mask.run_lengths().into_iter().map(|(v, n)| [v as usize, n]).collect(),
        }
    }

    pub fn to_mask(&self, grid: TimeGrid) -> Result<SnippetMask> {
        if self.num_snippets != grid.num_snippets() {
            return Err(Error::Shape(format!("video {}: mask grid differs", self.video_id)));
        }
        let runs = self
            .bits
            .iter()
            .map(|&[v, n]| match v {
                0 => Ok((false, n)),
                1 => Ok((true, n)),
                _ => Err(Error::Shape(format!("video {}: mask value {v} is not 0 or 1", self.video_id))),
            })
            .collect::<Result<Vec<_>>>()?;
        SnippetMask::from_run_lengths(&runs, grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRecord {
    pub level: usize,
    pub position: usize,
    pub time_s: f64,
    pub stride_s: f64,
    pub class_label: usize,
    pub reg_left: f64,
    pub reg_right: f64,
    pub iou_weight: f64,
    pub mask_bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsRecord {
    pub video_id: String,
    pub num_snippets: usize,
    pub snippet_duration_s: f64,
    pub class_count: usize,
    pub anchors: Vec<AnchorRecord>,
}

impl TargetsRecord {
    pub fn from_targets(video_id: &str, grid: &TimeGrid, t: &AnchorTargets) -> Self {
        Self {
            video_id: video_id.to_string(),
            num_snippets: grid.num_snippets(),
            snippet_duration_s: grid.snippet_duration_s(),
            class_count: t.class_count,
            anchors: t
                .anchors
                .iter()
                .map(|a| AnchorRecord {
                    level: a.level,
                    position: a.position,
                    time_s: a.time_s,
                    stride_s: a.stride_s,
                    class_label: a.class_label,
                    reg_left: a.reg_left,
                    reg_right: a.reg_right,
                    iou_weight: a.iou_weight,
                    mask_bit: a.mask_bit as u8,
                })
                .collect(),
        }
    }

    pub fn to_targets(&self) -> Result<AnchorTargets> {
        let anchors = self
            .anchors
            .iter()
            .map(|a| {
                if a.class_label > self.class_count {
                    return Err(Error::constraint("class_label", format!("{} exceeds class_count", a.class_label)));
                }
                Ok(AnchorTarget {
                    level: a.level,
                    position: a.position,
                    time_s: a.time_s,
                    stride_s: a.stride_s,
                    class_label: a.class_label,
                    reg_left: a.reg_left,
                    reg_right: a.reg_right,
                    iou_weight: a.iou_weight,
                    mask_bit: a.mask_bit != 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AnchorTargets {
            anchors,
            class_count: self.class_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorPredictionRecord {
    pub class_probs: Vec<f64>,
    pub reg_left: f64,
    pub reg_right: f64,
}

/// Model output for one video: one entry per anchor in target order, plus
/// optional per-snippet class probabilities for the attention loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video_id: String,
    pub anchors: Vec<AnchorPredictionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_probs: Option<Vec<Vec<f64>>>,
}

impl PredictionRecord {
    pub fn to_predictions(&self) -> Result<AnchorPredictions> {
        AnchorPredictions::new(
            self.anchors
                .iter()
                .map(|a| AnchorPrediction {
                    class_probs: a.class_probs.clone(),
                    reg_left: a.reg_left,
                    reg_right: a.reg_right,
                })
                .collect(),
        )
    }

    pub fn snippet_matrix(&self) -> Result<Option<Array2<f64>>> {
        let Some(rows) = &self.snippet_probs else {
            return Ok(None);
        };
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape(format!("video {}: ragged snippet_probs", self.video_id)));
        }
        let flat = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), width), flat)
            .map(Some)
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Proposals grouped by video, ordered by video id.
pub fn group_proposals(records: &[(usize, ProposalRecord)]) -> Result<Predictions> {
    let mut out = Predictions::new();
    for (_, r) in records {
        out.entry(r.video_id.clone()).or_default().push(r.to_proposal()?);
    }
    Ok(out)
}

pub fn group_pseudos(records: &[(usize, ProposalRecord)]) -> Result<BTreeMap<String, Vec<PseudoProposal>>> {
    let mut out: BTreeMap<String, Vec<PseudoProposal>> = BTreeMap::new();
    for (_, r) in records {
        out.entry(r.video_id.clone()).or_default().push(r.to_pseudo()?);
    }
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    let file = read_jsonl::<GtRecord>(path)?;
    let mut gt = GroundTruthSet::default();
    for (_, r) in file.records {
        if r.class_id == 0 {
            return Err(Error::constraint("class_id", "class ids start at 1"));
        }
        gt.push(r.video_id, Interval::new(r.start_s, r.end_s)?, r.class_id);
    }
    Ok(gt)
}

pub fn ground_truth_records(gt: &GroundTruthSet) -> Vec<GtRecord> {
    gt.videos
        .iter()
        .flat_map(|(v, gs)| {
            gs.iter().map(move |(iv, c)| GtRecord {
                video_id: v.clone(),
                start_s: iv.start_s(),
                end_s: iv.end_s(),
                class_id: *c,
            })
        })
        .collect()
}

fn csv_number(x: f64) -> String {
    serde_json::Number::from_f64(round6(x)).map_or_else(|| x.to_string(), |n| n.to_string())
}

/// Wavelet CSV: header `t,class_1,...,class_C`, one row per snippet center.
pub fn wavelet_csv(w: &FusedWavelet) -> String {
    let grid = w.grid();
    let mut out = String::from("t");
    for c in 1..=grid.class_count() {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for (i, row) in w.values().rows().into_iter().enumerate() {
        out.push_str(&csv_number(grid.center_s(i)));
        for v in row {
            out.push(',');
            out.push_str(&csv_number(*v));
        }
        out.push('\n');
    }
    out
}

/// Metrics object of an evaluation report.
pub fn eval_metrics(r: &EvalReport) -> Value {
    let per_class: Map<String, Value> = r
        .classes
        .iter()
        .zip(&r.per_class_ap)
        .map(|(c, aps)| (c.to_string(), serde_json::json!(aps)))
        .collect();
    serde_json::json!({
        "tiou_thresholds": r.thresholds,
        "map": r.map,
        "avg_0.1_0.5": r.avg_01_05,
        "avg_0.3_0.7": r.avg_03_07,
        "avg_0.1_0.7": r.avg_01_07,
        "per_class_ap": per_class,
        "no_ground_truth": r.no_ground_truth,
    })
}

pub fn pseudo_quality_metrics(q: &PseudoQuality) -> Value {
    let mut v = eval_metrics(&q.report);
    let m = v.as_object_mut().expect("metrics object");
    m.insert("precision".into(), serde_json::json!(q.precision));
    m.insert("recall".into(), serde_json::json!(q.recall));
    m.insert("precision_undefined".into(), Value::Bool(q.precision_undefined));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_to_six_digits() {
        assert_eq!(round6(1.0 / 3.0), 0.333333);
        assert_eq!(round6(2.0 / 3.0 * 1e5), 66666.7);
        assert_eq!(round6(0.0), 0.0);
        assert_eq!(canonical_line(&serde_json::json!({"b": 1.23456789, "a": 2})), r#"{"a":2,"b":1.23457}"#);
    }

    #[test]
    fn jsonl_roundtrip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs = vec![ProposalRecord {
            video_id: "v".into(),
            start_s: 1.0,
            end_s: 2.5,
            score: 0.5,
            class_id: 1,
        }];
        let mut h = Header::new("proposals", "abc");
        h.videos.insert("v".into(), GridRecord { num_snippets: 4, snippet_duration_s: 1.0 });
        write_jsonl(&path, &h, &recs).unwrap();
        let back = read_jsonl::<ProposalRecord>(&path).unwrap();
        assert_eq!(back.header.unwrap(), h);
        assert_eq!(back.records[0], (2, recs[0].clone()));
    }

    #[test]
    fn schema_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"video_id\":\"v\",\"start_s\":0,\"end_s\":1,\"class_id\":1}\n{\"video_id\":3}\n").unwrap();
        match read_jsonl::<GtRecord>(&path) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.err()),
        }
        assert!(matches!(
            read_jsonl::<GtRecord>(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_record_roundtrip() {
        let g = TimeGrid::new(5, 1.0, 1).unwrap();
        let m = SnippetMask::from_bits(vec![true, false, false, true, true], g).unwrap();
        let r = MaskRecord::from_mask("v", &m);
        assert_eq!(r.bits, vec![[1, 1], [0, 2], [1, 2]]);
        assert_eq!(r.to_mask(g).unwrap(), m);
    }

    #[test]
    fn wavelet_csv_layout() {
        let g = TimeGrid::new(2, 1.0, 2).unwrap();
        let csv = wavelet_csv(&FusedWavelet::zeros(g));
        assert_eq!(csv, "t,class_1,class_2\n0.5,0.0,0.0\n1.5,0.0,0.0\n");
        assert_eq!(csv_number(-9.182641e-16), "-9.18264e-16");
        assert_eq!(round6(-0.0).to_bits(), 0.0f64.to_bits());
    }
}
