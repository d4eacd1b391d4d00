//! Declarative pipeline configuration, loaded from one JSON document in
//! which every field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{default_tiou_thresholds, NmsParams};
use crate::fusion::{BaselineParams, FusionStrategy};
use crate::mask::{decay_schedule, MaskParams};
use crate::sim::SimConfig;
use crate::targets::{PyramidConfig, RefineConfig};
use crate::weak::ThresholdSource;

fn default_thresholds() -> Vec<f64> {
    (0..17).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub top_k: usize,
    pub score_threshold: f64,
    pub gauss_group_tiou: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineParams::default();
        Self {
            top_k: d.top_k,
            score_threshold: d.score_threshold,
            gauss_group_tiou: d.gauss_group_tiou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSourceName {
    Sps,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_ratio: f64,
    pub thresholds: Vec<f64>,
    pub threshold_source: ThresholdSourceName,
    pub oic_inflation: f64,
    pub sigma_nms: f64,
    pub min_score: f64,
    /// Video-level score a class needs to survive inference filtering and
    /// label derivation when an SP record carries no label.
    pub class_thresh: f64,
    pub min_duration_snippets: f64,
    /// Drop proposals of classes outside the video label before fusion.
    pub fusion_label_filter: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub gamma_focal: f64,
    /// `[min, max)` durations in snippets per level; `null` max = unbounded.
    pub pyramid_ranges: Vec<(f64, Option<f64>)>,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub eval_tious: Vec<f64>,
    pub refine_model_weight: f64,
    /// Snippet length assumed for proposal files that carry no grid header.
    pub snippet_duration_s: f64,
    pub baseline: BaselineSection,
    pub strategies: Vec<String>,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_ratio: 8.0,
            thresholds: default_thresholds(),
            threshold_source: ThresholdSourceName::Sps,
            oic_inflation: 0.25,
            sigma_nms: 0.5,
            min_score: 0.001,
            class_thresh: 0.2,
            min_duration_snippets: 2.0,
            fusion_label_filter: false,
            alpha: 0.1,
            beta: 0.0,
            tau: 0.8,
            lambda: 0.2,
            gamma_focal: 2.0,
            pyramid_ranges: PyramidConfig::default()
                .ranges()
                .iter()
                .map(|&(lo, hi)| (lo, hi.is_finite().then_some(hi)))
                .collect(),
            warmup_epochs: 20,
            total_epochs: 38,
            eval_tious: default_tiou_thresholds(),
            refine_model_weight: 1.0,
            snippet_duration_s: 1.0,
            baseline: BaselineSection::default(),
            strategies: FusionStrategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            sim: SimConfig::default(),
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::constraint(field, format!("{v} must be finite and > 0")))
    }
}

impl PipelineConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        positive("k_ratio", self.k_ratio)?;
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::constraint("thresholds", "need a non-empty list of values in (0, 1)"));
        }
        if !(self.oic_inflation > 0.0 && self.oic_inflation <= 1.0) {
            return Err(Error::constraint("oic_inflation", "must lie in (0, 1]"));
        }
        positive("sigma_nms", self.sigma_nms)?;
        if !self.min_score.is_finite() {
            return Err(Error::constraint("min_score", "must be finite"));
        }
        if !self.class_thresh.is_finite() {
            return Err(Error::constraint("class_thresh", "must be finite"));
        }
        if !(self.min_duration_snippets.is_finite() && self.min_duration_snippets >= 0.0) {
            return Err(Error::constraint("min_duration_snippets", "must be >= 0"));
        }
        MaskParams::new(self.alpha, self.beta)?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::constraint("tau", "must lie in (0, 1)"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::constraint("lambda", "must be finite and >= 0"));
        }
        if !(self.gamma_focal.is_finite() && self.gamma_focal >= 0.0) {
            return Err(Error::constraint("gamma_focal", "must be finite and >= 0"));
        }
        self.pyramid()?;
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::constraint("warmup_epochs", "must be below total_epochs"));
        }
        if self.eval_tious.is_empty() || self.eval_tious.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::constraint("eval_tious", "need a non-empty list of values in [0, 1]"));
        }
        if !(self.refine_model_weight.is_finite() && self.refine_model_weight >= 0.0) {
            return Err(Error::constraint("refine_model_weight", "must be finite and >= 0"));
        }
        positive("snippet_duration_s", self.snippet_duration_s)?;
        self.baseline_params().validate()?;
        if self.strategies.is_empty() {
            return Err(Error::constraint("strategies", "must be non-empty"));
        }
        self.fusion_strategies()?;
        self.sim.validate()
    }

    pub fn threshold_source(&self) -> ThresholdSource {
        match self.threshold_source {
            ThresholdSourceName::Sps => ThresholdSource::Sps,
            ThresholdSourceName::Attention => ThresholdSource::Attention,
        }
    }

    pub fn nms(&self) -> NmsParams {
        NmsParams {
            sigma: self.sigma_nms,
            min_score: self.min_score,
        }
    }

    pub fn baseline_params(&self) -> BaselineParams {
        BaselineParams {
            top_k: self.baseline.top_k,
            score_threshold: self.baseline.score_threshold,
            gauss_group_tiou: self.baseline.gauss_group_tiou,
        }
    }

    pub fn pyramid(&self) -> Result<PyramidConfig> {
        PyramidConfig::new(
            self.pyramid_ranges
                .iter()
                .map(|&(lo, hi)| (lo, hi.unwrap_or(f64::INFINITY)))
                .collect(),
        )
    }

    pub fn initial_mask_params(&self) -> Result<MaskParams> {
        MaskParams::new(self.alpha, self.beta)
    }

    /// Mask ratios scheduled for `epoch`.
    pub fn mask_params_at(&self, epoch: usize) -> Result<MaskParams> {
        decay_schedule(epoch, self.warmup_epochs, self.total_epochs, &self.initial_mask_params()?)
    }

    pub fn min_duration_s(&self, snippet_duration_s: f64) -> f64 {
        self.min_duration_snippets * snippet_duration_s
    }

    pub fn refine_config(&self, snippet_duration_s: f64) -> RefineConfig {
        RefineConfig {
            model_weight: self.refine_model_weight,
            min_duration_s: self.min_duration_s(snippet_duration_s),
        }
    }

    pub fn fusion_strategies(&self) -> Result<Vec<FusionStrategy>> {
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding of
    /// the fully defaulted config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.thresholds.len(), 17);
        assert!((cfg.thresholds[16] - 0.9).abs() < 1e-12);
        assert_eq!(cfg.pyramid().unwrap(), PyramidConfig::default());
        assert_eq!(cfg.fusion_strategies().unwrap().len(), 6);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"tau": 0.7, "sim": {"seed": 3}}"#).unwrap();
        assert_eq!(cfg.tau, 0.7);
        assert_eq!(cfg.sim.seed, 3);
        assert_eq!(cfg.lambda, 0.2);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"tua": 0.7}"#).is_err());
    }

    #[test]
    fn null_marks_open_top_level() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"pyramid_ranges": [[0, 8], [8, null]]}"#).unwrap();
        assert_eq!(cfg.pyramid().unwrap().num_levels(), 2);
    }

    #[test]
    fn invalid_values_name_field() {
        let cfg = PipelineConfig {
            beta: 0.6,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Constraint { field: "beta", .. })));
        let cfg = PipelineConfig {
            strategies: vec!["median".into()],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            tau: 0.7,
            ..Default::default()
        };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
