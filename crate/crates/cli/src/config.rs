//! Declarative per-task configuration (TOML). Relative paths resolve
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsod_core::eval::EvalParams;
use fsod_core::matching::DiffusionConfig;
use fsod_core::pipeline::MatcherConfig;
use fsod_core::proto::ProtoConfig;
use fsod_core::pseudo::PseudoLabelPolicy;
use serde::Deserialize;

use crate::error::{CliError, CliResult};
use crate::io::read_bytes;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub proto: ProtoSection,
    pub diffusion: DiffusionSection,
    pub matcher: MatcherSection,
    pub postproc: Vec<PostOp>,
    pub eval: EvalSection,
    pub pseudo: PseudoSection,
    pub submission: Vec<SubmissionTask>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// COCO support split (K-shot annotations).
    pub support_json: Option<PathBuf>,
    pub support_embeddings: Option<PathBuf>,
    /// Results-format proposals: score is objectness, `id` the embedding.
    pub proposals: Option<PathBuf>,
    pub proposal_embeddings: Option<PathBuf>,
    /// Query images for pseudo-labeling; annotations in it are ignored.
    pub query_images: Option<PathBuf>,
    /// Labeled query split used for evaluation and threshold search.
    pub ground_truth: Option<PathBuf>,
    /// Prototype store used by `restrict_classes` nearest-prototype remapping.
    pub prototypes: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoSection {
    pub alpha: f64,
    pub temperature_fuse: f64,
    pub n_bg: usize,
}

impl Default for ProtoSection {
    fn default() -> Self {
        let d = ProtoConfig::<f64>::default();
        ProtoSection { alpha: d.alpha, temperature_fuse: d.temperature_fuse, n_bg: d.n_bg }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub enabled: bool,
    pub steps: usize,
    pub alpha: f64,
    pub edge_iou_min: f64,
    pub fuse_objectness: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionConfig::<f64>::default();
        DiffusionSection {
            enabled: true,
            steps: d.steps,
            alpha: d.alpha,
            edge_iou_min: d.edge_iou_min,
            fuse_objectness: d.fuse_objectness,
        }
    }
}

impl DiffusionSection {
    pub fn to_core(&self) -> CliResult<DiffusionConfig<f64>> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(CliError::Config(format!("diffusion.alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.edge_iou_min) {
            return Err(CliError::Config(format!("diffusion.edge_iou_min must lie in [0, 1], got {}", self.edge_iou_min)));
        }
        Ok(DiffusionConfig {
            steps: self.steps,
            alpha: self.alpha,
            edge_iou_min: self.edge_iou_min,
            fuse_objectness: self.fuse_objectness,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherSection {
    pub min_confidence: f64,
    pub nms_iou: f64,
    pub class_agnostic_nms: bool,
}

impl Default for MatcherSection {
    fn default() -> Self {
        let d = MatcherConfig::<f64>::default();
        MatcherSection { min_confidence: d.min_confidence, nms_iou: d.nms_iou, class_agnostic_nms: d.class_agnostic_nms }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_thresholds: Option<Vec<f64>>,
    pub max_dets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { iou_thresholds: None, max_dets: fsod_core::eval::DEFAULT_MAX_DETS }
    }
}

impl EvalSection {
    pub fn to_core(&self) -> CliResult<EvalParams<f64>> {
        let mut p = EvalParams::default();
        if let Some(t) = &self.iou_thresholds {
            if t.is_empty() || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CliError::Config("eval.iou_thresholds must be non-empty values in [0, 1]".into()));
            }
            p.iou_thresholds = t.clone();
        }
        p.max_dets = self.max_dets;
        Ok(p)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub rounds: usize,
    /// F-beta per round; the last entry repeats, empty means `policy.beta`.
    pub beta_schedule: Vec<f64>,
    /// Pick class-wise thresholds by F-beta search against `paths.ground_truth`
    /// instead of using `policy.tau`.
    pub optimize_thresholds: bool,
    pub policy: PseudoLabelPolicy<f64>,
}

impl Default for PseudoSection {
    fn default() -> Self {
        PseudoSection { rounds: 1, beta_schedule: Vec::new(), optimize_thresholds: false, policy: PseudoLabelPolicy::default() }
    }
}

impl PseudoSection {
    pub fn beta_for_round(&self, round: usize) -> f64 {
        self.beta_schedule
            .get(round.saturating_sub(1))
            .or(self.beta_schedule.last())
            .copied()
            .unwrap_or(self.policy.beta)
    }
}

/// One of the nine dataset/shot tasks of a submission.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmissionTask {
    /// 1, 2 or 3.
    pub dataset: usize,
    /// 1, 5 or 10.
    pub shot: usize,
    pub results: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Nms,
    Wbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictKind {
    #[default]
    Filter,
    Reclassify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownPhrase {
    #[default]
    Drop,
    Error,
}

fn default_nms_iou() -> f64 {
    fsod_core::postproc::DEFAULT_NMS_IOU
}
fn default_wbf_iou() -> f64 {
    0.55
}
fn default_area_frac() -> f64 {
    fsod_core::postproc::DEFAULT_MAX_AREA_FRAC
}
fn default_conf_floor() -> f64 {
    fsod_core::pseudo::DEFAULT_CONFIDENCE_FLOOR
}
fn default_sigma() -> f64 {
    0.5
}
fn default_soft_floor() -> f64 {
    0.001
}

/// One step of a post-processing chain. `merge` and `phrase_map` may only
/// open a chain; `merge` fuses several input sets (test-time resolutions or
/// models), otherwise sets are concatenated.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum PostOp {
    PhraseMap {
        mapping: BTreeMap<String, u64>,
        #[serde(default)]
        unknown: UnknownPhrase,
    },
    Merge {
        strategy: MergeKind,
        #[serde(default = "default_wbf_iou")]
        iou: f64,
        #[serde(default)]
        class_agnostic: bool,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Threshold {
        box_threshold: f64,
    },
    ConfidenceFloor {
        #[serde(default = "default_conf_floor")]
        floor: f64,
    },
    SizeFilter {
        #[serde(default = "default_area_frac")]
        max_area_frac: f64,
    },
    Topk {
        k: usize,
    },
    Nms {
        #[serde(default = "default_nms_iou")]
        iou: f64,
        #[serde(default)]
        class_agnostic: bool,
    },
    SoftNms {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_soft_floor")]
        score_floor: f64,
    },
    RestrictClasses {
        allowed: Vec<u64>,
        #[serde(default)]
        mode: RestrictKind,
        /// Fixed reclassification target; without it, reclassification
        /// uses the nearest prototype from `paths.prototypes`.
        #[serde(default)]
        target: Option<u64>,
    },
}

impl PipelineConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Load a config file and resolve its relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = read_bytes(path).map_err(|e| CliError::Config(e.to_string()))?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{}: not UTF-8", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.support_json,
            &mut p.support_embeddings,
            &mut p.proposals,
            &mut p.proposal_embeddings,
            &mut p.query_images,
            &mut p.ground_truth,
            &mut p.prototypes,
            &mut p.output_dir,
        ] {
            fix(slot);
        }
        for t in &mut self.submission {
            for v in [&mut t.results, &mut t.ground_truth] {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
    }

    pub fn matcher_config(&self) -> CliResult<MatcherConfig<f64>> {
        let m = &self.matcher;
        if !(0.0..=1.0).contains(&m.min_confidence) || !(0.0..=1.0).contains(&m.nms_iou) {
            return Err(CliError::Config("matcher.min_confidence and matcher.nms_iou must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.proto.alpha) || self.proto.temperature_fuse <= 0.0 {
            return Err(CliError::Config("proto.alpha must lie in [0, 1] and proto.temperature_fuse be positive".into()));
        }
        Ok(MatcherConfig {
            proto: ProtoConfig { alpha: self.proto.alpha, temperature_fuse: self.proto.temperature_fuse, n_bg: self.proto.n_bg },
            diffusion: if self.diffusion.enabled { Some(self.diffusion.to_core()?) } else { None },
            min_confidence: m.min_confidence,
            nms_iou: m.nms_iou,
            class_agnostic_nms: m.class_agnostic_nms,
        })
    }
}

/// `Some(path)` or a config error naming the missing key.
pub fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing path: {key}")))
}
