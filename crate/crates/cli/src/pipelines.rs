//! End-to-end pipelines over files: matching, post-processing chains,
//! pseudo-label rounds and submission scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use fsod_core::detcore::{DatasetSplit, Detection, ImageInfo, ResultRecord};
use fsod_core::embed::{Embedding, EmbeddingStore, StoreEntry, StoreKind};
use fsod_core::eval::{challenge_score, coco_map, EvalReport, ScoreCard};
use fsod_core::pipeline::{proposals_from_records, run_matcher};
use fsod_core::postproc::{
    multiscale_tta_merge, nms, phrase_map, restrict_classes, size_filter, soft_nms, threshold_filter,
    topk_per_image, MergeStrategy, PhraseDetection, RemapTarget, RestrictMode, UnknownPhrasePolicy,
};
use fsod_core::proto::build_prototypes;
use fsod_core::pseudo::{
    confidence_floor, merge_with_gt, optimize_thresholds, select_pseudo, select_pseudo_by_class, sentinel_tau,
    DEFAULT_MATCH_IOU,
};
use fsod_core::matching::Proposal;
use fsod_core::{CategoryId, ImageId};
use serde_json::json;

use crate::config::{require, MergeKind, PipelineConfig, PostOp, RestrictKind, UnknownPhrase};
use crate::error::{CliError, CliResult};
use crate::io::{load_records, load_split, load_store, save_store, write_atomic, write_detections, write_json};

/// Inputs a chain may need besides the detections themselves.
#[derive(Debug, Default)]
pub struct ChainContext {
    pub image_sizes: Option<BTreeMap<ImageId, (f64, f64)>>,
    pub prototypes: Option<BTreeMap<CategoryId, Embedding<f64>>>,
}

impl ChainContext {
    /// Load whatever the configured chain needs.
    pub fn for_config(cfg: &PipelineConfig, images: Option<&DatasetSplit<f64>>) -> CliResult<Self> {
        let mut ctx = ChainContext::default();
        let needs_sizes = cfg.postproc.iter().any(|op| matches!(op, PostOp::SizeFilter { .. }));
        if needs_sizes {
            ctx.image_sizes = match images {
                Some(s) => Some(s.image_sizes()),
                None => Some(load_split(require(&cfg.paths.ground_truth, "paths.ground_truth (image sizes)")?)?.image_sizes()),
            };
        }
        let needs_protos = cfg.postproc.iter().any(|op| {
            matches!(op, PostOp::RestrictClasses { mode: RestrictKind::Reclassify, target: None, .. })
        });
        if needs_protos {
            let store = load_store(require(&cfg.paths.prototypes, "paths.prototypes")?)?;
            ctx.prototypes = Some(
                store
                    .entries()
                    .iter()
                    .filter_map(|e| e.category_id.map(|c| (c, e.vector.clone())))
                    .collect(),
            );
        }
        Ok(ctx)
    }
}

/// Run a post-processing chain over one or more detection sets.
pub fn apply_chain(sets: Vec<Vec<ResultRecord<f64>>>, ops: &[PostOp], ctx: &ChainContext) -> CliResult<Vec<Detection<f64>>> {
    let mut rest = ops;
    let mut sets: Vec<Vec<Detection<f64>>> = match rest.first() {
        Some(PostOp::PhraseMap { mapping, unknown }) => {
            rest = &rest[1..];
            let table: HashMap<String, CategoryId> = mapping.iter().map(|(k, &v)| (k.clone(), CategoryId(v))).collect();
            let policy = match unknown {
                UnknownPhrase::Drop => UnknownPhrasePolicy::Drop,
                UnknownPhrase::Error => UnknownPhrasePolicy::Error,
            };
            sets.into_iter()
                .map(|records| {
                    let with_phrases: Vec<PhraseDetection<f64>> = records
                        .into_iter()
                        .map(|r| PhraseDetection { detection: r.detection, phrase: r.phrase.unwrap_or_default() })
                        .collect();
                    phrase_map(&with_phrases, &table, policy).map_err(CliError::from)
                })
                .collect::<CliResult<_>>()?
        }
        _ => sets.into_iter().map(|rs| rs.into_iter().map(|r| r.detection).collect()).collect(),
    };
    let mut dets: Vec<Detection<f64>> = match rest.first() {
        Some(PostOp::Merge { strategy, iou, class_agnostic, weights }) => {
            rest = &rest[1..];
            let strategy = match strategy {
                MergeKind::Nms => MergeStrategy::Nms { iou_thresh: *iou, class_agnostic: *class_agnostic },
                MergeKind::Wbf => MergeStrategy::Wbf { iou_thresh: *iou, weights: weights.clone() },
            };
            multiscale_tta_merge(&sets, &strategy)?
        }
        _ => sets.drain(..).flatten().collect(),
    };
    for op in rest {
        dets = match op {
            PostOp::PhraseMap { .. } | PostOp::Merge { .. } => {
                return Err(CliError::Config("phrase_map and merge may only open a post-processing chain".into()))
            }
            PostOp::Threshold { box_threshold } => threshold_filter(&dets, *box_threshold),
            PostOp::ConfidenceFloor { floor } => confidence_floor(&dets, *floor),
            PostOp::SizeFilter { max_area_frac } => {
                let sizes = ctx.image_sizes.as_ref().ok_or_else(|| CliError::Config("size_filter needs image sizes".into()))?;
                size_filter(&dets, sizes, *max_area_frac)?
            }
            PostOp::Topk { k } => topk_per_image(&dets, *k),
            PostOp::Nms { iou, class_agnostic } => nms(&dets, *iou, *class_agnostic),
            PostOp::SoftNms { sigma, score_floor } => soft_nms(&dets, *sigma, *score_floor)?,
            PostOp::RestrictClasses { allowed, mode, target } => {
                let allowed: BTreeSet<CategoryId> = allowed.iter().map(|&c| CategoryId(c)).collect();
                let mode = match (mode, target) {
                    (RestrictKind::Filter, _) => RestrictMode::Filter,
                    (RestrictKind::Reclassify, Some(t)) => RestrictMode::Reclassify(RemapTarget::Fixed(CategoryId(*t))),
                    (RestrictKind::Reclassify, None) => {
                        let protos = ctx
                            .prototypes
                            .clone()
                            .ok_or_else(|| CliError::Config("nearest-prototype reclassification needs paths.prototypes".into()))?;
                        RestrictMode::Reclassify(RemapTarget::NearestPrototype(protos))
                    }
                };
                restrict_classes(&dets, &allowed, &mode)?
            }
        };
    }
    Ok(dets)
}

/// Ordered by image, then descending score; stable.
pub fn sorted_for_output(mut dets: Vec<Detection<f64>>) -> Vec<Detection<f64>> {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal))
    });
    dets
}

pub struct MatchInputs {
    pub support_store: EmbeddingStore<f64>,
    pub proposals: Vec<Proposal<f64>>,
    pub proposal_records: Vec<ResultRecord<f64>>,
    pub proposal_store: EmbeddingStore<f64>,
}

pub fn load_match_inputs(cfg: &PipelineConfig) -> CliResult<MatchInputs> {
    let support_store = load_store(require(&cfg.paths.support_embeddings, "paths.support_embeddings")?)?;
    let prop_path = require(&cfg.paths.proposals, "paths.proposals")?;
    let proposal_store = load_store(require(&cfg.paths.proposal_embeddings, "paths.proposal_embeddings")?)?;
    let proposal_records = load_records(prop_path)?;
    let proposals = proposals_from_records(&proposal_records, &proposal_store).map_err(|e| CliError::from_core(prop_path, e))?;
    Ok(MatchInputs { support_store, proposals, proposal_records, proposal_store })
}

pub struct MatchOutput {
    pub detections: Vec<Detection<f64>>,
    pub report: Option<EvalReport<f64>>,
}

fn detect(cfg: &PipelineConfig, support: &EmbeddingStore<f64>, inputs: &MatchInputs, gt: Option<&DatasetSplit<f64>>) -> CliResult<Vec<Detection<f64>>> {
    let matcher = cfg.matcher_config()?;
    let raw = run_matcher(support, None, &inputs.proposals, &inputs.proposal_store, &matcher)?;
    let ctx = ChainContext::for_config(cfg, gt)?;
    let records = raw.into_iter().map(|detection| ResultRecord { id: None, detection, phrase: None }).collect();
    Ok(sorted_for_output(apply_chain(vec![records], &cfg.postproc, &ctx)?))
}

/// Match, diffuse, post-process and, when ground truth is configured,
/// evaluate. Writes `results.json` and `report.json` into `out_dir`.
pub fn run_match(cfg: &PipelineConfig, out_dir: &Path) -> CliResult<MatchOutput> {
    let inputs = load_match_inputs(cfg)?;
    let gt = cfg.paths.ground_truth.as_deref().map(load_split).transpose()?;
    let detections = detect(cfg, &inputs.support_store, &inputs, gt.as_ref())?;
    let report = match &gt {
        Some(g) => Some(coco_map(&detections, g, &cfg.eval.to_core()?)?),
        None => None,
    };
    write_detections(&out_dir.join("results.json"), &detections)?;
    let report_json = match &report {
        Some(r) => r.to_json(),
        None => json!({ "detections": detections.len() }),
    };
    write_json(&out_dir.join("report.json"), &report_json)?;
    Ok(MatchOutput { detections, report })
}

/// One pseudo-labeling round's outcome.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub round: usize,
    pub beta: f64,
    pub added: usize,
    pub merged: DatasetSplit<f64>,
}

/// Repeated detect, select, merge passes. Each round's merged split and
/// enlarged support store feed the next round; the retraining step of a
/// learned detector is replaced by re-running the matcher.
///
/// Writes `round_<r>/merged.json`, `round_<r>/pseudo.json`,
/// `round_<r>/support.cdfe` and a `rounds.json` summary.
pub fn run_pseudo_rounds(cfg: &PipelineConfig, rounds: usize, out_dir: &Path) -> CliResult<Vec<RoundOutput>> {
    let policy = cfg.pseudo.policy;
    policy.validate()?;
    let mut split = load_split(require(&cfg.paths.support_json, "paths.support_json")?)?;
    let inputs = load_match_inputs(cfg)?;
    let gt = cfg.paths.ground_truth.as_deref().map(load_split).transpose()?;
    if cfg.pseudo.optimize_thresholds && gt.is_none() {
        return Err(CliError::Config("pseudo.optimize_thresholds needs paths.ground_truth".into()));
    }
    let query_images: BTreeMap<ImageId, ImageInfo> = match &cfg.paths.query_images {
        Some(p) => load_split(p)?.images.into_iter().map(|i| (i.id, i)).collect(),
        None => inputs
            .proposals
            .iter()
            .map(|p| (p.image_id, ImageInfo { id: p.image_id, width: 0, height: 0, file_name: String::new() }))
            .collect(),
    };
    let by_box: HashMap<(ImageId, [u64; 4]), u64> = inputs
        .proposals
        .iter()
        .rev()
        .map(|p| ((p.image_id, p.bbox.as_array().map(f64::to_bits)), p.embedding_id))
        .collect();

    let mut support = inputs.support_store.clone();
    let mut outputs = Vec::new();
    for round in 1..=rounds {
        let beta = cfg.pseudo.beta_for_round(round);
        let dets = detect(cfg, &support, &inputs, gt.as_ref())?;
        let (selected, taus) = match (&gt, cfg.pseudo.optimize_thresholds) {
            (Some(g), true) => {
                let taus = optimize_thresholds(&dets, g, beta, DEFAULT_MATCH_IOU)?;
                (select_pseudo_by_class(&dets, &taus, sentinel_tau()), Some(taus))
            }
            _ => (select_pseudo(&dets, policy.tau), None),
        };
        let merged = merge_with_gt(&selected, &split.annotations, &policy)?;
        let new = &merged[split.annotations.len()..];

        let mut images = split.images.clone();
        let known: BTreeSet<ImageId> = images.iter().map(|i| i.id).collect();
        let wanted: BTreeSet<ImageId> = new.iter().map(|a| a.image_id).filter(|i| !known.contains(i)).collect();
        for id in wanted {
            images.push(query_images.get(&id).cloned().ok_or(CliError::Data(format!("pseudo-label on unknown image {id}")))?);
        }
        let mut next_entry = support.entries().iter().map(|e| e.entry_id).max().unwrap_or(0) + 1;
        for a in new {
            let key = (a.image_id, a.bbox.as_array().map(f64::to_bits));
            let source = by_box
                .get(&key)
                .ok_or_else(|| CliError::Internal(format!("no proposal behind pseudo-label {}", a.id)))?;
            support.push(StoreEntry {
                entry_id: next_entry,
                image_id: a.image_id,
                bbox: Some(a.bbox),
                category_id: Some(a.category_id),
                vector: inputs.proposal_store.vector(*source)?.clone(),
            })?;
            next_entry += 1;
        }
        split = DatasetSplit::new(images, merged.clone(), split.categories.clone())?;

        let dir = out_dir.join(format!("round_{round}"));
        let merged_bytes = fsod_core::detcore::emit_split(&split)?;
        write_atomic(&dir.join("merged.json"), &merged_bytes)?;
        write_detections(&dir.join("pseudo.json"), &sorted_for_output(selected.clone()))?;
        save_store(&dir.join("support.cdfe"), &support)?;
        if let Some(t) = taus {
            let m: serde_json::Map<String, serde_json::Value> = t.iter().map(|(c, v)| (c.to_string(), json!(v))).collect();
            write_json(&dir.join("thresholds.json"), &serde_json::Value::Object(m))?;
        }
        outputs.push(RoundOutput { round, beta, added: new.len(), merged: split.clone() });
    }
    let summary: Vec<serde_json::Value> = outputs
        .iter()
        .map(|r| json!({ "round": r.round, "beta": r.beta, "added": r.added, "annotations": r.merged.annotations.len() }))
        .collect();
    write_json(&out_dir.join("rounds.json"), &json!(summary))?;
    Ok(outputs)
}

/// Fill the nine cells (mAP in percent) from result/ground-truth pairs and
/// compute the weighted score.
pub fn score_submission(cfg: &PipelineConfig) -> CliResult<(ScoreCard<f64>, Vec<serde_json::Value>)> {
    let mut cells: [[Option<f64>; 3]; 3] = [[None; 3]; 3];
    let params = cfg.eval.to_core()?;
    let mut tasks = Vec::new();
    for t in &cfg.submission {
        let d = t.dataset.checked_sub(1).filter(|&d| d < 3).ok_or_else(|| CliError::Config(format!("dataset {} not in 1..=3", t.dataset)))?;
        let s = fsod_core::eval::SHOTS
            .iter()
            .position(|&k| k == t.shot)
            .ok_or_else(|| CliError::Config(format!("shot {} not in {{1, 5, 10}}", t.shot)))?;
        if cells[d][s].is_some() {
            return Err(CliError::Config(format!("dataset {} shot {} listed twice", t.dataset, t.shot)));
        }
        let gt = load_split(&t.ground_truth)?;
        let dets: Vec<Detection<f64>> = load_records(&t.results)?.into_iter().map(|r| r.detection).collect();
        let map = coco_map(&dets, &gt, &params).map_err(|e| CliError::from_core(&t.results, e))?.map;
        cells[d][s] = Some(100.0 * map);
        tasks.push(json!({ "dataset": t.dataset, "shot": t.shot, "map": map }));
    }
    let mut full = [[0.0; 3]; 3];
    for d in 0..3 {
        for s in 0..3 {
            full[d][s] = cells[d][s].ok_or_else(|| {
                CliError::Config(format!("submission lacks dataset {} shot {}", d + 1, fsod_core::eval::SHOTS[s]))
            })?;
        }
    }
    Ok((ScoreCard { cells: full, score: challenge_score(&full) }, tasks))
}

/// Prototype store: class prototypes carry their category, background
/// prototypes none.
pub fn build_prototype_store(cfg: &PipelineConfig, support: &EmbeddingStore<f64>) -> CliResult<EmbeddingStore<f64>> {
    let matcher = cfg.matcher_config()?;
    let protos = build_prototypes(support, None, &matcher.proto)?;
    let mut store = EmbeddingStore::new(support.dim(), StoreKind::Support);
    let mut id = 1;
    for (&c, v) in &protos.class_protos {
        store.push(StoreEntry { entry_id: id, image_id: ImageId(0), bbox: None, category_id: Some(c), vector: v.clone() })?;
        id += 1;
    }
    for v in &protos.bg_protos {
        store.push(StoreEntry { entry_id: id, image_id: ImageId(0), bbox: None, category_id: None, vector: v.clone() })?;
        id += 1;
    }
    store.metadata = Some(json!({ "alpha": protos.alpha, "temperature_fuse": protos.temperature_fuse }));
    Ok(store)
}
