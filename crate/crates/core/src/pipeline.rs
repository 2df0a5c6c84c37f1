//! In-memory detection pipeline: prototypes, matching, diffusion, score
//! floor and NMS.

use crate::detcore::{Detection, ResultRecord};
use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::matching::{classify, diffuse, DiffusionConfig, Proposal, DEFAULT_MIN_CONFIDENCE};
use crate::postproc::{nms, threshold_filter, DEFAULT_NMS_IOU};
use crate::proto::{build_prototypes, ProtoConfig, QualityWeights};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct MatcherConfig<T> {
    pub proto: ProtoConfig<T>,
    /// `None` skips diffusion.
    pub diffusion: Option<DiffusionConfig<T>>,
    /// Applied after diffusion, before NMS; inclusive.
    pub min_confidence: T,
    pub nms_iou: T,
    pub class_agnostic_nms: bool,
}

impl<T: Scalar> Default for MatcherConfig<T> {
    fn default() -> Self {
        MatcherConfig {
            proto: ProtoConfig::default(),
            diffusion: Some(DiffusionConfig::default()),
            min_confidence: T::lit(DEFAULT_MIN_CONFIDENCE),
            nms_iou: T::lit(DEFAULT_NMS_IOU),
            class_agnostic_nms: false,
        }
    }
}

/// Support embeddings and scored proposals in, detections out.
pub fn run_matcher<T: Scalar>(
    support: &EmbeddingStore<T>,
    weights: Option<&QualityWeights<T>>,
    proposals: &[Proposal<T>],
    proposal_store: &EmbeddingStore<T>,
    cfg: &MatcherConfig<T>,
) -> Result<Vec<Detection<T>>> {
    let protos = build_prototypes(support, weights, &cfg.proto)?;
    let fuse = cfg.diffusion.is_some_and(|d| d.fuse_objectness);
    let mut dets = classify(proposals, &protos, proposal_store, fuse)?;
    if let Some(d) = &cfg.diffusion {
        dets = diffuse(&dets, d);
    }
    let dets = threshold_filter(&dets, cfg.min_confidence);
    Ok(nms(&dets, cfg.nms_iou, cfg.class_agnostic_nms))
}

/// Proposals from a results-format file: the score is objectness and `id`
/// names the embedding. Records without an id use the entry at the same
/// position in `store`.
pub fn proposals_from_records<T: Scalar>(
    records: &[ResultRecord<T>],
    store: &EmbeddingStore<T>,
) -> Result<Vec<Proposal<T>>> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let embedding_id = match r.id {
                Some(id) => id,
                None => store
                    .entries()
                    .get(k)
                    .map(|e| e.entry_id)
                    .ok_or_else(|| Error::Sidecar(format!("proposal {k} has no id and no embedding at that position")))?,
            };
            store.vector(embedding_id)?;
            Ok(Proposal {
                image_id: r.detection.image_id,
                bbox: r.detection.bbox,
                objectness: r.detection.score,
                embedding_id,
            })
        })
        .collect()
}

/// The inverse of [`proposals_from_records`], always writing ids.
pub fn proposals_to_records<T: Scalar>(proposals: &[Proposal<T>]) -> Vec<ResultRecord<T>> {
    proposals
        .iter()
        .map(|p| ResultRecord {
            id: Some(p.embedding_id),
            detection: Detection::new(p.image_id, p.bbox, crate::detcore::CategoryId(0), p.objectness),
            phrase: None,
        })
        .collect()
}
