//! Complete synthetic few-shot tasks with known answers.

use serde::{Deserialize, Serialize};

use crate::detcore::{Annotation, AnnotationId, BBox, Category, CategoryId, DatasetSplit, ImageId, ImageInfo};
use crate::embed::{synth_clusters, EmbeddingStore, StoreEntry, StoreKind};
use crate::error::Result;
use crate::matching::Proposal;
use crate::scalar::Scalar;

const CELL: u32 = 64;
const MARGIN: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskConfig {
    pub n_classes: usize,
    /// Support instances and query objects per class.
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub objects_per_image: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            n_classes: 3,
            per_class: 5,
            dim: 16,
            spread: 0.0,
            objects_per_image: 4,
            seed: 0,
        }
    }
}

/// Support split and embeddings, query ground truth, and one proposal per
/// query object sitting exactly on its box.
#[derive(Debug, Clone)]
pub struct SynthTask<T> {
    pub support: DatasetSplit<T>,
    pub support_store: EmbeddingStore<T>,
    pub query_gt: DatasetSplit<T>,
    pub proposals: Vec<Proposal<T>>,
    pub proposal_store: EmbeddingStore<T>,
}

/// Non-overlapping slot `k` of a grid with `cols` columns; sizes vary a
/// little with `k` so boxes are not all congruent.
fn slot<T: Scalar>(k: usize, cols: usize) -> BBox<T> {
    let (cx, cy) = ((k % cols) as u32, (k / cols) as u32);
    let side = f64::from(CELL - 2 * MARGIN) - (k % 5) as f64 * 2.0;
    BBox {
        x: T::lit(f64::from(cx * CELL + MARGIN)),
        y: T::lit(f64::from(cy * CELL + MARGIN)),
        w: T::lit(side),
        h: T::lit(side * 0.75),
    }
}

pub fn synth_task<T: Scalar>(cfg: &SynthTaskConfig) -> Result<SynthTask<T>> {
    let per_image = cfg.objects_per_image.max(1);
    let cols = (per_image as f64).sqrt().ceil() as usize;
    let rows = per_image.div_ceil(cols);
    let clusters = synth_clusters::<T>(cfg.n_classes, cfg.per_class, cfg.dim, cfg.spread, cfg.seed);
    let categories: Vec<Category> = (1..=cfg.n_classes.max(1) as u64)
        .map(|c| Category { id: CategoryId(c), name: format!("class_{c}") })
        .collect();

    let mut s_images = Vec::new();
    let mut s_anns = Vec::new();
    let mut s_entries = Vec::new();
    for e in clusters.support.entries() {
        let id = e.entry_id;
        let bbox = slot::<T>(0, 1);
        s_images.push(ImageInfo { id: ImageId(id), width: CELL, height: CELL, file_name: format!("support_{id:05}.png") });
        s_anns.push(Annotation {
            id: AnnotationId(id),
            image_id: ImageId(id),
            bbox,
            category_id: e.category_id.expect("support entries are labeled"),
            is_ground_truth: true,
        });
        s_entries.push(StoreEntry { bbox: Some(bbox), ..e.clone() });
    }

    // Query image ids continue after the support images so both sets can
    // live in one split.
    let first_query = clusters.support.len() as u64 + 1;
    let n_images = clusters.queries.len().div_ceil(per_image) as u64;
    let q_images = (first_query..first_query + n_images)
        .map(|i| ImageInfo {
            id: ImageId(i),
            width: cols as u32 * CELL,
            height: rows as u32 * CELL,
            file_name: format!("query_{i:05}.png"),
        })
        .collect();
    let mut q_anns = Vec::new();
    let mut q_entries = Vec::new();
    let mut proposals = Vec::new();
    // Round-robin over classes so every image mixes categories.
    let n_q = clusters.queries.len();
    let per_class = cfg.per_class.max(1);
    let order: Vec<usize> = (0..per_class)
        .flat_map(|j| (0..n_q / per_class).map(move |c| c * per_class + j))
        .collect();
    for (k, &qi) in order.iter().enumerate() {
        let e = &clusters.queries.entries()[qi];
        let image_id = ImageId(first_query + (k / per_image) as u64);
        let bbox = slot::<T>(k % per_image, cols);
        q_anns.push(Annotation {
            id: AnnotationId(k as u64 + 1),
            image_id,
            bbox,
            category_id: clusters.labels[qi],
            is_ground_truth: true,
        });
        q_entries.push(StoreEntry { image_id, bbox: Some(bbox), ..e.clone() });
        proposals.push(Proposal { image_id, bbox, objectness: T::one(), embedding_id: e.entry_id });
    }

    Ok(SynthTask {
        support: DatasetSplit::new(s_images, s_anns, categories.clone())?,
        support_store: EmbeddingStore::from_entries(clusters.support.dim(), StoreKind::Support, s_entries)?,
        query_gt: DatasetSplit::new(q_images, q_anns, categories)?,
        proposals,
        proposal_store: EmbeddingStore::from_entries(clusters.queries.dim(), StoreKind::Proposal, q_entries)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{coco_map, EvalParams};
    use crate::pipeline::{run_matcher, MatcherConfig};

    #[test]
    fn task_shapes() {
        let cfg = SynthTaskConfig { n_classes: 4, per_class: 5, objects_per_image: 3, ..Default::default() };
        let t = synth_task::<f64>(&cfg).unwrap();
        assert_eq!(t.support.shot, Some(5));
        assert_eq!(t.support_store.len(), 20);
        assert_eq!(t.query_gt.annotations.len(), 20);
        assert_eq!(t.query_gt.images.len(), 7);
        assert_eq!(t.proposals.len(), 20);
        assert_eq!(t.query_gt.images[0].id, ImageId(21));
        for img in &t.query_gt.images {
            let boxes: Vec<_> = t.query_gt.annotations.iter().filter(|a| a.image_id == img.id).map(|a| a.bbox).collect();
            for (i, a) in boxes.iter().enumerate() {
                assert!(a.right() <= f64::from(img.width) && a.bottom() <= f64::from(img.height));
                for b in &boxes[i + 1..] {
                    assert_eq!(crate::detcore::iou(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn clean_task_is_solved_exactly() {
        for seed in 0..3 {
            let t = synth_task::<f64>(&SynthTaskConfig { seed, ..Default::default() }).unwrap();
            let dets = run_matcher(&t.support_store, None, &t.proposals, &t.proposal_store, &MatcherConfig::default()).unwrap();
            assert_eq!(dets.len(), t.query_gt.annotations.len());
            let report = coco_map(&dets, &t.query_gt, &EvalParams::default()).unwrap();
            assert_eq!(report.map, 1.0);
        }
    }
}
