//! Proposal classification against prototypes and confidence diffusion over
//! the proposal-overlap graph.

use std::collections::BTreeMap;

use crate::detcore::{iou, BBox, CategoryId, Detection, ImageId};
use crate::embed::{cosine, EmbeddingStore};
use crate::error::Result;
use crate::proto::PrototypeSet;
use crate::scalar::Scalar;

pub const DEFAULT_DIFFUSION_STEPS: usize = 30;
pub const DEFAULT_DIFFUSION_ALPHA: f64 = 0.3;
/// Minimum confidence kept after diffusion, before NMS.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.01;

/// Category-agnostic region proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal<T> {
    pub image_id: ImageId,
    pub bbox: BBox<T>,
    pub objectness: T,
    pub embedding_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig<T> {
    pub steps: usize,
    /// Weight of the propagated term, in `[0, 1)`.
    pub alpha: T,
    /// Edges need IoU strictly above this.
    pub edge_iou_min: T,
    /// Score becomes the geometric mean of matched cosine and objectness.
    pub fuse_objectness: bool,
}

impl<T: Scalar> Default for DiffusionConfig<T> {
    fn default() -> Self {
        DiffusionConfig {
            steps: DEFAULT_DIFFUSION_STEPS,
            alpha: T::lit(DEFAULT_DIFFUSION_ALPHA),
            edge_iou_min: T::zero(),
            fuse_objectness: false,
        }
    }
}

/// Label each proposal with its best-matching class.
///
/// Score is `(cos + 1) / 2` of the winning prototype, or its geometric mean
/// with objectness when `fuse_objectness` is set. A proposal whose best
/// background similarity beats its best class similarity is dropped. Ties go
/// to the lower category id.
pub fn classify<T: Scalar>(
    proposals: &[Proposal<T>],
    protos: &PrototypeSet<T>,
    store: &EmbeddingStore<T>,
    fuse_objectness: bool,
) -> Result<Vec<Detection<T>>> {
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let q = store.vector(p.embedding_id)?;
        let mut best: Option<(CategoryId, T)> = None;
        for (&c, proto) in &protos.class_protos {
            let s = cosine(q, proto)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        let Some((category_id, sim)) = best else {
            continue;
        };
        let mut bg_best = T::neg_infinity();
        for bg in &protos.bg_protos {
            bg_best = bg_best.max(cosine(q, bg)?);
        }
        if bg_best > sim {
            continue;
        }
        let mapped = (sim + T::one()) * half;
        let score = if fuse_objectness {
            (mapped * p.objectness).sqrt()
        } else {
            mapped
        };
        out.push(Detection::new(p.image_id, p.bbox, category_id, score.min(T::one()).max(T::zero())));
    }
    Ok(out)
}

/// Row-normalized IoU adjacency; isolated nodes get a self-loop.
fn overlap_graph<T: Scalar>(boxes: &[BBox<T>], edge_iou_min: T) -> Vec<Vec<(usize, T)>> {
    (0..boxes.len())
        .map(|i| {
            let mut row: Vec<(usize, T)> = (0..boxes.len())
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let w = iou(&boxes[i], &boxes[j]);
                    (w > edge_iou_min && w > T::zero()).then_some((j, w))
                })
                .collect();
            let total: T = row.iter().map(|&(_, w)| w).sum();
            if row.is_empty() {
                row.push((i, T::one()));
            } else {
                row.iter_mut().for_each(|(_, w)| *w /= total);
            }
            row
        })
        .collect()
}

fn diffuse_scores<T: Scalar>(boxes: &[BBox<T>], s0: &[T], cfg: &DiffusionConfig<T>) -> Vec<T> {
    let graph = overlap_graph(boxes, cfg.edge_iou_min);
    let keep = T::one() - cfg.alpha;
    let mut s = s0.to_vec();
    for _ in 0..cfg.steps {
        s = graph
            .iter()
            .zip(s0)
            .map(|(row, &base)| {
                let spread: T = row.iter().map(|&(j, w)| w * s[j]).sum();
                keep * base + cfg.alpha * spread
            })
            .collect();
    }
    s.into_iter().map(|v| v.max(T::zero()).min(T::one())).collect()
}

/// Per image, iterate `s <- (1 - alpha) s0 + alpha W s` for `cfg.steps` rounds.
///
/// `W` links boxes of the same image whose IoU exceeds `edge_iou_min`,
/// weighted by IoU and row-normalized. Boxes, classes and order are kept.
pub fn diffuse<T: Scalar>(dets: &[Detection<T>], cfg: &DiffusionConfig<T>) -> Vec<Detection<T>> {
    let mut groups: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry(d.image_id).or_default().push(i);
    }
    let mut out = dets.to_vec();
    for idx in groups.values() {
        let boxes: Vec<BBox<T>> = idx.iter().map(|&i| dets[i].bbox).collect();
        let s0: Vec<T> = idx.iter().map(|&i| dets[i].score).collect();
        for (&i, s) in idx.iter().zip(diffuse_scores(&boxes, &s0, cfg)) {
            out[i].score = s;
        }
    }
    out
}

/// Pluggable box refinement (e.g. a mask model's tight box).
pub trait BoxRefiner<T> {
    fn refine(&self, det: &Detection<T>) -> Result<BBox<T>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl<T: Scalar> BoxRefiner<T> for IdentityRefiner {
    fn refine(&self, det: &Detection<T>) -> Result<BBox<T>> {
        Ok(det.bbox)
    }
}

/// Replace every box by the refiner's output; the first failure aborts.
pub fn refine_boxes<T: Scalar, R: BoxRefiner<T> + ?Sized>(
    dets: &[Detection<T>],
    refiner: &R,
) -> Result<Vec<Detection<T>>> {
    dets.iter()
        .map(|d| {
            Ok(Detection {
                bbox: refiner.refine(d)?,
                ..*d
            })
        })
        .collect()
}
