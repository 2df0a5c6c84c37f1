//! COCO-style average precision and the weighted challenge score.
//!
//! Matching and accumulation follow pycocotools for bounding boxes with a
//! single area range: detections are ranked per image and class, greedily
//! matched to the best still-unmatched ground truth at IoU >= t, then pooled
//! across images and scored with 101-point interpolated precision.

mod score;

use std::collections::{BTreeMap, HashSet};

use serde_json::json;

use crate::detcore::{iou, CategoryId, DatasetSplit, Detection, ImageId};
use crate::error::{Error, Result};
use crate::scalar::{desc, Scalar};

pub use score::{
    challenge_score, parse_decimal, round_half_even_2dp, round_half_even_2dp_exact, ScoreCard,
    SHOTS,
};

pub const DEFAULT_MAX_DETS: usize = 100;

/// `n` evenly spaced values from `start` to `stop`, computed like
/// `numpy.linspace` so threshold comparisons agree bit-for-bit.
pub fn linspace<T: Scalar>(start: f64, stop: f64, n: usize) -> Vec<T> {
    let div = (n - 1) as f64;
    let step = (stop - start) / div;
    (0..n)
        .map(|i| if i + 1 == n { stop } else { i as f64 * step + start })
        .map(T::lit)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams<T> {
    pub iou_thresholds: Vec<T>,
    pub recall_thresholds: Vec<T>,
    /// Per image and class.
    pub max_dets: usize,
}

impl<T: Scalar> Default for EvalParams<T> {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: linspace(0.5, 0.95, 10),
            recall_thresholds: linspace(0.0, 1.0, 101),
            max_dets: DEFAULT_MAX_DETS,
        }
    }
}

impl<T: Scalar> EvalParams<T> {
    pub fn with_iou_thresholds(iou_thresholds: Vec<T>) -> Self {
        EvalParams {
            iou_thresholds,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<T> {
    /// AP averaged over IoU thresholds, for classes with ground truth.
    pub per_class_ap: BTreeMap<CategoryId, T>,
    /// AP at each IoU threshold, same order as `iou_thresholds`.
    pub per_class_ap_by_iou: BTreeMap<CategoryId, Vec<T>>,
    pub map: T,
    pub iou_thresholds: Vec<T>,
}

impl<T: Scalar> EvalReport<T> {
    /// mAP at one IoU threshold index.
    pub fn map_at(&self, t: usize) -> T {
        mean(self.per_class_ap_by_iou.values().map(|v| v[t]))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class_ap
            .iter()
            .map(|(c, ap)| (c.to_string(), json!(ap.to_f64_lossy())))
            .collect();
        json!({
            "per_class_ap": per_class,
            "map": self.map.to_f64_lossy(),
            "iou_thresholds": self.iou_thresholds.iter().map(|t| t.to_f64_lossy()).collect::<Vec<_>>(),
        })
    }
}

fn mean<T: Scalar>(it: impl Iterator<Item = T>) -> T {
    let (sum, n) = it.fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_usize_lossy(n)
    }
}

/// Outcome of one image/class/threshold matching pass, in ranked order.
struct ImageMatches<T> {
    scores: Vec<T>,
    /// `matched[t][d]`: detection `d` is a true positive at threshold `t`.
    matched: Vec<Vec<bool>>,
}

fn match_image<T: Scalar>(
    dets: &[&Detection<T>],
    gts: &[&crate::detcore::Annotation<T>],
    thresholds: &[T],
) -> ImageMatches<T> {
    let ious: Vec<Vec<T>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let cap = T::one() - T::lit(1e-10);
    let matched = thresholds
        .iter()
        .map(|&t| {
            let mut gt_taken = vec![false; gts.len()];
            ious.iter()
                .map(|row| {
                    let mut best_iou = t.min(cap);
                    let mut best = None;
                    for (g, &v) in row.iter().enumerate() {
                        if gt_taken[g] || v < best_iou {
                            continue;
                        }
                        best_iou = v;
                        best = Some(g);
                    }
                    if let Some(g) = best {
                        gt_taken[g] = true;
                    }
                    best.is_some()
                })
                .collect()
        })
        .collect();
    ImageMatches {
        scores: dets.iter().map(|d| d.score).collect(),
        matched,
    }
}

/// Interpolated precision averaged over the recall thresholds.
fn average_precision<T: Scalar>(tp_flags: &[bool], num_gt: usize, recall_thresholds: &[T]) -> T {
    let n = tp_flags.len();
    let mut rc = Vec::with_capacity(n);
    let mut pr = Vec::with_capacity(n);
    let (mut tp, mut fp) = (T::zero(), T::zero());
    let total = T::from_usize_lossy(num_gt);
    for &hit in tp_flags {
        if hit {
            tp += T::one();
        } else {
            fp += T::one();
        }
        rc.push(tp / total);
        pr.push(tp / (tp + fp));
    }
    for d in (0..n.saturating_sub(1)).rev() {
        pr[d] = pr[d].max(pr[d + 1]);
    }
    let q = recall_thresholds.iter().map(|&r| {
        let idx = rc.partition_point(|&v| v < r);
        if idx < n {
            pr[idx]
        } else {
            T::zero()
        }
    });
    mean(q)
}

/// COCO bounding-box mAP of `dets` against the annotations of `gt`.
///
/// Classes without ground truth are left out of the mean. Detections on
/// categories absent from `gt` are ignored.
pub fn coco_map<T: Scalar>(
    dets: &[Detection<T>],
    gt: &DatasetSplit<T>,
    params: &EvalParams<T>,
) -> Result<EvalReport<T>> {
    if gt.annotations.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let known: HashSet<ImageId> = gt.images.iter().map(|i| i.id).collect();
    if let Some(d) = dets.iter().find(|d| !known.contains(&d.image_id)) {
        return Err(Error::UnknownImageId(d.image_id));
    }

    type Key = (CategoryId, ImageId);
    let mut gt_by: BTreeMap<Key, Vec<_>> = BTreeMap::new();
    for a in &gt.annotations {
        gt_by.entry((a.category_id, a.image_id)).or_default().push(a);
    }
    let mut dt_by: BTreeMap<Key, Vec<&Detection<T>>> = BTreeMap::new();
    for d in dets {
        dt_by.entry((d.category_id, d.image_id)).or_default().push(d);
    }
    for v in dt_by.values_mut() {
        v.sort_by(|a, b| desc(a.score, b.score));
        v.truncate(params.max_dets);
    }

    let mut image_ids: Vec<ImageId> = known.into_iter().collect();
    image_ids.sort();
    let mut cat_ids: Vec<CategoryId> = gt.categories.iter().map(|c| c.id).collect();
    cat_ids.sort();

    let n_thr = params.iou_thresholds.len();
    let mut per_class_ap_by_iou = BTreeMap::new();
    for &c in &cat_ids {
        let num_gt: usize = image_ids
            .iter()
            .map(|&i| gt_by.get(&(c, i)).map_or(0, Vec::len))
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut scores = Vec::new();
        let mut matched: Vec<Vec<bool>> = vec![Vec::new(); n_thr];
        for &i in &image_ids {
            let ds = dt_by.get(&(c, i)).map_or(&[][..], Vec::as_slice);
            let gs = gt_by.get(&(c, i)).map_or(&[][..], Vec::as_slice);
            let m = match_image(ds, gs, &params.iou_thresholds);
            scores.extend(m.scores);
            for (acc, row) in matched.iter_mut().zip(m.matched) {
                acc.extend(row);
            }
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| desc(scores[a], scores[b]));
        let aps = matched
            .iter()
            .map(|flags| {
                let ranked: Vec<bool> = order.iter().map(|&k| flags[k]).collect();
                average_precision(&ranked, num_gt, &params.recall_thresholds)
            })
            .collect::<Vec<T>>();
        per_class_ap_by_iou.insert(c, aps);
    }

    let per_class_ap: BTreeMap<CategoryId, T> = per_class_ap_by_iou
        .iter()
        .map(|(&c, v)| (c, mean(v.iter().copied())))
        .collect();
    let map = mean(per_class_ap.values().copied());
    Ok(EvalReport {
        per_class_ap,
        per_class_ap_by_iou,
        map,
        iou_thresholds: params.iou_thresholds.clone(),
    })
}

/// `(1 + b^2) P R / (b^2 P + R)`, zero when undefined.
pub fn fbeta<T: Scalar>(tp: usize, fp: usize, fn_: usize, beta: T) -> T {
    if tp == 0 {
        return T::zero();
    }
    let tp_ = T::from_usize_lossy(tp);
    let p = tp_ / T::from_usize_lossy(tp + fp);
    let r = tp_ / T::from_usize_lossy(tp + fn_);
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom > T::zero() {
        (T::one() + b2) * p * r / denom
    } else {
        T::zero()
    }
}
