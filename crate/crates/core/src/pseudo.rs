//! Pseudo-label selection, class-wise threshold search, merging with ground
//! truth and the FSOD-mAP quality proxy.
//!
//! Pseudo-label selection is strict (`score > tau`); `confidence_floor` is
//! inclusive like the other detection filters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detcore::{iou, Annotation, AnnotationId, CategoryId, DatasetSplit, Detection, ImageId};
use crate::error::{Error, Result};
use crate::eval::{coco_map, fbeta, EvalParams};
use crate::scalar::{desc, Scalar};

pub const DEFAULT_DEDUP_IOU_GT: f64 = 0.8;
pub const DEFAULT_DEDUP_IOU_SUPPORT: f64 = 0.70;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_FSOD_IOU_FLOOR: f64 = 0.3;
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.8;

/// Which overlap rule removes pseudo-labels that duplicate existing boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupRule {
    None,
    /// Drop when IoU with a same-class GT box is strictly above `dedup_iou_gt`.
    #[default]
    GtSameClass,
    /// Drop when IoU with any GT box, whatever its class, reaches `dedup_iou_support`.
    SupportAny,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// GT boxes enter first with score 1 and are never suppressed; pseudo
    /// boxes survive only if no kept box of any class overlaps them above
    /// `nms_iou`.
    #[default]
    ClassAgnosticNms,
    Append,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelPolicy<T> {
    pub tau: T,
    pub beta: T,
    pub dedup_iou_gt: T,
    pub dedup_iou_support: T,
    pub dedup: DedupRule,
    pub merge_mode: MergeMode,
    pub nms_iou: T,
}

impl<T: Scalar> Default for PseudoLabelPolicy<T> {
    fn default() -> Self {
        PseudoLabelPolicy {
            tau: T::lit(0.5),
            beta: T::lit(0.5),
            dedup_iou_gt: T::lit(DEFAULT_DEDUP_IOU_GT),
            dedup_iou_support: T::lit(DEFAULT_DEDUP_IOU_SUPPORT),
            dedup: DedupRule::default(),
            merge_mode: MergeMode::default(),
            nms_iou: T::lit(crate::postproc::DEFAULT_NMS_IOU),
        }
    }
}

impl<T: Scalar> PseudoLabelPolicy<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        let open_unit = |v: T| v > T::zero() && v <= T::one();
        if !unit(self.tau) {
            return Err(Error::InvalidParameter(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.beta > T::zero()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, v) in [
            ("dedup_iou_gt", self.dedup_iou_gt),
            ("dedup_iou_support", self.dedup_iou_support),
            ("nms_iou", self.nms_iou),
        ] {
            if !open_unit(v) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Detections with `score > tau`.
pub fn select_pseudo<T: Scalar>(dets: &[Detection<T>], tau: T) -> Vec<Detection<T>> {
    dets.iter().filter(|d| d.score > tau).copied().collect()
}

/// Class-wise selection; classes missing from `taus` use `default_tau`.
pub fn select_pseudo_by_class<T: Scalar>(
    dets: &[Detection<T>],
    taus: &BTreeMap<CategoryId, T>,
    default_tau: T,
) -> Vec<Detection<T>> {
    dets.iter()
        .filter(|d| d.score > taus.get(&d.category_id).copied().unwrap_or(default_tau))
        .copied()
        .collect()
}

/// Threshold that selects nothing under the strict rule.
pub fn sentinel_tau<T: Scalar>() -> T {
    T::one() + T::epsilon()
}

/// Greedy score-ordered matching of one class: for each detection (best
/// first, input order among equal scores) whether it claimed a GT box.
/// Returns the flags in ranked order with the ranked scores.
fn greedy_matches<T: Scalar>(dets: &[&Detection<T>], gt: &[&Annotation<T>], iou_match: T) -> Vec<(T, bool)> {
    let mut by_image: BTreeMap<ImageId, Vec<&Annotation<T>>> = BTreeMap::new();
    for a in gt {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut taken: BTreeMap<ImageId, Vec<bool>> = by_image.iter().map(|(&i, v)| (i, vec![false; v.len()])).collect();
    let mut order: Vec<&Detection<T>> = dets.to_vec();
    order.sort_by(|a, b| desc(a.score, b.score));
    order
        .into_iter()
        .map(|d| {
            let Some(cands) = by_image.get(&d.image_id) else {
                return (d.score, false);
            };
            let used = taken.get_mut(&d.image_id).expect("same keys");
            let mut best: Option<(usize, T)> = None;
            for (k, g) in cands.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_match && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, _)) => {
                    used[k] = true;
                    (d.score, true)
                }
                None => (d.score, false),
            }
        })
        .collect()
}

/// Per-class threshold maximizing F-beta of the selected detections.
///
/// Candidates are 0, every observed score and the select-nothing sentinel
/// `1 + eps`; ties go to the highest threshold. Classes are those of `gt`
/// plus any predicted class.
pub fn optimize_thresholds<T: Scalar>(
    dets: &[Detection<T>],
    gt: &DatasetSplit<T>,
    beta: T,
    iou_match: T,
) -> Result<BTreeMap<CategoryId, T>> {
    if !(beta > T::zero()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let classes: BTreeSet<CategoryId> = gt
        .categories
        .iter()
        .map(|c| c.id)
        .chain(dets.iter().map(|d| d.category_id))
        .collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let cd: Vec<&Detection<T>> = dets.iter().filter(|d| d.category_id == c).collect();
        let cg: Vec<&Annotation<T>> = gt.annotations.iter().filter(|a| a.category_id == c).collect();
        out.insert(c, best_threshold(&cd, &cg, beta, iou_match));
    }
    Ok(out)
}

fn best_threshold<T: Scalar>(dets: &[&Detection<T>], gt: &[&Annotation<T>], beta: T, iou_match: T) -> T {
    let sentinel = sentinel_tau::<T>();
    if dets.is_empty() {
        return sentinel;
    }
    // Selection under any threshold is a prefix of the ranked list, so one
    // greedy pass gives the TP count of every prefix.
    let ranked = greedy_matches(dets, gt, iou_match);
    let n_gt = gt.len();
    let mut best = (sentinel, T::zero());
    let mut consider = |tau: T, tp: usize, selected: usize| {
        let f = fbeta(tp, selected - tp, n_gt - tp, beta);
        if f > best.1 || (f == best.1 && tau > best.0) {
            best = (tau, f);
        }
    };
    // Walk thresholds from high to low: tau = score of rank k selects ranks
    // strictly above it, i.e. the prefix before the tie group of rank k.
    let mut tp = 0;
    let mut k = 0;
    while k < ranked.len() {
        let tau = ranked[k].0;
        consider(tau, tp, k);
        let mut j = k;
        while j < ranked.len() && ranked[j].0 == tau {
            tp += usize::from(ranked[j].1);
            j += 1;
        }
        k = j;
    }
    let zero_sel = ranked.iter().filter(|r| r.0 > T::zero()).count();
    let zero_tp = ranked.iter().filter(|r| r.0 > T::zero() && r.1).count();
    consider(T::zero(), zero_tp, zero_sel);
    best.0
}

fn violates<T: Scalar>(p: &Detection<T>, g: &Annotation<T>, policy: &PseudoLabelPolicy<T>) -> bool {
    if p.image_id != g.image_id {
        return false;
    }
    let o = iou(&p.bbox, &g.bbox);
    let gt_rule = p.category_id == g.category_id && o > policy.dedup_iou_gt;
    let support_rule = o >= policy.dedup_iou_support;
    match policy.dedup {
        DedupRule::None => false,
        DedupRule::GtSameClass => gt_rule,
        DedupRule::SupportAny => support_rule,
        DedupRule::Both => gt_rule || support_rule,
    }
}

/// Merge pseudo-labels into a ground-truth annotation list.
///
/// Every input GT annotation is returned unchanged, first. Surviving pseudo
/// boxes follow with fresh ids and `is_ground_truth = false`.
pub fn merge_with_gt<T: Scalar>(
    pseudo: &[Detection<T>],
    gt: &[Annotation<T>],
    policy: &PseudoLabelPolicy<T>,
) -> Result<Vec<Annotation<T>>> {
    policy.validate()?;
    let mut candidates: Vec<&Detection<T>> = pseudo
        .iter()
        .filter(|p| !gt.iter().any(|g| violates(p, g, policy)))
        .collect();
    let mut out: Vec<Annotation<T>> = gt.to_vec();
    let mut next_id = gt.iter().map(|a| a.id.0 + 1).max().unwrap_or(1);
    if policy.merge_mode == MergeMode::ClassAgnosticNms {
        candidates.sort_by(|a, b| desc(a.score, b.score));
    }
    for p in candidates {
        if policy.merge_mode == MergeMode::ClassAgnosticNms
            && out
                .iter()
                .any(|k| k.image_id == p.image_id && iou(&k.bbox, &p.bbox) > policy.nms_iou)
        {
            continue;
        }
        out.push(Annotation {
            id: AnnotationId(next_id),
            image_id: p.image_id,
            bbox: p.bbox,
            category_id: p.category_id,
            is_ground_truth: false,
        });
        next_id += 1;
    }
    Ok(out)
}

/// Pseudo-label quality: mAP of the predictions that overlap some
/// same-class few-shot GT box with IoU above `iou_floor`.
pub fn fsod_map<T: Scalar>(
    pseudo: &[Detection<T>],
    few_shot_gt: &DatasetSplit<T>,
    iou_floor: T,
    params: &EvalParams<T>,
) -> Result<T> {
    let kept: Vec<Detection<T>> = fsod_filter(pseudo, few_shot_gt, iou_floor);
    Ok(coco_map(&kept, few_shot_gt, params)?.map)
}

/// The retention step of [`fsod_map`].
pub fn fsod_filter<T: Scalar>(pseudo: &[Detection<T>], few_shot_gt: &DatasetSplit<T>, iou_floor: T) -> Vec<Detection<T>> {
    pseudo
        .iter()
        .filter(|p| {
            few_shot_gt.annotations.iter().any(|g| {
                g.image_id == p.image_id && g.category_id == p.category_id && iou(&g.bbox, &p.bbox) > iou_floor
            })
        })
        .copied()
        .collect()
}

/// Keep `score >= floor`.
pub fn confidence_floor<T: Scalar>(dets: &[Detection<T>], floor: T) -> Vec<Detection<T>> {
    dets.iter().filter(|d| d.score >= floor).copied().collect()
}
