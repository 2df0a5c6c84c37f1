//! Detection post-processing: suppression, fusion, thresholds, class
//! restriction and phrase-to-class mapping.
//!
//! Score thresholds here are inclusive (`score >= t` survives).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::detcore::{iou, BBox, CategoryId, Detection, ImageId};
use crate::embed::{cosine, Embedding};
use crate::error::{Error, Result};
use crate::scalar::{desc, Scalar};

pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_MAX_AREA_FRAC: f64 = 0.9;

/// Indices ordered by descending score; equal scores keep input order.
fn by_score<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| desc(dets[a].score, dets[b].score));
    order
}

/// Greedy non-maximum suppression.
///
/// A box is dropped when its IoU with a kept, higher-ranked box of the same
/// image (and class, unless `class_agnostic`) exceeds `iou_thresh`. Output is
/// in rank order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_thresh: T, class_agnostic: bool) -> Vec<Detection<T>> {
    let order = by_score(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if suppressed[j]
                || dets[j].image_id != dets[i].image_id
                || (!class_agnostic && dets[j].category_id != dets[i].category_id)
            {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Gaussian Soft-NMS.
///
/// Repeatedly takes the highest remaining score, then decays every remaining
/// same-image, same-class score by `exp(-iou^2 / sigma)`. Detections whose
/// score falls below `score_floor` are dropped.
pub fn soft_nms<T: Scalar>(dets: &[Detection<T>], sigma: T, score_floor: T) -> Result<Vec<Detection<T>>> {
    if !(sigma > T::zero()) {
        return Err(Error::InvalidParameter(format!("soft-nms sigma must be positive, got {sigma}")));
    }
    let mut pool: Vec<(usize, Detection<T>)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for k in 1..pool.len() {
            let (bi, b) = pool[best];
            let (ki, c) = pool[k];
            if c.score > b.score || (c.score == b.score && ki < bi) {
                best = k;
            }
        }
        let (_, top) = pool.swap_remove(best);
        if top.score < score_floor {
            break;
        }
        kept.push(top);
        for (_, d) in pool.iter_mut() {
            if d.image_id == top.image_id && d.category_id == top.category_id {
                let o = iou(&top.bbox, &d.bbox);
                d.score *= (-(o * o) / sigma).exp();
            }
        }
        pool.retain(|(_, d)| d.score >= score_floor);
    }
    Ok(kept)
}

/// Weighted Boxes Fusion across model outputs.
///
/// Per image and class, boxes from all sets are visited by descending
/// weighted score and joined to the first fused box they overlap with IoU at
/// or above `iou_thresh`. Fused corners are the score-weighted mean of the
/// members; the fused score is the mean member score scaled by
/// `min(models, members) / sum(weights)`. `weights` default to 1.
pub fn wbf<T: Scalar>(det_sets: &[Vec<Detection<T>>], iou_thresh: T, weights: Option<&[T]>) -> Result<Vec<Detection<T>>> {
    if det_sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let weights: Vec<T> = match weights {
        Some(w) if w.len() != det_sets.len() => {
            return Err(Error::InvalidParameter(format!(
                "{} weights for {} detection sets",
                w.len(),
                det_sets.len()
            )))
        }
        Some(w) => w.to_vec(),
        None => vec![T::one(); det_sets.len()],
    };
    if weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::InvalidParameter("wbf weights must be positive".into()));
    }
    let weight_sum: T = weights.iter().copied().sum();
    let n_models = T::from_usize_lossy(det_sets.len());

    let mut groups: BTreeMap<(ImageId, CategoryId), Vec<Detection<T>>> = BTreeMap::new();
    for (set, &w) in det_sets.iter().zip(&weights) {
        for d in set {
            let mut d = *d;
            d.score *= w;
            groups.entry((d.image_id, d.category_id)).or_default().push(d);
        }
    }

    struct Cluster<T> {
        members: Vec<Detection<T>>,
        fused: BBox<T>,
    }

    let mut out = Vec::new();
    for ((image_id, category_id), mut boxes) in groups {
        boxes.sort_by(|a, b| desc(a.score, b.score));
        let mut clusters: Vec<Cluster<T>> = Vec::new();
        for d in boxes {
            let mut best: Option<(usize, T)> = None;
            for (k, c) in clusters.iter().enumerate() {
                let o = iou(&c.fused, &d.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, _)) => {
                    let c = &mut clusters[k];
                    c.members.push(d);
                    c.fused = weighted_box(&c.members);
                }
                None => clusters.push(Cluster {
                    members: vec![d],
                    fused: d.bbox,
                }),
            }
        }
        for c in clusters {
            let n = T::from_usize_lossy(c.members.len());
            let mean: T = c.members.iter().map(|d| d.score).sum::<T>() / n;
            let score = mean * n.min(n_models) / weight_sum;
            out.push(Detection::new(image_id, c.fused, category_id, score.min(T::one())));
        }
    }
    Ok(out)
}

fn weighted_box<T: Scalar>(members: &[Detection<T>]) -> BBox<T> {
    let total: T = members.iter().map(|d| d.score).sum();
    let avg = |f: &dyn Fn(&BBox<T>) -> T| -> T {
        if total > T::zero() {
            members.iter().map(|d| d.score * f(&d.bbox)).sum::<T>() / total
        } else {
            members.iter().map(|d| f(&d.bbox)).sum::<T>() / T::from_usize_lossy(members.len())
        }
    };
    let x1 = avg(&|b| b.x);
    let y1 = avg(&|b| b.y);
    let x2 = avg(&|b| b.right());
    let y2 = avg(&|b| b.bottom());
    BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeStrategy<T> {
    Nms { iou_thresh: T, class_agnostic: bool },
    Wbf { iou_thresh: T, weights: Option<Vec<T>> },
}

/// Merge detections from several test-time resolutions, already mapped back
/// to original image coordinates.
pub fn multiscale_tta_merge<T: Scalar>(per_resolution: &[Vec<Detection<T>>], strategy: &MergeStrategy<T>) -> Result<Vec<Detection<T>>> {
    match strategy {
        MergeStrategy::Nms { iou_thresh, class_agnostic } => {
            let all: Vec<Detection<T>> = per_resolution.iter().flatten().copied().collect();
            Ok(nms(&all, *iou_thresh, *class_agnostic))
        }
        MergeStrategy::Wbf { iou_thresh, weights } => wbf(per_resolution, *iou_thresh, weights.as_deref()),
    }
}

/// Keep `score >= box_threshold`.
pub fn threshold_filter<T: Scalar>(dets: &[Detection<T>], box_threshold: T) -> Vec<Detection<T>> {
    dets.iter().filter(|d| d.score >= box_threshold).copied().collect()
}

/// Drop boxes covering more than `max_area_frac` of their image.
pub fn size_filter<T: Scalar>(
    dets: &[Detection<T>],
    image_sizes: &BTreeMap<ImageId, (T, T)>,
    max_area_frac: T,
) -> Result<Vec<Detection<T>>> {
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let &(w, h) = image_sizes.get(&d.image_id).ok_or(Error::UnknownImageId(d.image_id))?;
        if d.bbox.area() <= max_area_frac * w * h {
            out.push(*d);
        }
    }
    Ok(out)
}

fn rank_key<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> std::cmp::Ordering {
    let lex = |d: &Detection<T>| d.bbox.as_array();
    desc(a.score, b.score)
        .then(a.category_id.cmp(&b.category_id))
        .then_with(|| {
            lex(a)
                .iter()
                .zip(lex(b).iter())
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// The `k` best detections of each image, ordered by image then rank.
pub fn topk_per_image<T: Scalar>(dets: &[Detection<T>], k: usize) -> Vec<Detection<T>> {
    let mut by_image: BTreeMap<ImageId, Vec<Detection<T>>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(*d);
    }
    by_image
        .into_values()
        .flat_map(|mut v| {
            v.sort_by(rank_key);
            v.truncate(k);
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemapTarget<T> {
    /// Every disallowed detection goes to this class.
    Fixed(CategoryId),
    /// Disallowed classes go to the allowed class with the most similar prototype.
    NearestPrototype(BTreeMap<CategoryId, Embedding<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RestrictMode<T> {
    Filter,
    Reclassify(RemapTarget<T>),
}

/// Restrict detections to `allowed` classes by dropping or relabeling.
pub fn restrict_classes<T: Scalar>(
    dets: &[Detection<T>],
    allowed: &BTreeSet<CategoryId>,
    mode: &RestrictMode<T>,
) -> Result<Vec<Detection<T>>> {
    match mode {
        RestrictMode::Filter => Ok(dets.iter().filter(|d| allowed.contains(&d.category_id)).copied().collect()),
        RestrictMode::Reclassify(RemapTarget::Fixed(target)) => {
            if !allowed.contains(target) {
                return Err(Error::InvalidParameter(format!("remap target {target} is not allowed")));
            }
            Ok(dets
                .iter()
                .map(|d| Detection {
                    category_id: if allowed.contains(&d.category_id) { d.category_id } else { *target },
                    ..*d
                })
                .collect())
        }
        RestrictMode::Reclassify(RemapTarget::NearestPrototype(protos)) => {
            let mut remap: HashMap<CategoryId, CategoryId> = HashMap::new();
            let mut out = Vec::with_capacity(dets.len());
            for d in dets {
                if allowed.contains(&d.category_id) {
                    out.push(*d);
                    continue;
                }
                let target = match remap.get(&d.category_id) {
                    Some(&t) => t,
                    None => {
                        let t = nearest_allowed(d.category_id, allowed, protos)?;
                        remap.insert(d.category_id, t);
                        t
                    }
                };
                out.push(Detection { category_id: target, ..*d });
            }
            Ok(out)
        }
    }
}

fn nearest_allowed<T: Scalar>(
    from: CategoryId,
    allowed: &BTreeSet<CategoryId>,
    protos: &BTreeMap<CategoryId, Embedding<T>>,
) -> Result<CategoryId> {
    let missing = |c: CategoryId| Error::InvalidParameter(format!("no prototype for class {c}"));
    let src = protos.get(&from).ok_or_else(|| missing(from))?;
    let mut best: Option<(CategoryId, T)> = None;
    for &c in allowed {
        let s = cosine(src, protos.get(&c).ok_or_else(|| missing(c))?)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyInput)
}

/// A detection carrying the free-text phrase a grounding model produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseDetection<T> {
    pub detection: Detection<T>,
    pub phrase: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPhrasePolicy {
    #[default]
    Drop,
    Error,
}

/// Assign categories from phrases. Matching ignores case and surrounding
/// whitespace.
pub fn phrase_map<T: Scalar>(
    dets: &[PhraseDetection<T>],
    mapping: &HashMap<String, CategoryId>,
    policy: UnknownPhrasePolicy,
) -> Result<Vec<Detection<T>>> {
    let norm = |s: &str| s.trim().to_lowercase();
    let table: HashMap<String, CategoryId> = mapping.iter().map(|(k, &v)| (norm(k), v)).collect();
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        match table.get(&norm(&d.phrase)) {
            Some(&c) => out.push(Detection { category_id: c, ..d.detection }),
            None if policy == UnknownPhrasePolicy::Drop => {}
            None => return Err(Error::UnknownPhrase(d.phrase.clone())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(cat: u64, b: BBox<f64>, s: f64) -> Detection<f64> {
        Detection::new(ImageId(1), b, CategoryId(cat), s)
    }

    #[test]
    fn nms_examples() {
        let b = bx(0., 0., 10., 10.);
        let out = nms(&[det(1, b, 0.8), det(1, b, 0.9)], 0.5, false);
        assert_eq!(out, vec![det(1, b, 0.9)]);

        let disjoint = [det(1, b, 0.8), det(1, bx(20., 0., 10., 10.), 0.9), det(1, bx(40., 0., 5., 5.), 0.1)];
        assert_eq!(nms(&disjoint, 0.5, false).len(), 3);
    }

    #[test]
    fn nms_class_awareness_and_ties() {
        let b = bx(0., 0., 10., 10.);
        let two_classes = [det(1, b, 0.9), det(2, b, 0.8)];
        assert_eq!(nms(&two_classes, 0.5, false).len(), 2);
        assert_eq!(nms(&two_classes, 0.5, true), vec![det(1, b, 0.9)]);
        // equal scores: earlier input wins
        let tie = [det(2, b, 0.5), det(1, b, 0.5)];
        assert_eq!(nms(&tie, 0.5, true), vec![det(2, b, 0.5)]);
        // other images never interact
        let mut other = det(1, b, 0.4);
        other.image_id = ImageId(2);
        assert_eq!(nms(&[det(1, b, 0.9), other], 0.5, false).len(), 2);
    }

    #[test]
    fn soft_nms_examples() {
        let b = bx(0., 0., 10., 10.);
        let disjoint = [det(1, b, 0.8), det(1, bx(20., 0., 10., 10.), 0.9)];
        let out = soft_nms(&disjoint, 0.5, 0.0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().any(|d| d.score == 0.8) && out.iter().any(|d| d.score == 0.9));

        let out = soft_nms(&[det(1, b, 0.9), det(1, b, 0.8)], 0.5, 0.0).unwrap();
        let expected = 0.8 * (-2.0f64).exp();
        assert!((expected - 0.1083).abs() < 1e-4);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - expected).abs() < 1e-15);

        let mixed = [det(1, b, 1.0), det(1, bx(50., 0., 10., 10.), 0.99), det(2, b, 1.0)];
        let out = soft_nms(&mixed, 0.5, 1.0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.score == 1.0));

        assert!(soft_nms(&mixed, 0.0, 0.0).is_err());
    }

    #[test]
    fn wbf_examples() {
        let b = bx(0., 0., 10., 10.);
        let single = wbf(&[vec![det(1, b, 0.8), det(1, b, 0.6)]], 0.55, None).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].bbox, b);
        assert!((single[0].score - 0.7).abs() < 1e-15);

        let two = wbf(&[vec![det(1, b, 0.8)], vec![det(1, b, 0.6)]], 0.55, None).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].bbox, b);
        assert!((two[0].score - 0.7).abs() < 1e-15);

        let c = bx(50., 50., 10., 10.);
        let apart = wbf(&[vec![det(1, b, 0.8)], vec![det(1, c, 0.6)]], 0.55, None).unwrap();
        assert_eq!(apart.len(), 2);
        let mut scores: Vec<f64> = apart.iter().map(|d| d.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((scores[0] - 0.3).abs() < 1e-15 && (scores[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn wbf_weighted_coordinates() {
        // scores 0.75 / 0.25: x = 0.75 * 0 + 0.25 * 2
        let out = wbf(&[vec![det(1, bx(0., 0., 10., 10.), 0.75)], vec![det(1, bx(2., 0., 10., 10.), 0.25)]], 0.5, None).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.x - 0.5).abs() < 1e-12);
        assert!((out[0].bbox.w - 10.0).abs() < 1e-12);
        assert!((out[0].score - 0.5).abs() < 1e-12);
        assert!(wbf::<f64>(&[], 0.5, None).is_err());
        assert!(wbf(&[vec![det(1, bx(0., 0., 1., 1.), 0.5)]], 0.5, Some(&[0.0])).is_err());
    }

    #[test]
    fn tta_merge_delegates() {
        let b = bx(0., 0., 10., 10.);
        let sets = vec![vec![det(1, b, 0.8)], vec![det(1, b, 0.6)], vec![det(1, bx(40., 40., 5., 5.), 0.5)]];
        let n = multiscale_tta_merge(&sets, &MergeStrategy::Nms { iou_thresh: 0.5, class_agnostic: false }).unwrap();
        assert_eq!(n.len(), 2);
        let w = multiscale_tta_merge(&sets, &MergeStrategy::Wbf { iou_thresh: 0.55, weights: None }).unwrap();
        assert_eq!(w, wbf(&sets, 0.55, None).unwrap());
    }

    #[test]
    fn threshold_examples() {
        let b = bx(0., 0., 1., 1.);
        let dets = [det(1, b, 0.05), det(1, b, 0.10), det(1, b, 0.2), det(1, b, 1.0)];
        assert_eq!(threshold_filter(&dets, 0.0), dets.to_vec());
        assert_eq!(threshold_filter(&dets, 1.0), vec![det(1, b, 1.0)]);
        assert_eq!(threshold_filter(&dets[..3], 0.10).len(), 2);
    }

    #[test]
    fn size_examples() {
        let sizes: BTreeMap<_, _> = [(ImageId(1), (100.0, 100.0))].into_iter().collect();
        let full = det(1, bx(0., 0., 100., 100.), 0.5);
        let small = det(1, bx(10., 10., 30., 30.), 0.5);
        assert_eq!(size_filter(&[full, small], &sizes, 1.0).unwrap().len(), 2);
        assert!(size_filter(&[full], &sizes, 0.5).unwrap().is_empty());
        assert_eq!(size_filter(&[small], &sizes, 0.1).unwrap(), vec![small]);
        let mut stray = small;
        stray.image_id = ImageId(5);
        assert!(matches!(size_filter(&[stray], &sizes, 0.5), Err(Error::UnknownImageId(_))));
    }

    #[test]
    fn topk_examples() {
        let b = bx(0., 0., 1., 1.);
        let dets: Vec<_> = [0.3, 0.9, 0.1, 0.7, 0.5].iter().map(|&s| det(1, b, s)).collect();
        assert_eq!(topk_per_image(&dets, 10).len(), 5);
        assert!(topk_per_image(&dets, 0).is_empty());
        let top: Vec<f64> = topk_per_image(&dets, 2).iter().map(|d| d.score).collect();
        assert_eq!(top, vec![0.9, 0.7]);
        // ties: lower category, then lexicographic box
        let tied = [det(2, b, 0.5), det(1, bx(5., 0., 1., 1.), 0.5), det(1, b, 0.5)];
        let t = topk_per_image(&tied, 1);
        assert_eq!(t, vec![det(1, b, 0.5)]);
    }

    #[test]
    fn restrict_examples() {
        let b = bx(0., 0., 1., 1.);
        let dets = [det(1, b, 0.5), det(2, b, 0.6), det(1, b, 0.7), det(2, b, 0.8)];
        let all: BTreeSet<_> = [CategoryId(1), CategoryId(2)].into();
        assert_eq!(restrict_classes(&dets, &all, &RestrictMode::Filter).unwrap(), dets.to_vec());
        let only1: BTreeSet<_> = [CategoryId(1)].into();
        let fixed = restrict_classes(&dets, &only1, &RestrictMode::Reclassify(RemapTarget::Fixed(CategoryId(1)))).unwrap();
        assert!(fixed.iter().all(|d| d.category_id == CategoryId(1)));
        assert_eq!(fixed.len(), 4);
        let filtered = restrict_classes(&dets, &only1, &RestrictMode::Filter).unwrap();
        assert_eq!(filtered.len(), 2);
        assert!(filtered.iter().all(|d| d.category_id == CategoryId(1)));
        assert!(restrict_classes(&dets, &only1, &RestrictMode::Reclassify(RemapTarget::Fixed(CategoryId(2)))).is_err());
    }

    #[test]
    fn restrict_nearest_prototype() {
        let e = |v: &[f64]| Embedding::new(v.to_vec()).unwrap();
        let protos: BTreeMap<_, _> = [
            (CategoryId(1), e(&[1., 0., 0.])),
            (CategoryId(2), e(&[0., 1., 0.])),
            (CategoryId(3), e(&[0.9, 0.1, 0.])),
            (CategoryId(4), e(&[0.1, 0.9, 0.3])),
        ]
        .into();
        let allowed: BTreeSet<_> = [CategoryId(1), CategoryId(2)].into();
        let b = bx(0., 0., 1., 1.);
        let dets = [det(3, b, 0.5), det(4, b, 0.5), det(2, b, 0.5)];
        let out = restrict_classes(&dets, &allowed, &RestrictMode::Reclassify(RemapTarget::NearestPrototype(protos))).unwrap();
        let cats: Vec<u64> = out.iter().map(|d| d.category_id.0).collect();
        assert_eq!(cats, vec![1, 2, 2]);
    }

    #[test]
    fn phrase_examples() {
        let b = bx(0., 0., 1., 1.);
        let pd = |phrase: &str, cat| PhraseDetection { detection: det(cat, b, 0.5), phrase: phrase.into() };
        let ident: HashMap<String, CategoryId> = [("echinus".to_string(), CategoryId(1)), ("holothurian".to_string(), CategoryId(2))].into();
        let out = phrase_map(&[pd("echinus", 1), pd("holothurian", 2)], &ident, UnknownPhrasePolicy::Drop).unwrap();
        assert_eq!(out.iter().map(|d| d.category_id.0).collect::<Vec<_>>(), vec![1, 2]);

        let mapping: HashMap<String, CategoryId> = [("sea cucumber".to_string(), CategoryId(2))].into();
        let out = phrase_map(&[pd("Sea Cucumber ", 0)], &mapping, UnknownPhrasePolicy::Drop).unwrap();
        assert_eq!(out[0].category_id, CategoryId(2));

        assert!(phrase_map(&[pd("starfish", 0)], &mapping, UnknownPhrasePolicy::Drop).unwrap().is_empty());
        assert!(matches!(
            phrase_map(&[pd("starfish", 0)], &mapping, UnknownPhrasePolicy::Error),
            Err(Error::UnknownPhrase(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_dets() -> impl Strategy<Value = Vec<Detection<f64>>> {
            proptest::collection::vec(
                (1u64..3, 1u64..3, 0.0..30.0f64, 0.0..30.0f64, 2.0..15.0f64, 2.0..15.0f64, 0.0..=1.0f64),
                0..20,
            )
            .prop_map(|v| {
                v.into_iter()
                    .map(|(i, c, x, y, w, h, s)| Detection::new(ImageId(i), bx(x, y, w, h), CategoryId(c), s))
                    .collect()
            })
        }

        fn sorted(mut v: Vec<Detection<f64>>) -> Vec<Detection<f64>> {
            v.sort_by(|a, b| {
                (a.image_id, a.category_id)
                    .cmp(&(b.image_id, b.category_id))
                    .then(a.score.partial_cmp(&b.score).unwrap())
                    .then(a.bbox.as_array().partial_cmp(&b.bbox.as_array()).unwrap())
            });
            v
        }

        proptest! {
            #[test]
            fn nms_subset_separated_idempotent(dets in arb_dets(), thr in 0.1..0.9f64) {
                let kept = nms(&dets, thr, false);
                for k in &kept {
                    prop_assert!(dets.contains(k));
                }
                for (i, a) in kept.iter().enumerate() {
                    for b in &kept[i + 1..] {
                        if a.image_id == b.image_id && a.category_id == b.category_id {
                            prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                        }
                    }
                }
                prop_assert_eq!(nms(&kept, thr, false), kept);
            }

            #[test]
            fn soft_nms_huge_sigma_is_identity(dets in arb_dets()) {
                let out = soft_nms(&dets, 1e9, 0.0).unwrap();
                prop_assert_eq!(out.len(), dets.len());
                let (a, b) = (sorted(out), sorted(dets.clone()));
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x.score - y.score).abs() < 1e-6);
                    prop_assert_eq!(x.bbox, y.bbox);
                }
            }

            #[test]
            fn wbf_boxes_inside_member_hull(sets in proptest::collection::vec(arb_dets(), 1..4), thr in 0.2..0.8f64) {
                let fused = wbf(&sets, thr, None).unwrap();
                let all: Vec<&Detection<f64>> = sets.iter().flatten().collect();
                for f in &fused {
                    let members: Vec<_> = all.iter().filter(|d| d.image_id == f.image_id && d.category_id == f.category_id).collect();
                    let lo = |g: &dyn Fn(&BBox<f64>) -> f64| members.iter().map(|d| g(&d.bbox)).fold(f64::INFINITY, f64::min);
                    let hi = |g: &dyn Fn(&BBox<f64>) -> f64| members.iter().map(|d| g(&d.bbox)).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(f.bbox.x >= lo(&|b| b.x) - 1e-9 && f.bbox.x <= hi(&|b| b.x) + 1e-9);
                    prop_assert!(f.bbox.y >= lo(&|b| b.y) - 1e-9 && f.bbox.y <= hi(&|b| b.y) + 1e-9);
                    prop_assert!(f.bbox.right() >= lo(&|b| b.right()) - 1e-9 && f.bbox.right() <= hi(&|b| b.right()) + 1e-9);
                    prop_assert!(f.bbox.bottom() >= lo(&|b| b.bottom()) - 1e-9 && f.bbox.bottom() <= hi(&|b| b.bottom()) + 1e-9);
                    prop_assert!(f.score >= 0.0 && f.score <= 1.0);
                }
            }

            #[test]
            fn filters_ignore_input_order(dets in arb_dets(), thr in 0.0..1.0f64, k in 0usize..5) {
                let mut rev = dets.clone();
                rev.reverse();
                prop_assert_eq!(sorted(threshold_filter(&dets, thr)), sorted(threshold_filter(&rev, thr)));
                let sizes: BTreeMap<_, _> = [(ImageId(1), (40.0, 40.0)), (ImageId(2), (60.0, 30.0))].into();
                prop_assert_eq!(
                    sorted(size_filter(&dets, &sizes, thr).unwrap()),
                    sorted(size_filter(&rev, &sizes, thr).unwrap())
                );
                prop_assert_eq!(sorted(topk_per_image(&dets, k)), sorted(topk_per_image(&rev, k)));
            }
        }
    }
}
