//! Class prototypes and background references from K-shot support embeddings.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detcore::{iou, BBox, CategoryId};
use crate::embed::{Embedding, EmbeddingStore};
use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

/// Blend ratio between the quality-weighted and plain mean paths.
pub const DEFAULT_ALPHA: f64 = 0.7;
/// Softmax temperature for multi-scale prototype fusion.
pub const DEFAULT_FUSE_TEMPERATURE: f64 = 0.1;
/// Background prototype count used for desk-scale runs.
pub const DEFAULT_N_BG: usize = 16;
/// Background instance count of the original large-scale configuration.
pub const REFERENCE_N_BG: usize = 530;
/// Resampling budget per negative box.
pub const MAX_JITTER_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    /// Unit-norm prototype per category.
    pub class_protos: BTreeMap<CategoryId, Embedding<T>>,
    /// Unit-norm background references.
    pub bg_protos: Vec<Embedding<T>>,
    pub alpha: T,
    pub temperature_fuse: T,
}

/// Non-negative per-instance quality scores, per class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QualityWeights<T>(BTreeMap<CategoryId, Vec<T>>);

impl<T: Scalar> QualityWeights<T> {
    pub fn new(weights: BTreeMap<CategoryId, Vec<T>>) -> Result<Self> {
        for w in weights.values() {
            if let Some(&neg) = w.iter().find(|&&x| x < T::zero()) {
                return Err(Error::NegativeWeight(neg.to_f64_lossy()));
            }
            if !w.iter().any(|&x| x > T::zero()) {
                return Err(Error::InvalidParameter(
                    "each class needs at least one positive quality weight".into(),
                ));
            }
        }
        Ok(QualityWeights(weights))
    }

    pub fn get(&self, c: CategoryId) -> Option<&[T]> {
        self.0.get(&c).map(Vec::as_slice)
    }
}

fn mean<T: Scalar>(instances: &[&Embedding<T>]) -> Result<Embedding<T>> {
    let first = instances.first().ok_or(Error::EmptyClass)?;
    let n = T::from_usize_lossy(instances.len());
    let mut acc = Embedding::zeros(first.dim());
    for e in instances {
        acc = acc.axpy(T::one() / n, e)?;
    }
    Ok(acc)
}

/// Normalized arithmetic mean of the instances.
pub fn mean_prototype<T: Scalar>(instances: &[&Embedding<T>]) -> Result<Embedding<T>> {
    mean(instances)?.l2_normalize()
}

/// `normalize(alpha * sum(softmax(w)_i e_i) + (1 - alpha) * mean(e))`.
///
/// The weighted path goes through the identity map in place of a learned
/// projection.
pub fn reweighted_prototype<T: Scalar>(
    instances: &[&Embedding<T>],
    weights: &[T],
    alpha: T,
) -> Result<Embedding<T>> {
    if instances.is_empty() {
        return Err(Error::EmptyClass);
    }
    if weights.len() != instances.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} instances",
            weights.len(),
            instances.len()
        )));
    }
    if let Some(&neg) = weights.iter().find(|&&w| w < T::zero()) {
        return Err(Error::NegativeWeight(neg.to_f64_lossy()));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let avg = mean(instances)?;
    let mut attended = Embedding::zeros(avg.dim());
    for (e, p) in instances.iter().zip(softmax(weights)) {
        attended = attended.axpy(p, e)?;
    }
    attended
        .scaled(alpha)
        .axpy(T::one() - alpha, &avg)?
        .l2_normalize()
}

/// Fuse per-scale embeddings with `softmax(quality / temperature)` weights.
///
/// `quality` defaults to uniform when `None`.
pub fn multiscale_fuse<T: Scalar>(
    per_scale: &[(T, Embedding<T>)],
    quality: Option<&[T]>,
    temperature: T,
) -> Result<Embedding<T>> {
    if per_scale.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(temperature > T::zero()) {
        return Err(Error::NonPositiveTemperature(temperature.to_f64_lossy()));
    }
    let logits: Vec<T> = match quality {
        Some(q) if q.len() != per_scale.len() => {
            return Err(Error::InvalidParameter(format!(
                "{} quality scores for {} scales",
                q.len(),
                per_scale.len()
            )))
        }
        Some(q) => q.iter().map(|&v| v / temperature).collect(),
        None => vec![T::zero(); per_scale.len()],
    };
    let mut acc = Embedding::zeros(per_scale[0].1.dim());
    for ((_, e), w) in per_scale.iter().zip(softmax(&logits)) {
        acc = acc.axpy(w, e)?;
    }
    acc.l2_normalize()
}

/// Negative boxes made by randomly shifting and rescaling each positive.
///
/// Centers move by up to `shift_frac` of the box size along each axis; width
/// and height are scaled independently by factors drawn from `scale_range`.
/// Each output is clipped to its image and must have IoU < 0.5 with its
/// source; a draw is retried up to [`MAX_JITTER_RETRIES`] times.
pub fn jitter_negatives<T: Scalar>(
    positives: &[(BBox<T>, (T, T))],
    n_per_box: usize,
    shift_frac: T,
    scale_range: (T, T),
    seed: u64,
) -> Result<Vec<BBox<T>>> {
    let (lo, hi) = scale_range;
    if !(shift_frac >= T::zero()) || !(lo > T::zero()) || hi < lo {
        return Err(Error::InvalidParameter(
            "shift_frac must be >= 0 and scale_range a positive interval".into(),
        ));
    }
    let half = T::lit(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |a: T, b: T| -> T {
        let u = T::lit(rng.random::<f64>());
        a + (b - a) * u
    };
    let mut out = Vec::with_capacity(positives.len() * n_per_box);
    for &(pos, (img_w, img_h)) in positives {
        let (cx, cy) = pos.center();
        for _ in 0..n_per_box {
            let mut placed = None;
            for _ in 0..MAX_JITTER_RETRIES {
                let dx = uniform(-shift_frac, shift_frac) * pos.w;
                let dy = uniform(-shift_frac, shift_frac) * pos.h;
                let w = pos.w * uniform(lo, hi);
                let h = pos.h * uniform(lo, hi);
                let cand = BBox::from_center(cx + dx, cy + dy, w, h)
                    .ok()
                    .and_then(|b| b.clip(img_w, img_h));
                if let Some(b) = cand {
                    if iou(&b, &pos) < half {
                        placed = Some(b);
                        break;
                    }
                }
            }
            out.push(placed.ok_or(Error::RetryExhausted(MAX_JITTER_RETRIES))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProtoConfig<T> {
    pub alpha: T,
    pub temperature_fuse: T,
    pub n_bg: usize,
}

impl<T: Scalar> Default for ProtoConfig<T> {
    fn default() -> Self {
        ProtoConfig {
            alpha: T::lit(DEFAULT_ALPHA),
            temperature_fuse: T::lit(DEFAULT_FUSE_TEMPERATURE),
            n_bg: DEFAULT_N_BG,
        }
    }
}

/// Build a prototype set from a support store.
///
/// Entries with a category become class instances; entries without one are
/// background crops, dealt round-robin into at most `n_bg` groups and
/// mean-pooled. Classes with quality weights use the reweighted blend.
pub fn build_prototypes<T: Scalar>(
    support: &EmbeddingStore<T>,
    weights: Option<&QualityWeights<T>>,
    cfg: &ProtoConfig<T>,
) -> Result<PrototypeSet<T>> {
    let mut by_class: BTreeMap<CategoryId, Vec<&Embedding<T>>> = BTreeMap::new();
    let mut background = Vec::new();
    for e in support.entries() {
        match e.category_id {
            Some(c) => by_class.entry(c).or_default().push(&e.vector),
            None => background.push(&e.vector),
        }
    }
    let mut class_protos = BTreeMap::new();
    for (c, inst) in by_class {
        let proto = match weights.and_then(|w| w.get(c)) {
            Some(w) => reweighted_prototype(&inst, w, cfg.alpha)?,
            None => mean_prototype(&inst)?,
        };
        class_protos.insert(c, proto);
    }
    let groups = cfg.n_bg.min(background.len());
    let mut bg_protos = Vec::with_capacity(groups);
    for g in 0..groups {
        let members: Vec<&Embedding<T>> = background.iter().skip(g).step_by(groups).copied().collect();
        bg_protos.push(mean_prototype(&members)?);
    }
    Ok(PrototypeSet {
        class_protos,
        bg_protos,
        alpha: cfg.alpha,
        temperature_fuse: cfg.temperature_fuse,
    })
}
