use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Embedding, EmbeddingStore, StoreEntry, StoreKind};
use crate::detcore::{CategoryId, ImageId};
use crate::scalar::Scalar;

/// Clustered unit vectors with known class labels.
#[derive(Debug, Clone)]
pub struct SynthClusters<T> {
    pub support: EmbeddingStore<T>,
    pub queries: EmbeddingStore<T>,
    /// Generating class of each query, in store order.
    pub labels: Vec<CategoryId>,
    /// Unit class means; category `c` has mean `means[c - 1]`.
    pub means: Vec<Embedding<T>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|a| a / n).collect())
}

/// Class means on the unit sphere, orthonormal when `n_classes <= dim`.
fn class_means(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while means.len() < n_classes {
        let mut v = gaussian(rng, dim);
        if means.len() < dim {
            for m in &means {
                let d: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= d * b);
            }
        }
        if let Some(u) = unit(&v) {
            means.push(u);
        }
    }
    means
}

/// Draw `per_class` support and `per_class` query vectors around each of
/// `n_classes` unit means.
///
/// Each vector is `normalize(mean + spread * g / sqrt(dim))` with `g` standard
/// normal. The random stream does not depend on `spread`, so two calls that
/// differ only in `spread` perturb along the same directions.
pub fn synth_clusters<T: Scalar>(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> SynthClusters<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(&mut rng, n_classes.max(1), dim.max(1));
    let dim = dim.max(1);
    let noise_scale = spread.max(0.0) / (dim as f64).sqrt();

    let mut draw = |mean: &[f64]| -> Embedding<T> {
        let g = gaussian(&mut rng, dim);
        let v: Vec<f64> = mean.iter().zip(&g).map(|(m, n)| m + noise_scale * n).collect();
        let u = unit(&v).unwrap_or_else(|| mean.to_vec());
        Embedding(u.into_iter().map(T::lit).collect())
    };

    let mut support = EmbeddingStore::new(dim, StoreKind::Support);
    let mut queries = EmbeddingStore::new(dim, StoreKind::Proposal);
    let mut labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        let cat = CategoryId(c as u64 + 1);
        for _ in 0..per_class {
            let id = support.len() as u64 + 1;
            support
                .push(StoreEntry {
                    entry_id: id,
                    image_id: ImageId(id),
                    bbox: None,
                    category_id: Some(cat),
                    vector: draw(mean),
                })
                .expect("fresh id, fixed dim");
        }
    }
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let id = queries.len() as u64 + 1;
            queries
                .push(StoreEntry {
                    entry_id: id,
                    image_id: ImageId(id),
                    bbox: None,
                    category_id: None,
                    vector: draw(mean),
                })
                .expect("fresh id, fixed dim");
            labels.push(CategoryId(c as u64 + 1));
        }
    }
    SynthClusters {
        support,
        queries,
        labels,
        means: means
            .into_iter()
            .map(|m| Embedding(m.into_iter().map(T::lit).collect()))
            .collect(),
    }
}
