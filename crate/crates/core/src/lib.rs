//! Training-free cross-domain few-shot object detection.
//!
//! The engine turns K-shot support embeddings into class prototypes, labels
//! category-agnostic proposals by cosine matching, reweights confidences by
//! diffusion over the proposal-overlap graph, and runs the usual detection
//! post-processing and pseudo-label curation. [`eval`] scores the results
//! with COCO-style mAP and the nine-cell weighted challenge score.
//!
//! Every numeric routine is generic over a [`Scalar`] (`f32` or `f64`); the
//! aliases exported here fix the scalar to `f64` (or `f32` where noted), which
//! is what the command-line pipelines use.

pub mod detcore;
pub mod embed;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod postproc;
pub mod proto;
pub mod pseudo;
pub mod scalar;
pub mod synth;

pub use detcore::{AnnotationId, CategoryId, ImageId};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBox = detcore::BBox<f64>;
pub type Detection = detcore::Detection<f64>;
pub type Annotation = detcore::Annotation<f64>;
pub type DatasetSplit = detcore::DatasetSplit<f64>;
pub type Embedding = embed::Embedding<f64>;
pub type EmbeddingStore = embed::EmbeddingStore<f64>;
pub type PrototypeSet = proto::PrototypeSet<f64>;
pub type Proposal = matching::Proposal<f64>;
pub type DiffusionConfig = matching::DiffusionConfig<f64>;
pub type PseudoLabelPolicy = pseudo::PseudoLabelPolicy<f64>;
pub type DomainBank = losses::DomainBank<f64>;
pub type MatcherConfig = pipeline::MatcherConfig<f64>;
pub type EvalReport = eval::EvalReport<f64>;
pub type ScoreCard = eval::ScoreCard<f64>;

/// Score card over exact decimals; table cells parse without rounding.
pub type ExactScoreCard = eval::ScoreCard<num_rational::Ratio<i64>>;

pub type BBoxF32 = detcore::BBox<f32>;
pub type DetectionF32 = detcore::Detection<f32>;
pub type EmbeddingF32 = embed::Embedding<f32>;
pub type EmbeddingStoreF32 = embed::EmbeddingStore<f32>;
