//! Box geometry, detection records and the COCO JSON boundary.
//!
//! Boxes are kept in COCO `[x, y, w, h]` form; corners only appear inside the
//! geometry kernels. Areas are continuous, so boxes that merely touch have an
//! IoU of zero.

mod coco;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use coco::{emit_records, emit_results, emit_split, load_coco, load_results, ResultRecord};

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(ImageId);
id_newtype!(
    /// Opaque category identifier. Names matter only for phrase mapping.
    CategoryId
);
id_newtype!(AnnotationId);

/// Axis-aligned box, left/top edge plus width/height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    /// Checked constructor: width and height must be positive and finite.
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::NonPositiveBox {
                w: w.to_f64_lossy(),
                h: h.to_f64_lossy(),
            })
        }
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > T::zero()
            && self.h > T::zero()
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        (self.x + self.w / two, self.y + self.h / two)
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let two = T::lit(2.0);
        Self::new(cx - w / two, cy - h / two, w, h)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &Self) -> T {
        iou(self, other)
    }

    /// Clip to `[0, width] x [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        let x1 = self.x.max(T::zero());
        let y1 = self.y.max(T::zero());
        let x2 = self.right().min(width);
        let y2 = self.bottom().min(height);
        Self::from_corners(x1, y1, x2, y2).ok()
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        BBox {
            x: c(self.x),
            y: c(self.y),
            w: c(self.w),
            h: c(self.h),
        }
    }
}

/// Intersection over union. Symmetric, exactly 1 for identical boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    if a == b {
        return T::one();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub image_id: ImageId,
    pub bbox: BBox<T>,
    pub category_id: CategoryId,
    pub score: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(image_id: ImageId, bbox: BBox<T>, category_id: CategoryId, score: T) -> Self {
        Detection {
            image_id,
            bbox,
            category_id,
            score,
        }
    }

    pub fn has_valid_score(&self) -> bool {
        self.score >= T::zero() && self.score <= T::one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation<T> {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub bbox: BBox<T>,
    pub category_id: CategoryId,
    pub is_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// COCO-style images/annotations/categories for one dataset-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation<T>>,
    pub categories: Vec<Category>,
    /// K when every category has exactly K annotations with K in {1, 5, 10}.
    pub shot: Option<usize>,
}

impl<T: Scalar> DatasetSplit<T> {
    /// Build a split, checking ids and references. `shot` is inferred.
    pub fn new(
        images: Vec<ImageInfo>,
        annotations: Vec<Annotation<T>>,
        categories: Vec<Category>,
    ) -> Result<Self> {
        let mut split = DatasetSplit {
            images,
            annotations,
            categories,
            shot: None,
        };
        split.validate()?;
        split.shot = split.infer_shot();
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut image_ids = std::collections::HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::DuplicateId(format!("image {}", img.id)));
            }
        }
        let mut cat_ids = std::collections::HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                return Err(Error::DuplicateId(format!("category {}", c.id)));
            }
        }
        let mut ann_ids = std::collections::HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::DuplicateId(format!("annotation {}", a.id)));
            }
            if !image_ids.contains(&a.image_id) {
                return Err(Error::DanglingReference(format!(
                    "annotation {} references missing image {}",
                    a.id, a.image_id
                )));
            }
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::DanglingReference(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )));
            }
            if !a.bbox.is_valid() {
                return Err(Error::NonPositiveBox {
                    w: a.bbox.w.to_f64_lossy(),
                    h: a.bbox.h.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    pub fn annotations_per_category(&self) -> BTreeMap<CategoryId, usize> {
        let mut counts: BTreeMap<CategoryId, usize> =
            self.categories.iter().map(|c| (c.id, 0)).collect();
        for a in &self.annotations {
            *counts.entry(a.category_id).or_default() += 1;
        }
        counts
    }

    fn infer_shot(&self) -> Option<usize> {
        let counts = self.annotations_per_category();
        let mut it = counts.values();
        let k = *it.next()?;
        if it.all(|&c| c == k) && matches!(k, 1 | 5 | 10) {
            Some(k)
        } else {
            None
        }
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Image width/height lookup table.
    pub fn image_sizes(&self) -> BTreeMap<ImageId, (T, T)> {
        self.images
            .iter()
            .map(|i| {
                (
                    i.id,
                    (T::lit(f64::from(i.width)), T::lit(f64::from(i.height))),
                )
            })
            .collect()
    }

    pub fn category_by_name(&self, name: &str) -> Option<CategoryId> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Ground-truth annotations as score-1 detections.
    pub fn as_detections(&self) -> Vec<Detection<T>> {
        self.annotations
            .iter()
            .map(|a| Detection::new(a.image_id, a.bbox, a.category_id, T::one()))
            .collect()
    }

    pub fn next_annotation_id(&self) -> AnnotationId {
        AnnotationId(self.annotations.iter().map(|a| a.id.0 + 1).max().unwrap_or(1))
    }
}
