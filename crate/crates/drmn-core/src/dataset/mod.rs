//! Dataset containers, validation, on-disk format, synthetic generation,
//! and deterministic batch iteration.

mod batch;
mod format;
mod synth;

pub use batch::batch_iter;
pub use format::{corrupt_byte, load_dataset, write_dataset};
pub use synth::{generate, generate_to_dir, SynthConfig, SynthTruth};

use crate::error::{Error, Result, ValidationCode};

pub const META_FILE: &str = "meta.json";
pub const SEMANTICS_FILE: &str = "class_attrs.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// (channels, height, width) of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LevelShape(pub usize, pub usize, pub usize);

impl LevelShape {
    pub fn channels(&self) -> usize {
        self.0
    }
    pub fn height(&self) -> usize {
        self.1
    }
    pub fn width(&self) -> usize {
        self.2
    }
    pub fn plane(&self) -> usize {
        self.1 * self.2
    }
    pub fn volume(&self) -> usize {
        self.0 * self.1 * self.2
    }
}

/// Class-by-attribute annotation matrix. Row c is the semantic vector of
/// class c; values are arbitrary non-negative reals (binary in synthesis).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSemanticMatrix {
    pub n_classes: usize,
    pub n_attributes: usize,
    /// Row-major n_classes x n_attributes.
    pub values: Vec<f64>,
    pub attribute_names: Vec<String>,
}

impl ClassSemanticMatrix {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.n_attributes..(class + 1) * self.n_attributes]
    }
}

/// Seen/unseen class partition plus the image-id lists of the three
/// evaluation partitions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    /// Class id per image, indexed by image id.
    pub labels: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub test_seen_ids: Vec<usize>,
    pub test_unseen_ids: Vec<usize>,
}

/// Per-image feature pyramids. All images share identical per-level shapes;
/// level data is stored contiguously, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelFeatures {
    pub shapes: Vec<LevelShape>,
    pub ref_level: usize,
    pub n_images: usize,
    /// One buffer per level: n_images x C x H x W, row-major.
    levels: Vec<Vec<f64>>,
}

impl MultiLevelFeatures {
    pub fn new(
        shapes: Vec<LevelShape>,
        ref_level: usize,
        n_images: usize,
        levels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if shapes.is_empty() || levels.len() != shapes.len() {
            return Err(Error::Shape {
                op: "features-new",
                detail: format!("{} shapes vs {} level buffers", shapes.len(), levels.len()),
            });
        }
        for (l, (shape, data)) in shapes.iter().zip(levels.iter()).enumerate() {
            if data.len() != n_images * shape.volume() {
                return Err(Error::Shape {
                    op: "features-new",
                    detail: format!(
                        "level {l}: {} values for {n_images} images of {:?}",
                        data.len(),
                        shape
                    ),
                });
            }
        }
        Ok(MultiLevelFeatures {
            shapes,
            ref_level,
            n_images,
            levels,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.shapes.len()
    }

    /// C x H x W block of one image at one level.
    pub fn image_level(&self, level: usize, image: usize) -> &[f64] {
        let vol = self.shapes[level].volume();
        &self.levels[level][image * vol..(image + 1) * vol]
    }

    pub fn level_data(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }
}

/// The full dataset: features, labels, class semantics, and split.
#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    pub features: MultiLevelFeatures,
    pub semantics: ClassSemanticMatrix,
    pub split: Split,
}

impl ZslDataset {
    pub fn n_images(&self) -> usize {
        self.features.n_images
    }

    pub fn label(&self, image: usize) -> usize {
        self.split.labels[image]
    }

    /// Check every container invariant. Each violation carries a distinct
    /// [`ValidationCode`] and names the file the offending value came from.
    pub fn validate(&self) -> Result<()> {
        let sem = &self.semantics;
        if sem.n_classes == 0 || sem.n_attributes == 0 {
            return Err(verr(ValidationCode::EmptyClassSemantics, SEMANTICS_FILE, None));
        }
        if sem.values.iter().any(|v| !v.is_finite()) {
            return Err(verr(ValidationCode::NonFiniteSemantics, SEMANTICS_FILE, None));
        }
        for c in 0..sem.n_classes {
            let norm: f64 = sem.row(c).iter().map(|v| v * v).sum();
            if norm == 0.0 {
                return Err(verr(
                    ValidationCode::ZeroNormClassSemantic,
                    SEMANTICS_FILE,
                    Some(c),
                ));
            }
        }
        if sem.attribute_names.len() != sem.n_attributes {
            return Err(verr(
                ValidationCode::AttributeNameCountMismatch,
                META_FILE,
                None,
            ));
        }

        if self.features.ref_level >= self.features.n_levels() {
            return Err(verr(ValidationCode::RefLevelOutOfRange, META_FILE, None));
        }
        for (l, shape) in self.features.shapes.iter().enumerate() {
            let data = self.features.level_data(l);
            if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                return Err(verr(
                    ValidationCode::NonFiniteFeatures,
                    &format!("level_{l}.feat"),
                    Some(bad),
                ));
            }
            if shape.volume() == 0 {
                return Err(verr(
                    ValidationCode::LevelShapeMismatch,
                    &format!("level_{l}.feat"),
                    None,
                ));
            }
        }

        let split = &self.split;
        if split.labels.len() != self.features.n_images {
            return Err(verr(
                ValidationCode::FeatureLabelCountMismatch,
                SPLITS_FILE,
                None,
            ));
        }
        for (i, &c) in split.labels.iter().enumerate() {
            if c >= sem.n_classes {
                return Err(verr(ValidationCode::LabelOutOfRange, SPLITS_FILE, Some(i)));
            }
        }
        let seen: std::collections::BTreeSet<usize> = split.seen_classes.iter().copied().collect();
        let unseen: std::collections::BTreeSet<usize> =
            split.unseen_classes.iter().copied().collect();
        if seen.intersection(&unseen).next().is_some() {
            return Err(verr(ValidationCode::SeenUnseenOverlap, SPLITS_FILE, None));
        }
        for set in [&split.seen_classes, &split.unseen_classes] {
            for (i, &c) in set.iter().enumerate() {
                if c >= sem.n_classes {
                    return Err(verr(ValidationCode::LabelOutOfRange, SPLITS_FILE, Some(i)));
                }
            }
        }

        let mut seen_ids = std::collections::BTreeSet::new();
        for (list, what) in [
            (&split.train_ids, "train"),
            (&split.test_seen_ids, "test_seen"),
            (&split.test_unseen_ids, "test_unseen"),
        ] {
            for (i, &id) in list.iter().enumerate() {
                if id >= self.features.n_images {
                    return Err(verr(ValidationCode::ImageIdOutOfRange, SPLITS_FILE, Some(i)));
                }
                if !seen_ids.insert(id) {
                    return Err(verr(ValidationCode::IdListsOverlap, SPLITS_FILE, Some(id)));
                }
                let label = split.labels[id];
                match what {
                    "train" if !seen.contains(&label) => {
                        return Err(verr(ValidationCode::TrainLabelNotSeen, SPLITS_FILE, Some(id)))
                    }
                    "test_seen" if !seen.contains(&label) => {
                        return Err(verr(
                            ValidationCode::TestSeenLabelNotSeen,
                            SPLITS_FILE,
                            Some(id),
                        ))
                    }
                    "test_unseen" if !unseen.contains(&label) => {
                        return Err(verr(
                            ValidationCode::TestUnseenLabelNotUnseen,
                            SPLITS_FILE,
                            Some(id),
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn verr(code: ValidationCode, file: &str, index: Option<usize>) -> Error {
    Error::Validation {
        code,
        file: file.to_string(),
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> ZslDataset {
        // 2 levels, 2 classes (1 seen, 1 unseen), 2 attributes, 2 images.
        let shapes = vec![LevelShape(2, 2, 2), LevelShape(3, 1, 1)];
        let levels = vec![vec![0.5; 2 * 8], vec![0.25; 2 * 3]];
        let features = MultiLevelFeatures::new(shapes, 0, 2, levels).unwrap();
        let semantics = ClassSemanticMatrix {
            n_classes: 2,
            n_attributes: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
            attribute_names: vec!["a0".into(), "a1".into()],
        };
        let split = Split {
            seen_classes: vec![0],
            unseen_classes: vec![1],
            labels: vec![0, 1],
            train_ids: vec![0],
            test_seen_ids: vec![],
            test_unseen_ids: vec![1],
        };
        ZslDataset {
            features,
            semantics,
            split,
        }
    }

    #[test]
    fn valid_dataset_passes() {
        tiny_dataset().validate().unwrap();
    }

    #[test]
    fn zero_norm_semantic_row_rejected() {
        let mut ds = tiny_dataset();
        ds.semantics.values[2] = 0.0;
        ds.semantics.values[3] = 0.0;
        match ds.validate() {
            Err(Error::Validation { code, .. }) => {
                assert_eq!(code, ValidationCode::ZeroNormClassSemantic)
            }
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_class_sets_rejected() {
        let mut ds = tiny_dataset();
        ds.split.unseen_classes = vec![0, 1];
        match ds.validate() {
            Err(Error::Validation { code, .. }) => {
                assert_eq!(code, ValidationCode::SeenUnseenOverlap)
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn train_label_must_be_seen() {
        let mut ds = tiny_dataset();
        ds.split.train_ids = vec![1]; // image 1 is unseen-class
        match ds.validate() {
            Err(Error::Validation { code, .. }) => {
                assert_eq!(code, ValidationCode::TrainLabelNotSeen)
            }
            other => panic!("expected train-label error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_across_lists_rejected() {
        let mut ds = tiny_dataset();
        ds.split.test_seen_ids = vec![0]; // already in train_ids
        match ds.validate() {
            Err(Error::Validation { code, .. }) => {
                assert_eq!(code, ValidationCode::IdListsOverlap)
            }
            other => panic!("expected id-overlap error, got {other:?}"),
        }
    }

    #[test]
    fn label_count_must_match_images() {
        let mut ds = tiny_dataset();
        ds.split.labels = vec![0];
        match ds.validate() {
            Err(Error::Validation { code, .. }) => {
                assert_eq!(code, ValidationCode::FeatureLabelCountMismatch)
            }
            other => panic!("expected count error, got {other:?}"),
        }
    }
}
