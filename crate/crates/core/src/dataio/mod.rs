//! Datasets: in-memory types, the text file format, synthetic data,
//! PCA reduction of region features, and seen/unseen class splits.

pub mod format;
pub mod pca;
pub mod split;
pub mod synth;

use crate::error::{Error, Result};
use crate::matcher::ClassSemanticTable;
use crate::model::TrainExample;
use crate::tensor::{Matrix, Vector};

pub use pca::{pca_fit, pca_project, pca_reduce_dataset, PcaBasis};
pub use split::{is_sce, is_scs, split_sce, split_scs, super_categories, SplitKind};
pub use synth::{synth_generate, synth_generate_with_truth, SynthSpec, SynthTruth};

/// One class: its id, an optional super-category it belongs to, and its
/// semantic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub id: u32,
    pub parent: Option<u32>,
    pub semantic: Vector,
}

/// One image: fixed region features, one column per region.
#[derive(Debug, Clone, PartialEq)]
pub struct ZslImage {
    pub id: u32,
    pub class_id: u32,
    /// `p x m`.
    pub regions: Matrix,
}

/// A full dataset with its seen/unseen class split.
///
/// Classes, images and split lists are kept sorted by id so that every
/// derived computation and file write is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    /// Region feature dimension.
    pub p: usize,
    /// Regions per image.
    pub m: usize,
    /// Semantic vector dimension.
    pub q: usize,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ZslImage>,
    /// Classes with labeled training images.
    pub seen: Vec<u32>,
    /// Classes only ever evaluated zero-shot. May be empty.
    pub unseen: Vec<u32>,
}

fn sorted_strictly<T: Ord + Copy>(xs: impl Iterator<Item = T>) -> bool {
    let mut prev: Option<T> = None;
    for x in xs {
        if let Some(p) = prev {
            if p >= x {
                return false;
            }
        }
        prev = Some(x);
    }
    true
}

impl ZslDataset {
    /// Sorts classes, images and split lists into canonical order, then
    /// validates.
    pub fn canonicalize(mut self) -> Result<Self> {
        self.classes.sort_by_key(|c| c.id);
        self.images.sort_by_key(|i| i.id);
        self.seen.sort_unstable();
        self.unseen.sort_unstable();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("m", self.m), ("q", self.q)] {
            if v == 0 {
                return Err(Error::Validation(format!(
                    "dataset dimension {name} must be positive"
                )));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::Validation("dataset has no classes".to_string()));
        }
        if self.images.is_empty() {
            return Err(Error::Validation("dataset has no images".to_string()));
        }
        if !sorted_strictly(self.classes.iter().map(|c| c.id)) {
            return Err(Error::Validation(
                "class ids must be strictly increasing".to_string(),
            ));
        }
        if !sorted_strictly(self.images.iter().map(|i| i.id)) {
            return Err(Error::Validation(
                "image ids must be strictly increasing".to_string(),
            ));
        }
        for c in &self.classes {
            if c.semantic.len() != self.q {
                return Err(Error::Validation(format!(
                    "class {} has a semantic vector of length {}, expected {}",
                    c.id,
                    c.semantic.len(),
                    self.q
                )));
            }
            if !c.semantic.is_finite() {
                return Err(Error::Validation(format!(
                    "class {} has non-finite semantic values",
                    c.id
                )));
            }
        }
        for img in &self.images {
            if self.class(img.class_id).is_none() {
                return Err(Error::Validation(format!(
                    "image {} references unknown class {}",
                    img.id, img.class_id
                )));
            }
            if img.regions.shape() != (self.p, self.m) {
                return Err(Error::Validation(format!(
                    "image {} has region shape {}, expected {}x{}",
                    img.id,
                    img.regions.shape_string(),
                    self.p,
                    self.m
                )));
            }
            if !img.regions.is_finite() {
                return Err(Error::Validation(format!(
                    "image {} has non-finite region values",
                    img.id
                )));
            }
        }
        if !sorted_strictly(self.seen.iter().copied())
            || !sorted_strictly(self.unseen.iter().copied())
        {
            return Err(Error::Validation(
                "split class lists must be strictly increasing".to_string(),
            ));
        }
        if self.seen.is_empty() {
            return Err(Error::Validation(
                "the seen split must contain at least one class".to_string(),
            ));
        }
        // The two splits must partition the class set exactly.
        let mut all: Vec<u32> = self.seen.iter().chain(&self.unseen).copied().collect();
        all.sort_unstable();
        let ids: Vec<u32> = self.classes.iter().map(|c| c.id).collect();
        if all != ids {
            return Err(Error::Validation(
                "seen and unseen splits must partition the class set".to_string(),
            ));
        }
        Ok(())
    }

    pub fn class(&self, id: u32) -> Option<&ClassEntry> {
        self.classes
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.classes[i])
    }

    /// Semantic table for an explicit list of class ids.
    pub fn semantic_table(&self, ids: &[u32]) -> Result<ClassSemanticTable> {
        let pairs = ids
            .iter()
            .map(|id| {
                let c = self
                    .class(*id)
                    .ok_or_else(|| Error::Validation(format!("unknown class id {id}")))?;
                Ok((c.id, c.semantic.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        ClassSemanticTable::new(pairs)
    }

    pub fn seen_table(&self) -> Result<ClassSemanticTable> {
        self.semantic_table(&self.seen)
    }

    pub fn unseen_table(&self) -> Result<ClassSemanticTable> {
        self.semantic_table(&self.unseen)
    }

    pub fn full_table(&self) -> Result<ClassSemanticTable> {
        let ids: Vec<u32> = self.classes.iter().map(|c| c.id).collect();
        self.semantic_table(&ids)
    }

    /// Images whose class is in `ids`, paired with their true class, in
    /// image-id order.
    pub fn eval_pool(&self, ids: &[u32]) -> Vec<(&Matrix, u32)> {
        self.images
            .iter()
            .filter(|img| ids.binary_search(&img.class_id).is_ok())
            .map(|img| (&img.regions, img.class_id))
            .collect()
    }

    /// Seen-class semantic table plus all seen-class images as training
    /// examples with resolved class indices.
    pub fn training_set(&self) -> Result<(ClassSemanticTable, Vec<TrainExample>)> {
        let table = self.seen_table()?;
        let examples: Vec<TrainExample> = self
            .images
            .iter()
            .filter_map(|img| {
                table.index_of(img.class_id).map(|class_index| TrainExample {
                    regions: img.regions.clone(),
                    class_index,
                })
            })
            .collect();
        if examples.is_empty() {
            return Err(Error::Validation(
                "no images belong to seen classes; nothing to train on".to_string(),
            ));
        }
        Ok((table, examples))
    }
}
