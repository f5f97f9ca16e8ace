//! Feature stores, synthetic generation and episode sampling.

mod episode;
mod format;
mod synth;

pub use episode::{sample_episode, Episode, EpisodeSampler};
pub use format::{
    decode_store, encode_store, load_store, parse_splits, render_splits, save_store, splits_path,
    FORMAT_VERSION, MAGIC,
};
pub use synth::{generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch count of ViT-S/16 features at 224×224 resolution.
pub const VIT_PATCHES: usize = 196;
/// Embedding width of ViT-S/16 features.
pub const VIT_DIM: usize = 384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image: its P×D patch embeddings, D-dim class token and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub label: usize,
    pub patches: Tensor,
    pub class_token: Tensor,
}

/// A set of images sharing one patch count and embedding width.
///
/// Every class belongs to exactly one split, so the label spaces of the
/// train, val and test splits are disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub n_patches: usize,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub class_splits: Vec<Split>,
    pub images: Vec<ImageFeatures>,
}

impl FeatureStore {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: usize) -> Result<&ImageFeatures> {
        self.images.get(id).ok_or(Error::UnknownImage {
            id,
            len: self.images.len(),
        })
    }

    /// Checks shapes, labels and finiteness of every image.
    pub fn validate(&self) -> Result<()> {
        if self.class_splits.len() != self.class_names.len() {
            return Err(Error::Config(format!(
                "{} class names but {} split assignments",
                self.class_names.len(),
                self.class_splits.len()
            )));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.label >= self.n_classes() {
                return Err(Error::InsufficientData(format!(
                    "image {i}: label {} but only {} classes",
                    img.label,
                    self.n_classes()
                )));
            }
            if img.patches.shape() != [self.n_patches, self.dim] || img.class_token.shape() != [self.dim] {
                return Err(Error::dim(
                    "FeatureStore",
                    format!(
                        "image {i}: patches {:?}, token {:?}, store is {}x{}",
                        img.patches.shape(),
                        img.class_token.shape(),
                        self.n_patches,
                        self.dim
                    ),
                ));
            }
            if !img.patches.is_finite() || !img.class_token.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("FeatureStore image {i}"),
                });
            }
        }
        Ok(())
    }

    /// The store restricted to images of classes in `split`. Class names,
    /// labels and split assignments are kept unchanged.
    pub fn subset(&self, split: Split) -> FeatureStore {
        FeatureStore {
            n_patches: self.n_patches,
            dim: self.dim,
            class_names: self.class_names.clone(),
            class_splits: self.class_splits.clone(),
            images: self
                .images
                .iter()
                .filter(|img| self.class_splits[img.label] == split)
                .cloned()
                .collect(),
        }
    }

    /// Classes of `split`, in label order.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_classes()).filter(|&c| self.class_splits[c] == split).collect()
    }
}
