//! Synthetic condition-dependent multimodal scenes and their on-disk format.

mod benchmark;
mod dataset;
mod render;

pub use benchmark::{generate_benchmark, generate_split, write_benchmark, BenchmarkSpec, SPLIT_NAMES};
pub use dataset::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, Dataset, ModalityStats, NormStats, DATASET_MAGIC, DATASET_VERSION};
pub use render::{
    class_color, render_scene, render_scene_sized, sample_condition, sample_condition_in_cell, Corruption, CLASS_NAMES, NUM_CLASSES, SCENE_SIZE,
};

use crate::condition::ConditionAttributes;
use crate::fusion::NUM_MODALITIES;
use crate::tensor::Tensor;

/// Ground truth plus four co-registered `[H, W, 3]` observations in the
/// order RGB, lidar, radar, event.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub semantic_map: Vec<u8>,
    pub images: [Tensor; NUM_MODALITIES],
    pub attrs: ConditionAttributes,
    pub seed: u64,
}
