use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use super::dataset::{write_dataset, NormStats};
use super::render::{render_scene_sized, sample_condition, sample_condition_in_cell, SCENE_SIZE};
use super::Scene;
use crate::condition::ConditionCell;
use crate::error::{invalid, Result};

/// Sizes of the frozen benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 800,
            val: 160,
            test: 160,
            size: SCENE_SIZE,
        }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Renders one split. Training conditions are drawn uniformly; evaluation
/// splits cycle through the cells, so they are balanced whenever their size
/// is a multiple of eight.
pub fn generate_split(spec: &BenchmarkSpec, split: &str) -> Result<Vec<Scene>> {
    let stream = SPLIT_NAMES
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| invalid("generate_split", format!("unknown split '{split}'")))? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(100 + stream);
    if spec.size == 0 || spec.size % 32 != 0 {
        return Err(invalid("generate_split", format!("scene size {} is not a positive multiple of 32", spec.size)));
    }
    Ok(if split == "train" {
        (0..spec.train)
            .map(|_| {
                let attrs = sample_condition(&mut rng);
                render_scene_sized(&attrs, rng.random(), spec.size)
            })
            .collect()
    } else {
        let cells = ConditionCell::all();
        let n = if split == "val" { spec.val } else { spec.test };
        (0..n)
            .map(|i| {
                let cell = cells[i % cells.len()];
                let attrs = sample_condition_in_cell(cell, &mut rng);
                render_scene_sized(&attrs, rng.random(), spec.size)
            })
            .collect()
    })
}

/// `(train, val, test)` scenes, unnormalized.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<(Vec<Scene>, Vec<Scene>, Vec<Scene>)> {
    Ok((
        generate_split(spec, "train")?,
        generate_split(spec, "val")?,
        generate_split(spec, "test")?,
    ))
}

/// Writes `train.cfd`, `val.cfd` and `test.cfd` into `dir`; every split
/// carries the training-split normalization statistics. Empty evaluation
/// splits are not written.
pub fn write_benchmark(dir: &Path, spec: &BenchmarkSpec) -> Result<NormStats> {
    std::fs::create_dir_all(dir)?;
    let (train, val, test) = generate_benchmark(spec)?;
    let stats = write_dataset(&dir.join("train.cfd"), "train", &train, None)?;
    for (name, scenes) in [("val", &val), ("test", &test)] {
        if !scenes.is_empty() {
            write_dataset(&dir.join(format!("{name}.cfd")), name, scenes, Some(&stats))?;
        }
    }
    Ok(stats)
}
