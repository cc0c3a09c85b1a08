use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{stack_images, Model};
use crate::condition::{ConditionCell, NUM_CELLS};
use crate::error::{invalid, Result};
use crate::fusion::NUM_MODALITIES;
use crate::scenes::{Scene, NUM_CLASSES};
use crate::seghead::predict;
use crate::tensor::Graph;

pub const EVAL_BATCH: usize = 16;
const EVAL_STREAM: u64 = 0xE7A1;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(invalid("confusion", "counts do not form a square matrix"));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(invalid("confusion", "prediction and ground truth differ in size"));
        }
        let k = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= k || p >= k {
                return Err(invalid("confusion", format!("class id {} >= {k}", t.max(p))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                if gt == 0 {
                    return None;
                }
                let pred: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                Some(tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(invalid("evaluate_miou", "empty split"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Everything measured in one pass over a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Keyed by cell label, e.g. `fog-night`.
    pub per_cell_miou: BTreeMap<String, f64>,
    /// Mean fusion weights per cell, for additive strategies.
    pub mean_weights: Option<BTreeMap<String, [f64; NUM_MODALITIES]>>,
    #[serde(skip)]
    pub ct_embeddings: Vec<Vec<f64>>,
    #[serde(skip)]
    pub cells: Vec<usize>,
}

/// Runs the model over `scenes` (already normalized) without dropout.
pub fn evaluate(model: &Model, scenes: &[Scene], collect_ct: bool) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(invalid("evaluate_miou", "empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    rng.set_stream(EVAL_STREAM);
    let mut total = ConfusionMatrix::new(NUM_CLASSES);
    let mut by_cell = vec![ConfusionMatrix::new(NUM_CLASSES); NUM_CELLS];
    let mut weight_sums = [[0.0; NUM_MODALITIES]; NUM_CELLS];
    let mut cell_counts = [0usize; NUM_CELLS];
    let mut have_weights = false;
    let mut ct_embeddings = Vec::new();
    let mut cells = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let images = stack_images(&refs)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, collect_ct, &mut rng)?;
        let logits = g.data(out.logits);
        let per_scene = logits.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let pred = predict(&logits[i * per_scene..(i + 1) * per_scene], NUM_CLASSES);
            let cell = s.attrs.cell().index();
            let mut cm = ConfusionMatrix::new(NUM_CLASSES);
            cm.add(&s.semantic_map, &pred)?;
            total.merge(&cm);
            by_cell[cell].merge(&cm);
            cell_counts[cell] += 1;
            cells.push(cell);
            if let Some(w) = out.weights {
                have_weights = true;
                let row = &g.data(w)[i * NUM_MODALITIES..(i + 1) * NUM_MODALITIES];
                for (acc, v) in weight_sums[cell].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if let (true, Some(ct)) = (collect_ct, out.ct) {
            let d = g.shape(ct)[1];
            ct_embeddings.extend(g.data(ct).chunks(d).map(|r| r.to_vec()));
        }
    }
    let mut per_cell_miou = BTreeMap::new();
    let mut mean_weights = BTreeMap::new();
    for cell in ConditionCell::all() {
        let i = cell.index();
        if cell_counts[i] == 0 {
            continue;
        }
        per_cell_miou.insert(cell.label(), by_cell[i].miou()?);
        let n = cell_counts[i] as f64;
        mean_weights.insert(cell.label(), weight_sums[i].map(|v| v / n));
    }
    Ok(Evaluation {
        miou: total.miou()?,
        per_class_iou: total.iou(),
        per_cell_miou,
        mean_weights: have_weights.then_some(mean_weights),
        ct_embeddings,
        cells,
    })
}
