use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate;
use super::model::{stack_images, Model};
use super::optim::AdamW;
use super::probe::LinearProbe;
use crate::condition::NUM_CELLS;
use crate::error::{invalid, Error, Result};
use crate::fusion::{dropout_keep_mask, FusionKind, NUM_MODALITIES};
use crate::scenes::{generate_benchmark, read_dataset, BenchmarkSpec, NormStats, Scene};
use crate::seghead::total_loss;
use crate::tensor::Graph;

const TRAIN_STREAM: u64 = 0x7A1;

/// Normalized train / validation / test scenes.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    /// Final mIoU keyed by split name.
    pub miou: BTreeMap<String, f64>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Test mIoU per weather × time cell.
    pub per_cell_miou: BTreeMap<String, f64>,
    /// Mean test CAA weights per cell, `[rgb, lidar, radar, event]`.
    pub caa_weights: Option<BTreeMap<String, [f64; NUM_MODALITIES]>>,
    pub parameter_count: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Held-out accuracy of a linear probe from CT embeddings to condition cells.
    pub ct_probe_accuracy: Option<f64>,
}

impl Splits {
    /// Generates the benchmark in memory, normalized by training statistics.
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        let (train, val, test) = generate_benchmark(spec)?;
        let stats = NormStats::compute(&train)?;
        let norm = |v: Vec<Scene>| v.iter().map(|s| stats.apply(s)).collect();
        Ok(Self {
            train: norm(train),
            val: norm(val),
            test: norm(test),
        })
    }

    /// Reads `train.cfd`, `val.cfd` and `test.cfd` from `dir`; missing files
    /// leave their split empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Scene>> {
            let path = dir.join(format!("{name}.cfd"));
            if path.exists() {
                Ok(read_dataset(&path)?.normalized())
            } else {
                Ok(Vec::new())
            }
        };
        let splits = Self {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
        };
        if splits.train.is_empty() && splits.val.is_empty() && splits.test.is_empty() {
            return Err(invalid("load_splits", format!("no datasets found in {}", dir.display())));
        }
        Ok(splits)
    }

    pub fn get(&self, split: &str) -> Result<&[Scene]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(invalid("splits", format!("unknown split '{other}'"))),
        }
    }
}

impl RunReport {
    pub fn test_miou(&self) -> f64 {
        self.miou.get("test").copied().unwrap_or(f64::NAN)
    }
}

/// Per-step training progress.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Optimizes `model` for `steps` mini-batches drawn from `scenes`, or for
/// `cfg.epochs` epochs when `steps` is `None`. Returns per-step losses.
pub fn fit(
    model: &mut Model,
    scenes: &[Scene],
    steps: Option<usize>,
    mut on_step: impl FnMut(StepLog),
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(invalid("train", "empty training split"));
    }
    let cfg = model.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut opt = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);
    let freeze = cfg.freeze_backbone;
    let trainable = move |name: &str| !(freeze && name.starts_with("backbone"));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    let limit = steps.unwrap_or(usize::MAX);
    let mut epoch = 0;
    while step < limit && (steps.is_some() || epoch < cfg.epochs) {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= limit {
                break;
            }
            let refs: Vec<&Scene> = batch.iter().map(|&i| &scenes[i]).collect();
            let mut images = stack_images(&refs)?;
            if cfg.dropout > 0.0 {
                let per = images[0].numel() / refs.len();
                for b in 0..refs.len() {
                    let keep = dropout_keep_mask(cfg.dropout, &mut rng)?;
                    for (img, &k) in images.iter_mut().zip(&keep) {
                        if !k {
                            img.data_mut()[b * per..(b + 1) * per].fill(0.0);
                        }
                    }
                }
            }
            let targets: Vec<usize> = refs.iter().flat_map(|s| s.semantic_map.iter().map(|&c| c as usize)).collect();
            let attrs: Vec<_> = refs.iter().map(|s| s.attrs).collect();
            let with_cond = cfg.lambda_cond > 0.0;
            let mut g = Graph::new();
            let loss = (|| {
                let out = model.forward(&mut g, &images, with_cond, &mut rng)?;
                let cond = match (with_cond, out.ct) {
                    (true, Some(ct)) => Some(model.condition_loss(&mut g, ct, &attrs)?),
                    _ => None,
                };
                total_loss(&mut g, out.logits, &targets, cond, cfg.lambda_cond)
            })()
            .map_err(|e| match e {
                Error::ZeroNorm { .. } | Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
            let value = g.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            opt.step(&mut model.store, &trainable);
            on_step(StepLog { epoch, step, loss: value });
            losses.push(value);
            step += 1;
        }
        epoch += 1;
    }
    Ok(losses)
}

/// Trains a fresh model on `data.train` and evaluates it on every non-empty split.
pub fn train(cfg: &TrainConfig, data: &Splits) -> Result<(Model, RunReport)> {
    train_logged(cfg, data, |_| {})
}

pub fn train_logged(cfg: &TrainConfig, data: &Splits, on_step: impl FnMut(StepLog)) -> Result<(Model, RunReport)> {
    let mut model = Model::new(cfg)?;
    let losses = fit(&mut model, &data.train, None, on_step)?;
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let loss_curve = losses
        .chunks(per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let report = build_report(&model, data, loss_curve)?;
    Ok((model, report))
}

/// Evaluates a trained model into a report.
pub fn build_report(model: &Model, data: &Splits, loss_curve: Vec<f64>) -> Result<RunReport> {
    let mut miou = BTreeMap::new();
    let train_eval = if data.train.is_empty() {
        None
    } else {
        let e = evaluate(model, &data.train, true)?;
        miou.insert("train".to_string(), e.miou);
        Some(e)
    };
    if !data.val.is_empty() {
        miou.insert("val".to_string(), evaluate(model, &data.val, false)?.miou);
    }
    if data.test.is_empty() {
        return Err(invalid("evaluate_miou", "empty test split"));
    }
    let test = evaluate(model, &data.test, true)?;
    miou.insert("test".to_string(), test.miou);
    let ct_probe_accuracy = match &train_eval {
        Some(tr) if !tr.ct_embeddings.is_empty() && !test.ct_embeddings.is_empty() => {
            let probe = LinearProbe::fit(&tr.ct_embeddings, &tr.cells, NUM_CELLS)?;
            Some(probe.accuracy(&test.ct_embeddings, &test.cells))
        }
        _ => None,
    };
    Ok(RunReport {
        seed: model.cfg.seed,
        config: model.cfg.clone(),
        miou,
        per_class_iou: test.per_class_iou,
        per_cell_miou: test.per_cell_miou,
        caa_weights: if model.cfg.fusion_kind == FusionKind::Caa { test.mean_weights } else { None },
        parameter_count: model.store.num_scalars(),
        loss_curve,
        ct_probe_accuracy,
    })
}
