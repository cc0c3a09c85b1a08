use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{train, RunReport, Splits};
use crate::condition::{ConditionCell, PromptDetail};
use crate::error::{Error, Result};
use crate::fusion::{CtTarget, FusionKind, ModalityMask};

/// One configuration of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub config: TrainConfig,
}

impl AblationRow {
    fn new(axis: &str, value: &str, config: TrainConfig) -> Self {
        Self {
            axis: axis.to_string(),
            value: value.to_string(),
            config,
        }
    }
}

pub const AXES: [&str; 7] = [
    "fusion",
    "ct_target",
    "lambda_cond",
    "prompt",
    "modalities",
    "backbone",
    "caa_levels",
];

/// The ablation axes around `base`.
pub fn standard_grid(base: &TrainConfig) -> Vec<AblationRow> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut rows = Vec::new();
    for kind in [
        FusionKind::Mean,
        FusionKind::Random,
        FusionKind::LearnedStatic,
        FusionKind::Caa,
        FusionKind::Ca2,
    ] {
        rows.push(AblationRow::new("fusion", kind.name(), with(&|c| c.fusion_kind = kind)));
    }
    for target in [CtTarget::Q, CtTarget::Kv, CtTarget::Qkv, CtTarget::None] {
        rows.push(AblationRow::new(
            "ct_target",
            target.name(),
            with(&|c| {
                c.fusion_kind = FusionKind::Ca2;
                c.ct_target = target;
            }),
        ));
    }
    for lambda in [0.0, base.lambda_cond] {
        rows.push(AblationRow::new(
            "lambda_cond",
            &lambda.to_string(),
            with(&|c| {
                c.fusion_kind = FusionKind::Ca2;
                c.lambda_cond = lambda;
            }),
        ));
    }
    for (name, detail) in [("single", PromptDetail::SingleAttribute), ("full", PromptDetail::FullTemplate)] {
        rows.push(AblationRow::new("prompt", name, with(&|c| c.prompt_detail = detail)));
    }
    for code in ["C", "CL", "CLR", "CLRE"] {
        let mask = ModalityMask::parse(code).expect("valid code");
        rows.push(AblationRow::new("modalities", code, with(&|c| c.modalities = mask)));
    }
    for (name, shared) in [("shared", true), ("separate", false)] {
        rows.push(AblationRow::new("backbone", name, with(&|c| c.shared_backbone = shared)));
    }
    for (name, per_level) in [("shared", false), ("per_level", true)] {
        rows.push(AblationRow::new(
            "caa_levels",
            name,
            with(&|c| {
                c.fusion_kind = FusionKind::Caa;
                c.caa_per_level = per_level;
            }),
        ));
    }
    rows
}

/// One grid cell and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Trains every row for every seed on `jobs` worker threads. Failed runs are
/// recorded and the grid continues. Results keep grid order.
pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    data: &Splits,
    jobs: usize,
    on_done: impl Fn(&AblationRun) + Sync,
) -> Vec<AblationRun> {
    let tasks: Vec<(usize, &AblationRow, u64)> = rows
        .iter()
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .enumerate()
        .map(|(i, (r, s))| (i, r, s))
        .collect();
    let queue = Mutex::new(tasks.into_iter());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue poisoned").next();
                let Some((i, row, seed)) = next else { break };
                let cfg = TrainConfig {
                    seed,
                    ..row.config.clone()
                };
                let outcome = train(&cfg, data).map(|(_, r)| r).map_err(|e| e.to_string());
                let run = AblationRun {
                    axis: row.axis.clone(),
                    value: row.value.clone(),
                    seed,
                    outcome,
                };
                on_done(&run);
                results.lock().expect("results poisoned").push((i, run));
            });
        }
    });
    let mut results = results.into_inner().expect("results poisoned");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

/// One CSV line of the per-run table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub miou: Option<f64>,
    pub per_cell: Vec<Option<f64>>,
    pub error: Option<String>,
}

impl From<&AblationRun> for AblationRecord {
    fn from(run: &AblationRun) -> Self {
        let (miou, per_cell, error) = match &run.outcome {
            Ok(r) => (
                Some(r.test_miou()),
                ConditionCell::all()
                    .into_iter()
                    .map(|c| r.per_cell_miou.get(&c.label()).copied())
                    .collect(),
                None,
            ),
            Err(e) => (None, vec![None; ConditionCell::all().len()], Some(e.clone())),
        };
        Self {
            axis: run.axis.clone(),
            value: run.value.clone(),
            seed: run.seed,
            miou,
            per_cell,
            error,
        }
    }
}

pub fn ablation_header() -> Vec<String> {
    let mut h: Vec<String> = ["axis", "value", "seed", "miou"].iter().map(|s| s.to_string()).collect();
    h.extend(ConditionCell::all().into_iter().map(|c| c.label()));
    h.push("error".to_string());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_ablation_csv<W: Write>(records: &[AblationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ablation_header())?;
    for r in records {
        let mut line = vec![r.axis.clone(), r.value.clone(), r.seed.to_string(), opt(r.miou)];
        line.extend(r.per_cell.iter().map(|&v| opt(v)));
        line.push(r.error.clone().unwrap_or_default());
        w.write_record(line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv<R: Read>(input: R) -> Result<Vec<AblationRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
    if header != ablation_header() {
        return Err(Error::Config(format!("unexpected ablation columns {header:?}")));
    }
    let cells = ConditionCell::all().len();
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Config(format!("bad number '{s}'")))
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let seed = rec[2].parse().map_err(|_| Error::Config(format!("bad seed '{}'", &rec[2])))?;
        let per_cell = (0..cells).map(|i| num(&rec[4 + i])).collect::<Result<Vec<_>>>()?;
        let error = &rec[4 + cells];
        out.push(AblationRecord {
            axis: rec[0].to_string(),
            value: rec[1].to_string(),
            seed,
            miou: num(&rec[3])?,
            per_cell,
            error: (!error.is_empty()).then(|| error.to_string()),
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation of test mIoU per (axis, value).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
}

pub fn summarize(records: &[AblationRecord]) -> Vec<AblationSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&AblationRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.axis.clone(), r.value.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let vals: Vec<f64> = rs.iter().filter_map(|r| r.miou).collect();
            let n = vals.len();
            let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            AblationSummary {
                axis: key.0,
                value: key.1,
                runs: n,
                failed: rs.len() - n,
                mean_miou: mean,
                std_miou: std,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(summary: &[AblationSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis", "value", "runs", "failed", "mean_miou", "std_miou"])?;
    for s in summary {
        w.write_record([
            s.axis.clone(),
            s.value.clone(),
            s.runs.to_string(),
            s.failed.to_string(),
            s.mean_miou.to_string(),
            s.std_miou.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
