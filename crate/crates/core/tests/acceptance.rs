mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use cafuser::condition::{
    build_condition_prompt, ConditionAttributes, GroundCondition, PrecipitationLevel, PrecipitationType, TimeOfDay,
    Weather,
};
use cafuser::fusion::{weighted_fuse, CaaHead, Ca2Fusion, CtTarget, Modality, ModalityMask, NUM_MODALITIES};
use cafuser::harness::*;
use cafuser::nn::FeaturePyramid;
use cafuser::scenes::{write_benchmark, BenchmarkSpec};
use cafuser::tensor::{Graph, ParamStore};
use common::{rand_tensor, random_oracle_case};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

/// Written straight to stderr so the lines survive output capture.
fn announce(id: usize, name: &str, v: &Verdict) {
    let status = if v.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{status}] {name}: {}", v.detail);
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let checks = gradient_suite(0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = checks.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let has_end_to_end = checks.iter().any(|c| c.name.starts_with("end_to_end"));
    Verdict::new(
        failed.is_empty() && has_end_to_end && elapsed < Duration::from_secs(300),
        format!(
            "{} checks, worst {} at {:.2e}, failed {failed:?}, {:.1?}",
            checks.len(),
            worst.name,
            worst.max_relative_error,
            elapsed
        ),
    )
}

fn golden_prompt() -> Verdict {
    let attrs = ConditionAttributes {
        weather: Weather::Rain,
        time_of_day: TimeOfDay::Night,
        precipitation_type: Some(PrecipitationType::Rain),
        precipitation_level: Some(PrecipitationLevel::Light),
        ground_condition: GroundCondition::Wet,
        sky_condition: None,
    };
    let text = build_condition_prompt(&attrs).expect("valid attributes").text;
    let expected = "A rainy driving scene at nighttime with light rain, a wet ground and a dark sky.";
    Verdict::new(text.as_bytes() == expected.as_bytes(), format!("{text:?}"))
}

fn attention_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut padded = 0;
    for seed in 0..200u64 {
        for target in CtTarget::ALL {
            let case = random_oracle_case(seed, target);
            worst = worst.max(case.max_abs_err);
            if case.input_shape[1] % 7 != 0 || case.input_shape[2] % 7 != 0 {
                padded += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst <= 1e-10 && padded > 0 && elapsed < Duration::from_secs(60),
        format!("800 instances ({padded} padded), max abs error {worst:.1e}, {elapsed:.1?}"),
    )
}

fn spatial_preservation() -> Verdict {
    let mut mismatches = Vec::new();
    for seed in 0..200u64 {
        let case = random_oracle_case(seed, CtTarget::ALL[seed as usize % 4]);
        if case.output_shape != case.input_shape {
            mismatches.push(format!("oracle seed {seed}"));
        }
    }
    let channels = [16, 32, 64, 128];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for side in [32usize, 64, 96] {
        let b = 2;
        let pyramid = |g: &mut Graph, rng: &mut ChaCha8Rng| FeaturePyramid {
            levels: (0..4)
                .map(|l| {
                    let s = side >> (l + 2);
                    g.constant(rand_tensor(&[b, s, s, channels[l]], rng))
                })
                .collect(),
        };
        for target in CtTarget::ALL {
            let mut store = ParamStore::new();
            let fusion = Ca2Fusion::new(&mut store, "fusion", &channels, 8, target, 2, &mut rng).unwrap();
            let mut g = Graph::new();
            let rgb = pyramid(&mut g, &mut rng);
            let secs: Vec<(Modality, FeaturePyramid)> =
                Modality::ALL[1..].iter().map(|&m| (m, pyramid(&mut g, &mut rng))).collect();
            let refs: Vec<(Modality, &FeaturePyramid)> = secs.iter().map(|(m, p)| (*m, p)).collect();
            let ct = g.constant(rand_tensor(&[b, 8], &mut rng));
            let fused = fusion.forward(&mut g, &store, &rgb, &refs, Some(ct)).unwrap();
            for (l, (f, r)) in fused.levels.iter().zip(&rgb.levels).enumerate() {
                if g.shape(*f) != g.shape(*r) {
                    mismatches.push(format!("ca2 {target:?} side {side} level {l}"));
                }
            }
        }
        let mut store = ParamStore::new();
        let head = CaaHead::new(&mut store, "fusion.caa", 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let pyramids: Vec<FeaturePyramid> = (0..NUM_MODALITIES).map(|_| pyramid(&mut g, &mut rng)).collect();
        let ct = g.constant(rand_tensor(&[b, 8], &mut rng));
        let w = head.weights(&mut g, &store, ct, ModalityMask::parse("CLRE").unwrap()).unwrap();
        let slots: [Option<&FeaturePyramid>; NUM_MODALITIES] = std::array::from_fn(|m| Some(&pyramids[m]));
        let fused = weighted_fuse(&mut g, &slots, w).unwrap();
        for (l, (f, r)) in fused.levels.iter().zip(&pyramids[0].levels).enumerate() {
            if g.shape(*f) != g.shape(*r) {
                mismatches.push(format!("caa side {side} level {l}"));
            }
        }
    }
    Verdict::new(mismatches.is_empty(), format!("mismatches {mismatches:?}"))
}

fn parameter_reduction_check() -> Verdict {
    let r = parameter_reduction(&TrainConfig::default()).expect("default config builds");
    Verdict::new(
        r.ratio <= 0.5,
        format!(
            "fusion path {} vs {} parameters, ratio {:.3} (whole model {:.3})",
            r.shared.fusion_path(),
            r.reference.fusion_path(),
            r.ratio,
            r.total_ratio
        ),
    )
}

struct Runs {
    by_row: BTreeMap<String, Vec<RunReport>>,
    records: Vec<AblationRecord>,
    errors: Vec<String>,
}

impl Runs {
    fn test_miou(&self, row: &str) -> Vec<f64> {
        self.by_row.get(row).map_or(Vec::new(), |rs| rs.iter().map(RunReport::test_miou).collect())
    }

    fn complete(&self, row: &str) -> bool {
        self.by_row.get(row).is_some_and(|rs| rs.len() == SEEDS.len())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark_runs(data: &Splits) -> Runs {
    let row = |value: &str, overrides: &[&str]| {
        let mut config = TrainConfig::default();
        config.apply_overrides(overrides).unwrap();
        AblationRow { axis: "acceptance".into(), value: value.into(), config }
    };
    let rows = [
        row("caa", &[]),
        row("mean", &["fusion.kind=mean"]),
        row("rgb_only", &["model.modalities=C"]),
        row("ca2", &["fusion.kind=ca2"]),
        row("ca2_no_cond", &["fusion.kind=ca2", "condition.lambda=0"]),
    ];
    let runs = run_ablation(&rows, &SEEDS, data, jobs(), |run| {
        let status = match &run.outcome {
            Ok(r) => format!("test mIoU {:.4}", r.test_miou()),
            Err(e) => format!("failed: {e}"),
        };
        let _ = writeln!(std::io::stderr(), "  run {} seed {}: {status}", run.value, run.seed);
    });
    let mut by_row: BTreeMap<String, Vec<RunReport>> = BTreeMap::new();
    let mut errors = Vec::new();
    for run in &runs {
        match &run.outcome {
            Ok(r) => by_row.entry(run.value.clone()).or_default().push(r.clone()),
            Err(e) => errors.push(format!("{} seed {}: {e}", run.value, run.seed)),
        }
    }
    Runs { by_row, records: runs.iter().map(AblationRecord::from).collect(), errors }
}

fn benchmark_gain(runs: &Runs) -> Verdict {
    if !(runs.complete("caa") && runs.complete("mean") && runs.complete("rgb_only")) {
        return Verdict::new(false, format!("missing runs: {:?}", runs.errors));
    }
    let (caa, base, rgb) = (runs.test_miou("caa"), runs.test_miou("mean"), runs.test_miou("rgb_only"));
    let over_mean = 100.0 * (mean(&caa) - mean(&base));
    let over_rgb = 100.0 * (mean(&caa) - mean(&rgb));
    Verdict::new(
        over_mean >= 2.0 && over_rgb >= 5.0,
        format!(
            "caa {:.4} {caa:.4?}, mean {:.4} {base:.4?}, rgb-only {:.4} {rgb:.4?}; +{over_mean:.2} / +{over_rgb:.2} points",
            mean(&caa),
            mean(&base),
            mean(&rgb)
        ),
    )
}

fn condition_adaptivity(runs: &Runs) -> Verdict {
    if !runs.complete("caa") {
        return Verdict::new(false, "missing caa runs");
    }
    let gaps: Vec<f64> = runs.by_row["caa"]
        .iter()
        .map(|r| {
            let w = r.caa_weights.as_ref().expect("caa report carries weights");
            w["clear-day"][Modality::Rgb.index()] - w["fog-night"][Modality::Rgb.index()]
        })
        .collect();
    Verdict::new(
        gaps.iter().all(|&d| d >= 0.10),
        format!("RGB weight clear-day minus fog-night per seed {gaps:.3?}"),
    )
}

fn condition_loss(runs: &Runs) -> Verdict {
    if !(runs.complete("ca2") && runs.complete("ca2_no_cond")) {
        return Verdict::new(false, format!("missing runs: {:?}", runs.errors));
    }
    let (with, without) = (runs.test_miou("ca2"), runs.test_miou("ca2_no_cond"));
    let diff = 100.0 * (mean(&with) - mean(&without));
    let note = if diff >= 0.0 {
        "holds"
    } else if diff > -0.3 {
        "tie within 0.3 points"
    } else {
        "reversed"
    };
    Verdict::new(
        diff > -0.3,
        format!(
            "with {:.4} {with:.4?}, without {:.4} {without:.4?}, {diff:+.2} points ({note})",
            mean(&with),
            mean(&without)
        ),
    )
}

fn condition_probe(runs: &Runs) -> Verdict {
    if !runs.complete("caa") {
        return Verdict::new(false, "missing caa runs");
    }
    let acc: Vec<f64> = runs.by_row["caa"].iter().map(|r| r.ct_probe_accuracy.unwrap_or(0.0)).collect();
    Verdict::new(acc.iter().all(|&a| a >= 0.90), format!("probe accuracy per seed {acc:.3?}"))
}

fn determinism(runs: &Runs) -> Verdict {
    let mut problems = Vec::new();
    let spec = BenchmarkSpec { seed: 9, train: 16, val: 8, test: 8, size: 32 };
    let data = Splits::generate(&spec).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&["train.epochs=2", "model.channels=4,8,12,16", "condition.ct_dim=8", "condition.text_layers=1"])
        .unwrap();
    let (model, first) = train(&cfg, &data).unwrap();
    let (_, second) = train(&cfg, &data).unwrap();
    if first != second {
        problems.push("rerun report differs".to_string());
    }

    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &spec).unwrap();
    let loaded = Splits::load(dir.path()).unwrap();
    if loaded.train != data.train || loaded.val != data.val || loaded.test != data.test {
        problems.push("dataset round trip differs".to_string());
    }

    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    let other = TrainConfig { seed: cfg.seed + 1, ..cfg.clone() };
    other.validate().unwrap();
    let mut restored = Model::new(&other).unwrap();
    restored.read_checkpoint(bytes.as_slice()).unwrap();
    let values = |m: &Model| m.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
    let mut again = Vec::new();
    restored.write_checkpoint(&mut again).unwrap();
    if values(&model) != values(&restored) || bytes != again {
        problems.push("checkpoint round trip differs".to_string());
    }

    let mut csv = Vec::new();
    write_ablation_csv(&runs.records, &mut csv).unwrap();
    let parsed = read_ablation_csv(csv.as_slice()).unwrap();
    if parsed != runs.records || runs.records.is_empty() {
        problems.push("ablation csv does not re-parse losslessly".to_string());
    }
    Verdict::new(
        problems.is_empty(),
        format!("{} ablation records, problems {problems:?}", runs.records.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut record = |id: usize, name: &'static str, v: Verdict| {
        announce(id, name, &v);
        verdicts.push((id, name, v.passed));
    };
    record(1, "gradient checks", gradient_checks());
    record(2, "prompt golden", golden_prompt());
    record(3, "windowed attention oracle", attention_oracle());
    record(4, "spatial preservation", spatial_preservation());
    record(5, "parameter reduction", parameter_reduction_check());

    let data = Splits::generate(&BenchmarkSpec::default()).expect("benchmark generates");
    let start = Instant::now();
    let runs = benchmark_runs(&data);
    let _ = writeln!(std::io::stderr(), "  {} benchmark runs in {:.0?}", runs.records.len(), start.elapsed());
    record(6, "benchmark gain", benchmark_gain(&runs));
    record(7, "condition adaptivity", condition_adaptivity(&runs));
    record(8, "condition loss", condition_loss(&runs));
    record(9, "condition probe", condition_probe(&runs));
    record(10, "determinism and serialization", determinism(&runs));

    let failed: Vec<String> = verdicts.iter().filter(|v| !v.2).map(|v| format!("{} {}", v.0, v.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

