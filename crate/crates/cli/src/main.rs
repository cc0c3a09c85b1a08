use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cafuser::harness::{
    evaluate, gradient_suite, parameter_reduction, read_ablation_csv, report_caa_weights, run_ablation,
    standard_grid, summarize, train_logged, write_ablation_csv, write_summary_csv, AblationRecord, Model,
    RunReport, Splits, TrainConfig,
};
use cafuser::scenes::{write_benchmark, BenchmarkSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cafuser", version, about = "Condition-aware multimodal fusion on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark into train/val/test dataset files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        train: usize,
        #[arg(long, default_value_t = 160)]
        val: usize,
        #[arg(long, default_value_t = 160)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and write its checkpoint, config, report and log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Restrict to these axes (comma-separated); every axis by default.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
        /// Parallel training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Tabulate mean CAA weights per condition cell as CSV and SVG.
    ReportWeights {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every component.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of the shared and per-modality-backbone variants.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines with optional `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set fusion.kind=ca2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig, Box<dyn std::error::Error>> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn load_run(run: &Path) -> Result<Model, Box<dyn std::error::Error>> {
    let cfg = TrainConfig::parse(&fs::read_to_string(run.join("config.cfg"))?)?;
    let mut model = Model::new(&cfg)?;
    model.read_checkpoint(File::open(run.join("checkpoint.cfw"))?)?;
    Ok(model)
}

fn gen_data(out: &Path, spec: BenchmarkSpec) -> CliResult {
    let stats = write_benchmark(out, &spec)?;
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "wrote {} train / {} val / {} test scenes to {}",
        spec.train,
        spec.val,
        spec.test,
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: TrainConfig, data: &Path, out: &Path) -> CliResult {
    let splits = Splits::load(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.cfg"), cfg.to_config_string())?;
    let mut log = BufWriter::new(File::create(out.join("train.log"))?);
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let mut running = 0.0;
    let mut log_err = None;
    let (model, report) = train_logged(&cfg, &splits, |s| {
        running += s.loss;
        if (s.step + 1) % per_epoch == 0 {
            let line = format!("epoch {} step {} loss {:.6}", s.epoch + 1, s.step + 1, running / per_epoch as f64);
            eprintln!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
            running = 0.0;
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    model.write_checkpoint(BufWriter::new(File::create(out.join("checkpoint.cfw"))?))?;
    write_json(&out.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &RunReport) {
    for (split, v) in &r.miou {
        println!("{split} mIoU {:.2}", 100.0 * v);
    }
    for (cell, v) in &r.per_cell_miou {
        println!("  {cell:<12} {:.2}", 100.0 * v);
    }
    if let Some(acc) = r.ct_probe_accuracy {
        println!("CT probe accuracy {:.1}%", 100.0 * acc);
    }
    println!("parameters {}", r.parameter_count);
}

fn eval_cmd(data: &Path, run: &Path, split: &str) -> CliResult {
    let splits = Splits::load(data)?;
    let model = load_run(run)?;
    let eval = evaluate(&model, splits.get(split)?, false)?;
    write_json(&run.join(format!("eval_{split}.json")), &eval)?;
    println!("{split} mIoU {:.2}", 100.0 * eval.miou);
    for (cell, v) in &eval.per_cell_miou {
        println!("  {cell:<12} {:.2}", 100.0 * v);
    }
    Ok(())
}

fn ablate_cmd(base: TrainConfig, data: &Path, out: &Path, seeds: &[u64], axes: &[String], jobs: usize) -> CliResult {
    let splits = Splits::load(data)?;
    let grid: Vec<_> = standard_grid(&base)
        .into_iter()
        .filter(|r| axes.is_empty() || axes.contains(&r.axis))
        .collect();
    if grid.is_empty() {
        return Err(format!("no grid rows match axes {axes:?}").into());
    }
    fs::create_dir_all(out)?;
    let runs = run_ablation(&grid, seeds, &splits, jobs, |run| match &run.outcome {
        Ok(r) => eprintln!("{}={} seed {}: test mIoU {:.2}", run.axis, run.value, run.seed, 100.0 * r.test_miou()),
        Err(e) => eprintln!("{}={} seed {}: failed: {e}", run.axis, run.value, run.seed),
    });
    let records: Vec<AblationRecord> = runs.iter().map(AblationRecord::from).collect();
    let csv_path = out.join("ablation.csv");
    write_ablation_csv(&records, File::create(&csv_path)?)?;
    if read_ablation_csv(File::open(&csv_path)?)? != records {
        return Err("ablation CSV did not re-parse to the written table".into());
    }
    let summary = summarize(&records);
    write_summary_csv(&summary, File::create(out.join("summary.csv"))?)?;
    let reports: Vec<&RunReport> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    write_json(&out.join("reports.json"), &reports)?;
    for s in &summary {
        println!(
            "{:<12} {:<15} {:.2} ± {:.2}  ({} runs, {} failed)",
            s.axis,
            s.value,
            100.0 * s.mean_miou,
            100.0 * s.std_miou,
            s.runs,
            s.failed
        );
    }
    Ok(())
}

fn report_weights_cmd(data: &Path, run: &Path, split: &str, out: Option<&Path>) -> CliResult {
    let splits = Splits::load(data)?;
    let model = load_run(run)?;
    let table = report_caa_weights(&model, splits.get(split)?)?;
    let out = out.unwrap_or(run);
    fs::create_dir_all(out)?;
    table.write_csv(File::create(out.join("caa_weights.csv"))?)?;
    fs::write(out.join("caa_weights.svg"), table.to_svg())?;
    println!("{:<12} {:>6} {:>6} {:>6} {:>6}", "cell", "rgb", "lidar", "radar", "event");
    for (cell, w) in &table.rows {
        println!("{cell:<12} {:>6.1} {:>6.1} {:>6.1} {:>6.1}", w[0], w[1], w[2], w[3]);
    }
    Ok(())
}

fn check_grad_cmd(seed: u64) -> Result<bool, Box<dyn std::error::Error>> {
    let results = gradient_suite(seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<40} {:.3e} {}",
            r.name,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn params_cmd(cfg: &TrainConfig) -> CliResult {
    let r = parameter_reduction(cfg)?;
    println!("{:<10} {:>10} {:>10}", "group", "shared", "separate");
    let mut names: Vec<&String> = r.shared.groups.keys().chain(r.reference.groups.keys()).collect();
    names.sort();
    names.dedup();
    for n in names {
        println!("{n:<10} {:>10} {:>10}", r.shared.group(n), r.reference.group(n));
    }
    println!("{:<10} {:>10} {:>10}", "total", r.shared.total, r.reference.total);
    println!("backbone+adapters+fusion ratio {:.3}", r.ratio);
    println!("total ratio {:.3}", r.total_ratio);
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            test,
            seed,
        } => gen_data(
            &out,
            BenchmarkSpec {
                seed,
                train,
                val,
                test,
                ..BenchmarkSpec::default()
            },
        )?,
        Command::Train { config, data, out } => train_cmd(config.load()?, &data, &out)?,
        Command::Eval { data, run, split } => eval_cmd(&data, &run, &split)?,
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            axes,
            jobs,
        } => ablate_cmd(config.load()?, &data, &out, &seeds, &axes, jobs)?,
        Command::ReportWeights { data, run, split, out } => report_weights_cmd(&data, &run, &split, out.as_deref())?,
        Command::CheckGrad { seed } => return check_grad_cmd(seed),
        Command::Params { config } => params_cmd(&config.load()?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
