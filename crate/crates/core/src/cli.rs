//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::attention::{attention_weights, ModelParams};
use crate::composer::train_stage2_zeroshot_traced;
use crate::dataio::{load_manifest, write_manifest, Dataset, SynthConfig};
use crate::eval::{evaluate, metrics_csv, EvalOptions, Metrics, Setting};
use crate::fewshot::fewshot_runs;
use crate::optim::checkpoint::{self, CheckpointMeta};
use crate::optim::gradcheck::{dataset_instance, grad_check_params};
use crate::optim::{train_stage1_traced, IterationLog, Stage, TrainConfig};

/// Largest relative gradient error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "densecomp",
    version,
    about = "Dense attribute attention with compositional feature generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SettingArg {
    Novel,
    Generalized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-model synthetic dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// First stage: attention, attribute embedding and grounding on seen classes.
    TrainAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Add the self-calibration term.
        #[arg(long)]
        calibration: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Second stage, zero-shot: fine-tune on composed novel-class features.
    TrainCompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Second stage, few-shot: repeated runs over random shot selections.
    TrainFewshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Optional training config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        setting: SettingArg,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        /// Plain sample accuracy instead of the per-class mean.
        #[arg(long)]
        micro: bool,
        /// JSON report path; a CSV copy is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "1")]
        stage: StageArg,
    },
    /// Dump one image's attention weights as CSV.
    InspectAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(path: &Path, metrics: &Metrics) -> anyhow::Result<()> {
    let json_path = if path.extension().is_some_and(|e| e == "csv") {
        path.with_extension("json")
    } else {
        path.to_path_buf()
    };
    write_json(&json_path, metrics)?;
    let csv_path = json_path.with_extension("csv");
    fs::write(&csv_path, metrics_csv(metrics)?).with_context(|| format!("writing {}", csv_path.display()))
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(BufWriter::new(file)))
    }

    fn sink(&mut self) -> impl FnMut(&IterationLog) + '_ {
        |entry| {
            // A failed log write should not abort training.
            if let Ok(line) = serde_json::to_string(entry) {
                let _ = writeln!(self.0, "{line}");
            }
        }
    }
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_manifest(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_params(dir: &Path) -> anyhow::Result<(ModelParams, CheckpointMeta)> {
    checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn save_params(params: &ModelParams, meta: &CheckpointMeta, dir: &Path) -> anyhow::Result<()> {
    checkpoint::save(params, meta, dir).with_context(|| format!("saving checkpoint {}", dir.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = read_json(&config)?;
            let dataset = crate::dataio::synth_dataset(&cfg)?;
            let manifest = write_manifest(&dataset, &out)?;
            println!("{}", manifest.display());
        }
        Command::TrainAttention {
            data,
            config,
            calibration,
            out,
        } => {
            let dataset = load_data(&data)?;
            let cfg = TrainConfig::load(&config)?;
            fs::create_dir_all(&out)?;
            let mut log = JsonLines::create(&out.join("train_log.jsonl"))?;
            let params = train_stage1_traced(&dataset, &cfg, calibration, log.sink())?;
            log.0.flush()?;
            let meta = CheckpointMeta {
                stage: "attention".into(),
                iteration: cfg.n_att,
                seed: cfg.seed,
                calibration,
                config: cfg,
            };
            save_params(&params, &meta, &out)?;
        }
        Command::TrainCompose {
            data,
            ckpt,
            config,
            out,
        } => {
            let dataset = load_data(&data)?;
            let cfg = TrainConfig::load(&config)?;
            let (params, prev) = load_params(&ckpt)?;
            fs::create_dir_all(&out)?;
            let mut log = JsonLines::create(&out.join("train_log.jsonl"))?;
            let params = train_stage2_zeroshot_traced(&dataset, &params, &cfg, log.sink())?;
            log.0.flush()?;
            let meta = CheckpointMeta {
                stage: "compose".into(),
                iteration: cfg.n_comp,
                seed: cfg.seed,
                calibration: prev.calibration,
                config: cfg,
            };
            save_params(&params, &meta, &out)?;
        }
        Command::TrainFewshot {
            data,
            ckpt,
            shots,
            lambda,
            runs,
            config,
            out,
        } => {
            let dataset = load_data(&data)?;
            let base = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => {
                    let mut c = TrainConfig::default();
                    if let Some(seed) = crate::rng::seed_override() {
                        c.seed = seed;
                    }
                    c
                }
            };
            let cfg = TrainConfig { lambda, ..base };
            cfg.validate()?;
            let (params, _) = load_params(&ckpt)?;
            let opts = EvalOptions {
                margin: cfg.margin,
                ..Default::default()
            };
            let report = fewshot_runs(&dataset, &params, &cfg, shots, runs, &opts)?;
            fs::create_dir_all(&out)?;
            for run in &report.runs {
                write_json(&out.join(format!("run_{:02}.json", run.run)), run)?;
            }
            write_json(&out.join("report.json"), &report)?;
            fs::write(out.join("report.csv"), metrics_csv(&report.mean)?)?;
        }
        Command::Eval {
            data,
            ckpt,
            setting,
            margin,
            micro,
            report,
        } => {
            if !(margin >= 0.0 && margin.is_finite()) {
                bail!("margin must be finite and nonnegative");
            }
            let dataset = load_data(&data)?;
            let (params, _) = load_params(&ckpt)?;
            let setting = match setting {
                SettingArg::Novel => Setting::NovelOnly,
                SettingArg::Generalized => Setting::Generalized,
            };
            let opts = EvalOptions {
                margin,
                per_class: !micro,
            };
            let metrics = evaluate(&dataset, &params, setting, &opts)?;
            write_report(&report, &metrics)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::GradCheck { data, stage } => {
            let dataset = load_data(&data)?;
            let inst = dataset_instance(&dataset, 3, 0)?;
            let stage = match stage {
                StageArg::One => Stage::Attention,
                StageArg::Two => Stage::FrozenFeatures,
            };
            let err = grad_check_params(&inst, stage, true, 1e-5, 256, 0)?;
            println!("max relative error {err:.3e}");
            if err >= GRAD_TOLERANCE {
                eprintln!("gradient check failed (tolerance {GRAD_TOLERANCE:e})");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::InspectAttention {
            data,
            ckpt,
            sample,
            out,
        } => {
            let dataset = load_data(&data)?;
            let (params, _) = load_params(&ckpt)?;
            let Some(s) = dataset.samples.get(sample) else {
                bail!("sample {sample} out of range (dataset has {})", dataset.samples.len());
            };
            let weights = attention_weights(s.regions.view(), &params)?;
            let mut w = csv::Writer::from_path(&out).with_context(|| format!("creating {}", out.display()))?;
            w.write_record(["attribute_id", "region_id", "weight"])?;
            for ((a, r), x) in weights.indexed_iter() {
                w.write_record([a.to_string(), r.to_string(), x.to_string()])?;
            }
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
