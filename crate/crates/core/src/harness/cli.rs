//! The `osis` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    ablate, ablation_csv, ablation_table, curve_csv, curve_svg, evaluate_all, run_baseline, segment_all, sweep_beta,
    train_model, BaselineVariant, Dataset, ExperimentConfig,
};
use crate::error::{Error, Result};
use crate::infer::{SegmentationResult, Segmenter};
use crate::metrics::ground_truth_result;
use crate::model::{load_checkpoint, save_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "osis", version, about = "Open-set instance segmentation on synthetic LiDAR frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults to the desk experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long = "min-pts", global = true)]
    pub min_pts: Option<usize>,
    #[arg(long = "toggle-dl", global = true)]
    pub toggle_dl: Option<bool>,
    #[arg(long = "toggle-br", global = true)]
    pub toggle_br: Option<bool>,
    #[arg(long = "toggle-var", global = true)]
    pub toggle_var: Option<bool>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test scenes.
    Generate,
    /// Train a model; writes a checkpoint and a loss log.
    Train {
        /// Dataset directory from `generate`; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment the test scenes with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score segmentation results against the test scenes.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `.seg` files from `infer`.
        #[arg(long, conflicts_with = "ground_truth")]
        results: Option<PathBuf>,
        /// Score the ground truth itself.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Unknown quality across clustering betas.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated betas; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Train and evaluate every ablation row.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a bottom-up baseline end to end.
    Baseline {
        #[arg(long, value_parser = parse_variant, default_value = "bottomup")]
        variant: BaselineVariant,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<BaselineVariant, String> {
    match s {
        "bottomup" => Ok(BaselineVariant::BottomUp),
        "bottomup_e" => Ok(BaselineVariant::BottomUpE),
        _ => Err(format!("unknown baseline `{s}` (expected bottomup or bottomup_e)")),
    }
}

impl Common {
    /// Loads the config and applies command-line overrides.
    pub fn experiment(&self, baseline: Option<BaselineVariant>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.tau {
            cfg.infer.tau = v;
        }
        if let Some(v) = self.k {
            cfg.infer.k = v;
        }
        if let Some(v) = self.beta {
            cfg.infer.clustering.beta = v;
        }
        match baseline {
            Some(variant) => {
                cfg.baseline.variant = variant;
                if let Some(v) = self.eps {
                    cfg.baseline.eps = v;
                }
                if let Some(v) = self.min_pts {
                    cfg.baseline.min_pts = v;
                }
            }
            None => {
                if let Some(v) = self.eps {
                    cfg.infer.clustering.eps = v;
                }
                if let Some(v) = self.min_pts {
                    cfg.infer.clustering.min_pts = v;
                }
            }
        }
        if let Some(v) = self.toggle_dl {
            cfg.toggles.dl = v;
        }
        if let Some(v) = self.toggle_br {
            cfg.toggles.br = v;
        }
        if let Some(v) = self.toggle_var {
            cfg.toggles.var = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::at(path, e))
}

fn dataset(cfg: &ExperimentConfig, dir: &Option<PathBuf>) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => Dataset::generate(cfg),
    }
}

fn load_results(dir: &Path, n: usize) -> Result<Vec<SegmentationResult>> {
    (0..n)
        .map(|i| SegmentationResult::load(&dir.join(format!("{i:04}.seg"))))
        .collect()
}

/// Runs one command; returns the lines to print.
pub fn run(cli: &Cli) -> Result<String> {
    let baseline = match &cli.command {
        Command::Baseline { variant, .. } => Some(*variant),
        _ => None,
    };
    let cfg = cli.common.experiment(baseline)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::at(out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;

    match &cli.command {
        Command::Generate => {
            let data = Dataset::generate(&cfg)?;
            data.save(out)?;
            Ok(format!(
                "wrote {} train and {} test scenes to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            ))
        }
        Command::Train { data } => {
            let data = dataset(&cfg, data)?;
            let (ckpt, log) = train_model(&cfg, &data)?;
            save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
            log.save(&out.join("train_log.csv"))?;
            let last = log.rows.last().map_or(f64::NAN, |r| r.total);
            Ok(format!("trained {} steps, final loss {last:.4}", log.rows.len()))
        }
        Command::Infer { checkpoint, data } => {
            let data = dataset(&cfg, data)?;
            let seg = Segmenter::new(&load_checkpoint(checkpoint)?)?;
            let results = segment_all(&seg, &data.test, &cfg.infer)?;
            for (i, r) in results.iter().enumerate() {
                r.save(&out.join(format!("{i:04}.seg")))?;
            }
            Ok(format!("segmented {} scenes", results.len()))
        }
        Command::Eval {
            data,
            results,
            ground_truth,
        } => {
            let data = dataset(&cfg, data)?;
            let preds = match (results, ground_truth) {
                (_, true) => data.test.iter().map(ground_truth_result).collect(),
                (Some(dir), false) => load_results(dir, data.test.len())?,
                (None, false) => return Err(Error::Invalid("eval needs --results or --ground-truth".into())),
            };
            let report = evaluate_all(&data.test, &preds)?;
            report.save_csv(&out.join("report.csv"))?;
            let table = report.to_table("eval");
            write(&out.join("report.txt"), &table)?;
            Ok(table)
        }
        Command::Sweep {
            checkpoint,
            data,
            betas,
        } => {
            let data = dataset(&cfg, data)?;
            let seg = Segmenter::new(&load_checkpoint(checkpoint)?)?;
            let betas = betas.clone().unwrap_or_else(|| cfg.sweep_betas.clone());
            let rows = sweep_beta(&seg, &data.test, &cfg.infer, &betas)?;
            let csv = curve_csv(&rows);
            write(&out.join("sweep.csv"), &csv)?;
            write(&out.join("sweep.svg"), &curve_svg(&rows, "Unknown quality vs beta"))?;
            Ok(csv)
        }
        Command::Ablate { data } => {
            let data = dataset(&cfg, data)?;
            let rows = ablate(&cfg, &data)?;
            for (i, r) in rows.iter().enumerate() {
                r.report.save_csv(&out.join(format!("ablation_{i}.csv")))?;
            }
            write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            let table = ablation_table(&rows);
            write(&out.join("ablation.txt"), &table)?;
            Ok(table)
        }
        Command::Baseline {
            variant,
            checkpoint,
            data,
        } => {
            let data = dataset(&cfg, data)?;
            let seg = match checkpoint {
                Some(p) => Some(Segmenter::new(&load_checkpoint(p)?)?),
                None => None,
            };
            let results = run_baseline(&cfg.baseline, &data.test, seg.as_ref())?;
            let report = evaluate_all(&data.test, &results)?;
            report.save_csv(&out.join("report.csv"))?;
            let label = match variant {
                BaselineVariant::BottomUp => "bottomup",
                BaselineVariant::BottomUpE => "bottomup_e",
            };
            let table = report.to_table(label);
            write(&out.join("report.txt"), &table)?;
            Ok(table)
        }
    }
}
