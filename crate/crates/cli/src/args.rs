use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowdet::metrics::EvalConfig;
use flowdet::pipeline::SamplerKind;
use flowdet::sampler::{Prior, Solver};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "flowdet",
    version,
    about = "Few-step generative box detection on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "FLOWDET_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Synthetic datasets (`dataset generate`).
    Dataset(DatasetArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Train several config variants from the same seed and tabulate them.
    Ablate(AblateArgs),
    /// Run the sampler and write raw detections.
    Sample(SampleArgs),
    /// Sample, suppress and score a dataset split.
    Eval(EvalArgs),
    /// AP over a grid of step counts and proposal counts.
    Sweep(SweepArgs),
    /// Flow and diffusion checkpoints side by side over step counts.
    Compare(CompareArgs),
    /// Summarize a training run directory (tables and plots).
    Report(ReportArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Settings sized for a CPU run on the default synthetic set.
    Desk,
    /// Library defaults.
    Default,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetAction {
    Generate,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DatasetArgs {
    #[arg(value_enum)]
    pub action: DatasetAction,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write one dataset of K scenes directly into `--out` instead of
    /// train/, val/ and test/ splits.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 300)]
    pub val: usize,
    #[arg(long, default_value_t = 300)]
    pub test: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    /// Background noise standard deviation (default: library default).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
}

/// Training configuration sources, applied in order: preset, file, `--set`.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// JSON file with overrides (nested objects or dotted keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, e.g. `--set loss.lambda_flow=0` (value parsed as JSON).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset root with train/, val/ and test/.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub config: ConfigArgs,
    /// Run directory for checkpoints, history and reports.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Continue from the run directory's saved state.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Proposals for the final test-split evaluation.
    #[arg(long, default_value_t = 120)]
    pub eval_proposals: usize,
    /// Sampling steps for the final test-split evaluation.
    #[arg(long, default_value_t = 3)]
    pub eval_steps: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub config: ConfigArgs,
    /// JSON list of `{"name": ..., "overrides": {...}}`.
    #[arg(long)]
    pub variants: PathBuf,
    #[arg(long, default_value = "runs/ablation")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub proposals: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
}

/// Sampler flags shared by sample, eval and sweep.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SamplingArgs {
    /// Sampler; defaults to the one matching the checkpoint's training objective.
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    /// Base noise seed (each image derives its own).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial proposal distribution: standard-normal or uniform-log.
    #[arg(long, default_value = "standard-normal")]
    pub prior: Prior,
    /// ODE solver for the flow sampler: euler, heun or rk4.
    #[arg(long, default_value = "euler")]
    pub solver: Solver,
    /// Re-draw low-confidence proposals between steps (diffusion sampler only).
    #[arg(long, value_enum, default_value = "off")]
    pub box_renewal: Toggle,
}

/// Dataset selection: a split directory, or a root plus split name.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Split used when `--data` is a dataset root.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdArgs {
    /// IoU thresholds for AP, precision and recall.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub iou_thresholds: Vec<f64>,
    /// Confidence cut-offs for the precision/recall operating points.
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5")]
    pub conf_thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_conf: f64,
}

impl ThresholdArgs {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
            conf_thresholds: self.conf_thresholds.clone(),
            nms_iou: self.nms_iou,
            nms_conf: self.nms_conf,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 120)]
    pub proposals: usize,
    /// Only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Apply NMS with these (IoU, confidence) settings before writing.
    #[arg(long, value_enum, default_value = "off")]
    pub nms: Toggle,
    #[command(flatten)]
    #[serde(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, default_value = "samples")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 120)]
    pub proposals: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub thresholds: ThresholdArgs,
    /// Refuse checkpoints whose architecture hash differs from this one.
    #[arg(long)]
    pub expect_config_hash: Option<String>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,10")]
    pub steps_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "12,50,120,300")]
    pub proposals_list: Vec<usize>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Checkpoint sampled with the flow (Euler) sampler.
    #[arg(long)]
    pub flow: PathBuf,
    /// Checkpoint sampled with the DDIM sampler.
    #[arg(long)]
    pub diffusion: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub steps_list: Vec<usize>,
    #[arg(long, default_value_t = 120)]
    pub proposals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Box renewal for the diffusion sampler.
    #[arg(long, value_enum, default_value = "off")]
    pub box_renewal: Toggle,
    #[arg(long, default_value = "compare")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Training run directory (with history.jsonl).
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the report; defaults to `<run>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn output(p: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => absolute(&r.join(p)),
        _ => absolute(p),
    }
}

impl Command {
    /// Makes every path absolute (outputs under `root` when relative) so the
    /// recorded command does not depend on the working directory.
    pub fn normalize(&mut self, root: Option<&Path>) {
        match self {
            Command::Dataset(a) => a.out = output(&a.out, root),
            Command::Train(a) => {
                a.data = absolute(&a.data);
                a.config.config = a.config.config.as_deref().map(absolute);
                a.out = output(&a.out, root);
            }
            Command::Ablate(a) => {
                a.data = absolute(&a.data);
                a.config.config = a.config.config.as_deref().map(absolute);
                a.variants = absolute(&a.variants);
                a.out = output(&a.out, root);
            }
            Command::Sample(a) => {
                a.checkpoint = absolute(&a.checkpoint);
                a.data.data = absolute(&a.data.data);
                a.out = output(&a.out, root);
            }
            Command::Eval(a) => {
                a.checkpoint = absolute(&a.checkpoint);
                a.data.data = absolute(&a.data.data);
                a.out = output(&a.out, root);
            }
            Command::Sweep(a) => {
                a.checkpoint = absolute(&a.checkpoint);
                a.data.data = absolute(&a.data.data);
                a.out = output(&a.out, root);
            }
            Command::Compare(a) => {
                a.flow = absolute(&a.flow);
                a.diffusion = absolute(&a.diffusion);
                a.data.data = absolute(&a.data.data);
                a.out = output(&a.out, root);
            }
            Command::Report(a) => {
                a.run = absolute(&a.run);
                a.out = a.out.as_deref().map(|o| output(o, root));
            }
            Command::Rerun(a) => {
                a.manifest = absolute(&a.manifest);
                a.out = a.out.as_deref().map(|o| output(o, root));
            }
        }
    }

    /// Directory the command writes into (and where its manifest goes).
    pub fn out_dir(&self) -> Option<PathBuf> {
        match self {
            Command::Dataset(a) => Some(a.out.clone()),
            Command::Train(a) => Some(a.out.clone()),
            Command::Ablate(a) => Some(a.out.clone()),
            Command::Sample(a) => Some(a.out.clone()),
            Command::Eval(a) => Some(a.out.clone()),
            Command::Sweep(a) => Some(a.out.clone()),
            Command::Compare(a) => Some(a.out.clone()),
            Command::Report(a) => Some(a.out.clone().unwrap_or_else(|| a.run.join("report"))),
            Command::Rerun(_) => None,
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            Command::Dataset(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Sample(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::Sweep(a) => a.out = out,
            Command::Compare(a) => a.out = out,
            Command::Report(a) => a.out = Some(out),
            Command::Rerun(a) => a.out = Some(out),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Dataset(_) => "dataset",
            Command::Train(_) => "train",
            Command::Ablate(_) => "ablate",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Compare(_) => "compare",
            Command::Report(_) => "report",
            Command::Rerun(_) => "rerun",
        }
    }
}
