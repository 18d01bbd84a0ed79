use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flowdet::checkpoint::{load_model, CheckpointHeader};
use flowdet::data::{Dataset, DatasetSplits, SceneConfig};
use flowdet::geometry::{nms, Detection};
use flowdet::io::{atomic_write, atomic_write_json, config_hash};
use flowdet::metrics::EvalConfig;
use flowdet::model::Detector;
use flowdet::pipeline::{detect_image, evaluate_dataset, InferenceConfig, SamplerKind};
use flowdet::trainer::{
    read_history, run_ablation, train, HistoryRecord, TrainConfig, TrainOptions, TrainState, Variant, HISTORY_FILE,
    STATE_FILE,
};
use flowdet::FlowDetError;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::manifest::{Manifest, RunInfo};
use crate::plot::{line_chart, Series};
use crate::UsageError;

pub fn run(cli: Cli) -> Result<()> {
    let mut command = cli.command;
    command.normalize(cli.output_root.as_deref());
    if let Command::Rerun(r) = &command {
        let manifest = Manifest::read(&r.manifest)?;
        let mut recorded = manifest.command;
        if matches!(recorded, Command::Rerun(_)) {
            return Err(UsageError("manifest records another rerun".into()).into());
        }
        if let Some(out) = &r.out {
            recorded.set_out_dir(out.clone());
        }
        return execute(recorded);
    }
    execute(command)
}

fn execute(command: Command) -> Result<()> {
    let info = match &command {
        Command::Dataset(a) => cmd_dataset(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Sample(a) => cmd_sample(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Report(a) => cmd_report(a)?,
        Command::Rerun(_) => unreachable!("reruns are resolved before execution"),
    };
    let out = command
        .out_dir()
        .expect("every executed command has an output directory");
    Manifest::new(&command, info).write(&out)?;
    log::info!("{} finished; outputs in {}", command.name(), out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    atomic_write_json(path, value)?;
    Ok(())
}

/// Loads `dir` itself when it is a split, otherwise `dir/<split>`.
fn load_split(a: &DataArgs) -> Result<Dataset<f32>> {
    let dir = if a.data.join("annotations.json").exists() {
        a.data.clone()
    } else {
        a.data.join(&a.split)
    };
    let ds = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if ds.is_empty() {
        return Err(FlowDetError::Config(format!("dataset {} is empty", dir.display())).into());
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path, expected: Option<&str>) -> Result<(Detector<f32>, CheckpointHeader)> {
    load_model::<f32>(path, expected).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(UsageError(format!("--{name} must be at least 1")).into());
    }
    Ok(())
}

fn positive_list(name: &str, v: &[usize]) -> Result<()> {
    if v.is_empty() {
        return Err(UsageError(format!("--{name} must not be empty")).into());
    }
    v.iter().try_for_each(|&x| positive(name, x))
}

/// The sampler a checkpoint was trained for.
fn native_sampler(header: &CheckpointHeader) -> SamplerKind {
    match header.extra.get("objective").and_then(Value::as_str) {
        Some("diffusion") => SamplerKind::Ddim,
        _ => SamplerKind::Flow,
    }
}

fn inference(s: &SamplingArgs, header: &CheckpointHeader, proposals: usize, steps: usize) -> InferenceConfig {
    InferenceConfig {
        sampler: s.sampler.unwrap_or_else(|| native_sampler(header)),
        n_proposals: proposals,
        steps,
        seed: s.seed,
        prior: s.prior,
        solver: s.solver,
        box_renewal: s.box_renewal == Toggle::On,
        ..InferenceConfig::default()
    }
}

fn cmd_dataset(a: &DatasetArgs) -> Result<RunInfo> {
    let d = SceneConfig::default();
    let cfg = SceneConfig {
        image_size: a.image_size,
        n_objects_range: (
            a.min_objects.unwrap_or(d.n_objects_range.0),
            a.max_objects.unwrap_or(d.n_objects_range.1),
        ),
        noise_level: a.noise.unwrap_or(d.noise_level),
        seed: a.seed,
        ..d
    };
    cfg.validate()?;
    match a.count {
        Some(k) => {
            Dataset::<f32>::generate(&cfg, 0, k)?.save(&a.out)?;
            println!("wrote {k} scenes to {}", a.out.display());
        }
        None => {
            if a.train == 0 {
                return Err(UsageError("--train must be at least 1".into()).into());
            }
            DatasetSplits::<f32>::generate(&cfg, a.train, a.val, a.test)?.save(&a.out)?;
            println!(
                "wrote {} / {} / {} scenes to {}",
                a.train,
                a.val,
                a.test,
                a.out.display()
            );
        }
    }
    write_json(&a.out.join("scene_config.json"), &cfg)?;
    Ok(RunInfo {
        seed: Some(a.seed),
        config_hash: Some(config_hash(&cfg)),
    })
}

fn parse_set(entry: &str) -> Result<(String, Value)> {
    let (k, v) = entry
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {entry:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn build_config(c: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match c.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Default => TrainConfig::default(),
    };
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| FlowDetError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg = cfg.with_overrides(&value)?;
    }
    for entry in &c.set {
        let (k, v) = parse_set(entry)?;
        let mut obj = serde_json::Map::new();
        obj.insert(k, v);
        cfg = cfg.with_overrides(&Value::Object(obj))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<RunInfo> {
    positive("eval-proposals", a.eval_proposals)?;
    positive("eval-steps", a.eval_steps)?;
    let cfg = build_config(&a.config)?;
    let splits = DatasetSplits::<f32>::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let resume = if a.resume {
        Some(TrainState::load(&a.out.join(STATE_FILE), &cfg)?)
    } else {
        None
    };
    write_json(&a.out.join("config.json"), &cfg)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume,
        max_steps: a.max_steps,
    };
    let outcome = train(&splits.train, Some(&splits.val), &cfg, opts)?;
    let inf = cfg.inference(a.eval_proposals, a.eval_steps);
    let (report, _) = evaluate_dataset(&outcome.best_model, &splits.test, &inf, &EvalConfig::default())?;
    write_json(
        &a.out.join("test_report.json"),
        &json!({ "inference": inf, "report": report }),
    )?;
    write_text(&a.out.join("test_report.txt"), &report.to_table())?;
    println!(
        "trained {} steps ({} epochs); test AP10:50 = {:.4}",
        outcome.state.step, outcome.state.epoch, report.ap_10_50
    );
    Ok(RunInfo {
        seed: Some(cfg.seed),
        config_hash: Some(cfg.hash()),
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<RunInfo> {
    positive("proposals", a.proposals)?;
    positive("steps", a.steps)?;
    let base = build_config(&a.config)?;
    let text = fs::read_to_string(&a.variants).with_context(|| format!("reading {}", a.variants.display()))?;
    let variants: Vec<Variant> = serde_json::from_str(&text).map_err(|e| FlowDetError::Parse {
        path: a.variants.display().to_string(),
        detail: e.to_string(),
    })?;
    if variants.is_empty() {
        return Err(UsageError("variant list is empty".into()).into());
    }
    let splits = DatasetSplits::<f32>::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let report = run_ablation(
        &base,
        &variants,
        &splits.train,
        Some(&splits.val),
        &splits.test,
        a.proposals,
        a.steps,
        Some(&a.out),
    )?;
    write_json(&a.out.join("ablation.json"), &report)?;
    let table = report.to_table();
    write_text(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(RunInfo {
        seed: Some(base.seed),
        config_hash: Some(base.hash()),
    })
}

#[derive(Serialize)]
struct ImageSamples {
    index: usize,
    image_id: String,
    detections: Vec<Detection<f32>>,
}

fn cmd_sample(a: &SampleArgs) -> Result<RunInfo> {
    positive("steps", a.steps)?;
    positive("proposals", a.proposals)?;
    let eval = a.thresholds.eval_config();
    eval.validate()?;
    let (model, header) = load_checkpoint(&a.checkpoint, None)?;
    let data = load_split(&a.data)?;
    let inf = inference(&a.sampling, &header, a.proposals, a.steps);
    inf.validate()?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    let images = data.images[..n]
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let set = detect_image(&model, &img.image, i, &inf)?;
            let detections = if a.nms == Toggle::On {
                nms(&set.detections, eval.nms_iou as f32, eval.nms_conf as f32)
            } else {
                set.detections
            };
            Ok(ImageSamples {
                index: i,
                image_id: img.image_id.clone(),
                detections,
            })
        })
        .collect::<flowdet::Result<Vec<_>>>()?;
    write_json(
        &a.out.join("samples.json"),
        &json!({ "config_hash": header.config_hash, "inference": inf, "images": images }),
    )?;
    println!("sampled {n} images into {}", a.out.display());
    Ok(RunInfo {
        seed: Some(a.sampling.seed),
        config_hash: Some(header.config_hash),
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<RunInfo> {
    positive("steps", a.steps)?;
    positive("proposals", a.proposals)?;
    let eval = a.thresholds.eval_config();
    eval.validate()?;
    let (model, header) = load_checkpoint(&a.checkpoint, a.expect_config_hash.as_deref())?;
    let data = load_split(&a.data)?;
    let inf = inference(&a.sampling, &header, a.proposals, a.steps);
    let (report, _) = evaluate_dataset(&model, &data, &inf, &eval)?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "config_hash": header.config_hash,
            "inference": inf,
            "thresholds": eval,
            "report": report,
        }),
    )?;
    let table = report.to_table();
    write_text(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(RunInfo {
        seed: Some(a.sampling.seed),
        config_hash: Some(header.config_hash),
    })
}

#[derive(Serialize)]
struct SweepCell {
    steps: usize,
    proposals: usize,
    ap_10_50: f64,
    ap: Vec<f64>,
}

fn csv_header(iou: &[f64]) -> String {
    let cols: Vec<String> = iou.iter().map(|t| format!("ap_{:.0}", t * 100.0)).collect();
    cols.join(",")
}

fn cmd_sweep(a: &SweepArgs) -> Result<RunInfo> {
    positive_list("steps-list", &a.steps_list)?;
    positive_list("proposals-list", &a.proposals_list)?;
    let (model, header) = load_checkpoint(&a.checkpoint, None)?;
    let data = load_split(&a.data)?;
    let eval = EvalConfig::default();
    let mut cells = Vec::new();
    for &n in &a.proposals_list {
        for &s in &a.steps_list {
            let inf = inference(&a.sampling, &header, n, s);
            let (r, _) = evaluate_dataset(&model, &data, &inf, &eval)?;
            log::info!("S={s} N={n} AP10:50 {:.4}", r.ap_10_50);
            cells.push(SweepCell {
                steps: s,
                proposals: n,
                ap_10_50: r.ap_10_50,
                ap: r.per_iou.iter().map(|m| m.ap).collect(),
            });
        }
    }
    let mut csv = format!("steps,proposals,ap_10_50,{}\n", csv_header(&eval.iou_thresholds));
    for c in &cells {
        let aps: Vec<String> = c.ap.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(csv, "{},{},{:.6},{}", c.steps, c.proposals, c.ap_10_50, aps.join(","));
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    write_json(
        &a.out.join("sweep.json"),
        &json!({ "config_hash": header.config_hash, "cells": cells }),
    )?;

    let by_steps: Vec<Series> = a
        .proposals_list
        .iter()
        .map(|&n| Series {
            name: format!("N={n}"),
            points: cells
                .iter()
                .filter(|c| c.proposals == n)
                .map(|c| (c.steps as f64, c.ap_10_50))
                .collect(),
        })
        .collect();
    let by_props: Vec<Series> = a
        .steps_list
        .iter()
        .map(|&s| Series {
            name: format!("S={s}"),
            points: cells
                .iter()
                .filter(|c| c.steps == s)
                .map(|c| (c.proposals as f64, c.ap_10_50))
                .collect(),
        })
        .collect();
    write_text(
        &a.out.join("ap_vs_steps.svg"),
        &line_chart(
            "Sampling steps vs. AP",
            "sampling steps S",
            "AP10:50",
            &by_steps,
            Some((0.0, 1.0)),
        ),
    )?;
    write_text(
        &a.out.join("ap_vs_proposals.svg"),
        &line_chart(
            "Box proposals vs. AP",
            "proposals N",
            "AP10:50",
            &by_props,
            Some((0.0, 1.0)),
        ),
    )?;
    print!("{csv}");
    Ok(RunInfo {
        seed: Some(a.sampling.seed),
        config_hash: Some(header.config_hash),
    })
}

#[derive(Serialize)]
struct CompareRow {
    steps: usize,
    flow_ap: f64,
    diffusion_ap: f64,
    /// flow / diffusion; absent when the diffusion AP is zero.
    ratio: Option<f64>,
}

fn cmd_compare(a: &CompareArgs) -> Result<RunInfo> {
    positive_list("steps-list", &a.steps_list)?;
    positive("proposals", a.proposals)?;
    let (flow, fh) = load_checkpoint(&a.flow, None)?;
    let (diff, dh) = load_checkpoint(&a.diffusion, None)?;
    if fh.model != dh.model {
        bail!(FlowDetError::ConfigMismatch {
            expected: fh.config_hash,
            found: format!("{} (architectures differ; refusing to compare)", dh.config_hash),
        });
    }
    let data = load_split(&a.data)?;
    let eval = EvalConfig::default();
    let mut rows = Vec::new();
    for &s in &a.steps_list {
        let base = InferenceConfig {
            n_proposals: a.proposals,
            steps: s,
            seed: a.seed,
            ..InferenceConfig::default()
        };
        let f = InferenceConfig {
            sampler: SamplerKind::Flow,
            ..base.clone()
        };
        let d = InferenceConfig {
            sampler: SamplerKind::Ddim,
            box_renewal: a.box_renewal == Toggle::On,
            ..base
        };
        let (rf, _) = evaluate_dataset(&flow, &data, &f, &eval)?;
        let (rd, _) = evaluate_dataset(&diff, &data, &d, &eval)?;
        rows.push(CompareRow {
            steps: s,
            flow_ap: rf.ap_10_50,
            diffusion_ap: rd.ap_10_50,
            ratio: (rd.ap_10_50 > 0.0).then(|| rf.ap_10_50 / rd.ap_10_50),
        });
    }
    let mut csv = String::from("steps,flow_ap_10_50,diffusion_ap_10_50,ratio\n");
    let mut table = format!("{:>5}  {:>9}  {:>9}  {:>6}\n", "S", "flow", "diffusion", "ratio");
    for r in &rows {
        let ratio = r.ratio.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(csv, "{},{:.6},{:.6},{}", r.steps, r.flow_ap, r.diffusion_ap, ratio);
        let _ = writeln!(
            table,
            "{:>5}  {:>9.2}  {:>9.2}  {:>6}",
            r.steps,
            100.0 * r.flow_ap,
            100.0 * r.diffusion_ap,
            ratio
        );
    }
    write_text(&a.out.join("compare.csv"), &csv)?;
    write_text(&a.out.join("compare.txt"), &table)?;
    write_json(
        &a.out.join("compare.json"),
        &json!({ "config_hash": fh.config_hash, "proposals": a.proposals, "seed": a.seed, "rows": rows }),
    )?;
    let series = vec![
        Series {
            name: "flow".into(),
            points: rows.iter().map(|r| (r.steps as f64, r.flow_ap)).collect(),
        },
        Series {
            name: "diffusion".into(),
            points: rows.iter().map(|r| (r.steps as f64, r.diffusion_ap)).collect(),
        },
    ];
    write_text(
        &a.out.join("compare.svg"),
        &line_chart(
            "Flow vs. diffusion sampling",
            "sampling steps S",
            "AP10:50",
            &series,
            Some((0.0, 1.0)),
        ),
    )?;
    print!("{table}");
    Ok(RunInfo {
        seed: Some(a.seed),
        config_hash: Some(fh.config_hash),
    })
}

#[derive(Default, Serialize)]
struct EpochSummary {
    epoch: usize,
    steps: usize,
    cls: f64,
    l1: f64,
    giou: f64,
    flow: f64,
    total: f64,
    val_ap_10_50: Option<f64>,
}

fn cmd_report(a: &ReportArgs) -> Result<RunInfo> {
    let path = a.run.join(HISTORY_FILE);
    if !path.exists() {
        return Err(FlowDetError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        ))
        .into());
    }
    let history = read_history(&path)?;
    let mut epochs: BTreeMap<usize, EpochSummary> = BTreeMap::new();
    let mut step_losses = Vec::new();
    for h in &history {
        match h {
            HistoryRecord::Step { epoch, step, loss, .. } => {
                let e = epochs.entry(*epoch).or_insert_with(|| EpochSummary {
                    epoch: *epoch,
                    ..EpochSummary::default()
                });
                e.steps += 1;
                e.cls += loss.cls;
                e.l1 += loss.l1;
                e.giou += loss.giou;
                e.flow += loss.flow;
                e.total += loss.total;
                step_losses.push((*step as f64, loss.total));
            }
            HistoryRecord::Validation { epoch, ap_10_50, .. } => {
                epochs
                    .entry(*epoch)
                    .or_insert_with(|| EpochSummary {
                        epoch: *epoch,
                        ..EpochSummary::default()
                    })
                    .val_ap_10_50 = Some(*ap_10_50);
            }
        }
    }
    for e in epochs.values_mut() {
        let k = e.steps.max(1) as f64;
        e.cls /= k;
        e.l1 /= k;
        e.giou /= k;
        e.flow /= k;
        e.total /= k;
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join("report"));
    let mut table = format!(
        "{:>5}  {:>6}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "epoch", "steps", "cls", "l1", "giou", "flow", "total", "val AP"
    );
    for e in epochs.values() {
        let ap = e.val_ap_10_50.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            table,
            "{:>5}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8}",
            e.epoch, e.steps, e.cls, e.l1, e.giou, e.flow, e.total, ap
        );
    }
    write_text(&out.join("summary.txt"), &table)?;
    let summary: Vec<&EpochSummary> = epochs.values().collect();
    write_json(&out.join("summary.json"), &summary)?;
    // smooth per-step totals over windows so long runs stay legible
    let window = (step_losses.len() / 200).max(1);
    let smoothed: Vec<(f64, f64)> = step_losses
        .chunks(window)
        .map(|c| (c[c.len() - 1].0, c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64))
        .collect();
    write_text(
        &out.join("loss.svg"),
        &line_chart(
            "Training loss",
            "step",
            "total loss",
            &[Series {
                name: "total".into(),
                points: smoothed,
            }],
            None,
        ),
    )?;
    let val: Vec<(f64, f64)> = epochs
        .values()
        .filter_map(|e| e.val_ap_10_50.map(|v| (e.epoch as f64, v)))
        .collect();
    if !val.is_empty() {
        write_text(
            &out.join("val_ap.svg"),
            &line_chart(
                "Validation AP",
                "epoch",
                "AP10:50",
                &[Series {
                    name: "val".into(),
                    points: val,
                }],
                Some((0.0, 1.0)),
            ),
        )?;
    }
    print!("{table}");
    let cfg_hash = fs::read_to_string(a.run.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<TrainConfig>(&t).ok())
        .map(|c| c.hash());
    Ok(RunInfo {
        seed: None,
        config_hash: cfg_hash,
    })
}
