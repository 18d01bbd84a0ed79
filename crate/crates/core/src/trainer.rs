//! Mini-batch AdamW training with validation, checkpoints and resumption,
//! plus ablation runs over configuration overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::baseline::DiffusionConfig;
use crate::checkpoint::{decode_container, encode_container, header_for, save_model};
use crate::data::Dataset;
use crate::error::{FlowDetError, Result};
use crate::io::{atomic_write, atomic_write_json};
use crate::losses::{loss_and_gradients, FocalParams, LossBreakdown, LossConfig, LossWeights, Objective};
use crate::metrics::{EvalConfig, EvalReport};
use crate::model::{Detector, ModelConfig};
use crate::pipeline::{evaluate_dataset, InferenceConfig, SamplerKind};
use crate::sampler::Prior;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub objective: Objective,
    #[serde(rename = "loss")]
    pub weights: LossWeights,
    pub n_prop_train: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to this fraction of its peak.
    pub final_lr_fraction: f64,
    pub prior: Prior,
    pub focal: FocalParams,
    pub fg_iou_threshold: f64,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub validation: ValidationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-5,
            batch_size: 8,
            epochs: 40,
            objective: Objective::Flow,
            weights: LossWeights::default(),
            n_prop_train: 12,
            seed: 0,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
            prior: Prior::StandardNormal,
            focal: FocalParams::default(),
            fg_iou_threshold: 0.5,
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            validation: ValidationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Validate after every `every_epochs` epochs (0 disables validation).
    pub every_epochs: usize,
    pub n_proposals: usize,
    pub steps: usize,
    /// Use at most this many validation images.
    pub max_images: Option<usize>,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            every_epochs: 1,
            n_proposals: 120,
            steps: 3,
            max_images: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    /// Settings tuned for a short CPU run on the default synthetic data:
    /// a larger step size than the reference rate, warmup and cosine decay.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            warmup_steps: 100,
            final_lr_fraction: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(FlowDetError::Config(
                "learning rate must be positive and batch size at least 1".into(),
            ));
        }
        if self.n_prop_train == 0 {
            return Err(FlowDetError::Config("n_prop_train must be at least 1".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            focal: self.focal,
            n_prop: self.n_prop_train,
            prior: self.prior,
            objective: self.objective,
            fg_iou_threshold: self.fg_iou_threshold,
            diffusion: self.diffusion,
        }
    }

    /// Inference settings matching this run's objective.
    pub fn inference(&self, n_proposals: usize, steps: usize) -> InferenceConfig {
        InferenceConfig {
            sampler: match self.objective {
                Objective::Flow => SamplerKind::Flow,
                Objective::Diffusion => SamplerKind::Ddim,
            },
            n_proposals,
            steps,
            seed: self.seed,
            prior: self.prior,
            diffusion: self.diffusion,
            ..InferenceConfig::default()
        }
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::io::config_hash(self)
    }

    /// Applies `{"dotted.key": value}` overrides (nested objects also work).
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let obj = overrides
            .as_object()
            .ok_or_else(|| FlowDetError::Config("overrides must be a JSON object".into()))?;
        for (key, value) in obj {
            set_path(&mut doc, key, value.clone())?;
        }
        serde_json::from_value(doc).map_err(|e| FlowDetError::Config(format!("override: {e}")))
    }
}

fn set_path(doc: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| FlowDetError::Config(format!("{key}: {part} is not a section")))?;
        if !obj.contains_key(*part) {
            return Err(FlowDetError::Config(format!("unknown config key {key}")));
        }
        if i + 1 == parts.len() {
            if value.is_object() {
                if let Some(serde_json::Value::Object(inner)) = obj.get(*part).cloned().as_ref() {
                    let mut merged = serde_json::Value::Object(inner.clone());
                    for (k, v) in value.as_object().expect("object") {
                        set_path(&mut merged, k, v.clone())?;
                    }
                    obj.insert(part.to_string(), merged);
                    return Ok(());
                }
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Ok(())
}

/// AdamW moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = (BETA1 * *mi as f64 + (1.0 - BETA1) * *gi as f64) as f32;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = (BETA2 * *vi as f64 + (1.0 - BETA2) * (*gi as f64) * (*gi as f64)) as f32;
            }
            let m = self.m.get(id).data();
            let v = self.v.get(id).data();
            let p = params.get_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                let mh = *mi as f64 / bc1;
                let vh = *vi as f64 / bc2;
                let x = *pi as f64;
                *pi = (x - lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * x)) as f32;
            }
        }
    }
}

/// Resumable progress of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: usize,
    pub model: Detector<f32>,
    pub optimizer: AdamState,
    pub best_val_ap: Option<f64>,
    pub stale_validations: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    epoch: usize,
    batch_in_epoch: usize,
    adam_t: u64,
    best_val_ap: Option<f64>,
    stale_validations: usize,
    train_config_hash: String,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = Detector::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = AdamState::new(model.params());
        Ok(Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            model,
            optimizer,
            best_val_ap: None,
            stale_validations: 0,
            config_hash: cfg.hash(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = StateMeta {
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            adam_t: self.optimizer.t,
            best_val_ap: self.best_val_ap,
            stale_validations: self.stale_validations,
            train_config_hash: self.config_hash.clone(),
        };
        let header = header_for(self.model.config(), serde_json::to_value(meta).expect("serializes"));
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (prefix, store) in [
            ("param", self.model.params()),
            ("adam.m", &self.optimizer.m),
            ("adam.v", &self.optimizer.v),
        ] {
            for (_, name, t) in store.iter() {
                tensors.push((format!("{prefix}/{name}"), t));
            }
        }
        atomic_write(path, &encode_container(&header, &tensors)?)
    }

    /// Loads a state, refusing one written for a different configuration.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let (header, tensors) = decode_container::<f32>(&fs::read(path)?)?;
        let meta: StateMeta = serde_json::from_value(header.extra.clone())
            .map_err(|e| FlowDetError::Checkpoint(format!("state header: {e}")))?;
        if meta.train_config_hash != cfg.hash() {
            return Err(FlowDetError::ConfigMismatch {
                expected: cfg.hash(),
                found: meta.train_config_hash,
            });
        }
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for (name, t) in tensors {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| FlowDetError::Checkpoint(format!("unexpected tensor {name}")))?;
            let k = match prefix {
                "param" => 0,
                "adam.m" => 1,
                "adam.v" => 2,
                _ => return Err(FlowDetError::Checkpoint(format!("unexpected tensor {name}"))),
            };
            stores[k].insert(rest, t);
        }
        let [p, m, v] = stores;
        let model = Detector::from_params(header.model, p)?;
        // moments must line up with parameters one to one
        Detector::<f32>::from_params(model.config().clone(), m.clone())?;
        Detector::<f32>::from_params(model.config().clone(), v.clone())?;
        Ok(Self {
            step: meta.step,
            epoch: meta.epoch,
            batch_in_epoch: meta.batch_in_epoch,
            model,
            optimizer: AdamState { m, v, t: meta.adam_t },
            best_val_ap: meta.best_val_ap,
            stale_validations: meta.stale_validations,
            config_hash: meta.train_config_hash,
        })
    }
}

/// One line of the metrics history. Epochs are counted from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HistoryRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
        loss: LossBreakdown,
    },
    Validation {
        epoch: usize,
        step: usize,
        ap_10_50: f64,
        ap: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and history; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<TrainState>,
    /// Stop after this many optimizer steps in total (for interrupted runs).
    pub max_steps: Option<usize>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRecord>,
    /// Parameters with the best validation score, or the last ones when no
    /// validation ran.
    pub best_model: Detector<f32>,
    pub last_report: Option<EvalReport>,
}

fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let base = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if cfg.final_lr_fraction >= 1.0 || total_steps <= cfg.warmup_steps {
        return base;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64).min(1.0);
    let f = cfg.final_lr_fraction;
    base * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn sample_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_dead_beef);
    rng.set_stream(((step as u64) << 16) | slot as u64);
    rng
}

pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn write_history(dir: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        let _ = writeln!(text, "{}", serde_json::to_string(h).expect("serializes"));
    }
    atomic_write(&dir.join(HISTORY_FILE), text.as_bytes())
}

/// Trains on `train_set`, validating on `val_set` at the configured cadence.
pub fn train(
    train_set: &Dataset<f32>,
    val_set: Option<&Dataset<f32>>,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(FlowDetError::Config("training set is empty".into()));
    }
    let loss_cfg = cfg.loss_config();
    let mut state = match opts.resume {
        Some(s) => {
            if s.config_hash != cfg.hash() {
                return Err(FlowDetError::ConfigMismatch {
                    expected: cfg.hash(),
                    found: s.config_hash,
                });
            }
            s
        }
        None => TrainState::fresh(cfg)?,
    };
    let mut history: Vec<HistoryRecord> = match &opts.out_dir {
        Some(dir) if state.step > 0 => read_history(&dir.join(HISTORY_FILE))?,
        _ => Vec::new(),
    };
    let per_epoch = batches_per_epoch(train_set.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut best_model = state.model.clone();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        if state.step > 0 && dir.join(BEST_CHECKPOINT).exists() {
            best_model = crate::checkpoint::load_model(&dir.join(BEST_CHECKPOINT), None)?.0;
        }
    }
    let val_subset: Option<Dataset<f32>> = val_set.map(|v| Dataset {
        images: v.images[..cfg.validation.max_images.unwrap_or(v.len()).min(v.len())].to_vec(),
    });
    let mut last_report = None;
    let eval_cfg = EvalConfig::default();

    'epochs: while state.epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, state.epoch, train_set.len());
        while state.batch_in_epoch < per_epoch {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let b = state.batch_in_epoch;
            let ids = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let model = &state.model;
            let step = state.step;
            let results: Vec<Result<(LossBreakdown, ParamStore<f32>)>> = ids
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = sample_rng(cfg.seed, step, slot);
                    loss_and_gradients(&train_set.images[i], model, &loss_cfg, &mut rng)
                })
                .collect();

            let k = 1.0 / ids.len() as f64;
            let mut mean = LossBreakdown::default();
            let mut grads = state.model.params().zeros_like();
            let mut failures = Vec::new();
            for (r, &i) in results.into_iter().zip(ids) {
                match r {
                    Ok((lb, g)) => {
                        mean.accumulate(&lb, k);
                        grads.add_scaled(&g, k as f32);
                    }
                    Err(e) => failures.push((train_set.images[i].image_id.clone(), e.to_string())),
                }
            }
            let grad_norm = grads.iter().map(|(_, _, t)| t.sum_sq() as f64).sum::<f64>().sqrt();
            if !failures.is_empty() || !grad_norm.is_finite() || !mean.is_finite() {
                let batch: Vec<String> = ids.iter().map(|&i| train_set.images[i].image_id.clone()).collect();
                let dump = serde_json::json!({
                    "step": state.step,
                    "epoch": state.epoch,
                    "batch": batch,
                    "loss": mean,
                    "grad_norm": grad_norm,
                    "failures": failures,
                });
                if let Some(dir) = &opts.out_dir {
                    atomic_write_json(&dir.join("divergence.json"), &dump)?;
                }
                return Err(FlowDetError::NonFiniteLoss(format!("step {}: {dump}", state.step)));
            }
            if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
                let s = (cfg.grad_clip / grad_norm) as f32;
                for t in grads.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
            let lr = lr_at(cfg, state.step, total_steps);
            state
                .optimizer
                .update(state.model.params_mut(), &grads, lr, cfg.weight_decay);
            history.push(HistoryRecord::Step {
                epoch: state.epoch + 1,
                step: state.step,
                lr,
                grad_norm,
                loss: mean,
            });
            log::debug!(
                "epoch {} step {} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4} flow {:.4})",
                state.epoch,
                state.step,
                mean.total,
                mean.cls,
                mean.l1,
                mean.giou,
                mean.flow
            );
            state.step += 1;
            state.batch_in_epoch += 1;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;

        let v = &cfg.validation;
        let mut stop = false;
        if let Some(val) = val_subset.as_ref().filter(|d| !d.is_empty()) {
            if v.every_epochs > 0 && (state.epoch % v.every_epochs == 0 || state.epoch == cfg.epochs) {
                let inf = cfg.inference(v.n_proposals, v.steps);
                let (report, _) = evaluate_dataset(&state.model, val, &inf, &eval_cfg)?;
                log::info!("epoch {} validation AP10:50 {:.4}", state.epoch, report.ap_10_50);
                history.push(HistoryRecord::Validation {
                    epoch: state.epoch,
                    step: state.step,
                    ap_10_50: report.ap_10_50,
                    ap: report.per_iou.iter().map(|m| m.ap).collect(),
                });
                if state.best_val_ap.is_none_or(|b| report.ap_10_50 > b) {
                    state.best_val_ap = Some(report.ap_10_50);
                    state.stale_validations = 0;
                    best_model = state.model.clone();
                    if let Some(dir) = &opts.out_dir {
                        save_model(&dir.join(BEST_CHECKPOINT), &best_model, run_info(cfg, &state))?;
                    }
                } else {
                    state.stale_validations += 1;
                    stop = v.patience.is_some_and(|p| state.stale_validations >= p);
                }
                last_report = Some(report);
            }
        } else {
            best_model = state.model.clone();
        }
        if let Some(dir) = &opts.out_dir {
            save_model(&dir.join(LAST_CHECKPOINT), &state.model, run_info(cfg, &state))?;
            state.save(&dir.join(STATE_FILE))?;
            write_history(dir, &history)?;
        }
        if stop {
            log::info!("early stop after epoch {}", state.epoch);
            break;
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join(STATE_FILE))?;
        write_history(dir, &history)?;
        if !dir.join(BEST_CHECKPOINT).exists() {
            save_model(&dir.join(BEST_CHECKPOINT), &best_model, run_info(cfg, &state))?;
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        best_model,
        last_report,
    })
}

fn run_info(cfg: &TrainConfig, state: &TrainState) -> serde_json::Value {
    serde_json::json!({
        "objective": cfg.objective,
        "train_config_hash": cfg.hash(),
        "step": state.step,
        "epoch": state.epoch,
        "best_val_ap": state.best_val_ap,
    })
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FlowDetError::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// One configuration to compare against the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ap_10_50: f64,
    pub ap_30: f64,
    pub ap_50: f64,
    /// Precision and recall at IoU 0.1 after the 0.5 confidence cut-off.
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(7);
        let _ = writeln!(
            out,
            "{:<w$}  {:>9}  {:>6}  {:>6}  {:>9}  {:>9}",
            "variant", "AP10:50", "AP30", "AP50", "P10@0.5", "R10@0.5"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  {:>9.2}  {:>6.2}  {:>6.2}  {:>9.2}  {:>9.2}",
                r.name,
                100.0 * r.ap_10_50,
                100.0 * r.ap_30,
                100.0 * r.ap_50,
                100.0 * r.precision,
                100.0 * r.recall
            );
        }
        out
    }
}

pub fn ablation_row(name: &str, report: &EvalReport) -> AblationRow {
    let op = report.point(0.5, 0.1);
    AblationRow {
        name: name.to_string(),
        ap_10_50: report.ap_10_50,
        ap_30: report.ap_at(0.3).unwrap_or(0.0),
        ap_50: report.ap_at(0.5).unwrap_or(0.0),
        precision: op.map_or(0.0, |p| p.precision),
        recall: op.map_or(0.0, |p| p.recall),
    }
}

/// Trains each variant from the base seed and scores it on `test_set` with
/// `n_proposals` proposals and `steps` sampling steps.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    train_set: &Dataset<f32>,
    val_set: Option<&Dataset<f32>>,
    test_set: &Dataset<f32>,
    n_proposals: usize,
    steps: usize,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = base.with_overrides(&v.overrides)?;
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(&v.name)),
            ..TrainOptions::default()
        };
        let outcome = train(train_set, val_set, &cfg, opts)?;
        let (report, _) = evaluate_dataset(
            &outcome.best_model,
            test_set,
            &cfg.inference(n_proposals, steps),
            &EvalConfig::default(),
        )?;
        rows.push(ablation_row(&v.name, &report));
    }
    Ok(AblationReport { rows })
}
