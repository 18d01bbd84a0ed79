//! The one inference path shared by validation during training and by every
//! evaluation command: encode, sample, suppress, score.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ddim_sample, DdimConfig, DiffusionConfig};
use crate::data::Dataset;
use crate::error::{FlowDetError, Result};
use crate::geometry::{nms, Detection, NormalizedBox};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::sampler::{sample, DetectionSet, Prior, SamplerConfig, Solver, VelocityField};
use crate::scalar::Scalar;

static DATASET_EVALUATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of completed [`evaluate_dataset`] calls in this process.
pub fn dataset_evaluations() -> usize {
    DATASET_EVALUATIONS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Flow,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = FlowDetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(SamplerKind::Flow),
            "ddim" => Ok(SamplerKind::Ddim),
            o => Err(FlowDetError::Config(format!("unknown sampler {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub sampler: SamplerKind,
    pub n_proposals: usize,
    pub steps: usize,
    pub seed: u64,
    pub prior: Prior,
    pub solver: Solver,
    pub box_renewal: bool,
    pub diffusion: DiffusionConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Flow,
            n_proposals: 120,
            steps: 3,
            seed: 0,
            prior: Prior::StandardNormal,
            solver: Solver::Euler,
            box_renewal: false,
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn flow_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_proposals: self.n_proposals,
            steps: self.steps,
            noise_seed: self.seed,
            prior: self.prior,
            solver: self.solver,
        }
    }

    pub fn ddim_sampler(&self) -> DdimConfig {
        DdimConfig {
            n_proposals: self.n_proposals,
            steps: self.steps,
            noise_seed: self.seed,
            box_renewal: self.box_renewal,
            diffusion: self.diffusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow_sampler().validate()
    }
}

/// Raw (pre-suppression) detections for image `index` of a dataset.
pub fn detect_image<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    image: &crate::data::Image<T>,
    index: usize,
    cfg: &InferenceConfig,
) -> Result<DetectionSet<T>> {
    let features = model.encode(image)?;
    let per_image = cfg.flow_sampler().for_image(index);
    match cfg.sampler {
        SamplerKind::Flow => sample(model, &features, &per_image),
        SamplerKind::Ddim => {
            let mut d = cfg.ddim_sampler();
            d.noise_seed = per_image.noise_seed;
            ddim_sample(model, &features, &d)
        }
    }
}

/// Detections for every image (in dataset order), after NMS.
pub fn detect_dataset<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    dataset: &Dataset<T>,
    cfg: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<Vec<Vec<Detection<T>>>> {
    cfg.validate()?;
    dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let set = detect_image(model, &a.image, i, cfg)?;
            Ok(nms(&set.detections, T::lit(eval.nms_iou), T::lit(eval.nms_conf)))
        })
        .collect()
}

/// Detects, suppresses and scores a whole dataset.
pub fn evaluate_dataset<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    dataset: &Dataset<T>,
    cfg: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<Detection<T>>>)> {
    let preds = detect_dataset(model, dataset, cfg, eval)?;
    let gts: Vec<Vec<NormalizedBox<T>>> = dataset.images.iter().map(|a| a.gt_boxes.clone()).collect();
    let report = evaluate(&preds, &gts, eval)?;
    DATASET_EVALUATIONS.fetch_add(1, Ordering::SeqCst);
    Ok((report, preds))
}
