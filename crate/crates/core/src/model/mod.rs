//! The trainable velocity field: a convolutional image encoder that runs once
//! per image and a cascaded, shared-weight box decoder conditioned on time.
//!
//! The encoder ends in a 1×1 "neck" that reduces the map to
//! `pooled_channels`, so the per-proposal pooling works on a thin map.
//!
//! Each decoder stage pools features inside its current box estimate, fuses
//! them with the proposal state and a time embedding, and emits a velocity
//! increment `δ`. The stage's box estimate advances by `(1 − t)·δ` and the
//! returned velocity is the sum of all increments, so `x_t + (1 − t)·v` equals
//! the last box estimate. Gradients flow through every box estimate, including
//! the pooling locations.

mod embedding;
mod roi;

pub use embedding::{sinusoidal_features, time_embedding, TimeEmbedding, TIME_SCALE};
pub use roi::roi_pool;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::data::Image;
use crate::error::{FlowDetError, Result};
use crate::flowpath::VelocityVector;
use crate::geometry::FlowVector;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Tensor};

/// Index of the foreground ("lesion") class in the logits.
pub const FOREGROUND: usize = 0;
/// Index of the background class in the logits.
pub const BACKGROUND: usize = 1;

/// Architecture hyper-parameters. Everything that changes parameter shapes
/// lives here and feeds the checkpoint config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub pool: usize,
    pub pooled_channels: usize,
    pub hidden: usize,
    pub time_frequencies: usize,
    pub stages: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            encoder_channels: vec![8, 16, 32, 32],
            encoder_strides: vec![2, 2, 2, 1],
            pool: 7,
            pooled_channels: 8,
            hidden: 64,
            time_frequencies: 16,
            stages: 6,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// A very small variant for finite-difference checks (8×8 features from 64×64 input).
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            encoder_channels: vec![3, 4, 4, 4],
            encoder_strides: vec![2, 2, 2, 1],
            pool: 3,
            pooled_channels: 2,
            hidden: 8,
            time_frequencies: 4,
            stages: 6,
            num_classes: 2,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    /// Channels of the encoder output (after the neck).
    pub fn feature_channels(&self) -> usize {
        self.pooled_channels
    }

    fn backbone_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty()
            || self.encoder_channels.len() != self.encoder_strides.len()
            || self.encoder_strides.contains(&0)
        {
            return Err(FlowDetError::Config(
                "encoder channels and strides must be non-empty and aligned".into(),
            ));
        }
        if self.pool == 0 || self.pooled_channels == 0 || self.hidden == 0 || self.stages == 0 || self.num_classes < 2 {
            return Err(FlowDetError::Config(
                "pool, hidden and stages must be positive; at least two classes".into(),
            ));
        }
        if !self.image_size.is_multiple_of(self.total_stride()) {
            return Err(FlowDetError::Config(format!(
                "image size {} not divisible by stride {}",
                self.image_size,
                self.total_stride()
            )));
        }
        Ok(())
    }

    /// Stable hash of the architecture (hex, 16 chars).
    pub fn config_hash(&self) -> String {
        crate::io::config_hash(self)
    }
}

/// Encoder output: `[C, H, W]` values at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Per-proposal velocity and class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput<T> {
    pub velocities: Vec<VelocityVector<T>>,
    /// Row-major `[N, num_classes]`.
    pub class_logits: Vec<T>,
    pub num_classes: usize,
}

impl<T: Scalar> DecoderOutput<T> {
    pub fn logits(&self, i: usize) -> &[T] {
        &self.class_logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Softmax probability of `class` for proposal `i`.
    pub fn prob(&self, i: usize, class: usize) -> T {
        softmax_prob(self.logits(i), class)
    }
}

pub(crate) fn softmax_prob<T: Scalar>(logits: &[T], class: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    (logits[class] - m).exp() / z
}

/// Graph handles for one decoder evaluation.
pub struct DecoderVars {
    /// `[N, 4]` flow-space velocity.
    pub velocity: Var,
    /// `[N, num_classes]`.
    pub logits: Var,
}

struct EncoderBlock {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

struct Linear {
    weight: ParamId,
    bias: ParamId,
}

struct LinearVars {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> LinearVars {
        LinearVars {
            weight: g.param(store, self.weight),
            bias: g.param(store, self.bias),
        }
    }
}

impl LinearVars {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

struct Layout {
    encoder: Vec<EncoderBlock>,
    neck: EncoderBlock,
    time_in: Linear,
    time_out: Linear,
    proposal_init: ParamId,
    pooled_proj: Linear,
    box_proj: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    velocity_head: Linear,
    class_head: Linear,
}

/// Encoder + decoder with parameters stored in a [`ParamStore`].
pub struct Detector<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Clone for Detector<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("same layout")
    }
}

impl<T: Scalar> std::fmt::Debug for Detector<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

impl<T: Scalar> Detector<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden;

        let mut in_ch = 1;
        for (i, &out_ch) in config.encoder_channels.iter().enumerate() {
            let fan_in = in_ch * 9;
            store.insert(
                &format!("encoder.{i}.weight"),
                uniform(&mut rng, &[out_ch, fan_in], (6.0 / fan_in as f64).sqrt()),
            );
            store.insert(&format!("encoder.{i}.bias"), Tensor::zeros(&[out_ch]));
            in_ch = out_ch;
        }
        let pc = config.pooled_channels;
        store.insert(
            "neck.weight",
            uniform(&mut rng, &[pc, in_ch], (6.0 / in_ch as f64).sqrt()),
        );
        store.insert("neck.bias", Tensor::zeros(&[pc]));

        let mut linear = |store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let w = if gain == 0.0 {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                uniform(&mut rng, &[fan_in, fan_out], gain * (3.0 / fan_in as f64).sqrt())
            };
            store.insert(&format!("{name}.weight"), w);
            store.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        };

        let te = 2 * config.time_frequencies;
        let pooled = config.pool * config.pool * config.pooled_channels;
        linear(&mut store, "time.in", te, d, 1.0);
        linear(&mut store, "time.out", d, 2 * d, 0.5);
        linear(&mut store, "stage.pooled_proj", pooled, d, 1.0);
        linear(&mut store, "stage.box_proj", 4, d, 1.0);
        linear(&mut store, "stage.mlp_in", d, d, 2.0_f64.sqrt());
        linear(&mut store, "stage.mlp_out", d, d, 1.0);
        linear(&mut store, "stage.velocity_head", d, 4, 0.0);
        linear(&mut store, "stage.class_head", d, config.num_classes, 1.0);
        store.insert("stage.proposal_init", uniform(&mut rng, &[d], 1.0));

        Self::from_params(config, store)
    }

    /// Rebuilds a detector around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Self::shapes(&config);
        if reference.len() != params.len() {
            return Err(FlowDetError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, shape) in &reference {
            let id = params
                .id(name)
                .ok_or_else(|| FlowDetError::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(FlowDetError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(id).shape(),
                    shape
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("validated");
        let lin = |n: &str| Linear {
            weight: id(&format!("{n}.weight")),
            bias: id(&format!("{n}.bias")),
        };
        let encoder = config
            .encoder_strides
            .iter()
            .enumerate()
            .map(|(i, &stride)| EncoderBlock {
                weight: id(&format!("encoder.{i}.weight")),
                bias: id(&format!("encoder.{i}.bias")),
                stride,
            })
            .collect();
        let layout = Layout {
            encoder,
            neck: EncoderBlock {
                weight: id("neck.weight"),
                bias: id("neck.bias"),
                stride: 1,
            },
            time_in: lin("time.in"),
            time_out: lin("time.out"),
            proposal_init: id("stage.proposal_init"),
            pooled_proj: lin("stage.pooled_proj"),
            box_proj: lin("stage.box_proj"),
            mlp_in: lin("stage.mlp_in"),
            mlp_out: lin("stage.mlp_out"),
            velocity_head: lin("stage.velocity_head"),
            class_head: lin("stage.class_head"),
        };
        Ok(Self { config, params, layout })
    }

    fn shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), vec![c, in_ch * 9]));
            out.push((format!("encoder.{i}.bias"), vec![c]));
            in_ch = c;
        }
        out.push((
            "neck.weight".into(),
            vec![config.pooled_channels, config.backbone_channels()],
        ));
        out.push(("neck.bias".into(), vec![config.pooled_channels]));
        let d = config.hidden;
        let pooled = config.pool * config.pool * config.pooled_channels;
        let lins = [
            ("time.in", 2 * config.time_frequencies, d),
            ("time.out", d, 2 * d),
            ("stage.pooled_proj", pooled, d),
            ("stage.box_proj", 4, d),
            ("stage.mlp_in", d, d),
            ("stage.mlp_out", d, d),
            ("stage.velocity_head", d, 4),
            ("stage.class_head", d, config.num_classes),
        ];
        for (n, i, o) in lins {
            out.push((format!("{n}.weight"), vec![i, o]));
            out.push((format!("{n}.bias"), vec![o]));
        }
        out.push(("stage.proposal_init".into(), vec![d]));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    /// Encoder forward pass recorded on `g`; returns the `[C,H,W]` feature node.
    pub fn encode_graph(&self, g: &mut Graph<T>, image: &Image<T>) -> Result<Var> {
        let cfg = &self.config;
        let stride = cfg.total_stride();
        if image.height == 0
            || image.width == 0
            || !image.height.is_multiple_of(stride)
            || !image.width.is_multiple_of(stride)
        {
            return Err(FlowDetError::Shape(format!(
                "image {}x{} not divisible by encoder stride {stride}",
                image.height, image.width
            )));
        }
        let centered = image.pixels.iter().map(|&p| p - T::lit(0.5)).collect();
        let mut x = g.constant(Tensor::from_vec(&[1, image.height, image.width], centered)?);
        let (mut c, mut h, mut w) = (1, image.height, image.width);
        let blocks = self
            .layout
            .encoder
            .iter()
            .map(|b| (b, 3))
            .chain([(&self.layout.neck, 1)]);
        for (block, kernel) in blocks {
            let geom = ConvGeom {
                in_ch: c,
                height: h,
                width: w,
                kernel,
                stride: block.stride,
                pad: kernel / 2,
            };
            let wv = g.param(&self.params, block.weight);
            let bv = g.param(&self.params, block.bias);
            let y = g.conv2d(x, wv, bv, geom)?;
            x = g.relu(y);
            c = g.value(wv).rows();
            h = geom.out_h();
            w = geom.out_w();
        }
        Ok(x)
    }

    /// Runs the encoder once and returns a detached feature map.
    pub fn encode_image(&self, image: &Image<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let f = self.encode_graph(&mut g, image)?;
        let stride = self.config.total_stride();
        let data = g.value(f).clone();
        if !data.all_finite() {
            return Err(FlowDetError::Numeric {
                stage: 0,
                detail: "encoder produced non-finite features".into(),
            });
        }
        Ok(FeatureMap {
            channels: self.config.feature_channels(),
            height: image.height / stride,
            width: image.width / stride,
            stride,
            data,
        })
    }

    /// Decoder forward pass recorded on `g`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        features: Var,
        dims: (usize, usize, usize),
        boxes: &[FlowVector<T>],
        t: T,
    ) -> Result<DecoderVars> {
        let cfg = &self.config;
        let n = boxes.len();
        let d = cfg.hidden;
        let tp = self.time_params(g);
        let emb = time_embedding(g, &tp, t, cfg.time_frequencies)?;
        let scale = g.slice_cols(emb.0, 0, d)?;
        let scale = g.add_scalar(scale, T::one());
        let shift = g.slice_cols(emb.0, d, 2 * d)?;

        let l = &self.layout;
        let p = &self.params;
        let proj = l.pooled_proj.bind(g, p);
        let box_proj = l.box_proj.bind(g, p);
        let mlp_in = l.mlp_in.bind(g, p);
        let mlp_out = l.mlp_out.bind(g, p);
        let vhead = l.velocity_head.bind(g, p);
        let chead = l.class_head.bind(g, p);
        let init = g.param(p, l.proposal_init);

        let zeros = g.constant(Tensor::zeros(&[n, d]));
        let mut state = g.add_row(zeros, init)?;
        let coords: Vec<T> = boxes.iter().flat_map(|b| b.to_array()).collect();
        let mut current = g.constant(Tensor::from_vec(&[n, 4], coords)?);
        let mut velocity: Option<Var> = None;
        let remaining = T::one() - t;
        let eps = T::lit(1e-5);

        for stage in 0..cfg.stages {
            let pooled = roi_pool(g, features, dims, current, cfg.pool)?;
            let pooled = g.reshape(pooled, &[n, cfg.pool * cfg.pool * cfg.pooled_channels])?;
            let pooled = proj.apply(g, pooled)?;
            let geom = box_proj.apply(g, current)?;

            let z = g.add(pooled, state)?;
            let z = g.add(z, geom)?;
            let z = g.layer_norm(z, eps);
            let z = g.mul_row(z, scale)?;
            let z = g.add_row(z, shift)?;
            let m = mlp_in.apply(g, z)?;
            let m = g.relu(m);
            let m = mlp_out.apply(g, m)?;
            let z = g.add(z, m)?;
            state = g.layer_norm(z, eps);

            let delta = vhead.apply(g, state)?;
            if !g.value(delta).all_finite() {
                return Err(FlowDetError::Numeric {
                    stage,
                    detail: "velocity increment not finite".into(),
                });
            }
            let step = g.scale(delta, remaining);
            current = g.add(current, step)?;
            velocity = Some(match velocity {
                None => delta,
                Some(v) => g.add(v, delta)?,
            });
        }
        let logits = chead.apply(g, state)?;
        if !g.value(logits).all_finite() {
            return Err(FlowDetError::Numeric {
                stage: cfg.stages - 1,
                detail: "class logits not finite".into(),
            });
        }
        Ok(DecoderVars {
            velocity: velocity.expect("at least one stage"),
            logits,
        })
    }

    fn time_params(&self, g: &mut Graph<T>) -> [Var; 4] {
        [
            g.param(&self.params, self.layout.time_in.weight),
            g.param(&self.params, self.layout.time_in.bias),
            g.param(&self.params, self.layout.time_out.weight),
            g.param(&self.params, self.layout.time_out.bias),
        ]
    }

    /// Evaluates the velocity field for a batch of flow-space proposals.
    pub fn decode(&self, boxes: &[FlowVector<T>], features: &FeatureMap<T>, t: T) -> Result<DecoderOutput<T>> {
        let mut g = Graph::new();
        let f = g.constant(features.data.clone());
        let out = self.decode_graph(&mut g, f, features.dims(), boxes, t)?;
        let velocities = g
            .value(out.velocity)
            .data()
            .chunks(4)
            .map(|c| FlowVector::new(c[0], c[1], c[2], c[3]))
            .collect();
        Ok(DecoderOutput {
            velocities,
            class_logits: g.value(out.logits).data().to_vec(),
            num_classes: self.config.num_classes,
        })
    }

    /// Learned time embedding (sinusoidal features through the projection MLP).
    pub fn embed_time(&self, t: T) -> Result<TimeEmbedding<T>> {
        let mut g = Graph::new();
        let params = self.time_params(&mut g);
        let (v, _) = time_embedding(&mut g, &params, t, self.config.time_frequencies)?;
        Ok(TimeEmbedding(g.value(v).data().to_vec()))
    }
}

pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image<f64> {
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pixels.push(f(y, x));
            }
        }
        Image::new(h, w, pixels).unwrap()
    }

    #[test]
    fn encoder_output_shape() {
        let det = Detector::<f64>::new(ModelConfig::default(), 1).unwrap();
        let fm = det
            .encode_image(&image(128, 128, |y, x| ((x + y) % 7) as f64 / 7.0))
            .unwrap();
        assert_eq!((fm.height, fm.width, fm.stride), (16, 16, 8));
        assert_eq!(fm.channels, 8);
        assert_eq!(fm.data.shape(), &[8, 16, 16]);
    }

    #[test]
    fn encoder_is_deterministic_and_finite_on_zero_image() {
        let det = Detector::<f64>::new(ModelConfig::default(), 2).unwrap();
        let img = image(128, 128, |_, _| 0.0);
        let a = det.encode_image(&img).unwrap();
        let b = det.encode_image(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.data.all_finite());
    }

    #[test]
    fn encoder_rejects_bad_dims() {
        let det = Detector::<f64>::new(ModelConfig::default(), 2).unwrap();
        let r = det.encode_image(&image(100, 128, |_, _| 0.0));
        assert!(matches!(r, Err(FlowDetError::Shape(_))));
    }

    #[test]
    fn decoder_shapes_and_zero_initial_velocity() {
        let det = Detector::<f64>::new(ModelConfig::default(), 3).unwrap();
        let fm = det.encode_image(&image(128, 128, |y, _| y as f64 / 128.0)).unwrap();
        let boxes: Vec<_> = (0..5)
            .map(|i| FlowVector::new(0.1 * i as f64, -0.2, -1.0, -1.5))
            .collect();
        let out = det.decode(&boxes, &fm, 0.4).unwrap();
        assert_eq!(out.velocities.len(), 5);
        assert_eq!(out.class_logits.len(), 10);
        // zero-initialized velocity head
        assert!(out.velocities.iter().all(|v| *v == FlowVector::zero()));
    }

    #[test]
    fn parameter_budget() {
        let det = Detector::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert!(det.num_parameters() < 5_000_000);
    }

    #[test]
    fn config_hash_tracks_architecture() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.hidden = 32;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let det = Detector::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let mut other = ModelConfig::tiny();
        other.hidden = 9;
        assert!(Detector::from_params(other, det.params().clone()).is_err());
    }
}
