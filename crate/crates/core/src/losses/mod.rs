//! Set-prediction training objective: bipartite matching of predicted boxes to
//! (padded) ground truth, focal classification, L1 and GIoU regression on the
//! one-shot data estimate, and the velocity regression term.

mod hungarian;

pub use hungarian::{hungarian_match, MatchResult};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, ParamStore, Var};
use crate::baseline::{DiffusionConfig, NoiseSchedule};
use crate::data::{pad_gt_boxes, AnnotatedImage};
use crate::error::{FlowDetError, Result};
use crate::flowpath::{interpolate, target_velocity, VelocityVector};
use crate::geometry::{
    decode_flow_space_unchecked, encode_flow_space, giou_unchecked, iou_unchecked, Corners, FlowVector, NormalizedBox,
    MIN_BOX_SCALE,
};
use crate::model::{softmax_prob, Detector, BACKGROUND, FOREGROUND};
use crate::sampler::Prior;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 2.0,
            lambda_giou: 5.0,
            lambda_flow: 0.1,
        }
    }
}

impl LossWeights {
    /// The same weights without the velocity term: classification and box
    /// regression only.
    pub fn box_regression_only(self) -> Self {
        Self {
            lambda_flow: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_l1, self.lambda_giou, self.lambda_flow];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FlowDetError::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn combine(&self, cls: f64, l1: f64, giou: f64, flow: f64) -> LossBreakdown {
        LossBreakdown {
            cls,
            l1,
            giou,
            flow,
            total: self.lambda_cls * cls + self.lambda_l1 * l1 + self.lambda_giou * giou + self.lambda_flow * flow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub flow: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.flow, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Checks `total` against the weighted sum of the components.
    pub fn satisfies_identity(&self, w: &LossWeights) -> bool {
        let total = w.combine(self.cls, self.l1, self.giou, self.flow).total;
        (total - self.total).abs() <= 1e-9 * self.total.abs().max(1.0)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, k: f64) {
        self.cls += k * other.cls;
        self.l1 += k * other.l1;
        self.giou += k * other.giou;
        self.flow += k * other.flow;
        self.total += k * other.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// What the decoder is trained to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Regress the straight-path velocity from a uniformly drawn time.
    #[default]
    Flow,
    /// Predict the clean boxes from a diffusion-corrupted state.
    Diffusion,
}

impl std::str::FromStr for Objective {
    type Err = FlowDetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Objective::Flow),
            "diffusion" => Ok(Objective::Diffusion),
            o => Err(FlowDetError::Config(format!("unknown objective {o:?}"))),
        }
    }
}

/// Everything the per-image loss needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub n_prop: usize,
    pub prior: Prior,
    pub objective: Objective,
    /// A matched proposal is labeled foreground only when its predicted box
    /// overlaps the matched ground truth by at least this IoU. Zero labels
    /// every matched proposal foreground.
    pub fg_iou_threshold: f64,
    pub diffusion: DiffusionConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            n_prop: 12,
            prior: Prior::StandardNormal,
            objective: Objective::Flow,
            fg_iou_threshold: 0.5,
            diffusion: DiffusionConfig::default(),
        }
    }
}

/// `G × P` matching cost between ground truths and predicted boxes.
/// `logits` is row-major `[P, num_classes]`.
pub fn match_cost<T: Scalar>(
    pred_boxes: &[FlowVector<T>],
    logits: &[T],
    num_classes: usize,
    gts: &[NormalizedBox<T>],
    weights: &LossWeights,
) -> Result<Vec<Vec<T>>> {
    if logits.len() != pred_boxes.len() * num_classes {
        return Err(FlowDetError::Dimension(format!(
            "{} logits for {} boxes of {num_classes} classes",
            logits.len(),
            pred_boxes.len()
        )));
    }
    let (wc, wl, wg) = (
        T::lit(weights.lambda_cls),
        T::lit(weights.lambda_l1),
        T::lit(weights.lambda_giou),
    );
    let preds: Vec<(FlowVector<T>, Corners<T>, T)> = pred_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let p = softmax_prob(&logits[i * num_classes..(i + 1) * num_classes], FOREGROUND);
            (*b, decode_flow_space_unchecked(b).to_corners(), p)
        })
        .collect();
    Ok(gts
        .iter()
        .map(|g| {
            let gf = encode_flow_space(g);
            let gc = g.to_corners();
            preds
                .iter()
                .map(|(pf, pc, p)| {
                    let l1 = l1_distance(pf, &gf);
                    wc * (T::one() - *p) + wl * l1 + wg * (T::one() - giou_unchecked(pc, &gc))
                })
                .collect()
        })
        .collect())
}

fn l1_distance<T: Scalar>(a: &FlowVector<T>, b: &FlowVector<T>) -> T {
    (a.a - b.a).abs() + (a.b - b.b).abs() + (a.lw - b.lw).abs() + (a.lh - b.lh).abs()
}

fn focal_row<T: Scalar>(row: &[T], target: usize, alpha: T, gamma: T) -> (T, Vec<T>) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&l| (l - m).exp()).sum();
    let probs: Vec<T> = row.iter().map(|&l| (l - m).exp() / z).collect();
    let log_p = row[target] - m - z.ln();
    let p = probs[target];
    let q = T::one() - p;
    let loss = -alpha * q.powf(gamma) * log_p;
    // d loss / d p multiplied by p, kept in that form so p → 0 stays finite
    let focus = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - T::one()) * p * log_p
    };
    let k = alpha * (focus - q.powf(gamma));
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let d = if j == target { T::one() } else { T::zero() };
            k * (d - pj)
        })
        .collect();
    (loss, grad)
}

fn class_alpha<T: Scalar>(focal: &FocalParams, target: usize) -> T {
    if target == FOREGROUND {
        T::lit(focal.alpha)
    } else {
        T::lit(1.0 - focal.alpha)
    }
}

/// Mean softmax focal loss over proposals; `logits` is `[N, C]` row-major.
/// Background targets are weighted by `1 − α`.
pub fn focal_loss<T: Scalar>(logits: &[T], num_classes: usize, targets: &[usize], focal: &FocalParams) -> Result<T> {
    check_targets(logits.len(), num_classes, targets)?;
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let gamma = T::lit(focal.gamma);
    let sum: T = targets
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            focal_row(
                &logits[i * num_classes..(i + 1) * num_classes],
                c,
                class_alpha(focal, c),
                gamma,
            )
            .0
        })
        .sum();
    Ok(sum / T::from_usize_lossy(targets.len()))
}

fn check_targets(n_logits: usize, num_classes: usize, targets: &[usize]) -> Result<()> {
    if num_classes == 0 || n_logits != targets.len() * num_classes || targets.iter().any(|&c| c >= num_classes) {
        return Err(FlowDetError::Dimension(format!(
            "{n_logits} logits, {num_classes} classes, {} targets",
            targets.len()
        )));
    }
    Ok(())
}

struct FocalOp<T> {
    grad: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for FocalOp<T> {
    fn name(&self) -> &'static str {
        "focal"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, out_grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let k = out_grad.data()[0];
        let data = self.grad.iter().map(|g| *g * k).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), data).expect("same shape"))]
    }
}

/// Graph version of [`focal_loss`] on a `[N, C]` logits node.
pub fn focal_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    focal: &FocalParams,
) -> Result<Var> {
    let value = g.value(logits);
    let c = value.cols();
    check_targets(value.len(), c, targets)?;
    let n = T::from_usize_lossy(targets.len().max(1));
    let gamma = T::lit(focal.gamma);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(value.len());
    for (i, &t) in targets.iter().enumerate() {
        let (l, gr) = focal_row(&value.data()[i * c..(i + 1) * c], t, class_alpha(focal, t), gamma);
        total += l;
        grad.extend(gr.into_iter().map(|x| x / n));
    }
    Ok(g.custom(&[logits], Tensor::scalar(total / n), Box::new(FocalOp { grad })))
}

/// Mean over boxes of `‖v − u‖²`.
pub fn flow_matching_loss<T: Scalar>(v_pred: &[VelocityVector<T>], u: &[VelocityVector<T>]) -> Result<T> {
    if v_pred.len() != u.len() {
        return Err(FlowDetError::Dimension(format!(
            "{} predicted vs {} target velocities",
            v_pred.len(),
            u.len()
        )));
    }
    if v_pred.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = v_pred
        .iter()
        .zip(u)
        .map(|(p, q)| {
            let d = p.sub(*q);
            d.a * d.a + d.b * d.b + d.lw * d.lw + d.lh * d.lh
        })
        .sum();
    Ok(sum / T::from_usize_lossy(v_pred.len()))
}

/// `1 − GIoU(decode(f), gt)` and its gradient with respect to `f`.
pub(crate) fn giou_loss_and_grad<T: Scalar>(f: &FlowVector<T>, gt: &Corners<T>) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let half = T::lit(0.5);
    let w_min = T::lit(MIN_BOX_SCALE);

    let cx_raw = half * (f.a + one);
    let cy_raw = half * (f.b + one);
    let w_raw = f.lw.exp();
    let h_raw = f.lh.exp();
    let cx = cx_raw.max(zero).min(one);
    let cy = cy_raw.max(zero).min(one);
    let w = w_raw.max(w_min).min(one);
    let h = h_raw.max(w_min).min(one);
    let inside = |v: T, lo: T, hi: T| if v > lo && v < hi { one } else { zero };
    let dcx = half * inside(cx_raw, zero, one);
    let dcy = half * inside(cy_raw, zero, one);
    let dw = w_raw * inside(w_raw, w_min, one);
    let dh = h_raw * inside(h_raw, w_min, one);

    let (x1, x2, y1, y2) = (cx - half * w, cx + half * w, cy - half * h, cy + half * h);
    let ind = |c: bool| if c { one } else { zero };

    let iw_raw = x2.min(gt.x2) - x1.max(gt.x1);
    let ih_raw = y2.min(gt.y2) - y1.max(gt.y1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let area = w * h;
    let union = area + (gt.x2 - gt.x1) * (gt.y2 - gt.y1) - inter;
    let ew = x2.max(gt.x2) - x1.min(gt.x1);
    let eh = y2.max(gt.y2) - y1.min(gt.y1);
    let enc = ew * eh;
    let loss = one - inter / union + (enc - union) / enc;

    // partials of inter, area and enclosing area with respect to (x1, x2, y1, y2)
    let dix = ind(iw_raw > zero) * ih;
    let diy = ind(ih_raw > zero) * iw;
    let d_inter = [
        -dix * ind(x1 > gt.x1),
        dix * ind(x2 < gt.x2),
        -diy * ind(y1 > gt.y1),
        diy * ind(y2 < gt.y2),
    ];
    let d_area = [-h, h, -w, w];
    let d_enc = [
        -eh * ind(x1 < gt.x1),
        eh * ind(x2 > gt.x2),
        -ew * ind(y1 < gt.y1),
        ew * ind(y2 > gt.y2),
    ];
    let mut dc = [zero; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * du) / (union * union);
        let d_ratio = (du * enc - union * d_enc[k]) / (enc * enc);
        dc[k] = -(d_iou + d_ratio);
    }
    let [gx1, gx2, gy1, gy2] = dc;
    let grad = [
        dcx * (gx1 + gx2),
        dcy * (gy1 + gy2),
        dw * half * (gx2 - gx1),
        dh * half * (gy2 - gy1),
    ];
    (loss, grad)
}

struct GiouOp<T> {
    grad: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for GiouOp<T> {
    fn name(&self) -> &'static str {
        "giou_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, out_grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let k = out_grad.data()[0];
        let data = self.grad.iter().map(|g| *g * k).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), data).expect("same shape"))]
    }
}

/// Mean `1 − GIoU` over `(row, target)` pairs of a `[N, 4]` flow-space node.
pub fn giou_loss_graph<T: Scalar>(g: &mut Graph<T>, boxes: Var, pairs: &[(usize, NormalizedBox<T>)]) -> Result<Var> {
    let value = g.value(boxes);
    if value.cols() != 4 {
        return Err(FlowDetError::Shape(format!(
            "expected [N,4] boxes, got {:?}",
            value.shape()
        )));
    }
    let mut grad = vec![T::zero(); value.len()];
    let n = T::from_usize_lossy(pairs.len().max(1));
    let mut total = T::zero();
    for (row, target) in pairs {
        let d = &value.data()[row * 4..row * 4 + 4];
        let (l, gr) = giou_loss_and_grad(&FlowVector::new(d[0], d[1], d[2], d[3]), &target.to_corners());
        total += l;
        for k in 0..4 {
            grad[row * 4 + k] += gr[k] / n;
        }
    }
    Ok(g.custom(&[boxes], Tensor::scalar(total / n), Box::new(GiouOp { grad })))
}

/// Noise, time and model input drawn for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw<T> {
    /// Decoder input boxes.
    pub xt: Vec<FlowVector<T>>,
    /// Time passed to the decoder.
    pub t: T,
    /// Per-proposal path velocity; empty for the diffusion objective.
    pub u: Vec<VelocityVector<T>>,
}

/// Draws the corrupted input for `x1` (padded ground truth in flow space).
pub fn draw_training_input<T: Scalar, R: Rng>(
    x1: &[FlowVector<T>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TrainingDraw<T>> {
    match cfg.objective {
        Objective::Flow => {
            let t = T::lit(rng.gen::<f64>());
            let x0 = cfg.prior.draw(x1.len(), rng);
            Ok(TrainingDraw {
                xt: interpolate(&x0, x1, t)?,
                t,
                u: target_velocity(&x0, x1)?,
            })
        }
        Objective::Diffusion => {
            let d = &cfg.diffusion;
            let sched = NoiseSchedule::cosine(d.timesteps);
            let step = rng.gen_range(0..d.timesteps);
            let scale = T::lit(d.signal_scale);
            let noise: Vec<FlowVector<T>> = (0..x1.len())
                .map(|_| {
                    let mut s = || T::lit(StandardNormal.sample(rng));
                    FlowVector::new(s(), s(), s(), s())
                })
                .collect();
            let scaled: Vec<_> = x1.iter().map(|b| b.scale(scale)).collect();
            let xs = sched.q_sample(&scaled, step, &noise)?;
            Ok(TrainingDraw {
                xt: xs.iter().map(|b| b.scale(T::one() / scale)).collect(),
                t: sched.model_time(step),
                u: Vec::new(),
            })
        }
    }
}

/// Graph handles and diagnostics from [`build_loss`].
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub foreground: usize,
}

/// Records the full per-image loss on `g`.
pub fn build_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &Detector<T>,
    sample: &AnnotatedImage<T>,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossGraph> {
    cfg.weights.validate()?;
    let padded = pad_gt_boxes(&sample.gt_boxes, cfg.n_prop);
    let draw = draw_training_input(&padded.boxes, cfg, rng)?;
    let features = model.encode_graph(g, &sample.image)?;
    let stride = model.config().total_stride();
    let dims = (
        model.config().feature_channels(),
        sample.image.height / stride,
        sample.image.width / stride,
    );
    let out = model.decode_graph(g, features, dims, &draw.xt, draw.t)?;
    let n = draw.xt.len();
    let nc = model.config().num_classes;

    // one-shot data estimate x̃1 = x_t + (1 − t)·v
    let xt_data: Vec<T> = draw.xt.iter().flat_map(|b| b.to_array()).collect();
    let xt_node = g.constant(Tensor::from_vec(&[n, 4], xt_data)?);
    let scaled_v = g.scale(out.velocity, T::one() - draw.t);
    let x1_hat = g.add(xt_node, scaled_v)?;
    let x1_vals: Vec<FlowVector<T>> = g
        .value(x1_hat)
        .data()
        .chunks(4)
        .map(|c| FlowVector::new(c[0], c[1], c[2], c[3]))
        .collect();

    let w = &cfg.weights;
    let mut targets = vec![BACKGROUND; n];
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let (mut l1_val, mut giou_val, mut flow_val) = (0.0, 0.0, 0.0);

    if !sample.gt_boxes.is_empty() {
        let gts: Vec<NormalizedBox<T>> = padded
            .source
            .iter()
            .map(|s| sample.gt_boxes[s.expect("real ground truth")])
            .collect();
        let logits = g.value(out.logits).data().to_vec();
        let cost = match_cost(&x1_vals, &logits, nc, &gts, w)?;
        let matching = hungarian_match(&cost)?;

        let thr = T::lit(cfg.fg_iou_threshold);
        let mut rows = Vec::with_capacity(gts.len());
        let mut target_flow = Vec::with_capacity(gts.len() * 4);
        let mut pairs = Vec::with_capacity(gts.len());
        for (gi, &p) in matching.assignment.iter().enumerate() {
            let pred_box = decode_flow_space_unchecked(&x1_vals[p]).to_corners();
            if cfg.fg_iou_threshold <= 0.0 || iou_unchecked(&pred_box, &gts[gi].to_corners()) >= thr {
                targets[p] = FOREGROUND;
            }
            rows.push(p);
            target_flow.extend(padded.boxes[gi].to_array());
            pairs.push((p, gts[gi]));
        }
        let m = rows.len();
        let inv_m = T::one() / T::from_usize_lossy(m);

        let picked = g.gather_rows(x1_hat, &rows)?;
        let tgt = g.constant(Tensor::from_vec(&[m, 4], target_flow)?);
        let diff = g.sub(picked, tgt)?;
        let absd = g.abs(diff);
        let l1_sum = g.sum_all(absd);
        let l1 = g.scale(l1_sum, inv_m);
        l1_val = g.scalar_value(l1).to_f64_lossy();
        terms.push((l1, w.lambda_l1));

        let giou = giou_loss_graph(g, x1_hat, &pairs)?;
        giou_val = g.scalar_value(giou).to_f64_lossy();
        terms.push((giou, w.lambda_giou));

        if cfg.objective == Objective::Flow {
            // each matched proposal regresses the velocity of its own path
            let u_data: Vec<T> = rows.iter().flat_map(|&p| draw.u[p].to_array()).collect();
            let v_rows = g.gather_rows(out.velocity, &rows)?;
            let u_node = g.constant(Tensor::from_vec(&[m, 4], u_data)?);
            let dv = g.sub(v_rows, u_node)?;
            let sq = g.square(dv);
            let s = g.sum_all(sq);
            let flow = g.scale(s, inv_m);
            flow_val = g.scalar_value(flow).to_f64_lossy();
            terms.push((flow, w.lambda_flow));
        }
    }

    let cls = focal_loss_graph(g, out.logits, &targets, &cfg.focal)?;
    let cls_val = g.scalar_value(cls).to_f64_lossy();
    terms.insert(0, (cls, w.lambda_cls));

    let breakdown = w.combine(cls_val, l1_val, giou_val, flow_val);
    if !breakdown.is_finite() {
        return Err(FlowDetError::NonFiniteLoss(format!(
            "image {}: cls {cls_val}, l1 {l1_val}, giou {giou_val}, flow {flow_val}",
            sample.image_id
        )));
    }

    // zero-weight terms stay out of the graph entirely
    let mut total: Option<Var> = None;
    for (v, lambda) in terms {
        if lambda == 0.0 {
            continue;
        }
        let s = g.scale(v, T::lit(lambda));
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossGraph {
        total,
        breakdown,
        foreground: targets.iter().filter(|&&c| c == FOREGROUND).count(),
    })
}

/// Per-image loss value without gradients.
pub fn training_loss<T: Scalar, R: Rng>(
    sample: &AnnotatedImage<T>,
    model: &Detector<T>,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    Ok(build_loss(&mut g, model, sample, cfg, rng)?.breakdown)
}

/// Per-image loss and its gradient with respect to every model parameter.
pub fn loss_and_gradients<T: Scalar, R: Rng>(
    sample: &AnnotatedImage<T>,
    model: &Detector<T>,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, ParamStore<T>)> {
    let mut g = Graph::new();
    let lg = build_loss(&mut g, model, sample, cfg, rng)?;
    let grads = g.backward(lg.total);
    let mut acc = model.params().zeros_like();
    grads.accumulate_params(&mut acc, T::one());
    Ok((lg.breakdown, acc))
}
