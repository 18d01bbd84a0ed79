//! Per-image detection evaluation pooled over a dataset: greedy score-ordered
//! matching, all-points average precision, and precision/recall at
//! confidence cut-offs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FlowDetError, Result};
use crate::geometry::{iou_unchecked, Detection, NormalizedBox};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub conf_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub nms_conf: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            conf_thresholds: vec![0.3, 0.4, 0.5],
            nms_iou: 0.1,
            nms_conf: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .iou_thresholds
            .iter()
            .chain(&self.conf_thresholds)
            .chain([&self.nms_iou, &self.nms_conf]);
        for v in all {
            if !(0.0..=1.0).contains(v) {
                return Err(FlowDetError::Config(format!("threshold {v} outside [0,1]")));
            }
        }
        if self.iou_thresholds.is_empty() {
            return Err(FlowDetError::Config("no IoU thresholds".into()));
        }
        Ok(())
    }
}

/// Outcome of matching one image's predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Prediction indices in descending score order (stable for ties).
    pub order: Vec<usize>,
    /// Whether `order[k]` is a true positive.
    pub is_tp: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn score_order<T: Scalar>(preds: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .score
            .partial_cmp(&preds[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Greedy one-to-one matching in score order. Each prediction takes the
/// unmatched ground truth with the highest IoU (lowest index on ties) and is
/// a true positive when that IoU reaches `iou_thresh`.
pub fn match_detections<T: Scalar>(preds: &[Detection<T>], gts: &[NormalizedBox<T>], iou_thresh: f64) -> MatchOutcome {
    let order = score_order(preds);
    let gt_corners: Vec<_> = gts.iter().map(|g| g.to_corners()).collect();
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(order.len());
    for &i in &order {
        let pc = preds[i].bbox.to_corners();
        let mut best: Option<(usize, f64)> = None;
        for (gi, gc) in gt_corners.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou_unchecked(&pc, gc).to_f64_lossy();
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                taken[gi] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    let tp = is_tp.iter().filter(|&&b| b).count();
    MatchOutcome {
        fp: order.len() - tp,
        fn_: gts.len() - tp,
        order,
        is_tp,
        tp,
    }
}

fn check_lengths<A, B>(preds: &[A], gts: &[B]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(FlowDetError::Dimension(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Area under the all-points interpolated precision/recall curve, pooled
/// over images that have at least one ground-truth box.
pub fn average_precision<T: Scalar>(
    preds: &[Vec<Detection<T>>],
    gts: &[Vec<NormalizedBox<T>>],
    iou_thresh: f64,
) -> Result<f64> {
    check_lengths(preds, gts)?;
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(FlowDetError::UndefinedMetric("no ground-truth boxes".into()));
    }
    // (score, image, rank within image, is_tp)
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (p, g)) in preds.iter().zip(gts).enumerate() {
        if g.is_empty() {
            continue;
        }
        let m = match_detections(p, g, iou_thresh);
        for (rank, (&i, &tp)) in m.order.iter().zip(&m.is_tp).enumerate() {
            ranked.push((p[i].score.to_f64_lossy(), img, rank, tp));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &ranked {
        if r.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Precision and recall after discarding detections below a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouMetrics {
    pub iou_threshold: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_gt: usize,
    pub per_iou: Vec<IouMetrics>,
    pub ap_10_50: f64,
    pub operating_points: Vec<OperatingPoint>,
}

impl EvalReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.per_iou
            .iter()
            .find(|m| (m.iou_threshold - iou).abs() < 1e-9)
            .map(|m| m.ap)
    }

    pub fn point(&self, conf: f64, iou: f64) -> Option<&OperatingPoint> {
        self.operating_points
            .iter()
            .find(|p| (p.conf_threshold - conf).abs() < 1e-9 && (p.iou_threshold - iou).abs() < 1e-9)
    }

    /// Aligned text table: one row per confidence cut-off with AP, precision
    /// and recall at the lowest and highest IoU thresholds.
    pub fn to_table(&self) -> String {
        let lo = self.per_iou.first().map_or(0.1, |m| m.iou_threshold);
        let hi = self.per_iou.last().map_or(0.5, |m| m.iou_threshold);
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let (l, h) = ((lo * 100.0).round(), (hi * 100.0).round());
        let header = [
            "tau_c".to_string(),
            format!("AP{l}"),
            format!("AP{h}"),
            format!("P{l}"),
            format!("P{h}"),
            format!("R{l}"),
            format!("R{h}"),
        ];
        let mut rows = vec![header.to_vec()];
        let mut confs: Vec<f64> = self.operating_points.iter().map(|p| p.conf_threshold).collect();
        confs.dedup();
        for c in confs {
            let (Some(a), Some(b)) = (self.point(c, lo), self.point(c, hi)) else {
                continue;
            };
            rows.push(vec![
                format!("{c:.2}"),
                pct(a.ap),
                pct(b.ap),
                pct(a.precision),
                pct(b.precision),
                pct(a.recall),
                pct(b.recall),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        let _ = writeln!(out, "AP{l}:{h} = {}", pct(self.ap_10_50));
        out
    }
}

fn counts<T: Scalar>(preds: &[Vec<Detection<T>>], gts: &[Vec<NormalizedBox<T>>], iou: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        let m = match_detections(p, g, iou);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    (tp, fp, fn_)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Full report over the IoU and confidence grids. Images without ground
/// truth are excluded.
pub fn evaluate<T: Scalar>(
    preds: &[Vec<Detection<T>>],
    gts: &[Vec<NormalizedBox<T>>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_lengths(preds, gts)?;
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut per_iou = Vec::with_capacity(cfg.iou_thresholds.len());
    for &iou in &cfg.iou_thresholds {
        let ap = average_precision(preds, gts, iou)?;
        let (tp, fp, fn_) = counts(preds, gts, iou);
        per_iou.push(IouMetrics {
            iou_threshold: iou,
            ap,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, num_gt),
            tp,
            fp,
            fn_,
        });
    }
    let ap_10_50 = per_iou.iter().map(|m| m.ap).sum::<f64>() / per_iou.len() as f64;

    let mut operating_points = Vec::new();
    for &conf in &cfg.conf_thresholds {
        let c = T::lit(conf);
        let kept: Vec<Vec<Detection<T>>> = preds
            .iter()
            .map(|p| p.iter().filter(|d| d.score >= c).copied().collect())
            .collect();
        for &iou in &cfg.iou_thresholds {
            let (tp, fp, fn_) = counts(&kept, gts, iou);
            operating_points.push(OperatingPoint {
                conf_threshold: conf,
                iou_threshold: iou,
                ap: average_precision(&kept, gts, iou)?,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, num_gt),
                tp,
                fp,
                fn_,
            });
        }
    }
    Ok(EvalReport {
        num_images: gts.iter().filter(|g| !g.is_empty()).count(),
        num_gt,
        per_iou,
        ap_10_50,
        operating_points,
    })
}
