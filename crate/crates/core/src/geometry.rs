//! Box representations, conversions between normalized and flow space,
//! overlap measures and greedy non-maximum suppression.
//!
//! Flow space maps a normalized `(cx, cy, w, h)` box to
//! `(2·cx − 1, 2·cy − 1, ln w, ln h)`: centers become an affine image of
//! `[-1, 1]` and scales live in log space, so Gaussian noise and straight-line
//! interpolation never produce negative widths.

use serde::{Deserialize, Serialize};

use crate::error::{FlowDetError, Result};
use crate::scalar::Scalar;

/// Smallest width/height (as an image fraction) a box may take.
pub const MIN_BOX_SCALE: f64 = 1e-3;

/// Center/size box with every component expressed as a fraction of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "[T; 4]",
    into = "[T; 4]",
    bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de>")
)]
pub struct NormalizedBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T> From<[T; 4]> for NormalizedBox<T> {
    fn from([cx, cy, w, h]: [T; 4]) -> Self {
        Self { cx, cy, w, h }
    }
}

impl<T> From<NormalizedBox<T>> for [T; 4] {
    fn from(b: NormalizedBox<T>) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl<T: Scalar> NormalizedBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        Self { cx, cy, w, h }
    }

    /// Checks the box invariants: centers in `[0,1]`, sizes in `(0,1]`.
    pub fn validate(&self) -> Result<()> {
        let (zero, one) = (T::zero(), T::one());
        let in_unit = |v: T| v >= zero && v <= one;
        if !(in_unit(self.cx) && in_unit(self.cy)) {
            return Err(FlowDetError::InvalidBox(format!(
                "center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        if !(self.w > zero && self.w <= one && self.h > zero && self.h <= one) {
            return Err(FlowDetError::InvalidBox(format!(
                "size ({}, {}) outside (0,1]",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn to_corners(&self) -> Corners<T> {
        to_corners(self)
    }

    pub fn cast<U: Scalar>(&self) -> NormalizedBox<U> {
        NormalizedBox {
            cx: U::lit(self.cx.to_f64_lossy()),
            cy: U::lit(self.cy.to_f64_lossy()),
            w: U::lit(self.w.to_f64_lossy()),
            h: U::lit(self.h.to_f64_lossy()),
        }
    }
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "[T; 4]",
    into = "[T; 4]",
    bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de>")
)]
pub struct Corners<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T> From<[T; 4]> for Corners<T> {
    fn from([x1, y1, x2, y2]: [T; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl<T> From<Corners<T>> for [T; 4] {
    fn from(c: Corners<T>) -> Self {
        [c.x1, c.y1, c.x2, c.y2]
    }
}

impl<T: Scalar> Corners<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    fn check(&self) -> Result<()> {
        if self.x2 < self.x1 || self.y2 < self.y1 || !self.area().is_finite() {
            return Err(FlowDetError::InvalidBox(format!(
                "malformed corners ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }
}

/// Unconstrained flow-space point `(a, b, lw, lh)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(
    from = "[T; 4]",
    into = "[T; 4]",
    bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de>")
)]
pub struct FlowVector<T> {
    pub a: T,
    pub b: T,
    pub lw: T,
    pub lh: T,
}

impl<T> From<[T; 4]> for FlowVector<T> {
    fn from([a, b, lw, lh]: [T; 4]) -> Self {
        Self { a, b, lw, lh }
    }
}

impl<T> From<FlowVector<T>> for [T; 4] {
    fn from(v: FlowVector<T>) -> Self {
        [v.a, v.b, v.lw, v.lh]
    }
}

impl<T: Scalar> FlowVector<T> {
    pub fn new(a: T, b: T, lw: T, lh: T) -> Self {
        Self { a, b, lw, lh }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn to_array(self) -> [T; 4] {
        self.into()
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.lw.is_finite() && self.lh.is_finite()
    }

    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self::new(f(self.a), f(self.b), f(self.lw), f(self.lh))
    }

    pub fn zip(self, other: Self, f: impl Fn(T, T) -> T) -> Self {
        Self::new(
            f(self.a, other.a),
            f(self.b, other.b),
            f(self.lw, other.lw),
            f(self.lh, other.lh),
        )
    }

    pub fn add(self, other: Self) -> Self {
        self.zip(other, |x, y| x + y)
    }

    pub fn sub(self, other: Self) -> Self {
        self.zip(other, |x, y| x - y)
    }

    pub fn scale(self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let d = self.sub(*other);
        d.a.abs().max(d.b.abs()).max(d.lw.abs()).max(d.lh.abs())
    }
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de>"))]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: NormalizedBox<T>,
    pub score: T,
    pub class_id: usize,
}

pub fn to_corners<T: Scalar>(b: &NormalizedBox<T>) -> Corners<T> {
    let half = T::lit(0.5);
    Corners::new(
        b.cx - half * b.w,
        b.cy - half * b.h,
        b.cx + half * b.w,
        b.cy + half * b.h,
    )
}

pub fn from_corners<T: Scalar>(c: &Corners<T>) -> NormalizedBox<T> {
    let half = T::lit(0.5);
    NormalizedBox::new(half * (c.x1 + c.x2), half * (c.y1 + c.y2), c.x2 - c.x1, c.y2 - c.y1)
}

/// Intersection over union; zero-area pairs give 0.
pub fn iou<T: Scalar>(a: &Corners<T>, b: &Corners<T>) -> Result<T> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked<T: Scalar>(a: &Corners<T>, b: &Corners<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou<T: Scalar>(a: &Corners<T>, b: &Corners<T>) -> Result<T> {
    a.check()?;
    b.check()?;
    Ok(giou_unchecked(a, b))
}

pub(crate) fn giou_unchecked<T: Scalar>(a: &Corners<T>, b: &Corners<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union <= T::zero() { T::zero() } else { inter / union };
    let enclosing = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclosing <= T::zero() {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

/// Maps a normalized box into flow space, clamping sizes below [`MIN_BOX_SCALE`].
pub fn encode_flow_space<T: Scalar>(b: &NormalizedBox<T>) -> FlowVector<T> {
    let w_min = T::lit(MIN_BOX_SCALE);
    let two = T::lit(2.0);
    if b.w < w_min || b.h < w_min {
        log::debug!("box size ({}, {}) clamped to {}", b.w, b.h, MIN_BOX_SCALE);
    }
    FlowVector::new(
        two * b.cx - T::one(),
        two * b.cy - T::one(),
        b.w.max(w_min).ln(),
        b.h.max(w_min).ln(),
    )
}

/// Inverse of [`encode_flow_space`], clamping the result into the valid box domain.
pub fn decode_flow_space<T: Scalar>(v: &FlowVector<T>) -> Result<NormalizedBox<T>> {
    if !v.is_finite() {
        return Err(FlowDetError::InvalidState(format!(
            "non-finite flow vector ({}, {}, {}, {})",
            v.a, v.b, v.lw, v.lh
        )));
    }
    Ok(decode_flow_space_unchecked(v))
}

pub(crate) fn decode_flow_space_unchecked<T: Scalar>(v: &FlowVector<T>) -> NormalizedBox<T> {
    let half = T::lit(0.5);
    let w_min = T::lit(MIN_BOX_SCALE);
    let unit = |x: T| x.max(T::zero()).min(T::one());
    let size = |x: T| x.exp().max(w_min).min(T::one());
    NormalizedBox::new(
        unit(half * (v.a + T::one())),
        unit(half * (v.b + T::one())),
        size(v.lw),
        size(v.lh),
    )
}

/// Greedy NMS: drop scores below `conf_thresh`, then keep boxes in descending
/// score order unless they overlap a kept box by more than `iou_thresh`.
/// Equal scores keep their input order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_thresh: T, conf_thresh: T) -> Vec<Detection<T>> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= conf_thresh).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut kept: Vec<Detection<T>> = Vec::new();
    let mut kept_corners: Vec<Corners<T>> = Vec::new();
    for i in order {
        let c = dets[i].bbox.to_corners();
        if kept_corners.iter().all(|k| iou_unchecked(k, &c) <= iou_thresh) {
            kept.push(dets[i]);
            kept_corners.push(c);
        }
    }
    kept
}
