//! Fixed-grid bilinear region pooling over a `[C, H, W]` feature map.
//!
//! Boxes arrive in flow space and are decoded (with the usual clamping)
//! inside the op, so the pooled values are differentiable in both the
//! features and the box coordinates.

use crate::autograd::{CustomOp, Graph, Var};
use crate::error::{FlowDetError, Result};
use crate::geometry::{decode_flow_space_unchecked, FlowVector, MIN_BOX_SCALE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear sample points per bin side.
const SAMPLES_PER_BIN: usize = 2;

/// One bilinear sample point of an output row.
#[derive(Clone, Copy)]
struct Sample<T> {
    px: T,
    py: T,
    /// `∂px/∂w / W`, i.e. the relative position inside the box minus one half.
    rel_x: T,
    rel_y: T,
}

/// Local derivatives of the decoded box with respect to its flow coordinates.
#[derive(Clone, Copy)]
struct BoxJacobian<T> {
    dcx: T,
    dcy: T,
    dw: T,
    dh: T,
}

struct RoiPoolOp<T> {
    channels: usize,
    height: usize,
    width: usize,
    pool: usize,
    taps: Vec<(usize, T)>,
    row_start: Vec<usize>,
    samples: Vec<Sample<T>>,
    jac: Vec<BoxJacobian<T>>,
}

impl<T: Scalar> RoiPoolOp<T> {
    /// `(∂value/∂px, ∂value/∂py)` of the bilinear sample for every channel,
    /// contracted with the output gradient row `grow`.
    fn position_grad(&self, fv: &[T], grow: &[T], px: T, py: T) -> (T, T) {
        let (w, h) = (self.width as i64, self.height as i64);
        let plane = self.width * self.height;
        let fx0 = px.floor();
        let fy0 = py.floor();
        let ax = px - fx0;
        let ay = py - fy0;
        let ix0 = fx0.to_i64().unwrap_or(i64::MIN / 2);
        let iy0 = fy0.to_i64().unwrap_or(i64::MIN / 2);
        let at = |ch: usize, iy: i64, ix: i64| -> T {
            if iy < 0 || iy >= h || ix < 0 || ix >= w {
                T::zero()
            } else {
                fv[ch * plane + iy as usize * self.width + ix as usize]
            }
        };
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for (ch, &gv) in grow.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let f00 = at(ch, iy0, ix0);
            let f01 = at(ch, iy0, ix0 + 1);
            let f10 = at(ch, iy0 + 1, ix0);
            let f11 = at(ch, iy0 + 1, ix0 + 1);
            let dx = (T::one() - ay) * (f01 - f00) + ay * (f11 - f10);
            let dy = (T::one() - ax) * (f10 - f00) + ax * (f11 - f01);
            gx += gv * dx;
            gy += gv * dy;
        }
        (gx, gy)
    }
}

impl<T: Scalar> CustomOp<T> for RoiPoolOp<T> {
    fn name(&self) -> &'static str {
        "roi_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, out_grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let c = self.channels;
        let plane = self.width * self.height;
        let mut gf = Tensor::zeros(&[c * plane]);
        let gfd = gf.data_mut();
        let gd = out_grad.data();
        let rows = self.row_start.len() - 1;
        for r in 0..rows {
            let grow = &gd[r * c..(r + 1) * c];
            for &(idx, w) in &self.taps[self.row_start[r]..self.row_start[r + 1]] {
                for (ch, gv) in grow.iter().enumerate() {
                    gfd[ch * plane + idx] += w * *gv;
                }
            }
        }

        let fv = inputs[0].data();
        let n_boxes = self.jac.len();
        let per_row = SAMPLES_PER_BIN * SAMPLES_PER_BIN;
        let per_box = self.pool * self.pool;
        let sample_w = T::one() / T::from_usize_lossy(per_row);
        let (wf, hf) = (T::from_usize_lossy(self.width), T::from_usize_lossy(self.height));
        let mut gb = Tensor::zeros(&[n_boxes, 4]);
        let gbd = gb.data_mut();
        for b in 0..n_boxes {
            let (mut gcx, mut gcy, mut gw, mut gh) = (T::zero(), T::zero(), T::zero(), T::zero());
            for r in b * per_box..(b + 1) * per_box {
                let grow = &gd[r * c..(r + 1) * c];
                for s in &self.samples[r * per_row..(r + 1) * per_row] {
                    let (dpx, dpy) = self.position_grad(fv, grow, s.px, s.py);
                    let (dpx, dpy) = (dpx * sample_w * wf, dpy * sample_w * hf);
                    gcx += dpx;
                    gcy += dpy;
                    gw += dpx * s.rel_x;
                    gh += dpy * s.rel_y;
                }
            }
            let j = &self.jac[b];
            gbd[4 * b] = gcx * j.dcx;
            gbd[4 * b + 1] = gcy * j.dcy;
            gbd[4 * b + 2] = gw * j.dw;
            gbd[4 * b + 3] = gh * j.dh;
        }
        vec![Some(gf), Some(gb)]
    }
}

fn jacobian<T: Scalar>(f: &FlowVector<T>) -> BoxJacobian<T> {
    let half = T::lit(0.5);
    let w_min = T::lit(MIN_BOX_SCALE);
    // zero slope wherever the decode clamps
    let centre = |x: T| {
        let c = half * (x + T::one());
        if c > T::zero() && c < T::one() {
            half
        } else {
            T::zero()
        }
    };
    let size = |x: T| {
        let s = x.exp();
        if s > w_min && s < T::one() {
            s
        } else {
            T::zero()
        }
    };
    BoxJacobian {
        dcx: centre(f.a),
        dcy: centre(f.b),
        dw: size(f.lw),
        dh: size(f.lh),
    }
}

/// Pools a `pool × pool` grid inside each box of `boxes` (flow space,
/// `[n, 4]`). The output is `[n · pool², channels]`, one row per (box, bin)
/// pair.
pub fn roi_pool<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    dims: (usize, usize, usize),
    boxes: Var,
    pool: usize,
) -> Result<Var> {
    let (channels, height, width) = dims;
    let plane = height * width;
    if g.value(features).len() != channels * plane {
        return Err(FlowDetError::Shape(format!(
            "feature map has {} values, expected {channels}x{height}x{width}",
            g.value(features).len()
        )));
    }
    let flow: Vec<FlowVector<T>> = {
        let bv = g.value(boxes);
        if !bv.len().is_multiple_of(4) {
            return Err(FlowDetError::Shape(format!("boxes tensor has {} values", bv.len())));
        }
        bv.data()
            .chunks(4)
            .map(|c| FlowVector::new(c[0], c[1], c[2], c[3]))
            .collect()
    };
    let rows = flow.len() * pool * pool;
    let per_row = SAMPLES_PER_BIN * SAMPLES_PER_BIN;
    let mut taps: Vec<(usize, T)> = Vec::with_capacity(rows * 4 * per_row);
    let mut row_start = Vec::with_capacity(rows + 1);
    let mut samples = Vec::with_capacity(rows * per_row);
    let (wf, hf) = (T::from_usize_lossy(width), T::from_usize_lossy(height));
    let half = T::lit(0.5);
    let sub = T::from_usize_lossy(pool * SAMPLES_PER_BIN);
    let sample_w = T::one() / T::from_usize_lossy(per_row);

    for f in &flow {
        let b = decode_flow_space_unchecked(f);
        let x0 = (b.cx - half * b.w) * wf;
        let y0 = (b.cy - half * b.h) * hf;
        let (bw, bh) = (b.w * wf, b.h * hf);
        for by in 0..pool {
            for bx in 0..pool {
                row_start.push(taps.len());
                for sy in 0..SAMPLES_PER_BIN {
                    let fy = (T::from_usize_lossy(by * SAMPLES_PER_BIN + sy) + half) / sub;
                    let py = y0 + fy * bh - half;
                    for sx in 0..SAMPLES_PER_BIN {
                        let fx = (T::from_usize_lossy(bx * SAMPLES_PER_BIN + sx) + half) / sub;
                        let px = x0 + fx * bw - half;
                        push_bilinear(&mut taps, px, py, width, height, sample_w);
                        samples.push(Sample {
                            px,
                            py,
                            rel_x: fx - half,
                            rel_y: fy - half,
                        });
                    }
                }
            }
        }
    }
    row_start.push(taps.len());

    let fv = g.value(features).data();
    let mut out = Tensor::zeros(&[rows, channels]);
    {
        let od = out.data_mut();
        for r in 0..rows {
            let orow = &mut od[r * channels..(r + 1) * channels];
            for &(idx, w) in &taps[row_start[r]..row_start[r + 1]] {
                for (ch, o) in orow.iter_mut().enumerate() {
                    *o += w * fv[ch * plane + idx];
                }
            }
        }
    }
    let jac = flow.iter().map(jacobian).collect();
    Ok(g.custom(
        &[features, boxes],
        out,
        Box::new(RoiPoolOp {
            channels,
            height,
            width,
            pool,
            taps,
            row_start,
            samples,
            jac,
        }),
    ))
}

fn push_bilinear<T: Scalar>(taps: &mut Vec<(usize, T)>, px: T, py: T, width: usize, height: usize, scale: T) {
    let fx0 = px.floor();
    let fy0 = py.floor();
    let ax = px - fx0;
    let ay = py - fy0;
    let ix0 = fx0.to_i64().unwrap_or(i64::MIN / 2);
    let iy0 = fy0.to_i64().unwrap_or(i64::MIN / 2);
    for (dy, wy) in [(0i64, T::one() - ay), (1, ay)] {
        let iy = iy0 + dy;
        if iy < 0 || iy >= height as i64 || wy == T::zero() {
            continue;
        }
        for (dx, wx) in [(0i64, T::one() - ax), (1, ax)] {
            let ix = ix0 + dx;
            if ix < 0 || ix >= width as i64 || wx == T::zero() {
                continue;
            }
            taps.push((iy as usize * width + ix as usize, scale * wx * wy));
        }
    }
}
