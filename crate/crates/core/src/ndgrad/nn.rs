//! Network-flavoured primitives: normalizations, pooling, resampling and the
//! fused sigmoid focal loss.

use super::elementwise::{sigmoid, softplus};
use super::graph::{GradAcc, Op};
use super::shape::split_axis;
use super::{Array, Graph, GradError, Var};

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        self.check_finite("softmax", &[x])?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        Ok(self.push(Array::from_parts(shape, out), Op::Softmax(x, axis), &[x]))
    }

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(GradError::shape(
                "layer_norm",
                format!("{shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Array::from_parts(shape, out), op, &[x, gamma, beta]))
    }

    /// 2×2 max pooling with stride 2 over the last two axes. Odd extents are
    /// covered by a partial window, so each output extent is `ceil(n / 2)`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(GradError::shape("max_pool2", format!("{shape:?}")));
        }
        self.check_finite("max_pool2", &[x])?;
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let planes: usize = shape[..r - 2].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let first = base + 2 * oy * w + 2 * ox;
                    let mut best = (src[first], first);
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            let j = base + iy * w + ix;
                            if src[j] > best.0 {
                                best = (src[j], j);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Ok(self.push(
            Array::from_parts(out_shape, out),
            Op::MaxPool2 { x, argmax },
            &[x],
        ))
    }

    /// Nearest-neighbour resize of the last two axes to `(out_h, out_w)`;
    /// output row `i` reads input row `floor(i·h / out_h)`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(GradError::shape(
                "upsample_nearest",
                format!("{shape:?} -> {out_h}x{out_w}"),
            ));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    out.push(src[(p * h + iy) * w + ox * w / out_w]);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        Ok(self.push(
            Array::from_parts(out_shape, out),
            Op::UpsampleNearest(x),
            &[x],
        ))
    }

    /// Bilinear samples of a `[C,H,W]` map at fractional `(x, y)` points given
    /// in cell coordinates (cell centres at integers). Points are clamped into
    /// `[0, W-1] × [0, H-1]`. Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let [c, h, w] = shape.as_slice() else {
            return Err(GradError::shape("bilinear_sample", format!("{shape:?}")));
        };
        let (c, h, w) = (*c, *h, *w);
        if points.is_empty() {
            return Err(GradError::shape("bilinear_sample", "no sample points".into()));
        }
        if points.iter().any(|(px, py)| !px.is_finite() || !py.is_finite()) {
            return Err(GradError::NonFinite { op: "bilinear_sample" });
        }
        self.check_finite("bilinear_sample", &[x])?;
        let taps: Vec<[(usize, f64); 4]> = points.iter().map(|&(px, py)| bilinear_taps(px, py, h, w)).collect();
        let src = self.data(x);
        let hw = h * w;
        let mut out = vec![0.0; points.len() * c];
        for (p, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                out[p * c + ch] = t.iter().map(|&(j, wt)| wt * plane[j]).sum();
            }
        }
        Ok(self.push(
            Array::from_parts(vec![points.len(), c], out),
            Op::Bilinear { x, taps },
            &[x],
        ))
    }

    /// Elementwise sigmoid focal loss on logits against targets in `{0, 1}`:
    /// `-α(1-p)^γ ln p` where the target is 1 and `-(1-α)p^γ ln(1-p)` where it
    /// is 0, with `p = sigmoid(x)`. Log terms use the stable softplus form.
    pub fn sigmoid_focal(&mut self, x: Var, targets: &[f64], gamma: f64, alpha: f64) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if targets.len() != self.value(x).numel() {
            return Err(GradError::shape(
                "sigmoid_focal",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        self.check_finite("sigmoid_focal", &[x])?;
        let out = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| focal_from_logit(z, t, gamma, alpha).0)
            .collect();
        let op = Op::SigmoidFocal {
            x,
            targets: targets.to_vec(),
            gamma,
            alpha,
        };
        Ok(self.push(Array::from_parts(shape, out), op, &[x]))
    }
}

pub(crate) fn bilinear_taps(px: f64, py: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = px.clamp(0.0, (w - 1) as f64);
    let y = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (lx, ly) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// Focal loss value and its derivative with respect to the logit.
pub(crate) fn focal_from_logit(z: f64, t: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let neg_ln_p = softplus(-z);
    let neg_ln_q = softplus(z);
    let (mut v, mut d) = (0.0, 0.0);
    if t > 0.0 {
        let q_g = (1.0 - p).powf(gamma);
        v += t * alpha * q_g * neg_ln_p;
        d += -t * alpha * q_g * (gamma * p * neg_ln_p + (1.0 - p));
    }
    if t < 1.0 {
        let p_g = p.powf(gamma);
        v += (1.0 - t) * (1.0 - alpha) * p_g * neg_ln_q;
        d += (1.0 - t) * (1.0 - alpha) * p_g * (gamma * (1.0 - p) * neg_ln_q + p);
    }
    (v, d)
}

pub(crate) fn softmax_backward(x: Var, axis: usize, out: &Array, gout: &[f64], acc: &mut GradAcc<'_>) {
    let (outer, len, inner) = split_axis(out.shape(), axis);
    let y = out.data();
    if let Some(gx) = acc.slot(x) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot: f64 = (0..len).map(|k| gout[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    gx[at(k)] += y[at(k)] * (gout[at(k)] - dot);
                }
            }
        }
    }
}

pub(crate) fn layer_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    gout: &[f64],
    acc: &mut GradAcc<'_>,
) {
    let g = acc.value(gamma).data();
    let n = g.len();
    let rows = inv_std.len();
    if let Some(gb) = acc.slot(beta) {
        for row in gout.chunks(n) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    if let Some(gg) = acc.slot(gamma) {
        for (row, xh) in gout.chunks(n).zip(xhat.chunks(n)) {
            for j in 0..n {
                gg[j] += row[j] * xh[j];
            }
        }
    }
    if let Some(gx) = acc.slot(x) {
        let mut dxhat = vec![0.0; n];
        for r in 0..rows {
            let dy = &gout[r * n..(r + 1) * n];
            let xh = &xhat[r * n..(r + 1) * n];
            for j in 0..n {
                dxhat[j] = dy[j] * g[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / n as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for j in 0..n {
                gx[r * n + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
    }
}

pub(crate) fn upsample_backward(x: Var, out_shape: &[usize], gout: &[f64], acc: &mut GradAcc<'_>) {
    let shape = acc.value(x).shape().to_vec();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (oh, ow) = (out_shape[r - 2], out_shape[r - 1]);
    let planes: usize = shape[..r - 2].iter().product();
    if let Some(gx) = acc.slot(x) {
        for p in 0..planes {
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    gx[(p * h + iy) * w + ox * w / ow] += gout[(p * oh + oy) * ow + ox];
                }
            }
        }
    }
}

pub(crate) fn bilinear_backward(
    x: Var,
    taps: &[[(usize, f64); 4]],
    out_shape: &[usize],
    gout: &[f64],
    acc: &mut GradAcc<'_>,
) {
    let c = out_shape[1];
    let shape = acc.value(x).shape();
    let hw = shape[1] * shape[2];
    if let Some(gx) = acc.slot(x) {
        for (p, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let g = gout[p * c + ch];
                for &(j, wt) in t {
                    gx[ch * hw + j] += wt * g;
                }
            }
        }
    }
}

pub(crate) fn sigmoid_focal_backward(
    x: Var,
    targets: &[f64],
    gamma: f64,
    alpha: f64,
    gout: &[f64],
    acc: &mut GradAcc<'_>,
) {
    let z = acc.value(x).data();
    if let Some(gx) = acc.slot(x) {
        for i in 0..gx.len() {
            gx[i] += gout[i] * focal_from_logit(z[i], targets[i], gamma, alpha).1;
        }
    }
}
