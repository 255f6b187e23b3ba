//! Shape manipulation and reductions.

use super::graph::{GradAcc, Op};
use super::{Array, Graph, GradError, Var};

/// `(outer, extent, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(src_index, dst_index)` for every element of a permutation of an
/// array of shape `shape` by `perm`.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(src, dst);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(GradError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = Array::from_parts(shape.to_vec(), self.data(x).to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(GradError::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&shape, perm, |s, d| out[d] = src[s]);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(
            Array::from_parts(out_shape, out),
            Op::Permute(x, perm.to_vec()),
            &[x],
        ))
    }

    /// Swaps the two axes of a rank-2 array.
    pub fn transpose(&mut self, x: Var) -> Result<Var, GradError> {
        if self.shape(x).len() != 2 {
            return Err(GradError::shape("transpose", format!("{:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GradError> {
        let Some(&first) = parts.first() else {
            return Err(GradError::shape("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GradError::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GradError::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        self.check_finite("concat", parts)?;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Array::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            parts,
        ))
    }

    /// Gathers entries along `axis` by an index list (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(GradError::shape(
                "index_select",
                format!("{shape:?} axis {axis} indices {idx:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let at = (o * len + i) * inner;
                out.extend_from_slice(&src[at..at + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        Ok(self.push(
            Array::from_parts(out_shape, out),
            Op::IndexSelect(x, axis, idx.to_vec()),
            &[x],
        ))
    }

    /// The contiguous range `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(GradError::shape(
                "narrow",
                format!("{shape:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * full + start) * inner;
            out.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Array::from_parts(out_shape, out),
            Op::Narrow(x, axis, start),
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_finite("sum", &[x])?;
        let s = self.data(x).iter().sum();
        Ok(self.push(Array::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_finite("mean", &[x])?;
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(Array::scalar(m), Op::Mean(x), &[x]))
    }

    /// Sum over `axis`, which is removed from the shape (rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::shape(name, format!("axis {axis} of {shape:?}")));
        }
        self.check_finite(name, &[x])?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(Array::from_parts(out_shape, out), op, &[x]))
    }
}

pub(crate) fn reduce_axis_backward(x: Var, axis: usize, gout: &[f64], acc: &mut GradAcc<'_>, mean: bool) {
    let shape = acc.value(x).shape().to_vec();
    let (outer, len, inner) = split_axis(&shape, axis);
    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
    if let Some(gx) = acc.slot(x) {
        for o in 0..outer {
            let g = &gout[o * inner..(o + 1) * inner];
            for k in 0..len {
                gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b * scale);
            }
        }
    }
}

pub(crate) fn permute_backward(x: Var, perm: &[usize], _out_shape: &[usize], gout: &[f64], acc: &mut GradAcc<'_>) {
    let shape = acc.value(x).shape().to_vec();
    if let Some(gx) = acc.slot(x) {
        for_each_permuted(&shape, perm, |s, d| gx[s] += gout[d]);
    }
}

pub(crate) fn concat_backward(parts: &[Var], axis: usize, out_shape: &[usize], gout: &[f64], acc: &mut GradAcc<'_>) {
    let (outer, total, inner) = split_axis(out_shape, axis);
    let mut offset = 0;
    for &p in parts {
        let len = acc.value(p).shape()[axis];
        if let Some(gp) = acc.slot(p) {
            for o in 0..outer {
                let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                gp[o * len * inner..(o + 1) * len * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        offset += len;
    }
}

pub(crate) fn index_select_backward(x: Var, axis: usize, idx: &[usize], gout: &[f64], acc: &mut GradAcc<'_>) {
    let shape = acc.value(x).shape().to_vec();
    let (outer, len, inner) = split_axis(&shape, axis);
    if let Some(gx) = acc.slot(x) {
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                let src = &gout[(o * idx.len() + j) * inner..(o * idx.len() + j + 1) * inner];
                gx[(o * len + i) * inner..(o * len + i + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub(crate) fn narrow_backward(
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    gout: &[f64],
    acc: &mut GradAcc<'_>,
) {
    let shape = acc.value(x).shape().to_vec();
    let (outer, full, inner) = split_axis(&shape, axis);
    let len = out_shape[axis];
    if let Some(gx) = acc.slot(x) {
        for o in 0..outer {
            let src = &gout[o * len * inner..(o + 1) * len * inner];
            gx[(o * full + start) * inner..(o * full + start + len) * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
    }
}
