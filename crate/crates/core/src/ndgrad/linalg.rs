use super::graph::{GradAcc, Op};
use super::{Array, Graph, GradError, Var};

/// `c = a·b` (or `c += a·b`) for row-major `c` of shape `m×n`. `a` and `b` are
/// addressed through (row stride, column stride) pairs so transposed operands
/// need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices sized for the given extents and strides; the
    // asserts below cover the furthest element touched in each operand.
    assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Matrix product. `[m,k]·[k,n] → [m,n]`, or batched
    /// `[b,m,k]·[b,k,n] → [b,m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(GradError::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        self.check_finite("matmul", &[a, b])?;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                (k, 1),
                &bd[i * k * n..],
                (n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(Array::from_parts(shape, out), Op::Matmul(a, b), &[a, b]))
    }

    /// Adds `b` (shape `[n]`) to every length-`n` row along the last axis of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap();
        if sb != [n] {
            return Err(GradError::shape("bias_add", format!("{sx:?} + {sb:?}")));
        }
        self.check_finite("bias_add", &[x, b])?;
        let bd = self.data(b);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(u, v)| u + v))
            .collect();
        let value = Array::from_parts(sx.to_vec(), data);
        Ok(self.push(value, Op::BiasAdd(x, b), &[x, b]))
    }

    /// `x·w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`. Leading axes of
    /// `x` are flattened into rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
        let sx = self.shape(x).to_vec();
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = if sx.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, sx[sx.len() - 1]])?
        };
        let y = self.matmul(flat, w)?;
        let y = self.bias_add(y, b)?;
        if sx.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = sx[..sx.len() - 1].to_vec();
            out_shape.push(self.shape(w)[1]);
            self.reshape(y, &out_shape)
        }
    }

    /// 2-D convolution with zero padding. `x` is `[C,H,W]` or `[N,C,H,W]`,
    /// `w` is `[Cout,C,kh,kw]`, optional `b` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, GradError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batched, n, cin, h, wd) = match sx.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => return Err(GradError::shape("conv2d", format!("input {sx:?}"))),
        };
        let [cout, cin_w, kh, kw] = sw.as_slice() else {
            return Err(GradError::shape("conv2d", format!("weight {sw:?}")));
        };
        if *cin_w != cin || stride == 0 || h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return Err(GradError::shape(
                "conv2d",
                format!("input {sx:?} weight {sw:?} stride {stride} pad {pad}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [*cout] {
                return Err(GradError::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} outputs", self.shape(b)),
                ));
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.check_finite("conv2d", &inputs)?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout: *cout,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (ckk, hw) = (geom.ckk(), geom.hw_out());
        let xd = self.data(x);
        let cols = if geom.is_pointwise() {
            xd.to_vec()
        } else {
            let mut cols = vec![0.0; n * ckk * hw];
            for i in 0..n {
                im2col(
                    &xd[i * cin * h * wd..(i + 1) * cin * h * wd],
                    &geom,
                    &mut cols[i * ckk * hw..(i + 1) * ckk * hw],
                );
            }
            cols
        };
        let wdata = self.data(w);
        let mut out = vec![0.0; n * geom.cout * hw];
        for i in 0..n {
            let o = &mut out[i * geom.cout * hw..(i + 1) * geom.cout * hw];
            if let Some(b) = b {
                for (row, &bv) in o.chunks_mut(hw).zip(self.data(b)) {
                    row.iter_mut().for_each(|v| *v = bv);
                }
            }
            gemm(
                geom.cout,
                ckk,
                hw,
                wdata,
                (ckk, 1),
                &cols[i * ckk * hw..],
                (hw, 1),
                o,
                b.is_some(),
            );
        }
        let shape = if batched {
            vec![n, geom.cout, geom.ho, geom.wo]
        } else {
            vec![geom.cout, geom.ho, geom.wo]
        };
        let keep_cols = self.requires_grad(w);
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if keep_cols { cols } else { Vec::new() },
        };
        Ok(self.push(Array::from_parts(shape, out), op, &inputs))
    }
}

pub(crate) fn matmul_backward(a: Var, b: Var, gout: &[f64], acc: &mut GradAcc<'_>) {
    let (va, vb) = (acc.value(a), acc.value(b));
    let sa = va.shape();
    let (batch, m, k) = if sa.len() == 2 {
        (1, sa[0], sa[1])
    } else {
        (sa[0], sa[1], sa[2])
    };
    let n = *vb.shape().last().unwrap();
    let (ad, bd) = (va.data(), vb.data());
    if let Some(ga) = acc.slot(a) {
        for i in 0..batch {
            // dA = dC · Bᵀ
            gemm(
                m,
                n,
                k,
                &gout[i * m * n..],
                (n, 1),
                &bd[i * k * n..],
                (1, n),
                &mut ga[i * m * k..(i + 1) * m * k],
                true,
            );
        }
    }
    if let Some(gb) = acc.slot(b) {
        for i in 0..batch {
            // dB = Aᵀ · dC
            gemm(
                k,
                m,
                n,
                &ad[i * m * k..],
                (1, k),
                &gout[i * m * n..],
                (n, 1),
                &mut gb[i * k * n..(i + 1) * k * n],
                true,
            );
        }
    }
}

pub(crate) fn bias_add_backward(x: Var, b: Var, gout: &[f64], acc: &mut GradAcc<'_>) {
    acc.add(x, gout);
    if let Some(gb) = acc.slot(b) {
        let n = gb.len();
        for row in gout.chunks(n) {
            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
    }
}

pub(crate) fn conv2d_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &ConvGeom,
    cols: &[f64],
    gout: &[f64],
    acc: &mut GradAcc<'_>,
) {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let per_out = g.cout * hw;
    if let Some(b) = b {
        if let Some(gb) = acc.slot(b) {
            for i in 0..g.n {
                for (o, row) in gout[i * per_out..(i + 1) * per_out].chunks(hw).enumerate() {
                    gb[o] += row.iter().sum::<f64>();
                }
            }
        }
    }
    if let Some(gw) = acc.slot(w) {
        for i in 0..g.n {
            // dW = dOut · colsᵀ
            gemm(
                g.cout,
                hw,
                ckk,
                &gout[i * per_out..],
                (hw, 1),
                &cols[i * ckk * hw..],
                (1, hw),
                gw,
                true,
            );
        }
    }
    let wd = acc.value(w).data();
    if let Some(gx) = acc.slot(x) {
        let per_in = g.cin * g.h * g.w;
        let mut dcols = vec![0.0; ckk * hw];
        for i in 0..g.n {
            // dCols = Wᵀ · dOut
            gemm(
                ckk,
                g.cout,
                hw,
                wd,
                (1, ckk),
                &gout[i * per_out..],
                (hw, 1),
                &mut dcols,
                false,
            );
            let dx = &mut gx[i * per_in..(i + 1) * per_in];
            if g.is_pointwise() {
                dx.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
            } else {
                col2im(&dcols, g, dx);
            }
        }
    }
}
