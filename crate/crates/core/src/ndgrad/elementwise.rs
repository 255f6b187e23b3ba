//! Elementwise primitives. Binary ops require identical shapes; the only
//! broadcasting is scalar-with-array through the `*_scalar` variants.

use super::graph::{GradAcc, Op};
use super::{Array, Graph, GradError, Var};

impl Graph {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GradError::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        self.check_finite(name, &[a, b])?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::from_parts(sa.to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        self.check_finite(name, &[a])?;
        let value = Array::from_parts(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| f(x)).collect(),
        );
        Ok(self.push(value, op, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.unary("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    /// `a^e` for a constant exponent.
    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var, GradError> {
        self.unary("powf", a, |x| x.powf(e), Op::Powf(a, e))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn unary_backward(
    a: Var,
    out: &Array,
    gout: &[f64],
    acc: &mut GradAcc<'_>,
    dydx: impl Fn(f64, f64) -> f64,
) {
    let x = acc.value(a).data();
    if let Some(s) = acc.slot(a) {
        for i in 0..s.len() {
            s[i] += gout[i] * dydx(x[i], out.data()[i]);
        }
    }
}

pub(crate) fn mul_backward(a: Var, b: Var, gout: &[f64], acc: &mut GradAcc<'_>) {
    let av = acc.value(a).data();
    let bv = acc.value(b).data();
    if let Some(s) = acc.slot(a) {
        for i in 0..s.len() {
            s[i] += gout[i] * bv[i];
        }
    }
    if let Some(s) = acc.slot(b) {
        for i in 0..s.len() {
            s[i] += gout[i] * av[i];
        }
    }
}

pub(crate) fn div_backward(a: Var, b: Var, gout: &[f64], acc: &mut GradAcc<'_>) {
    let av = acc.value(a).data();
    let bv = acc.value(b).data();
    if let Some(s) = acc.slot(a) {
        for i in 0..s.len() {
            s[i] += gout[i] / bv[i];
        }
    }
    if let Some(s) = acc.slot(b) {
        for i in 0..s.len() {
            s[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
        }
    }
}

pub(crate) fn select_backward(a: Var, b: Var, gout: &[f64], acc: &mut GradAcc<'_>, min: bool) {
    let av = acc.value(a).data();
    let bv = acc.value(b).data();
    let pick_a: Vec<bool> = av
        .iter()
        .zip(bv)
        .map(|(x, y)| if min { x <= y } else { x >= y })
        .collect();
    if let Some(s) = acc.slot(a) {
        for i in 0..s.len() {
            if pick_a[i] {
                s[i] += gout[i];
            }
        }
    }
    if let Some(s) = acc.slot(b) {
        for i in 0..s.len() {
            if !pick_a[i] {
                s[i] += gout[i];
            }
        }
    }
}
