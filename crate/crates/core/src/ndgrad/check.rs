use super::{Array, Graph, GradError, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Array, step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, GradError>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(GradError::InvalidArgument(format!(
            "finite-difference step must lie in (0, 1e-3], got {step}"
        )));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.without_grad().requiring_grad());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).expect("leaf carries a gradient").to_vec();

    let eval = |probe: Array| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(GradError::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.without_grad();
        plus.data_mut()[i] += step;
        let mut minus = x.without_grad();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
