//! Central-difference gradient checking in 64-bit precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between the analytic gradient of `f` at
/// `points` and its central-difference estimate with step `eps`.
///
/// `f` receives a fresh graph and one leaf per point and must return a scalar.
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = pts.iter().map(|p| g.input(p.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.input(p.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        if !grad.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        for i in 0..points[pi].numel() {
            let orig = points[pi].data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
