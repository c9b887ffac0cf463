//! Finite-difference checks for modules with named parameters.

use polyformer_tensor::{Graph, Tensor, TensorError, Var};

use super::param::Module;
use crate::error::Result;

/// Largest relative disagreement between analytic and central-difference
/// gradients of the scalar `f(module, inputs)`, over every input element and
/// every element of every trainable parameter of `module`.
///
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn module_grad_check<M, F>(module: &M, inputs: &[Tensor<f64>], f: F, eps: f64) -> Result<f64>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |m: &M, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), false)).collect();
        let out = f(m, &mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "module_grad_check",
            }
            .into());
        }
        Ok(v)
    };
    let worse = |worst: f64, a: f64, n: f64| {
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst.max((a - n).abs() / denom)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone(), true)).collect();
    let out = f(module, &mut g, &vars)?;
    g.backward(out)?;
    let param_grads = g.param_grads();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (xi, &v) in vars.iter().enumerate() {
        let grad = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[xi].shape().to_vec()));
        for i in 0..inputs[xi].numel() {
            let orig = inputs[xi].data()[i];
            probe[xi].data_mut()[i] = orig + eps;
            let fp = eval(module, &probe)?;
            probe[xi].data_mut()[i] = orig - eps;
            let fm = eval(module, &probe)?;
            probe[xi].data_mut()[i] = orig;
            worst = worse(worst, grad.data()[i], (fp - fm) / (2.0 * eps));
        }
    }

    let mut trainable = Vec::new();
    module.visit(&mut |p| {
        if p.trainable {
            trainable.push((p.name.clone(), p.value.numel()));
        }
    });
    for (name, numel) in trainable {
        for i in 0..numel {
            let nudged = |delta: f64| {
                let mut m = module.clone();
                m.visit_mut(&mut |p| {
                    if p.name == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                eval(&m, inputs)
            };
            let numeric = (nudged(eps)? - nudged(-eps)?) / (2.0 * eps);
            let analytic = param_grads.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worse(worst, analytic, numeric);
        }
    }
    Ok(worst)
}
