//! AdamW with decoupled weight decay on weight matrices only.

use std::collections::BTreeMap;

use polyformer_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step count and first/second moments per parameter name.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Starts a new step; call once before [`apply`](Self::apply)ing it to
    /// one or more modules.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates every trainable parameter of `module` that has an entry in
    /// `grads`. Parameters without a gradient are left alone.
    pub fn apply(
        &mut self,
        module: &mut dyn Module<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Lifecycle("AdamW::apply before begin_step".into()));
        }
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let lr = T::lit(c.lr);
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let mut err = None;
        module.visit_mut(&mut |p| {
            if !p.trainable || err.is_some() {
                return;
            }
            let Some(grad) = grads.get(&p.name) else {
                return;
            };
            if grad.shape() != p.value.shape() {
                err = Some(Error::StateMismatch(format!(
                    "gradient shape for {}",
                    p.name
                )));
                return;
            }
            let n = grad.numel();
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let decays = p.decays() && c.weight_decay != 0.0;
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad.data()[i];
                if decays {
                    *w *= decay;
                }
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Moments as named tensors `adam.m.<name>` and `adam.v.<name>`.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (name, vals) in map {
                let t = Tensor::new([vals.len()], vals.clone()).expect("flat moment");
                out.push((format!("{prefix}{name}"), t));
            }
        }
        out
    }

    /// Restores from [`state`](Self::state) output. Entries without the
    /// `adam.` prefix are ignored.
    pub fn load_state(&mut self, t: u64, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for (name, value) in entries {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.insert(rest.to_owned(), value.data().to_vec());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.insert(rest.to_owned(), value.data().to_vec());
            }
        }
        if m.keys().ne(v.keys()) {
            return Err(Error::StateMismatch(
                "optimizer first and second moments cover different parameters".into(),
            ));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
