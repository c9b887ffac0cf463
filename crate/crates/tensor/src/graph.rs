//! Tape of recorded operations and their backward rules.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_split, ConvGeom};
use crate::real::Real;
use crate::rng::RngKey;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics of one batch-norm call in batch-statistics mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the value blended into running statistics.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        n: usize,
        k: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddTrailing(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu {
        x: Var,
        dydx: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GradReverse(Var, T),
    WeightedSum {
        xs: Vec<Var>,
        w: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
        inner: usize,
    },
    BceWithLogits {
        z: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Records operations as they execute so gradients can be computed with
/// [`Graph::backward`].
///
/// A graph is built fresh for every forward pass. Values flowing through it
/// are owned copies; parameters enter as named leaves via [`Graph::param`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    backward_done: bool,
    rng_key: RngKey,
    rng_counter: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            rng_key: RngKey::new(seed),
            rng_counter: 0,
        }
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Random stream for the next stochastic op, keyed by (seed, op counter).
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let key = self.rng_key.child(self.rng_counter);
        self.rng_counter += 1;
        key.rng()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named parameter leaf. Gradients of trainable parameters are reported
    /// by [`Graph::param_grads`], summed over every leaf carrying the name.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// required one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, &self.grads[i]) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(
                        name.clone(),
                        Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap(),
                    );
                }
            }
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `op(a) · op(b)` for rank-2 or rank-3 operands; a rank-2 operand is
    /// shared across the batch of a rank-3 one.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let a_batched = sa.len() == 3;
        let b_batched = sb.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if sa[0] != sb[0] => return Err(TensorError::shape("matmul", &sa, &sb)),
            (true, _) => sa[0],
            (false, true) => sb[0],
            (false, false) => 1,
        };
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let asl = if a_batched {
                    &ad[bi * m * k..(bi + 1) * m * k]
                } else {
                    ad
                };
                let bsl = if b_batched {
                    &bd[bi * k * n..(bi + 1) * k * n]
                } else {
                    bd
                };
                kernels::gemm(
                    ta,
                    tb,
                    m,
                    n,
                    k,
                    asl,
                    bsl,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                a_batched,
                b_batched,
                m,
                n,
                k,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        rec: Op<T>,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x` (bias add).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::shape("add_trailing", sx, sy));
        }
        let period = self.value(y).numel();
        let yd = self.value(y).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yd[i % period])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(t, Op::AddTrailing(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = self.value(x);
        let (y, dydx): (Vec<T>, Vec<T>) = xv.data().iter().map(|&v| gelu_both(v, rg)).unzip();
        let t = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        self.push(t, Op::Gelu { x, dydx }, rg)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: T) -> Result<Var> {
        if lambda.is_nan() || lambda < T::zero() {
            return Err(TensorError::invalid(
                "grad_reverse",
                "lambda must be non-negative",
            ));
        }
        let t = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(t, Op::GradReverse(x, lambda), rg))
    }

    /// `Σ_i w[i] · xs[i]` for same-shaped `xs` and a vector `w` of matching length.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Empty { op: "weighted_sum" });
        }
        if self.shape(w) != [xs.len()] {
            return Err(TensorError::shape(
                "weighted_sum",
                self.shape(w),
                &[xs.len()],
            ));
        }
        for &x in &xs[1..] {
            self.same_shape("weighted_sum", xs[0], x)?;
        }
        let wd = self.value(w).data().to_vec();
        let mut out = vec![T::zero(); self.value(xs[0]).numel()];
        for (&x, &wi) in xs.iter().zip(&wd) {
            kernels::axpy(wi, self.value(x).data(), &mut out);
        }
        let t = Tensor::new(self.shape(xs[0]).to_vec(), out)?;
        let rg = self.rg(w) || xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::WeightedSum { xs: xs.to_vec(), w }, rg))
    }

    // ---------------------------------------------------------------- reductions / normalisers

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let out = softmax_fwd(xv.data(), outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Batch normalisation over `[B, C, H, W]` with per-channel affine.
    ///
    /// With `running = Some((mean, var))` the given statistics normalise the
    /// input; otherwise batch statistics are used and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("expected [B, C, H, W], got {shape:?}"),
            ));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let count = b * hw;
        let xd = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(TensorError::shape("batch_norm", &[c], &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch {
                        op: "batch_norm",
                        count,
                    });
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let mu = s / T::lit(count as f64);
                    let mut ss = T::zero();
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / T::lit(count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::lit(count as f64 / (count - 1) as f64))
                    .collect();
                (
                    mean.clone(),
                    var,
                    Some(BatchStats {
                        mean,
                        var_unbiased: unbiased,
                    }),
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = running.is_none();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or(TensorError::Empty { op: "layer_norm" })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or(TensorError::Empty { op: "concat" })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(x).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                lens,
                inner,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- convolution family

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd}"),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(TensorError::shape("conv2d", &sw, self.shape(bv)));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); b * cout * cols];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let mut col = vec![T::zero(); rows * cols];
            for bi in 0..b {
                let img = &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let colref: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    kernels::im2col(img, &geom, &mut col);
                    &col
                };
                let dst = &mut out[bi * cout * cols..(bi + 1) * cout * cols];
                kernels::gemm(false, false, cout, cols, rows, wdata, colref, dst);
                if let Some(bv) = bias {
                    for (co, &bb) in self.value(bv).data().iter().enumerate() {
                        dst[co * cols..(co + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v += bb);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            Tensor::new(vec![b, cout, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch: b,
                cout,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(TensorError::invalid(
                "max_pool2",
                format!("expected [B, C, even H, even W], got {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut argmax = vec![0u32; planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = xd[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Bilinear 2× upsampling with half-pixel centres.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid(
                "upsample2x",
                format!("expected [B, C, H, W], got {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let ty = kernels::bilinear_taps(ho, h);
        let tx = kernels::bilinear_taps(wo, w);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (fy1, fy0) = (T::lit(fy), T::lit(1.0 - fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fx1, fx0) = (T::lit(fx), T::lit(1.0 - fx));
                    out[(p * ho + oy) * wo + ox] = fy0
                        * (fx0 * src[y0 * w + x0] + fx1 * src[y0 * w + x1])
                        + fy1 * (fx0 * src[y1 * w + x0] + fx1 * src[y1 * w + x1]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::Upsample2x { x },
            rg,
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean softmax cross-entropy with class axis 1 of `logits: [B, C, ...]`
    /// and one integer target per `(b, ...)` position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("expected [B, C, ...], got {shape:?}"),
            ));
        }
        let (outer, classes, inner) = axis_split(&shape, 1);
        if targets.len() != outer * inner {
            return Err(TensorError::shape(
                "cross_entropy",
                &shape,
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target class {bad} >= {classes}"),
            ));
        }
        let xv = self.value(logits);
        if !xv.is_finite() {
            return Err(TensorError::NonFinite {
                op: "cross_entropy",
            });
        }
        let probs = softmax_fwd(xv.data(), outer, classes, inner);
        let mut total = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                let p = probs[(o * classes + t) * inner + i];
                total -= p.max(T::min_positive_value()).ln();
            }
        }
        let loss = total / T::lit((outer * inner) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes,
                inner,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on raw logits.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[T]) -> Result<Var> {
        let zv = self.value(z);
        if zv.numel() != labels.len() || labels.is_empty() {
            return Err(TensorError::shape(
                "bce_with_logits",
                zv.shape(),
                &[labels.len()],
            ));
        }
        if !zv.is_finite() {
            return Err(TensorError::NonFinite {
                op: "bce_with_logits",
            });
        }
        let total: T = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                z,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Records are visited once, in
    /// strict reverse order; only nodes that require gradients are touched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
            for (v, dv) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(dv) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                a_batched,
                b_batched,
                m,
                n,
                k,
            } => {
                let (ad, bd) = (val(a), val(b));
                if self.rg(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = if b_batched {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        } else {
                            bd
                        };
                        let dst = if a_batched {
                            &mut da[bi * m * k..(bi + 1) * m * k]
                        } else {
                            &mut da[..]
                        };
                        if ta {
                            // a stored k×m: da = op(b) · gᵀ
                            kernels::gemm(tb, true, k, m, n, bs, gs, dst);
                        } else {
                            kernels::gemm(false, !tb, m, k, n, gs, bs, dst);
                        }
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = if a_batched {
                            &ad[bi * m * k..(bi + 1) * m * k]
                        } else {
                            ad
                        };
                        let dst = if b_batched {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        if tb {
                            // b stored n×k: db = gᵀ · op(a)
                            kernels::gemm(true, ta, n, k, m, gs, as_, dst);
                        } else {
                            kernels::gemm(!ta, false, k, n, m, as_, gs, dst);
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                out.push((a, g.iter().zip(bd).map(|(&gi, &bi)| gi * bi).collect()));
                out.push((b, g.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect()));
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (val(a), val(b));
                out.push((a, g.iter().zip(bd).map(|(&gi, &bi)| gi / bi).collect()));
                out.push((
                    b,
                    g.iter()
                        .zip(ad)
                        .zip(bd)
                        .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                        .collect(),
                ));
            }
            &Op::AddTrailing(x, y) => {
                out.push((x, g.to_vec()));
                if self.rg(y) {
                    let period = val(y).len();
                    let mut dy = vec![T::zero(); period];
                    for chunk in g.chunks(period) {
                        for (d, &v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    out.push((y, dy));
                }
            }
            &Op::Scale(x, s) => out.push((x, g.iter().map(|&v| v * s).collect())),
            &Op::AddScalar(x) => out.push((x, g.to_vec())),
            &Op::Relu(x) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            )),
            Op::Gelu { x, dydx } => {
                out.push((*x, g.iter().zip(dydx).map(|(&gi, &d)| gi * d).collect()))
            }
            &Op::GradReverse(x, lambda) => {
                out.push((x, g.iter().map(|&v| -(v * lambda)).collect()))
            }
            Op::WeightedSum { xs, w } => {
                let wd = val(*w);
                for (i, &x) in xs.iter().enumerate() {
                    if self.rg(x) {
                        out.push((x, g.iter().map(|&v| v * wd[i]).collect()));
                    }
                }
                if self.rg(*w) {
                    out.push((*w, xs.iter().map(|&x| kernels::dot(g, val(x))).collect()));
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let s: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (g[at(l)] - s);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::SumAll(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        dx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((x, dx));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((*x, permute_data(g, node.value.shape(), &inverse)));
            }
            Op::Concat {
                xs,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&x, &l) in xs.iter().zip(lens) {
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + l * inner]);
                        }
                        out.push((x, dx));
                    }
                    offset += l;
                }
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                cout,
            } => {
                let (xd, wdata) = (val(x), val(w));
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.cin * geom.h * geom.w;
                let need_x = self.rg(x);
                let need_w = self.rg(w);
                let mut dx = if need_x {
                    vec![T::zero(); xd.len()]
                } else {
                    Vec::new()
                };
                let mut dw = if need_w {
                    vec![T::zero(); wdata.len()]
                } else {
                    Vec::new()
                };
                let mut col = vec![T::zero(); rows * cols];
                let mut dcol = vec![T::zero(); rows * cols];
                for bi in 0..batch {
                    let gs = &g[bi * cout * cols..(bi + 1) * cout * cols];
                    if need_w {
                        let xi = &xd[bi * img..(bi + 1) * img];
                        let colref: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            kernels::im2col(xi, &geom, &mut col);
                            &col
                        };
                        kernels::gemm(false, true, cout, rows, cols, gs, colref, &mut dw);
                    }
                    if need_x {
                        let dst = &mut dx[bi * img..(bi + 1) * img];
                        if geom.is_pointwise() {
                            kernels::gemm(true, false, rows, cols, cout, wdata, gs, dst);
                        } else {
                            dcol.iter_mut().for_each(|v| *v = T::zero());
                            kernels::gemm(true, false, rows, cols, cout, wdata, gs, &mut dcol);
                            kernels::col2im(&dcol, &geom, dst);
                        }
                    }
                }
                if need_x {
                    out.push((x, dx));
                }
                if need_w {
                    out.push((w, dw));
                }
                if let Some(bv) = bias.filter(|&bv| self.rg(bv)) {
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..batch {
                        for (co, d) in db.iter_mut().enumerate() {
                            let s = (bi * cout + co) * cols;
                            *d += g[s..s + cols].iter().copied().sum::<T>();
                        }
                    }
                    out.push((bv, db));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src as usize] += gi;
                }
                out.push((*x, dx));
            }
            &Op::Upsample2x { x } => {
                let s = self.nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let ty = kernels::bilinear_taps(ho, h);
                let tx = kernels::bilinear_taps(wo, w);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let (fy1, fy0) = (T::lit(fy), T::lit(1.0 - fy));
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let (fx1, fx0) = (T::lit(fx), T::lit(1.0 - fx));
                            let gv = g[(p * ho + oy) * wo + ox];
                            dst[y0 * w + x0] += fy0 * fx0 * gv;
                            dst[y0 * w + x1] += fy0 * fx1 * gv;
                            dst[y1 * w + x0] += fy1 * fx0 * gv;
                            dst[y1 * w + x1] += fy1 * fx1 * gv;
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gd = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::lit((b * hw) as f64);
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        for bi in 0..b {
                            let base = (bi * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gd = val(*gamma);
                let d = gd.len();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                let dn = T::lit(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gd[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        dx[r * d + j] = is * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
                inner,
            } => {
                let count = T::lit(targets.len() as f64);
                let scale = g[0] / count;
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (pos, &t) in targets.iter().enumerate() {
                    let (o, i) = (pos / inner, pos % inner);
                    dx[(o * classes + t) * inner + i] -= scale;
                }
                out.push((*logits, dx));
            }
            Op::BceWithLogits { z, labels } => {
                let scale = g[0] / T::lit(labels.len() as f64);
                let dz = val(*z)
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                out.push((*z, dz));
            }
        }
        out
    }
}

fn softmax_fwd<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mx = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
            // The denominator is accumulated in f64 so long rows still sum
            // to one within a few ulps in f32.
            let mut s = 0.0f64;
            for l in 0..len {
                let e = (x[at(l)] - mx).exp();
                out[at(l)] = e;
                s += e.as_f64();
            }
            for l in 0..len {
                out[at(l)] = T::lit(out[at(l)].as_f64() / s);
            }
        }
    }
    out
}

fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Value and, when `with_grad`, derivative of the tanh-approximated GELU.
#[inline]
fn gelu_both<T: Real>(x: T, with_grad: bool) -> (T, T) {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let y = T::lit(0.5) * x * (T::one() + t);
    if !with_grad {
        return (y, T::zero());
    }
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    (
        y,
        T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner,
    )
}
