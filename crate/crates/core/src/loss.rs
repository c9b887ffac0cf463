//! Segmentation losses.

use polyformer_tensor::{Graph, Real, Tensor, TensorError, Var};

use crate::error::Result;

/// Additive smoothing in the soft dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_targets(op: &'static str, shape: &[usize], targets: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(
            TensorError::invalid(op, format!("expected [B, C, H, W], got {shape:?}")).into(),
        );
    }
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if targets.len() != b * hw {
        return Err(TensorError::shape(op, shape, &[targets.len()]).into());
    }
    if c < 2 {
        return Err(TensorError::invalid(op, "need at least two classes").into());
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::invalid(
            op,
            format!("target class {t} out of range for {c} classes"),
        )
        .into());
    }
    Ok(())
}

/// One minus the soft dice of each foreground class (classes `1..C`),
/// averaged over classes and images:
///
/// `1 − (2·Σ p·y + s) / (Σ p + Σ y + s)` per image and class.
///
/// `probs` is `[B, C, H, W]`; `targets` holds `B·H·W` class indices.
pub fn dice_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &[usize],
    smooth: f64,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    check_targets("dice_loss", &shape, targets)?;
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut onehot = vec![T::zero(); b * c * hw];
    let mut ysum = vec![T::zero(); b * c];
    for bi in 0..b {
        for i in 0..hw {
            let cls = targets[bi * hw + i];
            onehot[(bi * c + cls) * hw + i] = T::one();
            ysum[bi * c + cls] += T::one();
        }
    }
    let y = g.constant(Tensor::new([b, c, hw], onehot)?);
    let p = g.reshape(probs, &[b, c, hw])?;
    let py = g.mul(p, y)?;
    let inter = g.sum_axis(py, 2)?;
    let psum = g.sum_axis(p, 2)?;
    let s = T::lit(smooth);
    let num = g.scale(inter, T::lit(2.0));
    let num = g.add_scalar(num, s);
    let ysum = g.constant(Tensor::new([b, c], ysum)?);
    let den = g.add(psum, ysum)?;
    let den = g.add_scalar(den, s);
    let dice = g.div(num, den)?;
    let fg = Tensor::from_fn([b, c], |i| if i % c == 0 { T::zero() } else { T::one() });
    let fg = g.constant(fg);
    let kept = g.mul(dice, fg)?;
    let total = g.sum_all(kept);
    let mean = g.scale(total, T::lit(-1.0 / (b * (c - 1)) as f64));
    Ok(g.add_scalar(mean, T::one()))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// `0.5·CE + 0.5·dice` on raw logits `[B, C, H, W]`.
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
) -> Result<LossParts> {
    let shape = g.shape(logits).to_vec();
    check_targets("composite_loss", &shape, targets)?;
    let ce = g.cross_entropy(logits, targets)?;
    let probs = g.softmax(logits, 1)?;
    let dice = dice_loss(g, probs, targets, DICE_SMOOTH)?;
    let a = g.scale(ce, T::lit(0.5));
    let b = g.scale(dice, T::lit(0.5));
    let total = g.add(a, b)?;
    Ok(LossParts { total, ce, dice })
}
