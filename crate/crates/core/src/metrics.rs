//! Dice evaluation.

use polyformer_tensor::{Real, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::layer::Domain;
use crate::model::SegModel;

const EVAL_BATCH: usize = 8;

/// `2|A∩B| / (|A| + |B|)` over pixels labelled `class` in each mask.
/// Both empty counts as 1, exactly one empty as 0.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(TensorError::shape("dice_score", &[pred.len()], &[gt.len()]).into());
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(gt) {
        let (p, t) = (p == class, t == class);
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-image class maps from logits `[B, C, H, W]`; ties go to the lowest
/// class index.
pub fn argmax_masks<T: Real>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(bi * c + k) * hw + i] > d[(bi * c + best) * hw + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean dice of each foreground class (1 = disc, 2 = cup).
    pub per_class: Vec<f64>,
    /// Arithmetic mean of `per_class`.
    pub mean: f64,
    pub count: usize,
    pub domain: Domain,
    pub config_digest: String,
}

/// Evaluates hard predictions from `model` in eval mode.
pub fn evaluate(
    model: &SegModel<f32>,
    samples: &[Sample],
    domain: Domain,
    config_digest: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = data::batch::<f32>(&refs)?;
        preds.extend(argmax_masks(&model.predict_logits(&x, domain)?));
    }
    report(
        &preds,
        samples,
        model.config().num_classes,
        domain,
        config_digest,
    )
}

/// Scores one predicted mask per sample. Dice is computed per image and
/// foreground class, then averaged over images.
pub fn report(
    preds: &[Vec<u8>],
    samples: &[Sample],
    num_classes: usize,
    domain: Domain,
    config_digest: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if preds.len() != samples.len() || num_classes < 2 {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples with {num_classes} classes",
            preds.len(),
            samples.len()
        )));
    }
    let mut sums = vec![0.0; num_classes - 1];
    for (pred, s) in preds.iter().zip(samples) {
        for (k, sum) in sums.iter_mut().enumerate() {
            *sum += dice_score(pred, &s.mask, k as u8 + 1)?;
        }
    }
    let per_class: Vec<f64> = sums.iter().map(|s| s / samples.len() as f64).collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        per_class,
        mean,
        count: samples.len(),
        domain,
        config_digest: config_digest.to_owned(),
    })
}
