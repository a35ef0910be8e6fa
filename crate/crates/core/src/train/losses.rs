//! Segmentation and multi-label losses, in minimization sign convention.

use crate::data::{LabelVector, Mask, ScoreMap, ScoreSpace, IGNORE};
use crate::error::{Result, WssError};
use crate::model::MultiLabelScores;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub seg_loss: f64,
    pub multilabel_loss: f64,
    pub combined: f64,
    pub valid_pixel_count: usize,
}

/// Mean negative log-softmax of the labelled class over non-IGNORE pixels.
/// The mask must already be at logit resolution. Returns the loss and d(loss)/d(logits).
pub fn softmax_nll_loss(logits: &ScoreMap, mask: &Mask) -> Result<(f64, ScoreMap)> {
    if logits.space != ScoreSpace::Logits {
        return Err(WssError::invalid("softmax loss expects logits"));
    }
    mask.check_shape(logits.height, logits.width)?;
    let c = logits.classes;
    let valid = mask.labels.iter().filter(|&&m| m != IGNORE).count();
    if valid == 0 {
        return Err(WssError::invalid("every pixel is IGNORE"));
    }
    let inv = 1.0 / valid as f64;
    let mut grad = ScoreMap::zeros(logits.height, logits.width, c, ScoreSpace::Logits);
    let mut loss = 0.0;
    for (i, &m) in mask.labels.iter().enumerate() {
        if m == IGNORE {
            continue;
        }
        let m = m as usize;
        if m >= c {
            return Err(WssError::invalid(format!("mask label {m} out of range for {c} classes")));
        }
        let f = logits.pixel(i);
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = f.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - f[m];
        let g = &mut grad.data[i * c..(i + 1) * c];
        for j in 0..c {
            g[j] = (f[j] - log_z).exp() * inv;
        }
        g[m] -= inv;
    }
    Ok((loss * inv, grad))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic loss averaged over all C entries, with real-valued targets in [0, 1].
pub fn multilabel_bce_soft(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() || p.is_empty() {
        return Err(WssError::shape(format!(
            "{} predictions vs {} targets",
            p.len(),
            y.len()
        )));
    }
    let c = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pj, &yj) in p.iter().zip(y) {
        // -log sigma(p) = softplus(-p); -log(1 - sigma(p)) = softplus(p)
        loss += yj * softplus(-pj) + (1.0 - yj) * softplus(pj);
        grad.push((sigmoid(pj) - yj) / c);
    }
    Ok((loss / c, grad))
}

pub fn multilabel_bce_loss(p: &MultiLabelScores, y: &LabelVector) -> Result<(f64, Vec<f64>)> {
    multilabel_bce_soft(&p.p, &y.targets())
}

/// Per-image combined loss `L1 + lambda * L2`.
pub fn combined_loss(logits: &ScoreMap, mask: &Mask, p: &MultiLabelScores, y: &LabelVector, lambda: f64) -> Result<LossReport> {
    let (seg, _) = softmax_nll_loss(logits, mask)?;
    let (ml, _) = multilabel_bce_loss(p, y)?;
    Ok(LossReport {
        seg_loss: seg,
        multilabel_loss: ml,
        combined: seg + lambda * ml,
        valid_pixel_count: mask.labels.iter().filter(|&&m| m != IGNORE).count(),
    })
}
