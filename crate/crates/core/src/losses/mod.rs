//! Training objective and evaluation metrics.
//!
//! Predictions are flat `N×|C|` logit buffers (the layout of
//! [`VoxelGrid::logits`](crate::scene::VoxelGrid)) paired with `N` labels.

mod lovasz;
mod metrics;

pub use lovasz::{lovasz_grad, lovasz_softmax, lovasz_softmax_backward};
pub use metrics::{eval_classes, iou_per_class, miou, ClassIou, MetricReport};

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Weights of the cross-entropy and Lovász terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: Real,
    pub lovasz: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            lovasz: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(ce: Real, lovasz: Real) -> Result<Self> {
        let w = Self { ce, lovasz };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: Real| v.is_finite() && v >= 0.0;
        if !ok(self.ce) || !ok(self.lovasz) || (self.ce == 0.0 && self.lovasz == 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite, nonnegative and not both zero, got ce={} lovasz={}",
                self.ce, self.lovasz
            )));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub ce: Real,
    pub lovasz: Real,
    pub total: Real,
}

pub(crate) fn check_inputs(logits: &[Real], num_classes: usize, gt: &[u16]) -> Result<()> {
    if num_classes == 0 || logits.len() != gt.len() * num_classes {
        return Err(Error::shape(format!(
            "{} logits do not match {} labels × {num_classes} classes",
            logits.len(),
            gt.len()
        )));
    }
    if let Some(&l) = gt.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "label {l} >= {num_classes} classes"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction logits".into()));
    }
    Ok(())
}

/// Row-wise softmax of a flat `N×C` buffer.
pub(crate) fn probabilities(logits: &[Real], num_classes: usize) -> Vec<Real> {
    let mut p = logits.to_vec();
    for row in p.chunks_mut(num_classes) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

fn log_softmax_at(row: &[Real], k: usize) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
    row[k] - lse
}

fn check_class_weights(w: Option<&[Real]>, num_classes: usize) -> Result<()> {
    if let Some(w) = w {
        if w.len() != num_classes || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "class weights must be |C| finite nonnegative values",
            ));
        }
    }
    Ok(())
}

/// Mean over voxels of `−log softmax(logits)[gt]`.
///
/// With class weights the mean is weighted by the weight of each voxel's
/// ground-truth class.
pub fn ce_loss(
    logits: &[Real],
    num_classes: usize,
    gt: &[u16],
    class_weights: Option<&[Real]>,
) -> Result<Real> {
    check_inputs(logits, num_classes, gt)?;
    check_class_weights(class_weights, num_classes)?;
    let (mut sum, mut norm) = (0.0, 0.0);
    for (row, &l) in logits.chunks(num_classes).zip(gt) {
        let w = class_weights.map_or(1.0, |w| w[l as usize]);
        sum -= w * log_softmax_at(row, l as usize);
        norm += w;
    }
    Ok(if norm > 0.0 { sum / norm } else { 0.0 })
}

/// Gradient of [`ce_loss`] w.r.t. the logits.
pub fn ce_loss_backward(
    logits: &[Real],
    num_classes: usize,
    gt: &[u16],
    class_weights: Option<&[Real]>,
) -> Result<Vec<Real>> {
    check_inputs(logits, num_classes, gt)?;
    check_class_weights(class_weights, num_classes)?;
    let mut grad = probabilities(logits, num_classes);
    let weight = |l: u16| class_weights.map_or(1.0, |w| w[l as usize]);
    let norm: Real = gt.iter().map(|&l| weight(l)).sum();
    if norm == 0.0 {
        return Ok(vec![0.0; logits.len()]);
    }
    for (row, &l) in grad.chunks_mut(num_classes).zip(gt) {
        row[l as usize] -= 1.0;
        let w = weight(l) / norm;
        row.iter_mut().for_each(|v| *v *= w);
    }
    Ok(grad)
}

/// `λ_ce·CE + λ_lov·Lovász`.
pub fn total_loss(
    logits: &[Real],
    num_classes: usize,
    gt: &[u16],
    w: LossWeights,
) -> Result<LossValue> {
    w.validate()?;
    let ce = ce_loss(logits, num_classes, gt, None)?;
    let lovasz = lovasz_softmax(logits, num_classes, gt)?;
    Ok(LossValue {
        ce,
        lovasz,
        total: w.ce * ce + w.lovasz * lovasz,
    })
}

/// [`total_loss`] together with its gradient w.r.t. the logits.
pub fn total_loss_with_grad(
    logits: &[Real],
    num_classes: usize,
    gt: &[u16],
    w: LossWeights,
) -> Result<(LossValue, Vec<Real>)> {
    let value = total_loss(logits, num_classes, gt, w)?;
    let mut grad = ce_loss_backward(logits, num_classes, gt, None)?;
    grad.iter_mut().for_each(|g| *g *= w.ce);
    let lov = lovasz_softmax_backward(logits, num_classes, gt)?;
    for (g, l) in grad.iter_mut().zip(lov) {
        *g += w.lovasz * l;
    }
    Ok((value, grad))
}
