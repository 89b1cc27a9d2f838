use super::{check_inputs, probabilities};
use crate::{Real, Result};

/// Gradient of the Lovász extension of the Jaccard loss at a sorted
/// foreground indicator (errors sorted in decreasing order).
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<Real> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as Real;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

struct ClassTerm {
    class: usize,
    order: Vec<usize>,
    grad: Vec<Real>,
    loss: Real,
}

fn class_terms(probs: &[Real], num_classes: usize, gt: &[u16]) -> Vec<ClassTerm> {
    let mut terms = Vec::new();
    for class in 0..num_classes {
        if !gt.iter().any(|&l| l as usize == class) {
            continue;
        }
        let fg: Vec<bool> = gt.iter().map(|&l| l as usize == class).collect();
        let err: Vec<Real> = (0..gt.len())
            .map(|v| ((fg[v] as u8 as Real) - probs[v * num_classes + class]).abs())
            .collect();
        let mut order: Vec<usize> = (0..gt.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let fg_sorted: Vec<bool> = order.iter().map(|&v| fg[v]).collect();
        let grad = lovasz_grad(&fg_sorted);
        let loss = order.iter().zip(&grad).map(|(&v, g)| err[v] * g).sum();
        terms.push(ClassTerm {
            class,
            order,
            grad,
            loss,
        });
    }
    terms
}

/// Lovász-softmax loss averaged over the classes present in `gt`.
///
/// Returns 0 when `gt` is empty.
pub fn lovasz_softmax(logits: &[Real], num_classes: usize, gt: &[u16]) -> Result<Real> {
    check_inputs(logits, num_classes, gt)?;
    let probs = probabilities(logits, num_classes);
    let terms = class_terms(&probs, num_classes, gt);
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(terms.iter().map(|t| t.loss).sum::<Real>() / terms.len() as Real)
}

/// Gradient of [`lovasz_softmax`] w.r.t. the logits, with the error sort held
/// fixed.
pub fn lovasz_softmax_backward(
    logits: &[Real],
    num_classes: usize,
    gt: &[u16],
) -> Result<Vec<Real>> {
    check_inputs(logits, num_classes, gt)?;
    let probs = probabilities(logits, num_classes);
    let terms = class_terms(&probs, num_classes, gt);
    let mut dprob = vec![0.0; logits.len()];
    if terms.is_empty() {
        return Ok(dprob);
    }
    let scale = 1.0 / terms.len() as Real;
    for t in &terms {
        for (&v, g) in t.order.iter().zip(&t.grad) {
            let k = v * num_classes + t.class;
            // d|fg − p|/dp is −1 on foreground voxels and +1 elsewhere
            let sign = if gt[v] as usize == t.class { -1.0 } else { 1.0 };
            dprob[k] += scale * g * sign;
        }
    }
    let mut dlogits = vec![0.0; logits.len()];
    for ((p, dp), dl) in probs
        .chunks(num_classes)
        .zip(dprob.chunks(num_classes))
        .zip(dlogits.chunks_mut(num_classes))
    {
        let inner: Real = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for c in 0..num_classes {
            dl[c] = p[c] * (dp[c] - inner);
        }
    }
    Ok(dlogits)
}
