use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Layout, Tensor4};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Tensor4<T>)> {
    let (n, classes) = (logits.n(), logits.c() * logits.h() * logits.w());
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grad = Tensor4::zeros(n, classes, 1, 1, Layout::Nchw);
    let mut total = 0.0f64;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!("label {label} outside {classes} classes")));
        }
        let row = logits.item(i);
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label].to_f64_lossy();
        for (j, (g, e)) in grad.item_mut(i).iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            let target = if j == label { 1.0 } else { 0.0 };
            *g = T::from_f64_lossy((p - target) * inv_n);
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per item.
pub fn predictions<T: Real>(logits: &Tensor4<T>) -> Vec<usize> {
    (0..logits.n())
        .map(|i| {
            let row = logits.item(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
