//! Softmax and class-weighted cross-entropy.

use super::tensor::Batch;
use super::{cst, Real};

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax`, computed without forming the probabilities.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Loss `-w[label] * log softmax(logits)[label]` and its gradient with
/// respect to the logits, `w[label] * (softmax - onehot)`.
pub fn weighted_cross_entropy<T: Real>(logits: &[T], label: usize, weights: &[T]) -> (T, Vec<T>) {
    let w = weights[label];
    let loss = -w * log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    grad.iter_mut().for_each(|g| *g *= w);
    (loss, grad)
}

/// Mean weighted cross-entropy over a batch of logit rows, with the
/// gradient of that mean.
pub fn weighted_cross_entropy_batch<T: Real>(logits: &Batch<T>, labels: &[usize], weights: &[T]) -> (T, Batch<T>) {
    let classes = logits.chan;
    let inv = cst::<T>(1.0 / logits.batch as f64);
    let mut total = T::zero();
    let mut grad = logits.same_layout();
    for (b, &label) in labels.iter().enumerate() {
        let (loss, g) = weighted_cross_entropy(logits.row(b), label, weights);
        total += loss;
        for (o, v) in grad.data[b * classes..(b + 1) * classes].iter_mut().zip(g) {
            *o = v * inv;
        }
    }
    (total * inv, grad)
}
