//! Differentiable discrete sampling.

use crate::autodiff::{Result, Scalar, Tape, Tensor, Var};
use crate::rng::Stream;

/// Standard Gumbel draws, `g = -ln(-ln u)` with `u` clamped away from the
/// endpoints so both logs stay finite.
pub fn gumbel_noise<T: Scalar>(rng: &mut Stream, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let u = rng.uniform().clamp(1e-10, 1.0 - 1e-10);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// Soft relaxed one-hot sample over the last axis of `logits`:
/// `softmax((logits + g) / tau)`.
///
/// Unnormalized logits and log-probabilities give identical distributions
/// because the softmax is shift invariant, so callers holding class
/// probabilities should pass their logs.
pub fn gumbel_softmax<T: Scalar>(
    t: &Tape<T>,
    logits: Var,
    tau: f64,
    rng: &mut Stream,
) -> Result<Var> {
    let shape = t.value(logits).shape().to_vec();
    let n: usize = shape.iter().product();
    let g = t.constant(Tensor::from_vec(shape.clone(), gumbel_noise(rng, n)));
    let shifted = t.add(logits, g)?;
    let scaled = t.scale(shifted, T::from_f64(1.0 / tau));
    t.softmax(scaled, shape.len() - 1)
}

/// Index of a hard categorical draw via the Gumbel-max trick. Used where a
/// discrete token is needed and no gradient should flow.
pub fn gumbel_argmax(log_probs: &[f64], rng: &mut Stream) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, lp) in log_probs.iter().enumerate() {
        let u = rng.uniform().clamp(1e-10, 1.0 - 1e-10);
        let v = lp - (-u.ln()).ln();
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Shannon entropy of a probability vector, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x: &f64| -x * x.ln()).sum()
}
