//! Objectives: adversarial terms, the KL regularizer, and the pieces the
//! cycle losses are assembled from. Every function returns a scalar var.

use crate::autodiff::{Result, Scalar, Tape, Tensor, Var};

/// Discriminator scores are clamped into `[1e-7, 1 - 1e-7]` before any log
/// so a saturated sigmoid cannot produce infinities.
pub fn clamp_score<T: Scalar>(t: &Tape<T>, s: Var) -> Var {
    t.clamp(s, T::from_f64(1e-7), T::from_f64(1.0 - 1e-7))
}

fn mean_log<T: Scalar>(t: &Tape<T>, s: Var) -> Var {
    t.mean(t.log(s))
}

fn mean_log1m<T: Scalar>(t: &Tape<T>, s: Var) -> Var {
    let one_minus = t.add_scalar(t.neg(s), T::one());
    t.mean(t.log(one_minus))
}

/// `-E[log s_real] - E[log(1 - s_fake)]`.
pub fn gan_d_loss<T: Scalar>(t: &Tape<T>, s_real: Var, s_fake: Var) -> Result<Var> {
    let sr = clamp_score(t, s_real);
    let sf = clamp_score(t, s_fake);
    let sum = t.add(mean_log(t, sr), mean_log1m(t, sf))?;
    Ok(t.neg(sum))
}

/// Non-saturating generator term `-E[log(s / (1 - s))]`.
pub fn gan_g_nonsat<T: Scalar>(t: &Tape<T>, s_fake: Var) -> Result<Var> {
    let sf = clamp_score(t, s_fake);
    let diff = t.sub(mean_log(t, sf), mean_log1m(t, sf))?;
    Ok(t.neg(diff))
}

/// Saturating generator term `E[log(1 - s)]`.
pub fn gan_g_sat<T: Scalar>(t: &Tape<T>, s_fake: Var) -> Var {
    let sf = clamp_score(t, s_fake);
    mean_log1m(t, sf)
}

/// KL between `N(mu, diag(exp(log_var)))` and the standard normal, summed
/// over dimensions and averaged over the batch:
/// `0.5 * mean_b sum_d (mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_standard_normal<T: Scalar>(t: &Tape<T>, mu: Var, log_var: Var) -> Result<Var> {
    let batch = t.value(mu).shape()[0];
    let mu2 = t.mul(mu, mu)?;
    let sigma2 = t.exp(log_var);
    let inner = t.sub(t.add(mu2, sigma2)?, log_var)?;
    let inner = t.add_scalar(inner, -T::one());
    let total = t.sum(inner);
    Ok(t.scale(total, T::from_f64(0.5 / batch as f64)))
}

/// Mean absolute difference over all elements.
pub fn l1_mean<T: Scalar>(t: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    Ok(t.mean(t.abs(t.sub(a, b)?)))
}

/// Weighted sum over the batch of `-log softmax(logits)[b, target_b]`.
///
/// No normalization is applied; callers divide by whichever count defines
/// their mean (batch size, token count, ...).
pub fn ce_sum<T: Scalar>(
    t: &Tape<T>,
    logits: Var,
    targets: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let shape = t.value(logits).shape().to_vec();
    assert_eq!(shape.len(), 2, "ce_sum expects [batch, classes]");
    assert_eq!(targets.len(), shape[0]);
    assert_eq!(weights.len(), shape[0]);
    let mut onehot = vec![T::zero(); shape[0] * shape[1]];
    for (b, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
        assert!(tgt < shape[1], "target {tgt} out of range {}", shape[1]);
        onehot[b * shape[1] + tgt] = T::from_f64(w);
    }
    let ls = t.log_softmax(logits, 1)?;
    let picked = t.mul(ls, t.constant(Tensor::from_vec(shape, onehot)))?;
    Ok(t.neg(t.sum(picked)))
}
