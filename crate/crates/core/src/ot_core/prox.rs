//! KL proximal operators of the marginal terms.
//!
//! `prox(z) = argmin_x F(x, target) + eps * KL(x, z)` for the supported `F`.

use super::{EntryRule, KlWeight};
use crate::error::{arg_err, dim_err, Result};

fn check(z: &[f64], target: &[f64]) -> Result<()> {
    if z.len() != target.len() {
        return Err(dim_err(format!("z has {} entries, target {}", z.len(), target.len())));
    }
    if let Some(i) = z.iter().position(|v| !(*v > 0.0)) {
        return Err(arg_err(format!("z[{i}] = {} is not strictly positive", z[i])));
    }
    Ok(())
}

/// Prox of the indicator of `{x = target}`: the target itself.
pub fn prox_equality(z: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check(z, target)?;
    Ok(target.to_vec())
}

/// Prox of the indicator of `{x <= target}`: `min(z, target)`.
pub fn prox_upper(z: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check(z, target)?;
    Ok(z.iter().zip(target).map(|(z, t)| z.min(*t)).collect())
}

/// Prox of `lambda * KL(x, target)`.
pub fn prox_kl(z: &[f64], target: &[f64], lambda: f64, epsilon: f64) -> Result<Vec<f64>> {
    prox_weighted_kl(z, target, &vec![KlWeight::Finite(lambda); z.len()], epsilon)
}

/// Prox of `sum_i lambda_i * KL(x_i, target_i)`:
/// `x = target^f * z^(1 - f)` with `f = lambda / (lambda + eps)`.
/// Infinite weights give `f = 1`, i.e. exactly the target.
pub fn prox_weighted_kl(
    z: &[f64],
    target: &[f64],
    weights: &[KlWeight],
    epsilon: f64,
) -> Result<Vec<f64>> {
    check(z, target)?;
    if weights.len() != z.len() {
        return Err(dim_err(format!("{} weights for {} entries", weights.len(), z.len())));
    }
    Ok(z.iter()
        .zip(target)
        .zip(weights)
        .map(|((&z, &t), w)| {
            let f = w.exponent(epsilon);
            if f == 1.0 {
                t
            } else if f == 0.0 {
                z
            } else {
                t.powf(f) * z.powf(1.0 - f)
            }
        })
        .collect())
}

/// One scaling-vector coordinate `prox(z)/z` in the gauge of a log-potential.
///
/// `kv` is the product of the gauge kernel with the opposite scaling vector,
/// and `potential` the absorbed log-potential of this coordinate. With
/// `potential = 0` this is exactly `prox(kv)_i / kv`.
#[inline]
pub(crate) fn scaling_factor(rule: EntryRule, kv: f64, target: f64, potential: f64, eps: f64) -> f64 {
    match rule {
        EntryRule::Equality | EntryRule::Kl(KlWeight::Infinite) => target / kv,
        EntryRule::Upper => (target / kv).min((-potential / eps).exp()),
        EntryRule::Kl(w) => {
            let f = w.exponent(eps);
            if f == 0.0 {
                (-potential / eps).exp()
            } else if target == 0.0 {
                0.0
            } else {
                (f * (target.ln() - kv.ln()) + (f - 1.0) * potential / eps).exp()
            }
        }
    }
}
