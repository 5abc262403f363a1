//! Log-domain scalar helpers shared by the losses and searches.
//!
//! All routines use the max-shift form so that inputs down to
//! `f64::NEG_INFINITY` are handled exactly (an all-`-inf` reduction yields
//! `-inf`, never NaN).

use ndarray::{Array1, ArrayView1};

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log sum exp` over a slice; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - hi).exp()).sum();
    hi + sum.ln()
}

/// Log-softmax of a logit vector.
///
/// Errors on non-finite input: the scorer feeds this raw affine outputs, so
/// anything non-finite upstream is a numeric bug worth surfacing.
pub fn log_softmax(logits: ArrayView1<f64>) -> crate::Result<Array1<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::Numeric(
            "log_softmax input contains a non-finite value".into(),
        ));
    }
    let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = hi
        + logits
            .iter()
            .map(|&x| (x - hi).exp())
            .sum::<f64>()
            .ln();
    Ok(logits.mapv(|x| x - lse))
}

/// Backward of [`log_softmax`]: given `g = dL/d log_softmax(logits)`,
/// returns `dL/d logits = g - softmax * sum(g)`.
pub fn log_softmax_backward(log_probs: ArrayView1<f64>, grad: ArrayView1<f64>) -> Array1<f64> {
    let gsum: f64 = grad.sum();
    Array1::from_iter(
        log_probs
            .iter()
            .zip(grad.iter())
            .map(|(&lp, &g)| g - lp.exp() * gsum),
    )
}
