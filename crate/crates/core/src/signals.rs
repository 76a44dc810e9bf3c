//! Token-level signals: reverse-KL log-ratios, per-trajectory min-max normalization,
//! softmax entropy and trailing-window entropy averages.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    RawRkl,
    NormRkl,
    Entropy,
    WindowedEntropy,
}

/// Values aligned to the policy-token subsequence of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVector {
    pub values: Vec<f64>,
    pub kind: SignalKind,
}

impl SignalVector {
    pub fn new(values: Vec<f64>, kind: SignalKind) -> Self {
        Self { values, kind }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `student_logp - teacher_logp`, element-wise. Can be negative.
pub fn reverse_kl_sequence(student_logp: &[f64], teacher_logp: &[f64]) -> Result<SignalVector> {
    if student_logp.len() != teacher_logp.len() {
        return Err(Error::LengthMismatch {
            context: "reverse_kl_sequence",
            expected: student_logp.len(),
            found: teacher_logp.len(),
        });
    }
    let values = student_logp
        .iter()
        .zip(teacher_logp)
        .map(|(s, t)| s - t)
        .collect();
    Ok(SignalVector::new(values, SignalKind::RawRkl))
}

/// Min-max scaling to `[0, 1]`. A constant input maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Result<SignalVector> {
    if values.is_empty() {
        return Err(Error::EmptyInput("minmax_normalize"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: format!("minmax_normalize input ({bad})"),
        });
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let out = if range > 0.0 {
        // clamp guards the last ulp; endpoints map to exactly 0 and 1 already
        values
            .iter()
            .map(|v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; values.len()]
    };
    Ok(SignalVector::new(out, SignalKind::NormRkl))
}

/// Softmax of `logits`, shifted by the max logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Log-softmax of `logits`, shifted by the max logit.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// Entropy in nats of `softmax(logits)`.
pub fn policy_entropy(logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    let h: f64 = logp
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|lp| -lp.exp() * lp)
        .sum();
    h.max(0.0)
}

/// Trailing mean over `entropy[max(0, t - window + 1)..=t]`.
pub fn entropy_window_average(entropy: &[f64], window: usize) -> SignalVector {
    let window = window.max(1);
    let values = (0..entropy.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let span = &entropy[lo..=t];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect();
    SignalVector::new(values, SignalKind::WindowedEntropy)
}
