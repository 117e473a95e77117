//! Stable softmax, log-sum-exp pairs and KL divergence.
//!
//! Stored tensors are `f32`; every reduction here accumulates in `f64`.

use crate::error::{arg_err, Error, Result};

/// Lower clamp applied to the second argument of [`kl_divergence`].
pub const KL_EPSILON: f64 = 1e-9;

/// A `(max, sum of exp(x - max))` pair summarising a set of scores.
///
/// The unnormalised mass it represents is `exp(m) * l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsePair {
    pub m: f64,
    pub l: f64,
}

impl LsePair {
    /// Natural log of the represented mass, `m + ln l`.
    pub fn log_mass(&self) -> f64 {
        self.m + self.l.ln()
    }

    /// Mass relative to a reference maximum: `l * exp(m - reference)`.
    pub fn mass_relative_to(&self, reference: f64) -> f64 {
        self.l * (self.m - reference).exp()
    }

    /// Combine two pairs into one covering the union of their score sets.
    pub fn merge(self, other: LsePair) -> LsePair {
        if self.l == 0.0 {
            return other;
        }
        if other.l == 0.0 {
            return self;
        }
        let m = self.m.max(other.m);
        LsePair {
            m,
            l: self.l * (self.m - m).exp() + other.l * (other.m - m).exp(),
        }
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if let Some((i, s)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite ({s})")));
    }
    Ok(())
}

fn max_of(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(arg_err!("softmax of an empty vector"));
    }
    check_finite(scores)?;
    let m = max_of(scores);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for x in &mut out {
        *x /= z;
    }
    Ok(out)
}

/// Reduce a score set to its log-sum-exp pair.
pub fn lse_reduce(scores: &[f64]) -> Result<LsePair> {
    if scores.is_empty() {
        return Err(arg_err!("log-sum-exp of an empty vector"));
    }
    check_finite(scores)?;
    let m = max_of(scores);
    let l = scores.iter().map(|s| (s - m).exp()).sum();
    Ok(LsePair { m, l })
}

/// Merge any number of pairs; the result represents the concatenated score set.
pub fn lse_merge(pairs: &[LsePair]) -> Result<LsePair> {
    if pairs.is_empty() {
        return Err(arg_err!("merge of an empty pair list"));
    }
    let m = pairs.iter().map(|p| p.m).fold(f64::NEG_INFINITY, f64::max);
    let l = pairs.iter().map(|p| p.mass_relative_to(m)).sum();
    Ok(LsePair { m, l })
}

/// `KL(p || q)` with `q` clamped below by [`KL_EPSILON`]. Terms with `p_i = 0`
/// contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(arg_err!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        ));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_EPSILON)).ln())
        .sum();
    // Rounding can leave a tiny negative residue when p == q.
    Ok(kl.max(0.0))
}

/// `KL(p || softmax(logits))` computed through log-softmax, so a student
/// assigning vanishing mass does not lose precision to the clamp.
pub fn kl_to_logits(p: &[f64], logits: &[f64]) -> Result<f64> {
    if p.len() != logits.len() {
        return Err(arg_err!(
            "KL length mismatch: {} vs {}",
            p.len(),
            logits.len()
        ));
    }
    let lse = lse_reduce(logits)?.log_mass();
    let kl: f64 = p
        .iter()
        .zip(logits)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, z)| pi * (pi.ln() - (z - lse)))
        .sum();
    Ok(kl.max(0.0))
}

/// Dot product of two `f32` slices with `f64` accumulation.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent lanes keep the loop vectorisable.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dot product of an `f64` slice against an `f32` slice.
#[inline]
pub fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i] as f64;
        acc[1] += a[i + 1] * b[i + 1] as f64;
        acc[2] += a[i + 2] * b[i + 2] as f64;
        acc[3] += a[i + 3] * b[i + 3] as f64;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
