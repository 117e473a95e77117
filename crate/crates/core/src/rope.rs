//! Rotary position embedding with interleaved pairs.
//!
//! Pair `i` (0-based) occupies indices `(2i, 2i + 1)` and rotates by
//! `position * theta_i`, with `theta_i = base^(-2i / head_dim)`. The score
//! between a rotated query at `m` and a rotated key at `n` depends only on
//! `delta = m - n` and splits into one term per pair:
//! `a_i cos(theta_i delta) + b_i sin(theta_i delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RopeConfig", into = "RopeConfig")]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    thetas: Vec<f64>,
}

/// Serialized form: thetas are derived, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub head_dim: usize,
    #[serde(default = "default_base")]
    pub base: f64,
}

fn default_base() -> f64 {
    DEFAULT_BASE
}

impl TryFrom<RopeConfig> for RopeParams {
    type Error = crate::Error;
    fn try_from(c: RopeConfig) -> Result<Self> {
        RopeParams::new(c.head_dim, c.base)
    }
}

impl From<RopeParams> for RopeConfig {
    fn from(p: RopeParams) -> Self {
        RopeConfig {
            head_dim: p.head_dim,
            base: p.base,
        }
    }
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(arg_err!("head_dim must be even and positive, got {head_dim}"));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(arg_err!("rope base must be finite and > 1, got {base}"));
        }
        let thetas = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RopeParams {
            head_dim,
            base,
            thetas,
        })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation frequencies, strictly decreasing.
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn n_pairs(&self) -> usize {
        self.thetas.len()
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.head_dim {
            return Err(arg_err!(
                "{what} has length {len}, expected head_dim {}",
                self.head_dim
            ));
        }
        Ok(())
    }

    /// Rotate `v` into `out` in `f64`, without rounding to `f32`.
    pub(crate) fn rotate_into(&self, v: &[f32], position: u32, out: &mut [f64]) {
        let pos = position as f64;
        for (i, theta) in self.thetas.iter().enumerate() {
            let (sin, cos) = (pos * theta).sin_cos();
            let x = v[2 * i] as f64;
            let y = v[2 * i + 1] as f64;
            out[2 * i] = x * cos - y * sin;
            out[2 * i + 1] = x * sin + y * cos;
        }
    }

    /// Inverse rotation in `f64`.
    pub fn unrotate(&self, v: &[f64], position: u32) -> Vec<f64> {
        let pos = position as f64;
        let mut out = vec![0.0; v.len()];
        for (i, theta) in self.thetas.iter().enumerate() {
            let (sin, cos) = (pos * theta).sin_cos();
            let x = v[2 * i];
            let y = v[2 * i + 1];
            out[2 * i] = x * cos + y * sin;
            out[2 * i + 1] = -x * sin + y * cos;
        }
        out
    }
}

/// Apply the position-`position` rotation to `v`.
pub fn rope_rotate(v: &[f32], position: u32, params: &RopeParams) -> Result<Vec<f32>> {
    Ok(rope_rotate_f64(v, position, params)?
        .into_iter()
        .map(|x| x as f32)
        .collect())
}

/// As [`rope_rotate`], keeping full precision.
pub fn rope_rotate_f64(v: &[f32], position: u32, params: &RopeParams) -> Result<Vec<f64>> {
    params.check_len("vector", v.len())?;
    let mut out = vec![0.0; v.len()];
    params.rotate_into(v, position, &mut out);
    Ok(out)
}

/// Score between `q` rotated to `m` and `k` rotated to `n`.
pub fn rope_score(q: &[f32], k: &[f32], m: u32, n: u32, params: &RopeParams) -> Result<f64> {
    params.check_len("query", q.len())?;
    params.check_len("key", k.len())?;
    let qr = rope_rotate_f64(q, m, params)?;
    let kr = rope_rotate_f64(k, n, params)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}

/// Bilinear coefficients `(a_i, b_i)` of pair `i`:
/// `a_i = q0 k0 + q1 k1`, `b_i = q0 k1 - q1 k0`.
pub fn pair_coefficients(q: &[f32], k: &[f32], params: &RopeParams) -> Result<Vec<(f64, f64)>> {
    params.check_len("query", q.len())?;
    params.check_len("key", k.len())?;
    Ok((0..params.n_pairs())
        .map(|i| {
            let (q0, q1) = (q[2 * i] as f64, q[2 * i + 1] as f64);
            let (k0, k1) = (k[2 * i] as f64, k[2 * i + 1] as f64);
            (q0 * k0 + q1 * k1, q0 * k1 - q1 * k0)
        })
        .collect())
}

/// Per-pair contributions to the score at relative offset `delta`.
pub fn score_decomposition(
    q: &[f32],
    k: &[f32],
    delta: i64,
    params: &RopeParams,
) -> Result<Vec<f64>> {
    let coeffs = pair_coefficients(q, k, params)?;
    Ok(coeffs
        .iter()
        .zip(params.thetas())
        .map(|((a, b), theta)| {
            let (sin, cos) = (theta * delta as f64).sin_cos();
            a * cos + b * sin
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn thetas_decrease_and_first_is_one() {
        let p = RopeParams::with_default_base(64).unwrap();
        assert_eq!(p.thetas().len(), 32);
        assert_eq!(p.thetas()[0], 1.0);
        assert!(p.thetas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_odd_dim() {
        assert!(RopeParams::with_default_base(7).is_err());
        assert!(RopeParams::with_default_base(0).is_err());
        assert!(RopeParams::new(8, 0.5).is_err());
    }

    #[test]
    fn rotate_examples() {
        let p = RopeParams::with_default_base(8).unwrap();
        let v = [0.1f32, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        assert_eq!(rope_rotate(&v, 0, &p).unwrap(), v.to_vec());

        let p2 = RopeParams::with_default_base(2).unwrap();
        let r = rope_rotate_f64(&[1.0, 0.0], 1, &p2).unwrap();
        assert!((r[0] - 1f64.cos()).abs() < 1e-12);
        assert!((r[1] - 1f64.sin()).abs() < 1e-12);
        assert!((r[0] - 0.5403).abs() < 1e-4 && (r[1] - 0.8415).abs() < 1e-4);

        assert!(rope_rotate(&[1.0, 0.0, 0.0], 3, &p).is_err());
    }

    #[test]
    fn rotation_preserves_norm() {
        let p = RopeParams::with_default_base(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = random_vec(&mut rng, 64);
            let pos = rng.random_range(0..100_000u32);
            let r = rope_rotate(&v, pos, &p).unwrap();
            assert!((norm(&r) - norm(&v)).abs() <= 1e-6);
        }
    }

    #[test]
    fn unrotate_inverts_rotate() {
        let p = RopeParams::with_default_base(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_vec(&mut rng, 16);
        let r = rope_rotate_f64(&v, 1234, &p).unwrap();
        let back = p.unrotate(&r, 1234);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - *b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn score_examples() {
        let p = RopeParams::with_default_base(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let direct: f64 = q.iter().zip(&k).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((rope_score(&q, &k, 77, 77, &p).unwrap() - direct).abs() < 1e-9);

        let p2 = RopeParams::with_default_base(2).unwrap();
        let s = rope_score(&[1.0, 0.0], &[1.0, 0.0], 1, 0, &p2).unwrap();
        assert!((s - 1f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn decomposition_examples() {
        let p = RopeParams::with_default_base(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let parts = score_decomposition(&q, &k, 0, &p).unwrap();
        for (i, c) in parts.iter().enumerate() {
            let a = q[2 * i] as f64 * k[2 * i] as f64 + q[2 * i + 1] as f64 * k[2 * i + 1] as f64;
            assert!((c - a).abs() < 1e-12);
        }

        let mut unit = vec![0.0f32; 8];
        unit[0] = 1.0;
        let parts = score_decomposition(&unit, &unit, 13, &p).unwrap();
        assert!(parts[0] != 0.0);
        assert!(parts[1..].iter().all(|c| *c == 0.0));

        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let sum: f64 = score_decomposition(&q, &k, 100, &p).unwrap().iter().sum();
        assert!((sum - rope_score(&q, &k, 150, 50, &p).unwrap()).abs() <= 1e-5);
    }

    #[test]
    fn serde_round_trip_derives_thetas() {
        let p = RopeParams::new(32, 500_000.0).unwrap();
        let text = toml::to_string(&p).unwrap();
        let back: RopeParams = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(toml::from_str::<RopeParams>("head_dim = 3").is_err());
    }
}
