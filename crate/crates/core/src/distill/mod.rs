//! Top-10 logit distillation: the restricted-softmax KL objective, a teacher
//! logit cache, and a toy sparse-student loop.

mod cache;
mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::{kl_divergence, softmax};

pub use cache::{load_teacher_cache, save_teacher_cache, TeacherCache, TeacherRecord};
pub use toy::{build_toy_task, teacher_cache_for, toy_self_distill, DistillOutcome, Stage2Config, ToyConfig, ToyTask};

/// Number of teacher logits the objective aligns.
pub const TOP_K: usize = 10;

/// A teacher's largest logits, in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKLogits {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

/// The ten largest entries of `logits`; ties toward the lower index.
pub fn extract_top10(logits: &[f64]) -> Result<TopKLogits> {
    if logits.len() < TOP_K {
        return Err(arg_err!("vocabulary of {} is smaller than {TOP_K}", logits.len()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    order.truncate(TOP_K);
    Ok(TopKLogits {
        indices: order.iter().map(|i| *i as u32).collect(),
        values: order.iter().map(|i| logits[*i] as f32).collect(),
    })
}

fn restricted(teacher: &TopKLogits, student_logits: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if teacher.indices.len() != teacher.values.len() || teacher.indices.is_empty() {
        return Err(arg_err!("malformed teacher logits"));
    }
    let mut s = Vec::with_capacity(teacher.indices.len());
    for &i in &teacher.indices {
        s.push(
            *student_logits
                .get(i as usize)
                .ok_or_else(|| arg_err!("teacher index {i} outside student vocabulary {}", student_logits.len()))?,
        );
    }
    let t: Vec<f64> = teacher.values.iter().map(|v| *v as f64).collect();
    Ok((softmax(&t)?, softmax(&s)?))
}

/// `KL(softmax(teacher top-10) || softmax(student at the same indices))`.
pub fn distill_loss(teacher: &TopKLogits, student_logits: &[f64]) -> Result<f64> {
    let (p, q) = restricted(teacher, student_logits)?;
    kl_divergence(&p, &q)
}

/// Loss and its gradient with respect to every student logit; zero outside
/// the teacher's indices.
pub fn distill_grad(teacher: &TopKLogits, student_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (p, q) = restricted(teacher, student_logits)?;
    let loss = kl_divergence(&p, &q)?;
    let mut grad = vec![0.0; student_logits.len()];
    for (j, &i) in teacher.indices.iter().enumerate() {
        grad[i as usize] = q[j] - p[j];
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top10_examples() {
        let dec: Vec<f64> = (0..50).map(|i| -(i as f64)).collect();
        assert_eq!(extract_top10(&dec).unwrap().indices, (0..10).collect::<Vec<u32>>());
        assert_eq!(extract_top10(&[1.5; 30]).unwrap().indices, (0..10).collect::<Vec<u32>>());
        assert!(extract_top10(&[0.0; 9]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut sorted: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let t = extract_top10(&v).unwrap();
        assert_eq!(t.indices, sorted[..10].iter().map(|x| x.1 as u32).collect::<Vec<_>>());
        assert!(t.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn loss_examples() {
        let logits: Vec<f64> = (0..40).map(|i| ((i * 7) % 13) as f64 * 0.3).collect();
        let t = extract_top10(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + 4.0).collect();
        assert!(distill_loss(&t, &shifted).unwrap() < 1e-12);

        let degenerate = TopKLogits {
            indices: (0..10).collect(),
            values: vec![200.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let v = distill_loss(&degenerate, &[1.0; 20]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-9);

        let mut other = shifted.clone();
        for (i, x) in other.iter_mut().enumerate() {
            if !t.indices.contains(&(i as u32)) {
                *x = -1000.0 + i as f64;
            }
        }
        assert_eq!(distill_loss(&t, &shifted).unwrap(), distill_loss(&t, &other).unwrap());
        assert!(distill_loss(&t, &[0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn gradient_matches_differences(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let teacher_logits: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            let student: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = extract_top10(&teacher_logits).unwrap();
            let (loss, g) = distill_grad(&t, &student).unwrap();
            prop_assert!(loss >= 0.0);
            let h = 1e-4;
            for i in 0..32 {
                let mut a = student.clone();
                let mut b = student.clone();
                a[i] += h;
                b[i] -= h;
                let num = (distill_loss(&t, &a).unwrap() - distill_loss(&t, &b).unwrap()) / (2.0 * h);
                if t.indices.contains(&(i as u32)) {
                    prop_assert!((num - g[i]).abs() <= 1e-4 * g[i].abs().max(num.abs()).max(1e-3));
                } else {
                    prop_assert_eq!(g[i], 0.0);
                }
            }
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-8.0..8.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-8.0..8.0)).collect();
            prop_assert!(distill_loss(&extract_top10(&a).unwrap(), &b).unwrap() >= 0.0);
        }
    }
}
