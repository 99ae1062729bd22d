use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FloatFormat;
use crate::{Error, Result};

/// How a BF16 gradient reduction accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceKind {
    /// Ring reduce: every partial sum forwarded to the next rank is stored
    /// in BF16.
    RingBf16,
    /// All-to-all of BF16 shards, then one high-precision local sum.
    A2aFp32,
}

impl ReduceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::RingBf16 => "ring_bf16",
            ReduceKind::A2aFp32 => "a2a_fp32",
        }
    }
}

/// Reduces one vector per rank, in the given rank order.
///
/// Inputs are BF16 gradients, so both schemes first round each input to
/// BF16. `ring_bf16` then adds ranks sequentially and rounds each partial
/// sum that is sent on to the next rank; the last rank's add is kept in
/// high precision. `a2a_fp32` sums the rounded inputs in ascending rank
/// order in binary64 (standing in for FP32; the difference is negligible
/// at these sizes). With two ranks the schemes agree.
pub fn emulate_reduce(vectors: &[Vec<f64>], kind: ReduceKind) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Dimension("no input vectors".into()))?;
    let dim = first.len();
    if let Some(bad) = vectors.iter().position(|v| v.len() != dim) {
        return Err(Error::Dimension(format!(
            "rank {bad} has {} elements, rank 0 has {dim}",
            vectors[bad].len()
        )));
    }
    let bf16 = |x: f64| FloatFormat::Bf16.round(x);
    let p = vectors.len();
    let mut acc: Vec<f64> = first.iter().map(|&x| bf16(x)).collect();
    for (i, v) in vectors.iter().enumerate().skip(1) {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += bf16(x);
            if kind == ReduceKind::RingBf16 && i + 1 < p {
                *a = bf16(*a);
            }
        }
    }
    Ok(acc)
}

/// Relative L2 error of `approx` against `exact`.
pub fn relative_l2(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, e)| (a - e).powi(2)).sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Errors of both schemes on one seeded trial of standard-normal inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReduceTrial {
    pub seed: u64,
    pub ring_bf16: f64,
    pub a2a_fp32: f64,
}

pub fn reduce_trial(seed: u64, ranks: usize, dim: usize) -> Result<ReduceTrial> {
    if ranks < 2 {
        return Err(Error::domain("a reduction needs at least 2 ranks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..ranks)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let oracle: Vec<f64> = (0..dim)
        .map(|j| inputs.iter().map(|v| v[j]).sum())
        .collect();
    let ring = emulate_reduce(&inputs, ReduceKind::RingBf16)?;
    let a2a = emulate_reduce(&inputs, ReduceKind::A2aFp32)?;
    Ok(ReduceTrial {
        seed,
        ring_bf16: relative_l2(&ring, &oracle),
        a2a_fp32: relative_l2(&a2a, &oracle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_ranks_agree() {
        let v = vec![vec![1.234567, -3.3, 1e-3], vec![0.987654, 2.2, 5e-4]];
        assert_eq!(
            emulate_reduce(&v, ReduceKind::RingBf16).unwrap(),
            emulate_reduce(&v, ReduceKind::A2aFp32).unwrap()
        );
    }

    #[test]
    fn identical_power_of_two_inputs_are_exact() {
        let v = vec![vec![0.5; 4]; 16];
        for k in [ReduceKind::RingBf16, ReduceKind::A2aFp32] {
            assert_eq!(emulate_reduce(&v, k).unwrap(), vec![8.0; 4]);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let v = vec![vec![1.0; 3], vec![1.0; 2]];
        assert!(matches!(
            emulate_reduce(&v, ReduceKind::A2aFp32),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ring_is_order_sensitive() {
        let a = vec![vec![1.0], vec![1.0 / 256.0], vec![1.0 / 256.0]];
        let b = vec![vec![1.0 / 256.0], vec![1.0 / 256.0], vec![1.0]];
        let ra = emulate_reduce(&a, ReduceKind::RingBf16).unwrap();
        let rb = emulate_reduce(&b, ReduceKind::RingBf16).unwrap();
        assert_ne!(ra, rb);
    }

    #[test]
    fn a2a_is_permutation_invariant_for_exact_sums() {
        // Rounded addends summed in binary64 are exact here.
        let a = vec![vec![1.0, 3.0], vec![1.0 / 256.0, -2.0], vec![0.75, 0.5]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            emulate_reduce(&a, ReduceKind::A2aFp32).unwrap(),
            emulate_reduce(&b, ReduceKind::A2aFp32).unwrap()
        );
    }

    #[test]
    fn trial_is_seed_deterministic() {
        assert_eq!(
            reduce_trial(5, 8, 64).unwrap(),
            reduce_trial(5, 8, 64).unwrap()
        );
    }
}
