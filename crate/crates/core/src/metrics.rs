//! Evaluation metrics: unbiased pass@k, exact support coverage, and entropy
//! summaries for trained policies.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TokenTreeEnvironment;
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// Unbiased pass@k estimate from `n` graded samples with `c` correct:
/// 1 - C(n-c, k) / C(n, k), computed in product form so large n never
/// overflows. Returns exactly 1 when n - c < k.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Domain(format!(
            "pass@k requires 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut prod = 1.0;
    for i in 0..k {
        prod *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - prod)
}

/// Sample-based evaluation summary of a policy on an environment. pass@k is
/// estimated from the graded samples; the support size comes from the exact
/// enumerated distribution, not the samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_samples: u64,
    pub correct_count: u64,
    pub pass_at_k: BTreeMap<u64, f64>,
    pub support_size_at_eps: usize,
    pub mean_trajectory_entropy: f64,
}

pub fn evaluate_policy<R: Rng>(
    policy: &TabularPolicy,
    env: &TokenTreeEnvironment,
    n_samples: u64,
    ks: &[u64],
    epsilon: f64,
    rng: &mut R,
) -> Result<EvalReport> {
    if ks.iter().any(|&k| k == 0 || k > n_samples) {
        return Err(Error::Domain(
            "every k must satisfy 1 <= k <= n_samples".into(),
        ));
    }
    let mut correct_count = 0u64;
    let mut entropy_sum = 0.0;
    for _ in 0..n_samples {
        let sample = policy.sample_trajectory(env, rng);
        if env.is_valid(&sample.tokens) {
            correct_count += 1;
        }
        entropy_sum += sample.entropies.iter().sum::<f64>();
    }
    let mut pass = BTreeMap::new();
    for &k in ks {
        pass.insert(k, pass_at_k(n_samples, correct_count, k)?);
    }

    let dist = policy.exact_distribution(env)?;
    let support_size_at_eps = env
        .valid_set()
        .iter()
        .filter(|y| dist.probs[env.trajectory_index(y)] > epsilon)
        .count();

    Ok(EvalReport {
        n_samples,
        correct_count,
        pass_at_k: pass,
        support_size_at_eps,
        mean_trajectory_entropy: entropy_sum / n_samples.max(1) as f64,
    })
}
