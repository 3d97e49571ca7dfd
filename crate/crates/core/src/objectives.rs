//! Exact divergences, the pseudo-KL and its decomposition, the k3 token
//! estimator, and closed-form stationary solutions for each objective
//! variant (reverse-KL, shaped-anchor, forward-KL, entropy-regularized).
//!
//! Every expectation is computed by exact enumeration; tilted weights are
//! accumulated in log domain (log ref + r/beta + log q, then log-sum-exp)
//! so small beta on large trajectory sets stays finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TrajectoryDistribution;

/// Per-trajectory positive anchor weights f(y) = q(y) * ref(y), possibly
/// unnormalized.
#[derive(Debug, Clone)]
pub struct AnchorWeights(pub Vec<f64>);

impl AnchorWeights {
    pub fn from_guide_and_ref(q_values: &[f64], reference: &TrajectoryDistribution) -> Result<Self> {
        if q_values.len() != reference.probs.len() {
            return Err(Error::Domain("anchor length mismatch".into()));
        }
        if q_values.iter().any(|&q| !(q > 0.0)) {
            return Err(Error::Domain("guide values must be positive".into()));
        }
        Ok(Self(
            q_values
                .iter()
                .zip(&reference.probs)
                .map(|(&q, &r)| q * r)
                .collect(),
        ))
    }

    /// Total mass of the anchor; 1 when it happens to be normalized.
    pub fn total_mass(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A closed-form stationary distribution together with its normalizer and,
/// for the forward-KL variant, the Lagrange constant lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarySolution {
    pub dist: TrajectoryDistribution,
    pub normalizer: f64,
    pub lambda: Option<f64>,
}

/// Exact KL divergence, in nats, between two normalized distributions.
pub fn kl_exact(p: &TrajectoryDistribution, reference: &TrajectoryDistribution) -> Result<f64> {
    pseudo_kl_exact(p, &AnchorWeights(reference.probs.clone()))
}

/// Pseudo-KL against a positive, possibly unnormalized anchor:
/// sum over trajectories of p * log(p / f). May be negative.
pub fn pseudo_kl_exact(p: &TrajectoryDistribution, f: &AnchorWeights) -> Result<f64> {
    if p.probs.len() != f.0.len() {
        return Err(Error::Domain("distribution length mismatch".into()));
    }
    let mut acc = 0.0;
    for (&pi, &fi) in p.probs.iter().zip(&f.0) {
        if pi == 0.0 {
            continue;
        }
        if !(fi > 0.0) {
            return Err(Error::Domain(
                "anchor must be positive on the support of p".into(),
            ));
        }
        acc += pi * (pi / fi).ln();
    }
    Ok(acc)
}

/// Split the pseudo-KL into its plain-KL part and the guide bonus:
/// returns (kl_exact(p, ref), sum over y of p(y) * log q(y)). The pseudo-KL
/// against q * ref equals kl_part - bonus_part.
pub fn pseudo_kl_decompose(
    p: &TrajectoryDistribution,
    reference: &TrajectoryDistribution,
    guide_log_products: &[f64],
) -> Result<(f64, f64)> {
    if guide_log_products.len() != p.probs.len() {
        return Err(Error::Domain("guide length mismatch".into()));
    }
    let kl_part = kl_exact(p, reference)?;
    let bonus_part = p
        .probs
        .iter()
        .zip(guide_log_products)
        .map(|(&pi, &lq)| pi * lq)
        .sum();
    Ok((kl_part, bonus_part))
}

/// Single-sample k3 estimate: ratio - log ratio - 1, with
/// ratio = anchor(y) / policy(y). Nonnegative, zero only at ratio 1.
pub fn k3_token_estimate(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::Domain(format!("k3 ratio must be positive, got {ratio}")));
    }
    Ok(ratio - ratio.ln() - 1.0)
}

fn tilted_solution(log_weights: &[f64]) -> StationarySolution {
    let dist = TrajectoryDistribution::from_log_weights(log_weights);
    let normalizer = dist.normalizer();
    StationarySolution {
        dist,
        normalizer,
        lambda: None,
    }
}

/// Stationary distribution of reverse-KL-regularized RLVR:
/// dist(y) proportional to ref(y) * exp(r(y) / beta).
pub fn stationary_reverse_kl(
    reference: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
) -> Result<StationarySolution> {
    stationary_sage(reference, rewards, beta, &vec![1.0; rewards.len()])
}

/// Stationary distribution with a shaped anchor:
/// dist(y) proportional to q(y) * ref(y) * exp(r(y) / beta).
pub fn stationary_sage(
    reference: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
    q_values: &[f64],
) -> Result<StationarySolution> {
    if !(beta > 0.0) {
        return Err(Error::Domain("beta must be positive".into()));
    }
    if rewards.len() != reference.probs.len() || q_values.len() != reference.probs.len() {
        return Err(Error::Domain("length mismatch".into()));
    }
    if q_values.iter().any(|&q| !(q > 0.0)) {
        return Err(Error::Domain("guide values must be positive".into()));
    }
    let log_weights: Vec<f64> = reference
        .probs
        .iter()
        .zip(rewards)
        .zip(q_values)
        .map(|((&p, &r), &q)| {
            let lp = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            lp + r / beta + q.ln()
        })
        .collect();
    Ok(tilted_solution(&log_weights))
}

/// Stationary distribution of forward-KL-regularized RLVR:
/// dist(y) = beta * ref(y) / (lambda - r(y)), with lambda above the maximum
/// reward solved so the distribution normalizes.
pub fn stationary_forward_kl(
    reference: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
) -> Result<StationarySolution> {
    if !(beta > 0.0) {
        return Err(Error::Domain("beta must be positive".into()));
    }
    if rewards.len() != reference.probs.len() {
        return Err(Error::Domain("length mismatch".into()));
    }
    let r_max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let g = |lambda: f64| -> f64 {
        reference
            .probs
            .iter()
            .zip(rewards)
            .map(|(&p, &r)| beta * p / (lambda - r))
            .sum::<f64>()
            - 1.0
    };
    // g decreases monotonically from +inf (at lambda -> r_max from above,
    // assuming mass at the max reward) to -1; bracket by doubling.
    let mut lo = r_max + 1e-12;
    if g(lo) < 0.0 {
        // All reference mass may sit away from the max reward; widen lo
        // downward is impossible (lambda must exceed r_max), so the root,
        // if any, lies arbitrarily close to r_max. Treat as solvable by
        // tightening: g is still decreasing, so no root exists above lo.
        return Err(Error::Solver(
            "no normalizing lambda above the maximum reward".into(),
        ));
    }
    let mut hi = r_max + beta.max(1.0);
    let mut doublings = 0;
    while g(hi) > 0.0 {
        hi = r_max + (hi - r_max) * 2.0;
        doublings += 1;
        if doublings > 128 {
            return Err(Error::Solver("lambda bracket not found after 128 doublings".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let residual = g(lambda);
    if residual.abs() > 1e-12 {
        return Err(Error::Solver(format!(
            "lambda residual {residual} exceeds tolerance"
        )));
    }
    let probs: Vec<f64> = reference
        .probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| beta * p / (lambda - r))
        .collect();
    Ok(StationarySolution {
        dist: TrajectoryDistribution::normalized(probs),
        normalizer: 1.0,
        lambda: Some(lambda),
    })
}

/// Stationary distribution with an extra entropy bonus of weight alpha:
/// dist proportional to ref^(beta/(alpha+beta)) * exp(r/(alpha+beta)).
pub fn stationary_entropy_reg(
    reference: &TrajectoryDistribution,
    rewards: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<StationarySolution> {
    if alpha < 0.0 || !(beta > 0.0) {
        return Err(Error::Domain("require alpha >= 0 and beta > 0".into()));
    }
    let temp = beta / (alpha + beta);
    let log_weights: Vec<f64> = reference
        .probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| {
            let lp = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            temp * lp + r / (alpha + beta)
        })
        .collect();
    Ok(tilted_solution(&log_weights))
}

/// Off-target mass comparison between the forward-KL and shaped-anchor
/// stationary solutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfftargetReport {
    /// Reweighting factors w(y) = ((lambda - r)/beta) * exp(r/beta) * q(y)
    /// mapping the forward-KL solution onto the shaped-anchor one.
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// min over valid of w exceeds max over invalid of w.
    pub separation_holds: bool,
    /// Sufficient condition on q alone:
    /// min over valid of q > [lambda / ((lambda-1) e^(1/beta))] * max over invalid of q.
    pub qcond_holds: bool,
    pub sage_offmass: f64,
    pub fkl_offmass: f64,
    /// Set when the valid set is empty or covers every trajectory; the
    /// off-mass comparison is vacuous then.
    pub degenerate: bool,
}

pub fn offtarget_reweight(
    reference: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
    q_values: &[f64],
) -> Result<OfftargetReport> {
    let fkl = stationary_forward_kl(reference, rewards, beta)?;
    let sage = stationary_sage(reference, rewards, beta, q_values)?;
    let lambda = fkl.lambda.expect("forward solver always sets lambda");

    let weights: Vec<f64> = rewards
        .iter()
        .zip(q_values)
        .map(|(&r, &q)| ((lambda - r) / beta) * (r / beta).exp() * q)
        .collect();

    let valid: Vec<usize> = rewards
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == 1.0)
        .map(|(i, _)| i)
        .collect();
    let degenerate = valid.is_empty() || valid.len() == rewards.len();

    let (mut min_w_in, mut max_w_out) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_q_in, mut max_q_out) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sage_offmass, mut fkl_offmass) = (0.0, 0.0);
    for i in 0..rewards.len() {
        if rewards[i] == 1.0 {
            min_w_in = min_w_in.min(weights[i]);
            min_q_in = min_q_in.min(q_values[i]);
        } else {
            max_w_out = max_w_out.max(weights[i]);
            max_q_out = max_q_out.max(q_values[i]);
            sage_offmass += sage.dist.probs[i];
            fkl_offmass += fkl.dist.probs[i];
        }
    }
    let separation_holds = !degenerate && min_w_in > max_w_out;
    let qcond_holds = !degenerate
        && lambda > 1.0
        && min_q_in > lambda / ((lambda - 1.0) * (1.0 / beta).exp()) * max_q_out;

    Ok(OfftargetReport {
        weights,
        lambda,
        separation_holds,
        qcond_holds,
        sage_offmass,
        fkl_offmass,
        degenerate,
    })
}

/// Exact objective value: expected reward minus beta times the pseudo-KL
/// against the anchor.
pub fn objective_value(
    policy_dist: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
    anchor: &AnchorWeights,
) -> Result<f64> {
    if rewards.len() != policy_dist.probs.len() {
        return Err(Error::Domain("length mismatch".into()));
    }
    let expected_reward: f64 = policy_dist
        .probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| p * r)
        .sum();
    Ok(expected_reward - beta * pseudo_kl_exact(policy_dist, anchor)?)
}
