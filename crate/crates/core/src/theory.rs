//! Executable verifiers for the support-expansion theory: the empirical
//! support, the exact sufficient condition for expanding it with a guide,
//! the shaped/unshaped stationary identity, the off-target mass comparison,
//! and a finite-sample support-preservation simulation.
//!
//! Everything here is checked against the closed-form oracles from
//! [`crate::objectives`]; the simulation is the only sampled component.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::TokenTreeEnvironment;
use crate::error::{Error, Result};
use crate::objectives::{
    offtarget_reweight, stationary_reverse_kl, stationary_sage, OfftargetReport,
};
use crate::policy::{TabularPolicy, TrajectoryDistribution};
use crate::trainer::{grpo_step, TrainState, TrainerConfig};

/// Reward-valid trajectories holding strictly more than `epsilon` mass.
pub fn empirical_support(
    dist: &TrajectoryDistribution,
    epsilon: f64,
    valid_indices: &[usize],
) -> Vec<usize> {
    valid_indices
        .iter()
        .copied()
        .filter(|&i| dist.probs[i] > epsilon)
        .collect()
}

/// Both sides of the sufficient condition for a guide to lift one valid
/// trajectory into the empirical support, together with the exact outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub q_star: f64,
    pub expectation_q: f64,
    pub rhs_threshold: f64,
    pub condition_holds: bool,
    pub sage_prob_star: f64,
    pub membership: bool,
    /// Largest elementwise residual of the identity
    /// shaped = unshaped * q / E_unshaped[q].
    pub identity_residual: f64,
}

/// Evaluate the expansion condition exactly: compute the unshaped stationary
/// distribution, both sides of q(y*) > (epsilon / p(y*)) * E[q], then the
/// shaped stationary distribution and whether y* actually clears epsilon.
pub fn check_expansion_condition(
    ref_dist: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
    q_values: &[f64],
    y_star: usize,
    epsilon: f64,
) -> Result<ExpansionReport> {
    if rewards.get(y_star) != Some(&1.0) {
        return Err(Error::Domain(format!(
            "y_star index {y_star} is not reward-valid"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let unshaped = stationary_reverse_kl(ref_dist, rewards, beta)?;
    let shaped = stationary_sage(ref_dist, rewards, beta, q_values)?;
    let p_star = unshaped.dist.probs[y_star];
    let expectation_q: f64 = unshaped
        .dist
        .probs
        .iter()
        .zip(q_values)
        .map(|(&p, &q)| p * q)
        .sum();
    let q_star = q_values[y_star];
    let rhs_threshold = epsilon / p_star * expectation_q;
    let condition_holds = q_star > rhs_threshold;
    let sage_prob_star = shaped.dist.probs[y_star];
    let membership = sage_prob_star > epsilon;

    let identity_residual = shaped
        .dist
        .probs
        .iter()
        .zip(&unshaped.dist.probs)
        .zip(q_values)
        .map(|((&s, &u), &q)| (s - u * q / expectation_q).abs())
        .fold(0.0, f64::max);

    Ok(ExpansionReport {
        q_star,
        expectation_q,
        rhs_threshold,
        condition_holds,
        sage_prob_star,
        membership,
        identity_residual,
    })
}

/// The two-trajectory worked example: a dominant valid completion with
/// nearly all reference mass, a second valid completion at mass 1e-6 whose
/// first decision has entropy 5.0 nats, and a branch guide with tau = 1,
/// gamma = 30. Returns the report and a printable trace.
pub fn run_toy_example() -> Result<(ExpansionReport, String)> {
    use crate::guide::evaluate_guide_branch;

    let rare = 1e-6;
    let epsilon = 1e-4;
    let ref_dist = TrajectoryDistribution::normalized(vec![1.0 - rare, rare]);
    let rewards = [1.0, 1.0];
    // Per-token entropies along each trajectory; only the rare one's first
    // decision spikes above the threshold.
    let q1 = evaluate_guide_branch(&[0.1, 0.2], 30.0, 1.0);
    let q2 = evaluate_guide_branch(&[5.0, 0.3], 30.0, 1.0);
    // exact product, not exp(log_product), so the worked value stays integral
    let q_values = [
        q1.factors.iter().product::<f64>(),
        q2.factors.iter().product::<f64>(),
    ];

    let report =
        check_expansion_condition(&ref_dist, &rewards, 0.05, &q_values, 1, epsilon)?;

    let trace = format!(
        "guide factors: dominant {:.6}, rare {:.6}\n\
         E[q] under the unshaped stationary distribution: {:.6}\n\
         condition threshold (epsilon / p*) * E[q]: {:.6}\n\
         condition q* > threshold: {} ({} > {:.6})\n\
         shaped stationary probability of the rare completion: {:.6e}\n\
         membership above epsilon = {:.0e}: {}",
        q_values[0],
        q_values[1],
        report.expectation_q,
        report.rhs_threshold,
        report.condition_holds,
        report.q_star,
        report.rhs_threshold,
        report.sage_prob_star,
        epsilon,
        report.membership,
    );
    Ok((report, trace))
}

/// Off-target comparison with the implications asserted: a q-condition pass
/// must imply separation, and separation must imply strictly less shaped
/// off-target mass. Degenerate instances are returned unasserted.
pub fn offtarget_comparison(
    ref_dist: &TrajectoryDistribution,
    rewards: &[f64],
    beta: f64,
    q_values: &[f64],
) -> Result<OfftargetReport> {
    let report = offtarget_reweight(ref_dist, rewards, beta, q_values)?;
    if report.degenerate {
        return Ok(report);
    }
    if report.qcond_holds && !report.separation_holds {
        return Err(Error::Domain(
            "q-condition held but separation failed".into(),
        ));
    }
    if report.separation_holds && report.sage_offmass >= report.fkl_offmass {
        return Err(Error::Domain(format!(
            "separation held but shaped off-mass {} is not below forward-KL off-mass {}",
            report.sage_offmass, report.fkl_offmass
        )));
    }
    Ok(report)
}

/// Outcome of repeated seeded training runs watching one rare trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreservationReport {
    pub trials: u64,
    /// Trials whose final policy put more than epsilon on the rare
    /// trajectory.
    pub entered_support: u64,
    /// Trials in which the rare trajectory was drawn at least once during
    /// training.
    pub ever_sampled: u64,
    /// Final policy probability of the rare trajectory, one entry per trial.
    pub final_probs: Vec<f64>,
}

/// Train `trials` times with seeds derived from `cfg.seed`, recording for
/// each run whether the designated trajectory was ever sampled and whether
/// it ended above `epsilon`.
pub fn support_preservation_sim(
    cfg: &TrainerConfig,
    env: &TokenTreeEnvironment,
    reference: &TabularPolicy,
    y_star: &[usize],
    epsilon: f64,
    trials: u64,
) -> Result<PreservationReport> {
    cfg.validate()?;
    let mut entered_support = 0;
    let mut ever_sampled = 0;
    let mut final_probs = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = derive_seed(cfg.seed, trial);
        let mut state = TrainState::new(reference.clone(), run_cfg.seed);
        let mut sampled_star = false;
        for _ in 0..run_cfg.steps {
            let out = grpo_step(&mut state, env, reference, &run_cfg)?;
            if out.sampled.iter().any(|y| y == y_star) {
                sampled_star = true;
            }
        }
        let p_star = state.policy.trajectory_prob(env, y_star)?;
        if p_star > epsilon {
            entered_support += 1;
        }
        if sampled_star {
            ever_sampled += 1;
        }
        final_probs.push(p_star);
    }
    Ok(PreservationReport {
        trials,
        entered_support,
        ever_sampled,
        final_probs,
    })
}

/// A randomly generated exact instance for the expansion verifier. The
/// valid set is always nonempty and proper, q is positive, and y_star is
/// valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomInstance {
    pub ref_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub q_values: Vec<f64>,
    pub beta: f64,
    pub epsilon: f64,
    pub y_star: usize,
}

impl RandomInstance {
    pub fn ref_dist(&self) -> TrajectoryDistribution {
        TrajectoryDistribution::normalized(self.ref_probs.clone())
    }
}

/// Draw an instance with a nonempty proper valid set (by rejection), a
/// positive guide, and y_star picked among the valid trajectories.
pub fn random_instance<R: Rng>(rng: &mut R) -> RandomInstance {
    loop {
        let n = rng.gen_range(2..10usize);
        let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln()).collect();
        let z: f64 = raw.iter().sum();
        let ref_probs: Vec<f64> = raw.into_iter().map(|x| x / z).collect();
        let rewards: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let valid: Vec<usize> = rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == 1.0)
            .map(|(i, _)| i)
            .collect();
        if valid.is_empty() || valid.len() == n {
            continue;
        }
        // log-uniform guide values across four orders of magnitude
        let q_values: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(-2.0f64..2.0)).exp())
            .collect();
        let beta = rng.gen_range(0.02..1.5);
        let epsilon = 10f64.powf(rng.gen_range(-6.0..-0.7));
        let y_star = valid[rng.gen_range(0..valid.len())];
        return RandomInstance {
            ref_probs,
            rewards,
            q_values,
            beta,
            epsilon,
            y_star,
        };
    }
}

/// Variant with guide values biased upward on the valid set, so the
/// off-target separation condition is frequently exercised.
pub fn random_offtarget_instance<R: Rng>(rng: &mut R) -> RandomInstance {
    let mut inst = random_instance(rng);
    for (q, &r) in inst.q_values.iter_mut().zip(&inst.rewards) {
        if r == 1.0 {
            *q *= rng.gen_range(5.0..1e4);
        }
    }
    inst
}

/// Deterministic instance stream for the verify suites.
pub fn instance_stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x7f4a))
}
