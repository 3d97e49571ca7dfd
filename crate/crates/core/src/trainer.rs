//! GRPO-style stochastic trainer with pluggable KL modes.
//!
//! Each step samples a group of rollouts from a frozen snapshot of the
//! policy, computes group-normalized advantages, evaluates guide factors
//! once from sampling-time statistics, and takes one plain gradient-ascent
//! step on the logits of visited contexts. Training is single-epoch per
//! batch, so the importance ratio is 1 when the gradient is taken and the
//! clip machinery is present but inactive on-policy.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::TokenTreeEnvironment;
use crate::error::{Error, Result};
use crate::guide::{evaluate_guide, GuideSpec};
use crate::metrics::{evaluate_policy, EvalReport};
use crate::objectives::k3_token_estimate;
use crate::policy::TabularPolicy;

/// Which divergence penalizes drift from the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    Reverse,
    Forward,
    None,
    Sage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub beta: f64,
    pub group_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_mode: KlMode,
    pub guide: GuideSpec,
    pub adv_std_floor: f64,
    /// Group std normalization of advantages; disable only for estimator
    /// diagnostics (raw rewards become the coefficients).
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_low < 0.0 || self.clip_high < self.clip_low {
            return Err(Error::Config(
                "require 0 <= clip_low <= clip_high".into(),
            ));
        }
        if !(self.adv_std_floor > 0.0) {
            return Err(Error::Config("adv_std_floor must be positive".into()));
        }
        self.guide.validate()
    }
}

/// Per-step scalar metrics, with an optional evaluation snapshot.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_train_reward: f64,
    /// Estimated divergence value for the configured mode (k3-based for
    /// reverse/sage, exact per visited context for forward, 0 for none).
    pub kl_value: f64,
    pub grad_norm: f64,
    pub mean_rollout_entropy: f64,
    /// All rewards in the group were equal, so the surrogate term vanished.
    pub degenerate: bool,
    pub eval: Option<EvalReport>,
}

/// Mutable training state; owns its rng stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: TabularPolicy,
    pub step: u64,
    rng: ChaCha12Rng,
}

impl TrainState {
    pub fn new(initial_policy: TabularPolicy, seed: u64) -> Self {
        Self {
            policy: initial_policy,
            step: 0,
            rng: ChaCha12Rng::seed_from_u64(derive_seed(seed, 0)),
        }
    }
}

/// One step's metrics plus the ascent gradient that was applied (before the
/// learning rate) and the sampled trajectories, exposed so oracle tests and
/// simulation harnesses can inspect them.
pub struct StepOutput {
    pub record: MetricsRecord,
    pub grad: Vec<Vec<f64>>,
    pub sampled: Vec<Vec<usize>>,
}

/// Run a single GRPO step: sample, normalize advantages, freeze guide
/// factors, apply one gradient-ascent update on visited logits.
pub fn grpo_step(
    state: &mut TrainState,
    env: &TokenTreeEnvironment,
    reference: &TabularPolicy,
    cfg: &TrainerConfig,
) -> Result<StepOutput> {
    let snapshot = state.policy.clone();
    let g = cfg.group_size;
    let depth = env.max_depth();

    let samples: Vec<_> = (0..g)
        .map(|_| snapshot.sample_trajectory(env, &mut state.rng))
        .collect();
    let rewards: Vec<f64> = samples
        .iter()
        .map(|s| env.reward(&s.tokens))
        .collect::<Result<_>>()?;

    let mean_r: f64 = rewards.iter().sum::<f64>() / g as f64;
    let var: f64 = rewards.iter().map(|&r| (r - mean_r).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let degenerate = std == 0.0;
    let advantages: Vec<f64> = if !cfg.normalize_advantages {
        rewards.clone()
    } else if degenerate {
        vec![0.0; g]
    } else {
        rewards
            .iter()
            .map(|&r| (r - mean_r) / (std + cfg.adv_std_floor))
            .collect()
    };

    // Guide factors frozen once per step from sampling-time statistics;
    // only the sage penalty consumes them.
    let guide_factors: Vec<Vec<f64>> = if cfg.kl_mode == KlMode::Sage {
        samples
            .iter()
            .map(|s| {
                evaluate_guide(&cfg.guide, &s.surprisals, &s.entropies, state.step, &mut state.rng)
                    .factors
            })
            .collect()
    } else {
        vec![vec![1.0; depth]; g]
    };

    let n_tokens = (g * depth) as f64;
    let mut grad = vec![vec![0.0; env.vocab_size()]; env.num_contexts()];
    let mut kl_sum = 0.0;
    let mut entropy_sum = 0.0;

    for (i, sample) in samples.iter().enumerate() {
        let a = advantages[i];
        for t in 0..depth {
            let ctx = sample.context_indices[t];
            let v = sample.tokens[t];
            let pi = snapshot.probs(ctx);
            entropy_sum += sample.entropies[t];

            // Single-epoch on-policy update: the importance ratio is 1 and
            // falls inside [1 - clip_low, 1 + clip_high], so the unclipped
            // branch of the surrogate is active and its gradient is
            // A * (e_v - pi).
            let gc = &mut grad[ctx];
            for (u, &p) in pi.iter().enumerate() {
                let indicator = f64::from(u == v);
                gc[u] += a * (indicator - p) / n_tokens;
            }

            match cfg.kl_mode {
                KlMode::None => {}
                KlMode::Reverse | KlMode::Sage => {
                    let q_t = guide_factors[i][t];
                    let ratio = q_t * reference.probs(ctx)[v] / pi[v];
                    kl_sum += k3_token_estimate(ratio)?;
                    // d k3(ratio)/d logits = (1 - ratio)(e_v - pi)
                    let gc = &mut grad[ctx];
                    for (u, &p) in pi.iter().enumerate() {
                        let indicator = f64::from(u == v);
                        gc[u] -= cfg.beta * (1.0 - ratio) * (indicator - p) / n_tokens;
                    }
                }
                KlMode::Forward => {
                    let refp = reference.probs(ctx);
                    let cross: f64 = refp
                        .iter()
                        .zip(&pi)
                        .map(|(&r, &p)| r * (r / p).ln())
                        .sum();
                    kl_sum += cross;
                    let gc = &mut grad[ctx];
                    for (u, (&r, &p)) in refp.iter().zip(&pi).enumerate() {
                        gc[u] -= cfg.beta * (p - r) / n_tokens;
                    }
                }
            }
        }
    }

    let grad_norm = grad
        .iter()
        .flatten()
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt();
    for (lc, gc) in state.policy.logits_mut().iter_mut().zip(&grad) {
        for (l, &g) in lc.iter_mut().zip(gc) {
            *l += cfg.learning_rate * g;
        }
    }

    let record = MetricsRecord {
        step: state.step,
        mean_train_reward: mean_r,
        kl_value: kl_sum / n_tokens,
        grad_norm,
        mean_rollout_entropy: entropy_sum / n_tokens,
        degenerate,
        eval: None,
    };
    state.step += 1;
    let sampled = samples.into_iter().map(|s| s.tokens).collect();
    Ok(StepOutput {
        record,
        grad,
        sampled,
    })
}

/// Exact ascent gradient of the unclipped objective
/// E_pi[r] - beta * (divergence per mode), by full enumeration. Serves as
/// the unbiasedness and finite-difference oracle for the stochastic step.
pub fn exact_policy_gradient(
    policy: &TabularPolicy,
    env: &TokenTreeEnvironment,
    reference: &TabularPolicy,
    beta: f64,
    kl_mode: KlMode,
    q_values: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let trajectories = env.enumerate_trajectories()?;
    if q_values.len() != trajectories.len() {
        return Err(Error::Domain("q_values length mismatch".into()));
    }
    let mut grad = vec![vec![0.0; env.vocab_size()]; env.num_contexts()];
    for (idx, y) in trajectories.iter().enumerate() {
        let p = policy.trajectory_prob(env, y)?;
        let r = env.reward(y)?;
        let coef = match kl_mode {
            KlMode::None => r,
            KlMode::Reverse | KlMode::Sage => {
                let anchor = if kl_mode == KlMode::Sage {
                    q_values[idx] * reference.trajectory_prob(env, y)?
                } else {
                    reference.trajectory_prob(env, y)?
                };
                r - beta * (p / anchor).ln()
            }
            KlMode::Forward => r,
        };
        // score-function term: p(y) * coef * grad log p(y)
        add_score(&mut grad, policy, env, y, p * coef);
        if kl_mode == KlMode::Forward {
            // -beta * KL(ref || pi) contributes +beta * sum_y ref(y) grad log pi(y)
            let ref_p = reference.trajectory_prob(env, y)?;
            add_score(&mut grad, policy, env, y, beta * ref_p);
        }
    }
    Ok(grad)
}

fn add_score(
    grad: &mut [Vec<f64>],
    policy: &TabularPolicy,
    env: &TokenTreeEnvironment,
    y: &[usize],
    weight: f64,
) {
    for t in 0..y.len() {
        let ctx = env.context_index(&y[..t]);
        let pi = policy.probs(ctx);
        let gc = &mut grad[ctx];
        for (u, &p) in pi.iter().enumerate() {
            let indicator = f64::from(u == y[t]);
            gc[u] += weight * (indicator - p);
        }
    }
}

/// Evaluation settings for periodic snapshots during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Evaluate every `cadence` steps (and always at the final step);
    /// 0 disables evaluation.
    pub cadence: u64,
    pub n_samples: u64,
    pub ks: Vec<u64>,
    pub epsilon: f64,
}

/// Run `cfg.steps` GRPO steps starting from the reference policy.
/// Deterministic given the config seed; evaluation uses rng streams derived
/// per step so it never perturbs the training stream.
pub fn train(
    cfg: &TrainerConfig,
    env: &TokenTreeEnvironment,
    reference: &TabularPolicy,
    eval: Option<&EvalSettings>,
) -> Result<(Vec<MetricsRecord>, TabularPolicy)> {
    cfg.validate()?;
    let mut state = TrainState::new(reference.clone(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut out = grpo_step(&mut state, env, reference, cfg)?;
        if let Some(es) = eval {
            let due = es.cadence > 0 && ((step + 1) % es.cadence == 0 || step + 1 == cfg.steps);
            if due {
                let mut eval_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, step + 1));
                out.record.eval = Some(evaluate_policy(
                    &state.policy,
                    env,
                    es.n_samples,
                    &es.ks,
                    es.epsilon,
                    &mut eval_rng,
                )?);
            }
        }
        log.push(out.record);
    }
    Ok((log, state.policy))
}
