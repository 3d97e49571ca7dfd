//! Finite verifiable-reward environments as fixed-horizon token trees.
//!
//! An environment is the ground set every exact computation enumerates over:
//! a vocabulary of `vocab_size` tokens, complete trajectories of length
//! exactly `max_depth`, and a binary reward that is total on the terminal set.
//! Environments are immutable after construction and safe to share across
//! threads.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// Default cap on `vocab_size^max_depth` so exact oracles always terminate.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

pub type Token = usize;
pub type Trajectory = Vec<Token>;

/// Fixed-horizon token tree with a binary reward on complete trajectories.
#[derive(Debug, Clone)]
pub struct TokenTreeEnvironment {
    vocab_size: usize,
    max_depth: usize,
    valid: BTreeSet<Trajectory>,
    budget: u64,
    /// offsets[d] = number of contexts of depth < d; contexts are prefixes
    /// of length 0..max_depth, indexed depth-major then lexicographic.
    context_offsets: Vec<usize>,
}

impl TokenTreeEnvironment {
    pub fn new(
        vocab_size: usize,
        max_depth: usize,
        valid_trajectories: impl IntoIterator<Item = Trajectory>,
    ) -> Result<Self> {
        Self::with_budget(
            vocab_size,
            max_depth,
            valid_trajectories,
            DEFAULT_ENUMERATION_BUDGET,
        )
    }

    pub fn with_budget(
        vocab_size: usize,
        max_depth: usize,
        valid_trajectories: impl IntoIterator<Item = Trajectory>,
        budget: u64,
    ) -> Result<Self> {
        if vocab_size == 0 || max_depth == 0 {
            return Err(Error::Construction(
                "vocab_size and max_depth must be positive".into(),
            ));
        }
        let required = (vocab_size as u128).pow(max_depth as u32);
        if required > budget as u128 {
            return Err(Error::BudgetExceeded { required, budget });
        }
        let mut valid = BTreeSet::new();
        for y in valid_trajectories {
            if y.len() != max_depth || y.iter().any(|&t| t >= vocab_size) {
                return Err(Error::Construction(format!(
                    "valid trajectory {y:?} is not a complete trajectory of depth {max_depth}"
                )));
            }
            valid.insert(y);
        }
        let mut context_offsets = Vec::with_capacity(max_depth + 1);
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..=max_depth {
            context_offsets.push(total);
            total += level;
            level *= vocab_size;
        }
        Ok(Self {
            vocab_size,
            max_depth,
            valid,
            budget,
            context_offsets,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn enumeration_budget(&self) -> u64 {
        self.budget
    }

    pub fn num_trajectories(&self) -> usize {
        self.vocab_size.pow(self.max_depth as u32)
    }

    /// Number of decision contexts (prefixes of length 0..max_depth).
    pub fn num_contexts(&self) -> usize {
        *self.context_offsets.last().unwrap()
    }

    /// Index of a prefix among all contexts. Prefixes of length
    /// `max_depth` are terminal and have no context index.
    pub fn context_index(&self, prefix: &[Token]) -> usize {
        debug_assert!(prefix.len() < self.max_depth);
        let mut code = 0usize;
        for &t in prefix {
            debug_assert!(t < self.vocab_size);
            code = code * self.vocab_size + t;
        }
        self.context_offsets[prefix.len()] + code
    }

    /// All complete trajectories in lexicographic order.
    pub fn enumerate_trajectories(&self) -> Result<Vec<Trajectory>> {
        let n = (self.vocab_size as u128).pow(self.max_depth as u32);
        if n > self.budget as u128 {
            return Err(Error::BudgetExceeded {
                required: n,
                budget: self.budget,
            });
        }
        Ok((0..n as usize).map(|i| self.trajectory_at(i)).collect())
    }

    /// The i-th trajectory in lexicographic order.
    pub fn trajectory_at(&self, index: usize) -> Trajectory {
        let mut y = vec![0; self.max_depth];
        let mut rem = index;
        for d in (0..self.max_depth).rev() {
            y[d] = rem % self.vocab_size;
            rem /= self.vocab_size;
        }
        y
    }

    /// Lexicographic index of a complete trajectory.
    pub fn trajectory_index(&self, y: &[Token]) -> usize {
        debug_assert_eq!(y.len(), self.max_depth);
        y.iter().fold(0, |acc, &t| acc * self.vocab_size + t)
    }

    /// Binary verifiable reward on a complete trajectory.
    pub fn reward(&self, y: &[Token]) -> Result<f64> {
        if y.len() != self.max_depth || y.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::NotTerminal(format!("{y:?}")));
        }
        Ok(if self.valid.contains(y) { 1.0 } else { 0.0 })
    }

    /// Rewards for every trajectory, aligned with `enumerate_trajectories`.
    pub fn reward_vector(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.num_trajectories()];
        for y in &self.valid {
            r[self.trajectory_index(y)] = 1.0;
        }
        r
    }

    pub fn valid_set(&self) -> &BTreeSet<Trajectory> {
        &self.valid
    }

    pub fn is_valid(&self, y: &[Token]) -> bool {
        self.valid.contains(y)
    }
}

/// On-disk form of an environment plus its reference policy.
#[derive(Serialize, Deserialize)]
struct EnvFile {
    vocab_size: usize,
    max_depth: usize,
    valid_trajectories: Vec<Trajectory>,
    ref_logits: Vec<Vec<f64>>,
}

/// Serialize an environment and its reference policy. JSON keeps the logits
/// bit-exact across a save/load round trip.
pub fn save_environment(
    env: &TokenTreeEnvironment,
    reference: &TabularPolicy,
    path: &Path,
) -> Result<()> {
    let file = EnvFile {
        vocab_size: env.vocab_size,
        max_depth: env.max_depth,
        valid_trajectories: env.valid.iter().cloned().collect(),
        ref_logits: reference.logits().to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_environment(path: &Path) -> Result<(TokenTreeEnvironment, TabularPolicy)> {
    let text = std::fs::read_to_string(path)?;
    let file: EnvFile = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    let env = TokenTreeEnvironment::new(file.vocab_size, file.max_depth, file.valid_trajectories)?;
    let policy = TabularPolicy::from_logits(&env, file.ref_logits)?;
    Ok((env, policy))
}

/// Specification for the rare-mode generator: one designated valid trajectory
/// carries probability `rare_mass` under the generated reference policy, and
/// the decision taken at the first context on its branch has entropy close to
/// `branch_entropy_target`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RareModeSpec {
    pub rare_mass: f64,
    /// Target entropy, in nats, at the branch point on the rare path.
    pub branch_entropy_target: f64,
    /// Number of high-density valid trajectories besides the rare one.
    pub num_common_valid: usize,
    /// Empirical-support threshold the consuming experiment will use, if
    /// known; lets the generator warn when the rare trajectory would already
    /// be inside the support.
    pub support_epsilon: Option<f64>,
}

/// Output of [`make_rare_mode_env`].
#[derive(Debug, Clone)]
pub struct RareModeEnv {
    pub env: TokenTreeEnvironment,
    pub reference: TabularPolicy,
    /// The designated rare valid trajectory.
    pub y_star: Trajectory,
    /// Context index of the branch point on the rare path (entropy-matched).
    pub rare_branch_context: usize,
    /// Set when `rare_mass >= support_epsilon`: the rare trajectory is
    /// already inside the empirical support and the construction is vacuous
    /// for support-expansion experiments.
    pub already_in_support: bool,
}

fn entropy_of(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Find a boost `c` so that softmax([c, 0, ..., 0]) over `vocab` tokens has
/// entropy `target`, by bisection. Entropy is ln(vocab) at c = 0 and decays
/// monotonically to 0 as c grows.
fn entropy_matched_boost(vocab: usize, target: f64) -> Result<f64> {
    let max_h = (vocab as f64).ln();
    if target > max_h {
        return Err(Error::Construction(format!(
            "entropy target {target} exceeds ln(vocab_size) = {max_h}"
        )));
    }
    let h_at = |c: f64| {
        let mut logits = vec![0.0; vocab];
        logits[0] = c;
        entropy_of(&softmax(&logits))
    };
    let (mut lo, mut hi) = (0.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Build a depth-2 environment mirroring the two-trajectory rare-mode
/// construction: a dominant valid branch, plus one rare valid trajectory
/// whose branch point is a high-entropy decision.
///
/// The reference policy assigns exactly `rare_mass` (up to fp rounding) to
/// the rare trajectory, and the context entered by its first token has
/// entropy within 1e-6 nats of `branch_entropy_target`. Token labels are
/// permuted per depth from `seed`; the structure is seed-independent.
pub fn make_rare_mode_env(spec: &RareModeSpec, seed: u64) -> Result<RareModeEnv> {
    if !(spec.rare_mass > 0.0 && spec.rare_mass < 1.0) {
        return Err(Error::Construction(format!(
            "rare_mass must lie in (0,1), got {}",
            spec.rare_mass
        )));
    }
    if spec.branch_entropy_target < 0.0 {
        return Err(Error::Construction(
            "branch_entropy_target must be nonnegative".into(),
        ));
    }
    if spec.num_common_valid == 0 {
        return Err(Error::Construction(
            "num_common_valid must be at least 1".into(),
        ));
    }
    let vocab = spec
        .branch_entropy_target
        .exp()
        .ceil()
        .max(2.0)
        .max(spec.num_common_valid as f64) as usize;
    let required = (vocab as u128).pow(2);
    if required > DEFAULT_ENUMERATION_BUDGET as u128 {
        return Err(Error::Construction(format!(
            "vocab_size {vocab} needed for the entropy target gives {required} trajectories, \
             over the enumeration budget {DEFAULT_ENUMERATION_BUDGET}"
        )));
    }

    // Rare-branch context: boosted-uniform distribution matched to the
    // entropy target; the rare continuation is the boosted token.
    let boost = entropy_matched_boost(vocab, spec.branch_entropy_target)?;
    let mut rare_ctx_logits = vec![0.0; vocab];
    rare_ctx_logits[0] = boost;
    let rare_ctx_probs = softmax(&rare_ctx_logits);
    let p_continue = rare_ctx_probs[0];

    let p_branch = spec.rare_mass / p_continue;
    if p_branch >= 0.5 {
        return Err(Error::Construction(format!(
            "rare_mass {} is unreachable: the branch token would need probability {p_branch} \
             given continuation probability {p_continue}",
            spec.rare_mass
        )));
    }

    // Canonical layout before relabeling: token 0 at the root heads the
    // common branch, token 1 heads the rare branch.
    let tiny = 1e-300f64.ln(); // logit for structurally-irrelevant tokens
    let mut root_logits = vec![tiny; vocab];
    root_logits[0] = (1.0 - p_branch).ln();
    root_logits[1] = p_branch.ln();

    let mut common_ctx_logits = vec![tiny; vocab];
    let share = (1.0 / spec.num_common_valid as f64).ln();
    for slot in common_ctx_logits.iter_mut().take(spec.num_common_valid) {
        *slot = share;
    }

    // Per-depth token relabeling drawn from the seed.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perm1: Vec<usize> = (0..vocab).collect();
    perm1.shuffle(&mut rng);
    let mut perm2: Vec<usize> = (0..vocab).collect();
    perm2.shuffle(&mut rng);

    let permute = |canonical: &[f64], perm: &[usize]| {
        let mut out = vec![0.0; canonical.len()];
        for (v, &l) in canonical.iter().enumerate() {
            out[perm[v]] = l;
        }
        out
    };

    let valid: Vec<Trajectory> = (0..spec.num_common_valid)
        .map(|j| vec![perm1[0], perm2[j]])
        .chain(std::iter::once(vec![perm1[1], perm2[0]]))
        .collect();
    let y_star = vec![perm1[1], perm2[0]];

    let env = TokenTreeEnvironment::new(vocab, 2, valid)?;

    let mut logits = vec![vec![0.0; vocab]; env.num_contexts()];
    logits[env.context_index(&[])] = permute(&root_logits, &perm1);
    for a in 0..vocab {
        let ctx = env.context_index(&[perm1[a]]);
        logits[ctx] = match a {
            0 => permute(&common_ctx_logits, &perm2),
            1 => permute(&rare_ctx_logits, &perm2),
            _ => vec![0.0; vocab],
        };
    }
    let reference = TabularPolicy::from_logits(&env, logits)?;

    let rare_branch_context = env.context_index(&[perm1[1]]);
    let already_in_support = spec
        .support_epsilon
        .map(|eps| spec.rare_mass >= eps)
        .unwrap_or(false);

    Ok(RareModeEnv {
        env,
        reference,
        y_star,
        rare_branch_context,
        already_in_support,
    })
}

/// Specification for an environment whose branch decision is itself the
/// high-entropy context: the root spreads mass over the whole vocabulary,
/// all but one branch continue to dense valid completions, and the last
/// hides a rare valid completion behind a low-probability but low-entropy
/// continuation.
///
/// This is the shape used by the trainer-level support-expansion
/// experiments: the entropy spike sits on a context that rollouts actually
/// visit, so an entropy-driven guide can act on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchExploreSpec {
    pub vocab_size: usize,
    /// Probability of the rare continuation at the hidden branch.
    pub rare_continuation: f64,
    /// Extra logit on the common branch head at the root. Zero gives a
    /// uniform (maximum-entropy) root.
    pub common_head_boost: f64,
}

/// Output of [`make_branch_explore_env`].
#[derive(Debug, Clone)]
pub struct BranchExploreEnv {
    pub env: TokenTreeEnvironment,
    pub reference: TabularPolicy,
    pub y_star: Trajectory,
    pub y_common: Trajectory,
    /// Reference-policy probability of the rare valid trajectory.
    pub rare_mass: f64,
}

pub fn make_branch_explore_env(spec: &BranchExploreSpec, seed: u64) -> Result<BranchExploreEnv> {
    let vocab = spec.vocab_size;
    if vocab < 3 {
        return Err(Error::Construction("vocab_size must be at least 3".into()));
    }
    if !(spec.rare_continuation > 0.0 && spec.rare_continuation < 0.5) {
        return Err(Error::Construction(
            "rare_continuation must lie in (0, 0.5)".into(),
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perm1: Vec<usize> = (0..vocab).collect();
    perm1.shuffle(&mut rng);
    let mut perm2: Vec<usize> = (0..vocab).collect();
    perm2.shuffle(&mut rng);

    // Canonical: every root token except 1 continues to a dense valid
    // completion (token 0 with probability ~1), so spreading mass across
    // the root costs almost no reward. Root token 1 hides the rare valid
    // continuation behind `rare_continuation`; the rest of that branch is
    // reward-invalid.
    let y_common = vec![perm1[0], perm2[0]];
    let y_star = vec![perm1[1], perm2[0]];
    let valid: Vec<Trajectory> = (0..vocab)
        .filter(|&a| a != 1)
        .map(|a| vec![perm1[a], perm2[0]])
        .chain(std::iter::once(y_star.clone()))
        .collect();
    let env = TokenTreeEnvironment::new(vocab, 2, valid)?;

    let mut logits = vec![vec![0.0; vocab]; env.num_contexts()];
    let root = env.context_index(&[]);
    logits[root][perm1[0]] = spec.common_head_boost;

    let mut dense = vec![(1e-9f64).ln(); vocab];
    dense[perm2[0]] = 0.0;
    for a in (0..vocab).filter(|&a| a != 1) {
        logits[env.context_index(&[perm1[a]])] = dense.clone();
    }

    // The hidden context is low-entropy: nearly all mass on one invalid
    // continuation, `rare_continuation` on the valid one. The only
    // high-entropy decision is the root branch choice itself, which every
    // rollout visits.
    let hidden_ctx = env.context_index(&[perm1[1]]);
    let mut hidden = vec![(1e-9f64).ln(); vocab];
    hidden[perm2[0]] = spec.rare_continuation.ln();
    hidden[perm2[1]] = (1.0 - spec.rare_continuation).ln();
    logits[hidden_ctx] = hidden;

    let reference = TabularPolicy::from_logits(&env, logits)?;
    let rare_mass = reference.trajectory_prob(&env, &y_star)?;

    Ok(BranchExploreEnv {
        env,
        reference,
        y_star,
        y_common,
        rare_mass,
    })
}
