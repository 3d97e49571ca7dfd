//! Tabular softmax policies over token-tree contexts.
//!
//! A policy holds one unconstrained logit vector per context; probabilities
//! come from a per-context softmax, which keeps every token probability
//! strictly positive. All statistics are in nats.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Token, TokenTreeEnvironment, Trajectory};
use crate::error::{Error, Result};

/// Per-context categorical distributions parameterized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    max_depth: usize,
    logits: Vec<Vec<f64>>,
}

/// Exact distribution over complete trajectories, aligned with
/// `enumerate_trajectories` order. `log_normalizer` records the log of the
/// normalizing constant used when the distribution was built from
/// unnormalized weights (0 for an already-normalized source).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub probs: Vec<f64>,
    pub log_normalizer: f64,
}

impl TrajectoryDistribution {
    pub fn normalized(probs: Vec<f64>) -> Self {
        Self {
            probs,
            log_normalizer: 0.0,
        }
    }

    /// Normalize positive weights given in log domain; records the
    /// log-sum-exp normalizer. Survives weights as extreme as exp(±1000).
    pub fn from_log_weights(log_weights: &[f64]) -> Self {
        let m = log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = log_weights.iter().map(|&w| (w - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let probs = log_weights.iter().map(|&w| (w - lse).exp()).collect();
        Self {
            probs,
            log_normalizer: lse,
        }
    }

    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Per-token record captured while sampling a trajectory. Statistics are
/// computed under the sampling-time policy, which is what entropy- and
/// surprisal-driven guides consume.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub tokens: Trajectory,
    pub context_indices: Vec<usize>,
    pub probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub surprisals: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(env: &TokenTreeEnvironment) -> Self {
        Self {
            vocab_size: env.vocab_size(),
            max_depth: env.max_depth(),
            logits: vec![vec![0.0; env.vocab_size()]; env.num_contexts()],
        }
    }

    pub fn from_logits(env: &TokenTreeEnvironment, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.len() != env.num_contexts()
            || logits.iter().any(|l| l.len() != env.vocab_size())
        {
            return Err(Error::Construction(format!(
                "logit table must be {} contexts x {} tokens",
                env.num_contexts(),
                env.vocab_size()
            )));
        }
        if logits.iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::Construction("logits must be finite".into()));
        }
        Ok(Self {
            vocab_size: env.vocab_size(),
            max_depth: env.max_depth(),
            logits,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.logits
    }

    /// Softmax probabilities at a context.
    pub fn probs(&self, context: usize) -> Vec<f64> {
        let l = &self.logits[context];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = l.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = out.iter().sum();
        for p in &mut out {
            *p /= z;
        }
        out
    }

    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        let l = &self.logits[context];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        l.iter().map(|&x| x - lse).collect()
    }

    /// Probability of a complete trajectory: product of per-token
    /// conditionals along its context chain.
    pub fn trajectory_prob(&self, env: &TokenTreeEnvironment, y: &[Token]) -> Result<f64> {
        if y.len() != env.max_depth() || y.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::NotTerminal(format!("{y:?}")));
        }
        let mut p = 1.0;
        for t in 0..y.len() {
            let ctx = env.context_index(&y[..t]);
            p *= self.probs(ctx)[y[t]];
        }
        Ok(p)
    }

    /// Exact distribution over all complete trajectories, by enumeration.
    pub fn exact_distribution(&self, env: &TokenTreeEnvironment) -> Result<TrajectoryDistribution> {
        let n = env.num_trajectories();
        // Walk the tree once instead of recomputing each product from the root.
        let mut probs = vec![0.0; n];
        let mut stack: Vec<(Trajectory, f64)> = vec![(Vec::new(), 1.0)];
        while let Some((prefix, p)) = stack.pop() {
            if prefix.len() == env.max_depth() {
                probs[env.trajectory_index(&prefix)] = p;
                continue;
            }
            let ctx = env.context_index(&prefix);
            let cond = self.probs(ctx);
            for v in 0..self.vocab_size {
                let mut next = prefix.clone();
                next.push(v);
                stack.push((next, p * cond[v]));
            }
        }
        let _ = env.enumerate_trajectories()?; // budget check
        Ok(TrajectoryDistribution::normalized(probs))
    }

    /// Entropy, in nats, of the next-token distribution at a context.
    pub fn token_entropy(&self, context: usize) -> f64 {
        let lp = self.log_probs(context);
        -lp.iter().map(|&l| l.exp() * l).sum::<f64>()
    }

    /// Surprisal, in nats, of one token at a context.
    pub fn token_surprisal(&self, context: usize, token: Token) -> f64 {
        -self.log_probs(context)[token]
    }

    /// Ancestral sampling with per-token statistics recorded under this
    /// (sampling-time) policy.
    pub fn sample_trajectory<R: Rng>(
        &self,
        env: &TokenTreeEnvironment,
        rng: &mut R,
    ) -> SampledTrajectory {
        let depth = env.max_depth();
        let mut tokens = Vec::with_capacity(depth);
        let mut context_indices = Vec::with_capacity(depth);
        let mut probs = Vec::with_capacity(depth);
        let mut entropies = Vec::with_capacity(depth);
        let mut surprisals = Vec::with_capacity(depth);
        for t in 0..depth {
            let ctx = env.context_index(&tokens[..t]);
            let p = self.probs(ctx);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = self.vocab_size - 1;
            for (v, &pv) in p.iter().enumerate() {
                acc += pv;
                if u < acc {
                    chosen = v;
                    break;
                }
            }
            context_indices.push(ctx);
            tokens.push(chosen);
            probs.push(p[chosen]);
            entropies.push(entropy_from_probs(&p));
            surprisals.push(-p[chosen].ln());
        }
        SampledTrajectory {
            tokens,
            context_indices,
            probs,
            entropies,
            surprisals,
        }
    }

    /// Save the logit table as a context-indexed checkpoint (bit-exact).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            vocab_size: self.vocab_size,
            max_depth: self.max_depth,
            logits: self.logits.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(env: &TokenTreeEnvironment, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if file.vocab_size != env.vocab_size() || file.max_depth != env.max_depth() {
            return Err(Error::Construction(
                "checkpoint shape does not match environment".into(),
            ));
        }
        Self::from_logits(env, file.logits)
    }
}

fn entropy_from_probs(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    vocab_size: usize,
    max_depth: usize,
    logits: Vec<Vec<f64>>,
}
