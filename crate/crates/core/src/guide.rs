//! Guide-function families producing per-token factors and their
//! trajectory-level product.
//!
//! Four families: `constant` (identity guide, q ≡ 1), `random`
//! (ε-mixture of 1 and a unit-mean Gaussian), `token` (surprisal-aware
//! Gaussian with min-max scaled weights), and `branch` (deterministic
//! threshold-ratio rule on token entropies). Gaussian draws are clamped
//! below at `factor_floor` so factors stay strictly positive.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::CosineSchedule;

pub const DEFAULT_FACTOR_FLOOR: f64 = 1e-3;

/// Which guide family to use, with its parameters. Random and token
/// parameters follow cosine schedules; branch parameters are fixed scalars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GuideFamily {
    Constant,
    Random {
        eps: CosineSchedule,
        sigma: CosineSchedule,
    },
    Token {
        alpha: CosineSchedule,
        sigma: CosineSchedule,
    },
    Branch {
        gamma: f64,
        tau: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuideSpec {
    pub family: GuideFamily,
    pub factor_floor: f64,
}

impl GuideSpec {
    pub fn constant() -> Self {
        Self {
            family: GuideFamily::Constant,
            factor_floor: DEFAULT_FACTOR_FLOOR,
        }
    }

    pub fn branch(gamma: f64, tau: f64) -> Self {
        Self {
            family: GuideFamily::Branch { gamma, tau },
            factor_floor: DEFAULT_FACTOR_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor_floor > 0.0) {
            return Err(Error::Config("factor_floor must be positive".into()));
        }
        if let GuideFamily::Branch { gamma, tau } = self.family {
            if gamma < 0.0 || tau < 0.0 {
                return Err(Error::Config("branch gamma and tau must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Per-token factors for one trajectory plus their log product (the
/// trajectory-level log q).
#[derive(Debug, Clone, PartialEq)]
pub struct GuideEvaluation {
    pub factors: Vec<f64>,
    pub log_product: f64,
}

impl GuideEvaluation {
    fn from_factors(factors: Vec<f64>) -> Self {
        let log_product = factors.iter().map(|f| f.ln()).sum();
        Self {
            factors,
            log_product,
        }
    }
}

/// Random-search guide: each factor is 1 with probability `eps`, otherwise a
/// Normal(1, sigma^2) draw clamped below at `factor_floor`.
pub fn evaluate_guide_random<R: Rng>(
    len: usize,
    eps: f64,
    sigma: f64,
    rng: &mut R,
    factor_floor: f64,
) -> GuideEvaluation {
    let factors = (0..len)
        .map(|_| {
            if rng.gen::<f64>() < eps || sigma == 0.0 {
                1.0
            } else {
                let normal = Normal::new(1.0, sigma).expect("sigma checked nonnegative");
                normal.sample(rng).max(factor_floor)
            }
        })
        .collect();
    GuideEvaluation::from_factors(factors)
}

/// Surprisal-aware guide: weights are the trajectory's surprisals min-max
/// scaled to [0,1] (all zero when the surprisals are equal), and each factor
/// is a Normal(1 + alpha*w_t, (w_t*sigma)^2) draw clamped at `factor_floor`.
pub fn evaluate_guide_token<R: Rng>(
    surprisals: &[f64],
    alpha: f64,
    sigma: f64,
    rng: &mut R,
    factor_floor: f64,
) -> GuideEvaluation {
    let min = surprisals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = surprisals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let factors = surprisals
        .iter()
        .map(|&s| {
            let w = if range > 0.0 { (s - min) / range } else { 0.0 };
            let std = w * sigma;
            if std == 0.0 {
                1.0 + alpha * w
            } else {
                let normal = Normal::new(1.0 + alpha * w, std).expect("std checked positive");
                normal.sample(rng).max(factor_floor)
            }
        })
        .collect();
    GuideEvaluation::from_factors(factors)
}

/// Branch guide: deterministic threshold-ratio rule
/// factor_t = 1 + gamma * max(H_t - tau, 0). Every factor is at least 1.
pub fn evaluate_guide_branch(entropies: &[f64], gamma: f64, tau: f64) -> GuideEvaluation {
    let factors = entropies
        .iter()
        .map(|&h| 1.0 + gamma * (h - tau).max(0.0))
        .collect();
    GuideEvaluation::from_factors(factors)
}

/// Sum of log factors; the exponent recovers the per-trajectory product.
pub fn guide_log_product(eval: &GuideEvaluation) -> Result<f64> {
    if eval.factors.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Domain("guide factor must be positive".into()));
    }
    Ok(eval.log_product)
}

/// Evaluate one trajectory's guide factors from its sampling-time per-token
/// statistics. Schedules are read at `step` out of `total_steps`.
pub fn evaluate_guide<R: Rng>(
    spec: &GuideSpec,
    surprisals: &[f64],
    entropies: &[f64],
    step: u64,
    rng: &mut R,
) -> GuideEvaluation {
    match &spec.family {
        GuideFamily::Constant => {
            GuideEvaluation::from_factors(vec![1.0; surprisals.len()])
        }
        GuideFamily::Random { eps, sigma } => evaluate_guide_random(
            surprisals.len(),
            eps.value(step),
            sigma.value(step),
            rng,
            spec.factor_floor,
        ),
        GuideFamily::Token { alpha, sigma } => evaluate_guide_token(
            surprisals,
            alpha.value(step),
            sigma.value(step),
            rng,
            spec.factor_floor,
        ),
        GuideFamily::Branch { gamma, tau } => evaluate_guide_branch(entropies, *gamma, *tau),
    }
}
