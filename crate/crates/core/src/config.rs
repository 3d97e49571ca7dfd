//! Experiment configuration: a TOML file with fail-closed parsing.
//!
//! Every section rejects unknown keys, so a misspelled parameter aborts the
//! run instead of silently falling back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{
    load_environment, make_rare_mode_env, RareModeSpec, TokenTreeEnvironment,
};
use crate::error::{Error, Result};
use crate::guide::{GuideFamily, GuideSpec};
use crate::policy::TabularPolicy;
use crate::schedule::CosineSchedule;
use crate::trainer::{EvalSettings, KlMode, TrainerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvSection,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub guide: GuideSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// Exactly one environment source: a JSON file, an inline spec, or the
/// rare-mode generator.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub path: Option<String>,
    pub inline: Option<InlineEnv>,
    pub rare_mode: Option<RareModeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineEnv {
    pub vocab_size: usize,
    pub max_depth: usize,
    pub valid_trajectories: Vec<Vec<usize>>,
    /// Reference-policy logit table; omitted means uniform.
    pub ref_logits: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RareModeSection {
    pub rare_mass: f64,
    pub branch_entropy_target: f64,
    pub num_common_valid: usize,
    pub support_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    pub steps: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_low: f64,
    #[serde(default = "default_clip")]
    pub clip_high: f64,
    #[serde(default = "default_kl_mode")]
    pub kl_mode: KlMode,
    #[serde(default = "default_adv_std_floor")]
    pub adv_std_floor: f64,
    #[serde(default = "default_true")]
    pub normalize_advantages: bool,
}

fn default_beta() -> f64 {
    0.05
}
fn default_group_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_clip() -> f64 {
    0.2
}
fn default_kl_mode() -> KlMode {
    KlMode::Reverse
}
fn default_adv_std_floor() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideSection {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub eps_lo: f64,
    #[serde(default = "default_sched_hi")]
    pub eps_hi: f64,
    #[serde(default)]
    pub sigma_lo: f64,
    #[serde(default = "default_sched_hi")]
    pub sigma_hi: f64,
    #[serde(default)]
    pub alpha_lo: f64,
    #[serde(default = "default_sched_hi")]
    pub alpha_hi: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_periods")]
    pub periods: u32,
    #[serde(default = "default_factor_floor")]
    pub factor_floor: f64,
}

fn default_family() -> String {
    "constant".into()
}
fn default_gamma() -> f64 {
    0.3
}
fn default_tau() -> f64 {
    1.2
}
fn default_sched_hi() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.9
}
fn default_periods() -> u32 {
    8
}
fn default_factor_floor() -> f64 {
    1e-3
}

impl Default for GuideSection {
    fn default() -> Self {
        toml::from_str("").expect("empty guide section deserializes from defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_n_samples")]
    pub n_samples: u64,
    #[serde(default = "default_ks")]
    pub ks: Vec<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_cadence")]
    pub cadence: u64,
}

fn default_n_samples() -> u64 {
    256
}
fn default_ks() -> Vec<u64> {
    vec![1, 8]
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_cadence() -> u64 {
    10
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section deserializes from defaults")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

/// Grid sweep over the branch-guide thresholds and seeds. Missing seed list
/// means one run per (tau, gamma) point at the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [
            self.env.path.is_some(),
            self.env.inline.is_some(),
            self.env.rare_mode.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return Err(Error::Config(
                "env section must set exactly one of `path`, `inline`, `rare_mode`".into(),
            ));
        }
        match self.guide.family.as_str() {
            "constant" | "random" | "token" | "branch" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown guide family `{other}` (expected constant, random, token or branch)"
                )))
            }
        }
        self.trainer_config(self.seed)?.validate()?;
        if self.eval.cadence > 0
            && self
                .eval
                .ks
                .iter()
                .any(|&k| k == 0 || k > self.eval.n_samples)
        {
            return Err(Error::Config(
                "eval ks must satisfy 1 <= k <= n_samples".into(),
            ));
        }
        Ok(())
    }

    /// Materialize the environment and reference policy. The rare-mode
    /// generator consumes the run seed so sweeps get relabeled instances.
    pub fn build_env(&self, seed: u64) -> Result<(TokenTreeEnvironment, TabularPolicy)> {
        if let Some(path) = &self.env.path {
            return load_environment(Path::new(path));
        }
        if let Some(inline) = &self.env.inline {
            let env = TokenTreeEnvironment::new(
                inline.vocab_size,
                inline.max_depth,
                inline.valid_trajectories.clone(),
            )?;
            let reference = match &inline.ref_logits {
                Some(logits) => TabularPolicy::from_logits(&env, logits.clone())?,
                None => TabularPolicy::uniform(&env),
            };
            return Ok((env, reference));
        }
        let section = self.env.rare_mode.as_ref().expect("validated");
        let rme = make_rare_mode_env(
            &RareModeSpec {
                rare_mass: section.rare_mass,
                branch_entropy_target: section.branch_entropy_target,
                num_common_valid: section.num_common_valid,
                support_epsilon: section.support_epsilon,
            },
            seed,
        )?;
        if rme.already_in_support {
            eprintln!(
                "warning: rare_mass {} is already above the support threshold; the \
                 generated instance is vacuous for support-expansion runs",
                section.rare_mass
            );
        }
        Ok((rme.env, rme.reference))
    }

    fn schedule(&self, lo: f64, hi: f64) -> CosineSchedule {
        CosineSchedule {
            lo,
            hi,
            decay: self.guide.decay,
            periods: self.guide.periods,
            total_steps: self.trainer.steps.max(1),
        }
    }

    pub fn guide_spec(&self) -> GuideSpec {
        let g = &self.guide;
        let family = match g.family.as_str() {
            "random" => GuideFamily::Random {
                eps: self.schedule(g.eps_lo, g.eps_hi),
                sigma: self.schedule(g.sigma_lo, g.sigma_hi),
            },
            "token" => GuideFamily::Token {
                alpha: self.schedule(g.alpha_lo, g.alpha_hi),
                sigma: self.schedule(g.sigma_lo, g.sigma_hi),
            },
            "branch" => GuideFamily::Branch {
                gamma: g.gamma,
                tau: g.tau,
            },
            _ => GuideFamily::Constant,
        };
        GuideSpec {
            family,
            factor_floor: g.factor_floor,
        }
    }

    pub fn trainer_config(&self, seed: u64) -> Result<TrainerConfig> {
        Ok(TrainerConfig {
            beta: self.trainer.beta,
            group_size: self.trainer.group_size,
            steps: self.trainer.steps,
            learning_rate: self.trainer.learning_rate,
            clip_low: self.trainer.clip_low,
            clip_high: self.trainer.clip_high,
            kl_mode: self.trainer.kl_mode,
            guide: self.guide_spec(),
            adv_std_floor: self.trainer.adv_std_floor,
            normalize_advantages: self.trainer.normalize_advantages,
            seed,
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            cadence: self.eval.cadence,
            n_samples: self.eval.n_samples,
            ks: self.eval.ks.clone(),
            epsilon: self.eval.epsilon,
        }
    }

    /// Largest configured pass@k budget.
    pub fn k_max(&self) -> u64 {
        self.eval.ks.iter().copied().max().unwrap_or(1)
    }
}
