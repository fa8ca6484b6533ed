//! ACER trainers, their baselines and ablations.
//!
//! Sign convention: policy gradients are ascent directions on the expected
//! return, critic gradients are descent directions on a squared-error loss.
//! [`AgentGradients::apply`] negates the policy part before stepping.

mod agent;
mod sdn;
mod trainer;
mod update;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approximator::Backend;
use crate::error::{invalid, AcerError, Result};

pub use agent::{Agent, AgentGradients, Critic, SharedAgent, SharedState};
pub use sdn::{sdn_q_tilde, v_target, SdnCritic, DEFAULT_SDN_SAMPLES};
pub use trainer::{
    a3c_baseline_update, acer_continuous_update, acer_discrete_update, ablation_variant, tis_baseline_update, Trainer,
};
pub use update::{
    a3c_gradients, continuous_acer_gradients, continuous_policy_gradient, discrete_acer_gradients,
    discrete_policy_gradient, tis_gradients, ScoreTerm, UpdateOutput, UpdateRule, TIS_TRUNCATION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationSwitch {
    NoRetraceIsReturns,
    NoSdnSplitNets,
    NoTrustRegion,
    NoTruncationCInf,
}

impl AblationSwitch {
    pub const ALL: [AblationSwitch; 4] = [
        AblationSwitch::NoRetraceIsReturns,
        AblationSwitch::NoSdnSplitNets,
        AblationSwitch::NoTrustRegion,
        AblationSwitch::NoTruncationCInf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationSwitch::NoRetraceIsReturns => "no_retrace_is_returns",
            AblationSwitch::NoSdnSplitNets => "no_sdn_split_nets",
            AblationSwitch::NoTrustRegion => "no_trust_region",
            AblationSwitch::NoTruncationCInf => "no_truncation_c_inf",
        }
    }
}

impl FromStr for AblationSwitch {
    type Err = AcerError;

    fn from_str(s: &str) -> Result<Self> {
        AblationSwitch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AcerError::InvalidArgument(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Acer,
    A3c,
    TrustA3c,
    Tis,
    TrustTis,
    Ablation(AblationSwitch),
}

impl Algorithm {
    /// Whether the algorithm keeps an action-value critic (as opposed to a state-value one).
    pub fn uses_action_values(&self) -> bool {
        matches!(self, Algorithm::Acer | Algorithm::Ablation(_))
    }

    pub fn uses_replay(&self) -> bool {
        !matches!(self, Algorithm::A3c | Algorithm::TrustA3c)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Acer => write!(f, "acer"),
            Algorithm::A3c => write!(f, "a3c"),
            Algorithm::TrustA3c => write!(f, "trust-a3c"),
            Algorithm::Tis => write!(f, "tis"),
            Algorithm::TrustTis => write!(f, "trust-tis"),
            Algorithm::Ablation(s) => write!(f, "ablation:{}", s.name()),
        }
    }
}

impl FromStr for Algorithm {
    type Err = AcerError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "acer" => Algorithm::Acer,
            "a3c" => Algorithm::A3c,
            "trust-a3c" => Algorithm::TrustA3c,
            "tis" => Algorithm::Tis,
            "trust-tis" => Algorithm::TrustTis,
            other => match other.strip_prefix("ablation:") {
                Some(switch) => Algorithm::Ablation(switch.parse()?),
                None => return invalid(format!("unknown algorithm '{s}'")),
            },
        })
    }
}

impl TryFrom<String> for Algorithm {
    type Error = AcerError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Rmsprop,
}

/// Hyperparameters shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcerConfig {
    /// Truncation level of the importance weight in the policy gradient.
    pub c: f64,
    /// Discount; the environment's own discount when absent.
    pub gamma: Option<f64>,
    pub delta: f64,
    pub alpha: f64,
    /// Segment length.
    pub k: usize,
    pub replay_ratio: f64,
    pub replay_capacity: usize,
    pub lr: f64,
    /// Multiplies `lr` for the critic networks.
    pub critic_lr_scale: f64,
    pub trust_region: bool,
    pub entropy_coef: f64,
    /// Use `Q(x_i, a_i)` instead of `Q(x_i, a)` inside the correction sum.
    pub literal_correction: bool,
    pub grad_clip: Option<f64>,
    /// Rewards are multiplied by this before any return is computed.
    pub reward_scale: f64,
    pub optimizer: OptimizerKind,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub sdn_samples: usize,
    pub sigma: f64,
    /// Whether the fresh segment of each master step is also trained on.
    /// Defaults to true for discrete actions and false for continuous ones.
    pub on_policy_trains: Option<bool>,
    /// Penalty alternative to the trust region; not supported.
    pub kl_penalty: Option<f64>,
    pub policy_backend: Option<Backend>,
    pub critic_backend: Option<Backend>,
}

impl Default for AcerConfig {
    fn default() -> Self {
        AcerConfig {
            c: 5.0,
            gamma: None,
            delta: 1.0,
            alpha: 0.995,
            k: 50,
            replay_ratio: 4.0,
            replay_capacity: crate::replay::DEFAULT_CAPACITY_FRAMES,
            lr: 5e-4,
            critic_lr_scale: 1.0,
            trust_region: true,
            entropy_coef: 0.0,
            literal_correction: false,
            grad_clip: Some(40.0),
            reward_scale: 1.0,
            optimizer: OptimizerKind::Rmsprop,
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 0.1,
            sdn_samples: DEFAULT_SDN_SAMPLES,
            sigma: 0.3,
            on_policy_trains: None,
            kl_penalty: None,
            policy_backend: None,
            critic_backend: None,
        }
    }
}

impl AcerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return invalid("c must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("alpha must lie in [0, 1]");
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return invalid("gamma must lie in [0, 1)");
            }
        }
        if !(self.delta >= 0.0) {
            return invalid("delta must be non-negative");
        }
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if !(self.replay_ratio >= 0.0) {
            return invalid("replay ratio must be non-negative");
        }
        if !(self.lr > 0.0) || !(self.critic_lr_scale > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.reward_scale > 0.0) || !self.reward_scale.is_finite() {
            return invalid("reward_scale must be positive");
        }
        if self.sdn_samples == 0 {
            return invalid("sdn_samples must be at least 1");
        }
        if !(self.sigma > 0.0) {
            return invalid("sigma must be positive");
        }
        if self.replay_capacity < self.k {
            return invalid("replay capacity must hold at least one segment");
        }
        if self.kl_penalty.is_some() {
            return Err(AcerError::Unimplemented("KL penalty in place of the trust region".into()));
        }
        Ok(())
    }
}
