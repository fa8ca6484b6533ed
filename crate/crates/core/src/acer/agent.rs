use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::approximator::{clip_global_norm, sgd_apply, soft_update, Approximator, Backend, ParamVector, RmsProp};
use crate::env::{Action, ActionSpace, EnvSpec};
use crate::error::{invalid, AcerError, Result};
use crate::policy::{CategoricalHead, GaussianHead, PolicyHead};

use super::sdn::SdnCritic;
use super::{AblationSwitch, AcerConfig, Algorithm, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Critic {
    /// One action value per discrete action.
    QVector(Approximator),
    /// A state value.
    Value(Approximator),
    Sdn(SdnCritic),
    /// Separate state-value and action-value networks; the latter takes the
    /// concatenated observation and action.
    Split { v: Approximator, q: Approximator },
}

impl Critic {
    pub fn nets(&self) -> Vec<&Approximator> {
        match self {
            Critic::QVector(n) | Critic::Value(n) => vec![n],
            Critic::Sdn(s) => vec![&s.v_net, &s.a_net],
            Critic::Split { v, q } => vec![v, q],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Approximator> {
        match self {
            Critic::QVector(n) | Critic::Value(n) => vec![n],
            Critic::Sdn(s) => vec![&mut s.v_net, &mut s.a_net],
            Critic::Split { v, q } => vec![v, q],
        }
    }

    pub fn zero_gradients(&self) -> Vec<ParamVector> {
        self.nets().into_iter().map(|n| ParamVector::zeros_like(&n.params)).collect()
    }
}

/// Policy, average policy and critic networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: Approximator,
    pub average_policy: Approximator,
    pub critic: Critic,
    pub action_space: ActionSpace,
    /// Standard deviation of the Gaussian policy; unused for discrete actions.
    pub sigma: f64,
}

impl Agent {
    /// Builds the networks an algorithm needs for an environment.
    ///
    /// Default backends: tabular for discrete tasks; a linear policy and a
    /// 32-unit tanh critic for continuous ones.
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, algo: Algorithm, cfg: &AcerConfig, rng: &mut R) -> Result<Agent> {
        let obs = spec.observation_dim;
        let stats = spec.action_space.stats_dim();
        let discrete = spec.action_space.is_discrete();
        let policy_backend = cfg.policy_backend.unwrap_or(if discrete { Backend::Tabular } else { Backend::Linear });
        let critic_backend =
            cfg.critic_backend.unwrap_or(if discrete { Backend::Tabular } else { Backend::Mlp { hidden: 32 } });
        let policy = Approximator::new(policy_backend, obs, stats, rng);
        let average_policy = policy.clone();
        let pair_backend = |rng: &mut R| -> Result<Approximator> {
            if critic_backend == Backend::Tabular {
                return invalid("state-action critics need a linear or mlp backend");
            }
            Ok(Approximator::new(critic_backend, obs + stats, 1, rng))
        };
        let critic = match algo {
            Algorithm::A3c | Algorithm::TrustA3c | Algorithm::Tis | Algorithm::TrustTis => {
                Critic::Value(Approximator::new(critic_backend, obs, 1, rng))
            }
            Algorithm::Ablation(AblationSwitch::NoSdnSplitNets) => {
                if discrete {
                    return invalid("the split-network ablation applies to continuous actions only");
                }
                let v = Approximator::new(critic_backend, obs, 1, rng);
                Critic::Split { v, q: pair_backend(rng)? }
            }
            _ if discrete => Critic::QVector(Approximator::new(critic_backend, obs, stats, rng)),
            _ => {
                let v = Approximator::new(critic_backend, obs, 1, rng);
                Critic::Sdn(SdnCritic::new(v, pair_backend(rng)?, cfg.sdn_samples)?)
            }
        };
        Ok(Agent { policy, average_policy, critic, action_space: spec.action_space, sigma: cfg.sigma })
    }

    fn head_from(&self, net: &Approximator, x: &[f64]) -> Result<PolicyHead> {
        let stats = net.forward(x)?;
        Ok(match self.action_space {
            ActionSpace::Discrete(_) => PolicyHead::Categorical(CategoricalHead::from_logits(stats)?),
            ActionSpace::Continuous(_) => PolicyHead::Gaussian(GaussianHead::new(stats, self.sigma)?),
        })
    }

    pub fn head(&self, x: &[f64]) -> Result<PolicyHead> {
        self.head_from(&self.policy, x)
    }

    pub fn average_head(&self, x: &[f64]) -> Result<PolicyHead> {
        self.head_from(&self.average_policy, x)
    }

    /// Greedy action for discrete policies, the mean for Gaussian ones.
    pub fn eval_action(&self, x: &[f64]) -> Result<Action> {
        Ok(self.head(x)?.mode())
    }

    pub fn zero_gradients(&self) -> AgentGradients {
        AgentGradients { policy: ParamVector::zeros_like(&self.policy.params), critic: self.critic.zero_gradients() }
    }

    /// Named parameter vectors, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &ParamVector)> {
        let mut out = vec![("policy".to_string(), &self.policy.params), ("average".to_string(), &self.average_policy.params)];
        for (i, net) in self.critic.nets().into_iter().enumerate() {
            out.push((format!("critic{i}"), &net.params));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.values.iter().all(|v| v.is_finite()))
    }
}

/// Policy ascent direction and critic descent gradients for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGradients {
    pub policy: ParamVector,
    pub critic: Vec<ParamVector>,
}

impl AgentGradients {
    pub fn norm(&self) -> f64 {
        let sq: f64 = std::iter::once(&self.policy)
            .chain(&self.critic)
            .map(|g| g.values.iter().map(|v| v * v).sum::<f64>())
            .sum();
        sq.sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        let bad = std::iter::once(&self.policy).chain(&self.critic).any(|g| g.values.iter().any(|v| !v.is_finite()));
        if bad {
            return Err(AcerError::NumericFault("non-finite gradient".into()));
        }
        Ok(())
    }
}

/// Parameters and optimiser state shared by all workers.
#[derive(Debug, Clone)]
pub struct SharedState {
    pub agent: Agent,
    rms: Vec<RmsProp>,
    pub updates: u64,
}

pub type SharedAgent = Arc<Mutex<SharedState>>;

impl SharedState {
    pub fn new(agent: Agent, cfg: &AcerConfig) -> Self {
        let rms = match cfg.optimizer {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Rmsprop => std::iter::once(&agent.policy)
                .chain(agent.critic.nets())
                .map(|n| RmsProp::new(n.params.len(), cfg.rmsprop_decay, cfg.rmsprop_epsilon))
                .collect(),
        };
        SharedState { agent, rms, updates: 0 }
    }

    pub fn into_shared(self) -> SharedAgent {
        Arc::new(Mutex::new(self))
    }

    /// Clips, steps every network, then moves the average policy toward the
    /// new policy. Nothing is modified when the gradients are not finite.
    /// Returns the gradient norm before clipping.
    pub fn apply(&mut self, mut grads: AgentGradients, cfg: &AcerConfig) -> Result<f64> {
        grads.check_finite()?;
        grads.policy.scale(-1.0);
        let norm = match cfg.grad_clip {
            Some(max) => {
                let mut all: Vec<&mut ParamVector> =
                    std::iter::once(&mut grads.policy).chain(grads.critic.iter_mut()).collect();
                clip_global_norm(&mut all, max)
            }
            None => grads.norm(),
        };
        let critic_lr = cfg.lr * cfg.critic_lr_scale;
        let agent = &mut self.agent;
        let nets = std::iter::once((&mut agent.policy, cfg.lr)).chain(agent.critic.nets_mut().into_iter().map(|n| (n, critic_lr)));
        let grads_iter = std::iter::once(&grads.policy).chain(grads.critic.iter());
        for (i, ((net, lr), g)) in nets.zip(grads_iter).enumerate() {
            match self.rms.get_mut(i) {
                Some(rms) => rms.apply(&mut net.params, g, lr)?,
                None => sgd_apply(&mut net.params, g, lr)?,
            }
        }
        soft_update(&mut agent.average_policy.params, &agent.policy.params, cfg.alpha)?;
        self.updates += 1;
        Ok(norm)
    }
}
