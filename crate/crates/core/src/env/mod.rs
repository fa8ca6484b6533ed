//! Environments, transitions, and trajectories.
//!
//! Every environment owns its random generator and is reproducible from its
//! seed. Discrete environments emit one-hot observations so that tabular and
//! linear approximators can consume them directly.

pub mod chain;
pub mod grid;
pub mod pointmass;
mod tabular;

pub use chain::{make_chain_env, ChainEnv};
pub use grid::{make_gridworld_env, GridWorldEnv};
pub use pointmass::{make_point_mass_env, riccati_optimal_return, zero_action_return, PointMassEnv};
pub use tabular::{random_simplex, TabularMDP};

use rand::Rng;

use crate::error::{invalid, AcerError, Result};
use crate::policy::PolicyHead;

pub type Observation = Vec<f64>;

/// An action taken in an environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous(v) => Some(v),
        }
    }
}

/// The acting policy as it was when an action was taken.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    Categorical { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, sigma: f64 },
}

impl BehaviorPolicy {
    /// Probability (discrete) or density (continuous) of `action`.
    pub fn likelihood(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (BehaviorPolicy::Categorical { probs }, Action::Discrete(a)) => probs
                .get(*a)
                .copied()
                .ok_or_else(|| AcerError::InvalidArgument(format!("action {a} out of range"))),
            (BehaviorPolicy::Gaussian { mean, sigma }, Action::Continuous(x)) => {
                crate::policy::GaussianHead::new(mean.clone(), *sigma)?
                    .log_prob(x)
                    .map(f64::exp)
            }
            _ => invalid("behavior policy and action kinds differ"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Number of policy statistics: logits for discrete, means for continuous.
    pub fn stats_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub gamma: f64,
    /// Bound on the absolute value of any reward.
    pub r_max: f64,
    pub max_steps: usize,
}

/// Outcome of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    /// The episode reached an absorbing state.
    pub terminal: bool,
    /// The episode hit its step cap; the next state is still bootstrappable.
    pub timeout: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self) -> Observation;
    fn step(&mut self, action: &Action) -> Result<Step>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Observation,
    pub action: Action,
    pub reward: f64,
    pub behavior_policy: BehaviorPolicy,
    pub terminal: bool,
}

/// A contiguous segment of experience.
///
/// When the segment was cut before the episode ended, `bootstrap_state`
/// carries the observation following the last transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub bootstrap_state: Option<Observation>,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, bootstrap_state: Option<Observation>) -> Result<Self> {
        let traj = Trajectory { transitions, bootstrap_state };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return invalid("trajectory has no transitions");
        }
        let n = self.transitions.len();
        for (i, t) in self.transitions.iter().enumerate() {
            if t.terminal && i + 1 != n {
                return invalid("terminal transition must be last");
            }
            if !t.reward.is_finite() {
                return invalid("non-finite reward");
            }
            if let BehaviorPolicy::Categorical { probs } = &t.behavior_policy {
                let sum: f64 = probs.iter().sum();
                if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return invalid("behavior probabilities must be a distribution");
                }
            }
        }
        if self.is_terminal() == self.bootstrap_state.is_some() {
            return invalid("exactly one of terminal flag and bootstrap state must be set");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminal)
    }

    pub fn truncated(&self) -> bool {
        !self.is_terminal()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }
}

/// Look up an environment by registry name: `chain-N`, `grid-WxH`, or `pointmass-D`.
pub fn make_env(name: &str, seed: u64) -> Result<Box<dyn Environment>> {
    let bad = || AcerError::InvalidArgument(format!("unknown environment '{name}'"));
    if let Some(n) = name.strip_prefix("chain-") {
        let n = n.parse().map_err(|_| bad())?;
        return Ok(Box::new(make_chain_env(n, 0.99)?));
    }
    if let Some(dims) = name.strip_prefix("grid-") {
        let (w, h) = dims.split_once('x').ok_or_else(bad)?;
        let w = w.parse().map_err(|_| bad())?;
        let h = h.parse().map_err(|_| bad())?;
        return Ok(Box::new(make_gridworld_env(w, h)?));
    }
    if let Some(d) = name.strip_prefix("pointmass-") {
        let d = d.parse().map_err(|_| bad())?;
        return Ok(Box::new(make_point_mass_env(d, 0.0, seed)?));
    }
    Err(bad())
}

/// Drives one environment across segment boundaries and counts episodes.
pub struct EnvRunner {
    env: Box<dyn Environment>,
    current: Option<Observation>,
    episode_steps: usize,
    episodes_completed: usize,
}

impl EnvRunner {
    pub fn new(env: Box<dyn Environment>) -> Self {
        EnvRunner { env, current: None, episode_steps: 0, episodes_completed: 0 }
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    pub fn episodes_completed(&self) -> usize {
        self.episodes_completed
    }

    pub fn env_mut(&mut self) -> &mut dyn Environment {
        self.env.as_mut()
    }

    fn observation(&mut self) -> Observation {
        match &self.current {
            Some(obs) => obs.clone(),
            None => {
                let obs = self.env.reset();
                self.episode_steps = 0;
                self.current = Some(obs.clone());
                obs
            }
        }
    }
}

/// Act for at most `k` steps, storing the acting policy's statistics with each transition.
pub fn rollout<R, F>(runner: &mut EnvRunner, policy: F, k: usize, rng: &mut R) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> Result<PolicyHead>,
{
    if k == 0 {
        return invalid("rollout length must be at least 1");
    }
    let r_max = runner.spec().r_max;
    let mut transitions = Vec::with_capacity(k);
    let mut state = runner.observation();
    let mut bootstrap = None;
    for i in 0..k {
        let head = policy(&state)?;
        let action = head.sample(rng);
        let step = runner.env.step(&action)?;
        assert!(step.reward.abs() <= r_max, "reward {} exceeds declared bound {r_max}", step.reward);
        runner.episode_steps += 1;
        transitions.push(Transition {
            state,
            action,
            reward: step.reward,
            behavior_policy: head.behavior(),
            terminal: step.terminal,
        });
        if step.terminal {
            runner.current = None;
            runner.episodes_completed += 1;
            break;
        }
        if step.timeout {
            runner.current = None;
            runner.episodes_completed += 1;
            bootstrap = Some(step.observation);
            break;
        }
        state = step.observation;
        runner.current = Some(state.clone());
        if i + 1 == k {
            bootstrap = Some(state.clone());
        }
    }
    Trajectory::new(transitions, bootstrap)
}

/// Play one evaluation episode from a fresh reset, returning the discounted return.
pub fn evaluate_episode<F>(env: &mut dyn Environment, policy: F, gamma: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Action>,
{
    let mut obs = env.reset();
    let mut ret = 0.0;
    let mut discount = 1.0;
    for _ in 0..env.spec().max_steps {
        let step = env.step(&policy(&obs)?)?;
        ret += discount * step.reward;
        discount *= gamma;
        if step.terminal || step.timeout {
            break;
        }
        obs = step.observation;
    }
    Ok(ret)
}

pub(crate) fn one_hot(index: usize, n: usize) -> Observation {
    let mut v = vec![0.0; n];
    if index < n {
        v[index] = 1.0;
    }
    v
}
