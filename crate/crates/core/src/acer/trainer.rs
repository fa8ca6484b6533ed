use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{rollout, EnvRunner, EnvSpec, Trajectory};
use crate::error::{invalid, Result};
use crate::replay::{Learner, UpdateDiagnostics};

use super::agent::{Agent, SharedAgent, SharedState};
use super::update::{
    a3c_gradients, continuous_acer_gradients, discrete_acer_gradients, tis_gradients, UpdateOutput, UpdateRule,
};
use super::{AblationSwitch, AcerConfig, Algorithm};

/// A worker: acts and computes gradients on a local copy of the shared
/// agent, then applies them to the shared parameters under the lock.
pub struct Trainer {
    shared: SharedAgent,
    local: Agent,
    cfg: AcerConfig,
    algo: Algorithm,
    rule: UpdateRule,
    on_policy_trains: bool,
}

impl Trainer {
    /// A worker attached to existing shared state.
    pub fn new(shared: SharedAgent, cfg: AcerConfig, algo: Algorithm, gamma: f64) -> Result<Self> {
        cfg.validate()?;
        let local = shared.lock().expect("shared agent lock poisoned").agent.clone();
        let discrete = local.action_space.is_discrete();
        if discrete && algo == Algorithm::Ablation(AblationSwitch::NoSdnSplitNets) {
            return invalid("the split-network ablation applies to continuous actions only");
        }
        let on_policy_trains = match algo {
            Algorithm::A3c | Algorithm::TrustA3c => true,
            _ => cfg.on_policy_trains.unwrap_or(discrete),
        };
        let rule = UpdateRule::new(&cfg, algo, cfg.gamma.unwrap_or(gamma));
        Ok(Trainer { shared, local, cfg, algo, rule, on_policy_trains })
    }

    /// Fresh agent and shared state for an environment, plus one worker.
    pub fn build<R: Rng + ?Sized>(spec: &EnvSpec, algo: Algorithm, cfg: &AcerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let agent = Agent::new(spec, algo, cfg, rng)?;
        let shared = SharedState::new(agent, cfg).into_shared();
        Trainer::new(shared, cfg.clone(), algo, spec.gamma)
    }

    pub fn shared(&self) -> &SharedAgent {
        &self.shared
    }

    pub fn config(&self) -> &AcerConfig {
        &self.cfg
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algo
    }

    pub fn rule(&self) -> &UpdateRule {
        &self.rule
    }

    /// Copy of the current shared agent.
    pub fn snapshot(&self) -> Agent {
        self.shared.lock().expect("shared agent lock poisoned").agent.clone()
    }

    fn sync(&mut self) {
        let guard = self.shared.lock().expect("shared agent lock poisoned");
        self.local.clone_from(&guard.agent);
    }

    /// Gradients for `traj` on the local copy, without applying them.
    pub fn gradients(&self, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Result<UpdateOutput> {
        match self.algo {
            Algorithm::A3c | Algorithm::TrustA3c => a3c_gradients(&self.local, traj, &self.rule),
            Algorithm::Tis | Algorithm::TrustTis => tis_gradients(&self.local, traj, &self.rule),
            _ if self.local.action_space.is_discrete() => discrete_acer_gradients(&self.local, traj, &self.rule),
            _ => continuous_acer_gradients(&self.local, traj, &self.rule, rng),
        }
    }
}

impl Learner for Trainer {
    fn collect(&mut self, runner: &mut EnvRunner, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        self.sync();
        let local = &self.local;
        rollout(runner, |x| local.head(x), self.cfg.k, rng)
    }

    fn learn(&mut self, traj: &Trajectory, _on_policy: bool, rng: &mut ChaCha8Rng) -> Result<UpdateDiagnostics> {
        self.sync();
        let out = if self.cfg.reward_scale == 1.0 {
            self.gradients(traj, rng)?
        } else {
            let mut scaled = traj.clone();
            scaled.transitions.iter_mut().for_each(|t| t.reward *= self.cfg.reward_scale);
            self.gradients(&scaled, rng)?
        };
        let mut diagnostics = out.diagnostics;
        let mut guard = self.shared.lock().expect("shared agent lock poisoned");
        diagnostics.grad_norm = guard.apply(out.gradients, &self.cfg)?;
        Ok(diagnostics)
    }

    fn on_policy_trains(&self) -> bool {
        self.on_policy_trains
    }

    fn uses_replay(&self) -> bool {
        self.algo.uses_replay()
    }
}

fn one_update(
    shared: &SharedAgent,
    traj: &Trajectory,
    cfg: &AcerConfig,
    algo: Algorithm,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateDiagnostics> {
    let mut trainer = Trainer::new(shared.clone(), cfg.clone(), algo, gamma)?;
    trainer.learn(traj, false, rng)
}

/// One discrete ACER update of the shared agent from `traj`.
pub fn acer_discrete_update(shared: &SharedAgent, traj: &Trajectory, cfg: &AcerConfig, gamma: f64) -> Result<UpdateDiagnostics> {
    use rand::SeedableRng;
    one_update(shared, traj, cfg, Algorithm::Acer, gamma, &mut ChaCha8Rng::seed_from_u64(0))
}

/// One continuous ACER update of the shared agent from `traj`.
pub fn acer_continuous_update(
    shared: &SharedAgent,
    traj: &Trajectory,
    cfg: &AcerConfig,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateDiagnostics> {
    one_update(shared, traj, cfg, Algorithm::Acer, gamma, rng)
}

/// One A3C update, or Trust-A3C when `trust_region` is set.
pub fn a3c_baseline_update(
    shared: &SharedAgent,
    traj: &Trajectory,
    cfg: &AcerConfig,
    gamma: f64,
    trust_region: bool,
) -> Result<UpdateDiagnostics> {
    use rand::SeedableRng;
    let algo = if trust_region { Algorithm::TrustA3c } else { Algorithm::A3c };
    one_update(shared, traj, cfg, algo, gamma, &mut ChaCha8Rng::seed_from_u64(0))
}

/// One TIS update, or Trust-TIS when `trust_region` is set.
pub fn tis_baseline_update(
    shared: &SharedAgent,
    traj: &Trajectory,
    cfg: &AcerConfig,
    gamma: f64,
    trust_region: bool,
) -> Result<UpdateDiagnostics> {
    use rand::SeedableRng;
    let algo = if trust_region { Algorithm::TrustTis } else { Algorithm::Tis };
    one_update(shared, traj, cfg, algo, gamma, &mut ChaCha8Rng::seed_from_u64(0))
}

/// A fresh ACER trainer with one component swapped out.
pub fn ablation_variant<R: Rng + ?Sized>(
    spec: &EnvSpec,
    cfg: &AcerConfig,
    switch: AblationSwitch,
    rng: &mut R,
) -> Result<Trainer> {
    Trainer::build(spec, Algorithm::Ablation(switch), cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acer::{Critic, OptimizerKind};
    use crate::approximator::Backend;
    use crate::env::{make_env, Action, BehaviorPolicy, Transition};
    use crate::replay::{master_step, ReplayMemory, ReplaySchedule};
    use rand::SeedableRng;

    fn point_spec() -> EnvSpec {
        make_env("pointmass-1", 0).unwrap().spec().clone()
    }

    fn continuous_traj(agent: &Agent, rng: &mut ChaCha8Rng, rewards: bool) -> Trajectory {
        let transitions = (0..4)
            .map(|i| {
                let x = vec![0.3 * i as f64 - 0.5, 0.1];
                let head = agent.head(&x).unwrap();
                Transition {
                    state: x,
                    action: head.sample(rng),
                    reward: if rewards { rng.gen_range(-1.0..0.0) } else { 0.0 },
                    behavior_policy: head.behavior(),
                    terminal: false,
                }
            })
            .collect();
        Trajectory::new(transitions, Some(vec![0.4, 0.0])).unwrap()
    }

    #[test]
    fn continuous_zero_signal_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AcerConfig { critic_backend: Some(Backend::Linear), ..AcerConfig::default() };
        let trainer = Trainer::build(&point_spec(), Algorithm::Acer, &cfg, &mut rng).unwrap();
        let traj = continuous_traj(&trainer.local, &mut rng, false);
        let out = trainer.gradients(&traj, &mut rng).unwrap();
        assert!(out.gradients.policy.values.iter().all(|v| *v == 0.0));
        assert!(out.gradients.critic.iter().all(|g| g.values.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn continuous_policy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AcerConfig { trust_region: false, ..AcerConfig::default() };
        let mut trainer = Trainer::build(&point_spec(), Algorithm::Acer, &cfg, &mut rng).unwrap();
        trainer.local.policy.params.values.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let traj = continuous_traj(&trainer.local, &mut rng, true);
        trainer.local.policy.params.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        let out = trainer.gradients(&traj, &mut rng).unwrap();
        let surrogate = |agent: &Agent| -> f64 {
            out.score_terms
                .iter()
                .map(|t| t.weight * agent.head(&traj.transitions[t.step].state).unwrap().log_prob(&t.action).unwrap())
                .sum()
        };
        let h = 1e-5;
        for i in 0..trainer.local.policy.params.len() {
            let mut plus = trainer.local.clone();
            plus.policy.params.values[i] += h;
            let mut minus = trainer.local.clone();
            minus.policy.params.values[i] -= h;
            let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * h);
            let an = out.gradients.policy.values[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) < 1e-6, "{fd} vs {an}");
        }
    }

    #[test]
    fn every_ablation_produces_finite_updates() {
        for switch in AblationSwitch::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut trainer = ablation_variant(&point_spec(), &AcerConfig::default(), switch, &mut rng).unwrap();
            let traj = continuous_traj(&trainer.local, &mut rng, true);
            let d = trainer.learn(&traj, false, &mut rng).unwrap();
            assert!(d.is_finite(), "{switch:?}");
        }
        let chain = make_env("chain-3", 0).unwrap().spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(ablation_variant(&chain, &AcerConfig::default(), AblationSwitch::NoSdnSplitNets, &mut rng).is_err());
    }

    #[test]
    fn split_ablation_uses_split_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = ablation_variant(&point_spec(), &AcerConfig::default(), AblationSwitch::NoSdnSplitNets, &mut rng).unwrap();
        assert!(matches!(t.snapshot().critic, Critic::Split { .. }));
        let t = Trainer::build(&point_spec(), Algorithm::Acer, &AcerConfig::default(), &mut rng).unwrap();
        assert!(matches!(t.snapshot().critic, Critic::Sdn(_)));
    }

    #[test]
    fn on_policy_defaults_by_action_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AcerConfig::default();
        let chain = make_env("chain-3", 0).unwrap().spec().clone();
        assert!(Trainer::build(&chain, Algorithm::Acer, &cfg, &mut rng).unwrap().on_policy_trains());
        assert!(!Trainer::build(&point_spec(), Algorithm::Acer, &cfg, &mut rng).unwrap().on_policy_trains());
        assert!(Trainer::build(&point_spec(), Algorithm::A3c, &cfg, &mut rng).unwrap().on_policy_trains());
        assert!(!Trainer::build(&point_spec(), Algorithm::A3c, &cfg, &mut rng).unwrap().uses_replay());
    }

    #[test]
    fn kl_penalty_is_unimplemented() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AcerConfig { kl_penalty: Some(0.1), ..AcerConfig::default() };
        let err = Trainer::build(&point_spec(), Algorithm::Acer, &cfg, &mut rng).err().unwrap();
        assert!(matches!(err, crate::error::AcerError::Unimplemented(_)));
    }

    #[test]
    fn corrupt_behavior_is_rejected_without_touching_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chain = make_env("chain-3", 0).unwrap().spec().clone();
        let mut trainer = Trainer::build(&chain, Algorithm::Acer, &AcerConfig::default(), &mut rng).unwrap();
        let before = trainer.snapshot();
        let traj = Trajectory::new(
            vec![Transition {
                state: vec![1.0, 0.0, 0.0],
                action: Action::Discrete(1),
                reward: 1.0,
                behavior_policy: BehaviorPolicy::Categorical { probs: vec![1.0, 0.0] },
                terminal: true,
            }],
            None,
        )
        .unwrap();
        let err = trainer.learn(&traj, false, &mut rng).unwrap_err();
        assert!(matches!(err, crate::error::AcerError::CorruptedData(_)));
        assert_eq!(trainer.snapshot(), before);
    }

    fn run_chain(seed: u64, ratio: f64, steps: usize) -> (Agent, u64, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = make_env("chain-5", seed).unwrap();
        let cfg = AcerConfig { k: 20, optimizer: OptimizerKind::Rmsprop, ..AcerConfig::default() };
        let mut trainer = Trainer::build(env.spec(), Algorithm::Acer, &cfg, &mut rng).unwrap();
        let mut runner = crate::env::EnvRunner::new(env);
        let mut memory = ReplayMemory::new(cfg.replay_capacity);
        let mut schedule = ReplaySchedule::new(ratio, ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
        let mut replays = 0;
        for _ in 0..steps {
            let report = master_step(&mut trainer, &mut runner, &mut memory, &mut schedule, &mut rng).unwrap();
            assert!(report.on_policy.is_some());
            replays += report.replay.len();
        }
        (trainer.snapshot(), memory.reads(), replays)
    }

    #[test]
    fn single_worker_runs_are_bit_identical() {
        assert_eq!(run_chain(3, 4.0, 50).0, run_chain(3, 4.0, 50).0);
    }

    #[test]
    fn zero_ratio_never_reads_memory() {
        let (_, reads, replays) = run_chain(4, 0.0, 200);
        assert_eq!((reads, replays), (0, 0));
    }

    #[test]
    fn replay_calls_average_the_ratio() {
        let (_, reads, replays) = run_chain(5, 4.0, 1000);
        assert_eq!(reads as usize, replays);
        let mean = replays as f64 / 1000.0;
        assert!((mean - 4.0).abs() <= 3.0 * (4.0f64 / 1000.0).sqrt(), "{mean}");
    }
}
