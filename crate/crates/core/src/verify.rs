//! Oracle and property suites with measured tolerances.
//!
//! Every check reports the worst value it measured next to the bound it was
//! held to. The suites are deterministic: each check seeds its own generator.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acer::{
    continuous_acer_gradients, discrete_acer_gradients, discrete_policy_gradient, v_target, AcerConfig, Agent,
    Algorithm, Critic, SdnCritic, UpdateOutput, UpdateRule,
};
use crate::approximator::{Approximator, Backend, ParamVector};
use crate::env::{
    make_env, one_hot, random_simplex, Action, BehaviorPolicy, TabularMDP, Trajectory, Transition,
};
use crate::error::{AcerError, Result};
use crate::policy::{grad_kl_wrt_second_stats, kl, CategoricalHead, GaussianHead, PolicyHead};
use crate::replay::ReplaySchedule;
use crate::returns::{
    apply_operator_b, apply_retrace_operator, bellman_operator, importance_sampling_operator, required_horizon,
    sup_distance, tabular_q_pi, PolicyTable, QTable,
};
use crate::trust_region::{project, project_numeric_oracle, TrustRegionProblem};

/// Tail bound used when truncating the operator sums.
const HORIZON_TOL: f64 = 1e-13;
/// Finite-difference step for every gradient check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Operators,
    TrustRegion,
    Gradients,
    Identities,
    All,
}

impl FromStr for Suite {
    type Err = AcerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "operators" => Ok(Suite::Operators),
            "trust_region" | "trust-region" => Ok(Suite::TrustRegion),
            "gradients" => Ok(Suite::Gradients),
            "identities" => Ok(Suite::Identities),
            "all" => Ok(Suite::All),
            other => Err(AcerError::InvalidArgument(format!(
                "unknown suite '{other}' (expected operators, trust_region, gradients, identities or all)"
            ))),
        }
    }
}

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {:.3e} (bound {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Operators | Suite::All) {
        checks.push(operator_equivalence(50, 1)?);
        checks.extend(contraction(200, 2)?);
        checks.extend(operator_limits(50, 1)?);
    }
    if matches!(suite, Suite::TrustRegion | Suite::All) {
        checks.extend(trust_region_oracle(1000, 32, 3)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradient_checks(4)?);
    }
    if matches!(suite, Suite::Identities | Suite::All) {
        checks.push(decomposition_unbiasedness(100, 5)?);
        checks.push(v_target_identity(100, 6)?);
        checks.push(sdn_consistency(10, 1_000_000, 7)?);
        checks.extend(poisson_schedule(4.0, 100_000, 8)?);
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// A random `(MDP, pi, mu, Q, c)` instance with at most 5 states and 3 actions.
#[derive(Debug, Clone)]
pub struct OperatorCase {
    pub mdp: TabularMDP,
    pub pi: PolicyTable,
    pub mu: PolicyTable,
    pub q: QTable,
    pub c: f64,
}

const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
const TRACE_CAPS: [f64; 6] = [0.0, 0.3, 0.7, 1.0, 2.0, 5.0];

pub fn operator_cases(n: usize, seed: u64) -> Vec<OperatorCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let ns = rng.gen_range(1..=5);
            let na = rng.gen_range(1..=3);
            let mdp = TabularMDP::random(ns, na, GAMMAS[i % 3], &mut rng);
            let pi = (0..ns).map(|_| random_simplex(na, &mut rng)).collect();
            let mu = (0..ns).map(|_| random_simplex(na, &mut rng)).collect();
            let q = (0..ns).map(|_| (0..na).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let c = TRACE_CAPS[rng.gen_range(0..TRACE_CAPS.len())];
            OperatorCase { mdp, pi, mu, q, c }
        })
        .collect()
}

fn apply_b(case: &OperatorCase, q: &QTable, c: f64) -> Result<QTable> {
    let h = required_horizon(&case.mdp, &case.pi, &case.mu, q, c, HORIZON_TOL);
    Ok(apply_operator_b(&case.mdp, &case.pi, &case.mu, q, c, h)?.q_table)
}

/// The recursive truncation operator and the Retrace operator agree pointwise.
pub fn operator_equivalence(n: usize, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for case in operator_cases(n, seed) {
        let h = required_horizon(&case.mdp, &case.pi, &case.mu, &case.q, case.c, HORIZON_TOL);
        let b = apply_operator_b(&case.mdp, &case.pi, &case.mu, &case.q, case.c, h)?.q_table;
        let r = apply_retrace_operator(&case.mdp, &case.pi, &case.mu, &case.q, case.c, h)?.q_table;
        worst = worst.max(sup_distance(&b, &r));
    }
    Ok(Check::at_most("operators/b_equals_retrace", worst, 1e-10, format!("over {n} MDPs")))
}

/// `|BQ - Q^pi| <= gamma |Q - Q^pi|` on every case, and iterating `B` reaches `Q^pi`.
pub fn contraction(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_fixed = 0.0f64;
    for case in operator_cases(n, seed) {
        let q_pi = tabular_q_pi(&case.mdp, &case.pi)?;
        let bq = apply_b(&case, &case.q, case.c)?;
        let slack = sup_distance(&bq, &q_pi) - case.mdp.gamma * sup_distance(&case.q, &q_pi);
        worst_slack = worst_slack.max(slack);

        let mut q = bq;
        for _ in 0..100_000 {
            let next = apply_b(&case, &q, case.c)?;
            let step = sup_distance(&next, &q);
            q = next;
            if step <= 1e-13 {
                break;
            }
        }
        worst_fixed = worst_fixed.max(sup_distance(&q, &q_pi));
    }
    Ok(vec![
        Check::at_most("operators/contraction_slack", worst_slack.max(0.0), 1e-8, format!("max over {n} tuples")),
        Check::at_most("operators/iterated_fixed_point", worst_fixed, 1e-8, format!("over {n} tuples")),
    ])
}

/// `c = 0` gives the expected Bellman operator; a huge `c` gives plain importance sampling.
pub fn operator_limits(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut worst_bellman = 0.0f64;
    let mut worst_is = 0.0f64;
    let huge = 1e12;
    for case in operator_cases(n, seed) {
        let b0 = apply_b(&case, &case.q, 0.0)?;
        let t = bellman_operator(&case.mdp, &case.pi, &case.q)?.q_table;
        worst_bellman = worst_bellman.max(sup_distance(&b0, &t));

        let h = required_horizon(&case.mdp, &case.pi, &case.mu, &case.q, huge, HORIZON_TOL);
        let b_inf = apply_operator_b(&case.mdp, &case.pi, &case.mu, &case.q, huge, h)?.q_table;
        let is = importance_sampling_operator(&case.mdp, &case.pi, &case.mu, h)?.q_table;
        worst_is = worst_is.max(sup_distance(&b_inf, &is));
    }
    Ok(vec![
        Check::at_most("operators/c0_is_bellman", worst_bellman, 1e-10, format!("over {n} MDPs")),
        Check::at_most("operators/c_huge_is_importance_sampling", worst_is, 1e-8, format!("over {n} MDPs")),
    ])
}

// ---------------------------------------------------------------------------
// Trust region
// ---------------------------------------------------------------------------

/// Closed-form projection against the bisection oracle on random instances.
pub fn trust_region_oracle(n: usize, max_dim: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = 0.0f64;
    let mut worst_violation = f64::NEG_INFINITY;
    let mut inactive = 0;
    let mut inactive_changed = 0;
    for i in 0..n {
        let d = rng.gen_range(1..=max_dim);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let g: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = if i % 50 == 0 {
            vec![0.0; d]
        } else {
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let delta = rng.gen_range(0.0..2.0);
        let problem = TrustRegionProblem::new(g.clone(), k.clone(), delta)?;
        let z = project(&problem)?;
        let oracle = project_numeric_oracle(&problem, 1e-13);
        let gap = z.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_gap = worst_gap.max(gap);
        let kz: f64 = k.iter().zip(&z).map(|(a, b)| a * b).sum();
        worst_violation = worst_violation.max(kz - delta);
        let kg: f64 = k.iter().zip(&g).map(|(a, b)| a * b).sum();
        if kg <= delta {
            inactive += 1;
            if z != g {
                inactive_changed += 1;
            }
        }
    }
    Ok(vec![
        Check::at_most("trust_region/oracle_gap", worst_gap, 1e-8, format!("{n} instances up to dimension {max_dim}")),
        Check::at_most("trust_region/feasibility", worst_violation.max(0.0), 1e-10, "max k.z - delta"),
        Check::at_most(
            "trust_region/inactive_unchanged",
            inactive_changed as f64,
            0.0,
            format!("{inactive} inactive instances"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst error between `analytic` and central differences of `f` around `x`.
fn fd_vector(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let plus = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let minus = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    worst
}

/// Worst error between a parameter gradient and central differences of `f`
/// as one network's parameters of `agent` are perturbed.
fn fd_agent(
    agent: &Agent,
    analytic: &ParamVector,
    select: fn(&mut Agent) -> &mut Approximator,
    f: impl Fn(&Agent) -> f64,
) -> f64 {
    let mut probe = agent.clone();
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = select(&mut probe).params.values[i];
        select(&mut probe).params.values[i] = orig + FD_STEP;
        let plus = f(&probe);
        select(&mut probe).params.values[i] = orig - FD_STEP;
        let minus = f(&probe);
        select(&mut probe).params.values[i] = orig;
        worst = worst.max(rel_err(analytic.values[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    worst
}

fn policy_net(agent: &mut Agent) -> &mut Approximator {
    &mut agent.policy
}

fn first_critic_net(agent: &mut Agent) -> &mut Approximator {
    agent.critic.nets_mut().remove(0)
}

fn second_critic_net(agent: &mut Agent) -> &mut Approximator {
    agent.critic.nets_mut().remove(1)
}

fn grad_check(name: &str, worst: f64, detail: &str) -> Check {
    Check::at_most(format!("gradients/{name}"), worst, 1e-4, detail.to_string())
}

/// Surrogate `sum weight * log pi(action)` whose gradient is the policy gradient when the weights are frozen.
fn score_surrogate(agent: &Agent, traj: &Trajectory, out: &UpdateOutput) -> f64 {
    out.score_terms
        .iter()
        .map(|t| {
            agent
                .head(&traj.transitions[t.step].state)
                .and_then(|h| h.log_prob(&t.action))
                .map_or(f64::NAN, |lp| t.weight * lp)
        })
        .sum()
}

fn randomize(agent: &mut Agent, rng: &mut ChaCha8Rng, spread: f64) {
    for net in std::iter::once(&mut agent.policy).chain(std::iter::once(&mut agent.average_policy)) {
        net.params.values.iter_mut().for_each(|v| *v = rng.gen_range(-spread..spread));
    }
    for net in agent.critic.nets_mut() {
        net.params.values.iter_mut().for_each(|v| *v = rng.gen_range(-spread..spread));
    }
}

/// Central-difference checks of every analytic gradient.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let (mut lp, mut kl_worst, mut ent) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.gen_range(2..=6);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let head = CategoricalHead::from_logits(logits.clone())?;
        let a = rng.gen_range(0..n);
        lp = lp.max(fd_vector(&logits, &head.grad_log_prob(a)?, |l| {
            CategoricalHead::from_logits(l.to_vec()).and_then(|h| h.log_prob(a)).unwrap_or(f64::NAN)
        }));
        ent = ent.max(fd_vector(&logits, &head.grad_entropy(), |l| {
            CategoricalHead::from_logits(l.to_vec()).map_or(f64::NAN, |h| h.entropy())
        }));
        let avg = PolicyHead::Categorical(CategoricalHead::from_logits(
            (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )?);
        let grad = grad_kl_wrt_second_stats(&avg, &PolicyHead::Categorical(head))?;
        kl_worst = kl_worst.max(fd_vector(&logits, &grad, |l| {
            CategoricalHead::from_logits(l.to_vec())
                .and_then(|h| kl(&avg, &PolicyHead::Categorical(h)))
                .unwrap_or(f64::NAN)
        }));
    }
    checks.push(grad_check("categorical_log_prob", lp, "50 heads"));
    checks.push(grad_check("categorical_entropy", ent, "50 heads"));
    checks.push(grad_check("categorical_kl", kl_worst, "50 heads"));

    let (mut lp, mut kl_worst) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.gen_range(1..=4);
        let sigma = rng.gen_range(0.2..1.5);
        let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let head = GaussianHead::new(mean.clone(), sigma)?;
        let x = head.sample(&mut rng);
        lp = lp.max(fd_vector(&mean, &head.grad_log_prob(&x)?, |m| {
            GaussianHead::new(m.to_vec(), sigma).and_then(|h| h.log_prob(&x)).unwrap_or(f64::NAN)
        }));
        let avg = PolicyHead::Gaussian(GaussianHead::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), sigma)?);
        let grad = grad_kl_wrt_second_stats(&avg, &PolicyHead::Gaussian(head))?;
        kl_worst = kl_worst.max(fd_vector(&mean, &grad, |m| {
            GaussianHead::new(m.to_vec(), sigma)
                .and_then(|h| kl(&avg, &PolicyHead::Gaussian(h)))
                .unwrap_or(f64::NAN)
        }));
    }
    checks.push(grad_check("gaussian_log_prob", lp, "50 heads"));
    checks.push(grad_check("gaussian_kl", kl_worst, "50 heads"));

    for backend in [Backend::Tabular, Backend::Linear, Backend::Mlp { hidden: 8 }] {
        let (mut params, mut inputs) = (0.0f64, 0.0f64);
        for _ in 0..20 {
            let (din, dout) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
            let mut net = Approximator::new(backend, din, dout, &mut rng);
            net.params.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let x: Vec<f64> = match backend {
                Backend::Tabular => one_hot(rng.gen_range(0..din), din),
                _ => (0..din).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let up: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            params = params.max(net.fd_check(&x, &up, FD_STEP)?);
            if backend != Backend::Tabular {
                let analytic = net.input_gradient(&x, &up)?;
                inputs = inputs.max(fd_vector(&x, &analytic, |xp| {
                    net.forward(xp).map_or(f64::NAN, |y| y.iter().zip(&up).map(|(a, b)| a * b).sum())
                }));
            }
        }
        let label = match backend {
            Backend::Tabular => "tabular",
            Backend::Linear => "linear",
            Backend::Mlp { .. } => "mlp",
        };
        checks.push(grad_check(&format!("{label}_backward"), params, "20 networks"));
        if backend != Backend::Tabular {
            checks.push(grad_check(&format!("{label}_input_gradient"), inputs, "20 networks"));
        }
    }

    checks.extend(discrete_composite(&mut rng)?);
    checks.extend(continuous_composite(&mut rng)?);
    Ok(checks)
}

fn discrete_composite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let spec = make_env("chain-4", 0)?.spec().clone();
    let cfg = AcerConfig {
        policy_backend: Some(Backend::Mlp { hidden: 6 }),
        critic_backend: Some(Backend::Mlp { hidden: 6 }),
        delta: 1e9,
        ..AcerConfig::default()
    };
    let (mut policy, mut critic) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let mut agent = Agent::new(&spec, Algorithm::Acer, &cfg, rng)?;
        randomize(&mut agent, rng, 1.0);
        let transitions = (0..5)
            .map(|_| {
                let x = one_hot(rng.gen_range(0..4), 4);
                let probs = random_simplex(2, rng);
                Transition {
                    state: x,
                    action: Action::Discrete(rng.gen_range(0..2)),
                    reward: rng.gen_range(-1.0..1.0),
                    behavior_policy: BehaviorPolicy::Categorical { probs },
                    terminal: false,
                }
            })
            .collect();
        let traj = Trajectory::new(transitions, Some(one_hot(0, 4)))?;
        let rule = UpdateRule::new(&cfg, Algorithm::Acer, spec.gamma);
        let out = discrete_acer_gradients(&agent, &traj, &rule)?;
        policy = policy.max(fd_agent(&agent, &out.gradients.policy, policy_net, |a| {
            score_surrogate(a, &traj, &out)
        }));
        let loss = |a: &Agent| -> f64 {
            let Critic::QVector(net) = &a.critic else { return f64::NAN };
            traj.transitions
                .iter()
                .zip(&out.q_ret)
                .map(|(t, target)| {
                    let q = net.forward(&t.state).map_or(f64::NAN, |q| q[t.action.index().unwrap_or(0)]);
                    0.5 * (target - q).powi(2)
                })
                .sum()
        };
        critic = critic.max(fd_agent(&agent, &out.gradients.critic[0], first_critic_net, loss));
    }
    Ok(vec![
        grad_check("discrete_acer_policy", policy, "5 frozen batches, mlp policy, inactive constraint"),
        grad_check("discrete_acer_critic", critic, "5 frozen batches, mlp critic"),
    ])
}

fn continuous_composite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let spec = make_env("pointmass-2", 0)?.spec().clone();
    let cfg = AcerConfig {
        policy_backend: Some(Backend::Mlp { hidden: 6 }),
        critic_backend: Some(Backend::Mlp { hidden: 6 }),
        delta: 1e9,
        ..AcerConfig::default()
    };
    let (mut policy, mut sdn) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let mut agent = Agent::new(&spec, Algorithm::Acer, &cfg, rng)?;
        randomize(&mut agent, rng, 0.5);
        let behavior = {
            let mut b = agent.clone();
            randomize(&mut b, rng, 0.5);
            b
        };
        let transitions = (0..5)
            .map(|_| -> Result<Transition> {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let head = behavior.head(&x)?;
                Ok(Transition {
                    action: head.sample(rng),
                    behavior_policy: head.behavior(),
                    state: x,
                    reward: rng.gen_range(-1.0..0.0),
                    terminal: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let traj = Trajectory::new(transitions, Some(vec![0.1, -0.2, 0.0, 0.3]))?;
        let rule = UpdateRule::new(&cfg, Algorithm::Acer, spec.gamma);
        let out = continuous_acer_gradients(&agent, &traj, &rule, rng)?;
        policy = policy.max(fd_agent(&agent, &out.gradients.policy, policy_net, |a| {
            score_surrogate(a, &traj, &out)
        }));

        // Stochastic dueling output with frozen baseline samples.
        let Critic::Sdn(critic) = &agent.critic else { unreachable!("continuous ACER uses a dueling critic") };
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = GaussianHead::new(vec![0.1, -0.3], 0.5)?;
        let a = head.sample(rng);
        let samples: Vec<Vec<f64>> = (0..critic.n_samples).map(|_| head.sample(rng)).collect();
        let mut gv = ParamVector::zeros_like(&critic.v_net.params);
        let mut ga = ParamVector::zeros_like(&critic.a_net.params);
        critic.backward_q_tilde(&x, &a, &samples, 1.0, &mut gv, &mut ga)?;
        let q_tilde = |ag: &Agent| -> f64 {
            match &ag.critic {
                Critic::Sdn(c) => c.q_tilde_with(&x, &a, &samples).unwrap_or(f64::NAN),
                _ => f64::NAN,
            }
        };
        sdn = sdn.max(fd_agent(&agent, &gv, first_critic_net, q_tilde));
        sdn = sdn.max(fd_agent(&agent, &ga, second_critic_net, q_tilde));
    }
    Ok(vec![
        grad_check("continuous_acer_policy", policy, "5 frozen batches, mlp policy, inactive constraint"),
        grad_check("sdn_backward", sdn, "5 critics with frozen baseline samples"),
    ])
}

// ---------------------------------------------------------------------------
// Identities
// ---------------------------------------------------------------------------

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Expected truncated-plus-correction gradient under `mu` equals the plain
/// importance-weighted gradient, by exhaustive summation over actions.
pub fn decomposition_unbiasedness(n: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let na = rng.gen_range(2..=6);
        let head = CategoricalHead::from_logits(random_logits(&mut rng, na))?;
        let mu = random_simplex(na, &mut rng);
        let q: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pi = head.probs().to_vec();
        let v: f64 = pi.iter().zip(&q).map(|(p, q)| p * q).sum();
        let mut plain = vec![0.0; na];
        for a in 0..na {
            let rho = pi[a] / mu[a];
            for (j, s) in head.grad_log_prob(a)?.into_iter().enumerate() {
                plain[j] += mu[a] * rho * (q[a] - v) * s;
            }
        }
        for c in [0.5, 1.0, 5.0, 100.0] {
            let mut decomposed = vec![0.0; na];
            for a in 0..na {
                let g = discrete_policy_gradient(&head, &mu, a, q[a], &q, c, false)?;
                decomposed.iter_mut().zip(g).for_each(|(d, g)| *d += mu[a] * g);
            }
            let gap = decomposed.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(gap);
        }
    }
    Ok(Check::at_most("identities/truncation_unbiased", worst, 1e-12, format!("{n} bandits, c in {{0.5, 1, 5, 100}}")))
}

/// `E_mu[V_target] = E_mu[min(1, rho) Q_ret] + E_pi[[1 - 1/rho]_+ Q]` by exhaustive summation.
pub fn v_target_identity(n: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let na = rng.gen_range(2..=6);
        let pi = random_simplex(na, &mut rng);
        let mu = random_simplex(na, &mut rng);
        let q: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q_ret: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: f64 = pi.iter().zip(&q).map(|(p, q)| p * q).sum();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for a in 0..na {
            let rho = pi[a] / mu[a];
            lhs += mu[a] * v_target(q_ret[a], q[a], v, rho);
            rhs += mu[a] * rho.min(1.0) * q_ret[a] + pi[a] * (1.0 - 1.0 / rho).max(0.0) * q[a];
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(Check::at_most("identities/v_target_derivation", worst, 1e-12, format!("{n} instances")))
}

/// Monte Carlo mean of the dueling output under the policy, in standard errors from `V`.
pub fn sdn_consistency(critics: usize, draws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..critics {
        let (obs, act) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
        let mut v_net = Approximator::mlp(obs, 8, 1, &mut rng);
        let mut a_net = Approximator::mlp(obs + act, 8, 1, &mut rng);
        for net in [&mut v_net, &mut a_net] {
            net.params.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let critic = SdnCritic::new(v_net, a_net, rng.gen_range(1..=5))?;
        let mean: Vec<f64> = (0..act).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = GaussianHead::new(mean, rng.gen_range(0.2..1.0))?;
        let x: Vec<f64> = (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let a = head.sample(&mut rng);
            let (q, _) = critic.sample_q_tilde(&head, &x, &a, &mut rng)?;
            sum += q;
            sum_sq += q * q;
        }
        let n = draws as f64;
        let mc = sum / n;
        let var = (sum_sq - n * mc * mc) / (n - 1.0);
        let se = (var / n).sqrt();
        worst = worst.max((mc - critic.value(&x)?).abs() / se);
    }
    Ok(Check::at_most(
        "identities/sdn_consistency",
        worst,
        4.0,
        format!("standard errors, {critics} critics x {draws} draws"),
    ))
}

/// Empirical mean and variance of the replay count against 3-sigma bounds.
pub fn poisson_schedule(ratio: f64, draws: usize, seed: u64) -> Result<Vec<Check>> {
    let mut schedule = ReplaySchedule::new(ratio, ChaCha8Rng::seed_from_u64(seed))?;
    let counts: Vec<f64> = (0..draws).map(|_| schedule.poisson_replay_count() as f64).collect();
    let n = draws as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Poisson central fourth moment is lambda (1 + 3 lambda).
    let mu4 = ratio * (1.0 + 3.0 * ratio);
    let mean_bound = 3.0 * (ratio / n).sqrt();
    let var_bound = 3.0 * ((mu4 - ratio * ratio) / n).sqrt();
    Ok(vec![
        Check::at_most("identities/poisson_mean", (mean - ratio).abs(), mean_bound, format!("mean {mean:.4}")),
        Check::at_most("identities/poisson_variance", (var - ratio).abs(), var_bound, format!("variance {var:.4}")),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("trust_region".parse::<Suite>().unwrap(), Suite::TrustRegion);
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn check_lines_name_the_outcome() {
        let ok = Check::at_most("x", 1e-12, 1e-10, "");
        assert!(ok.passed && ok.to_string().starts_with("PASS x"));
        let bad = Check::at_most("y", 2.0, 1.0, "");
        assert!(!bad.passed && bad.to_string().starts_with("FAIL y"));
    }

    #[test]
    fn small_operator_suites_pass() {
        assert!(operator_equivalence(5, 10).unwrap().passed);
        assert!(operator_limits(5, 10).unwrap().iter().all(|c| c.passed));
    }

    #[test]
    fn gradient_suite_passes() {
        for check in gradient_checks(1).unwrap() {
            assert!(check.passed, "{check}");
        }
    }

    #[test]
    fn poisson_suite_passes() {
        for check in poisson_schedule(4.0, 20_000, 3).unwrap() {
            assert!(check.passed, "{check}");
        }
    }
}
