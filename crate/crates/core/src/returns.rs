//! Multi-step off-policy return estimators and exact tabular operators.
//!
//! The sample estimators run backwards over a trajectory segment. The exact
//! operators take expectations over every trajectory of a [`TabularMDP`] under
//! the behavior policy, with no sampling, so they serve as ground truth for
//! the estimators and for each other.

use std::fmt::Write as _;

use crate::env::{Action, BehaviorPolicy, TabularMDP, Trajectory};
use crate::error::{invalid, AcerError, Result};
use crate::policy::{importance_ratio, CategoricalHead, GaussianHead, PolicyHead, TruncationMode};

/// Per-step targets produced by a backward pass over a segment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReturnEstimate {
    pub q_ret: Vec<f64>,
    /// Empty unless produced by [`retrace_opc_continuous`].
    pub q_opc: Vec<f64>,
    pub v_est: Vec<f64>,
    /// Trace coefficient applied when passing the target back through each step.
    pub rho_bar: Vec<f64>,
}

fn bootstrap(traj: &Trajectory, value: f64) -> f64 {
    if traj.is_terminal() {
        0.0
    } else {
        value
    }
}

fn check_len(traj: &Trajectory, n: usize, what: &str) -> Result<()> {
    if n != traj.len() {
        return invalid(format!("{what} has {n} entries for a {}-step trajectory", traj.len()));
    }
    Ok(())
}

/// Retrace targets for discrete actions.
///
/// `pi[i]` and `q[i]` are the current policy and critic at step `i`;
/// `bootstrap_value` is `sum_a Q(x_k, a) pi(a | x_k)` at the state after the
/// segment and is ignored when the segment ends in a terminal state. The trace
/// is `min(trace_c, pi(a_i) / mu(a_i))`.
pub fn retrace_discrete(
    traj: &Trajectory,
    pi: &[CategoricalHead],
    q: &[Vec<f64>],
    bootstrap_value: f64,
    trace_c: f64,
    gamma: f64,
) -> Result<ReturnEstimate> {
    check_len(traj, pi.len(), "policy list")?;
    check_len(traj, q.len(), "critic list")?;
    let n = traj.len();
    let mut est = ReturnEstimate {
        q_ret: vec![0.0; n],
        q_opc: Vec::new(),
        v_est: vec![0.0; n],
        rho_bar: vec![0.0; n],
    };
    for (i, t) in traj.transitions.iter().enumerate() {
        let head = PolicyHead::Categorical(pi[i].clone());
        let ratio = importance_ratio(&head, &t.behavior_policy, &t.action, TruncationMode::Discrete { c: trace_c })?;
        if q[i].len() != pi[i].n_actions() {
            return invalid("critic and policy disagree on the action count");
        }
        est.rho_bar[i] = ratio.rho_bar;
        est.v_est[i] = pi[i].probs().iter().zip(&q[i]).map(|(p, v)| p * v).sum();
    }
    let mut target = bootstrap(traj, bootstrap_value);
    for i in (0..n).rev() {
        let t = &traj.transitions[i];
        let a = t.action.index().ok_or_else(|| AcerError::InvalidArgument("discrete action expected".into()))?;
        target = t.reward + gamma * target;
        est.q_ret[i] = target;
        target = est.rho_bar[i] * (target - q[i][a]) + est.v_est[i];
    }
    Ok(est)
}

/// Retrace and Q^opc targets for continuous actions.
///
/// Retrace uses the trace `min(1, rho^(1/d))`; Q^opc uses a trace of 1. Both
/// bootstrap from `bootstrap_value = V(x_k)` unless the segment is terminal.
pub fn retrace_opc_continuous(
    traj: &Trajectory,
    pi: &[GaussianHead],
    q_tilde: &[f64],
    v: &[f64],
    bootstrap_value: f64,
    gamma: f64,
) -> Result<ReturnEstimate> {
    check_len(traj, pi.len(), "policy list")?;
    check_len(traj, q_tilde.len(), "critic list")?;
    check_len(traj, v.len(), "value list")?;
    let n = traj.len();
    let mut est = ReturnEstimate {
        q_ret: vec![0.0; n],
        q_opc: vec![0.0; n],
        v_est: v.to_vec(),
        rho_bar: vec![0.0; n],
    };
    for (i, t) in traj.transitions.iter().enumerate() {
        let head = PolicyHead::Gaussian(pi[i].clone());
        let d = pi[i].dim();
        est.rho_bar[i] =
            importance_ratio(&head, &t.behavior_policy, &t.action, TruncationMode::Continuous { d })?.rho_bar;
    }
    let mut ret = bootstrap(traj, bootstrap_value);
    let mut opc = ret;
    for i in (0..n).rev() {
        let r = traj.transitions[i].reward;
        ret = r + gamma * ret;
        opc = r + gamma * opc;
        est.q_ret[i] = ret;
        est.q_opc[i] = opc;
        ret = est.rho_bar[i] * (ret - q_tilde[i]) + v[i];
        opc = (opc - q_tilde[i]) + v[i];
    }
    Ok(est)
}

/// Untruncated importance-sampled returns `R_t = r_t + gamma * rho_{t+1} * R_{t+1}`.
///
/// The last step bootstraps from `bootstrap_value` (zero when terminal).
pub fn is_return(traj: &Trajectory, pi: &[PolicyHead], bootstrap_value: f64, gamma: f64) -> Result<Vec<f64>> {
    check_len(traj, pi.len(), "policy list")?;
    let n = traj.len();
    let mut rho = vec![0.0; n];
    for (i, t) in traj.transitions.iter().enumerate() {
        rho[i] = importance_ratio(&pi[i], &t.behavior_policy, &t.action, TruncationMode::Discrete { c: f64::INFINITY })?.rho;
    }
    let mut out = vec![0.0; n];
    let mut next = bootstrap(traj, bootstrap_value);
    for i in (0..n).rev() {
        let weight = if i + 1 < n { rho[i + 1] } else { 1.0 };
        out[i] = traj.transitions[i].reward + gamma * weight * next;
        next = out[i];
    }
    Ok(out)
}

/// Importance ratio of a single step without truncation.
pub fn step_ratio(head: &PolicyHead, mu: &BehaviorPolicy, action: &Action) -> Result<f64> {
    Ok(importance_ratio(head, mu, action, TruncationMode::Discrete { c: f64::INFINITY })?.rho)
}

// ---------------------------------------------------------------------------
// Exact tabular operators
// ---------------------------------------------------------------------------

pub type QTable = Vec<Vec<f64>>;
/// `policy[s][a]`
pub type PolicyTable = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Retrace,
    B,
    Bellman,
    ImportanceSampling,
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Retrace => "retrace",
            OperatorKind::B => "B",
            OperatorKind::Bellman => "bellman",
            OperatorKind::ImportanceSampling => "importance_sampling",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactOperatorResult {
    pub q_table: QTable,
    pub operator: OperatorKind,
}

impl ExactOperatorResult {
    /// Plain-text table: a comment line naming the operator, a header, then
    /// one `state,action,value` row per entry (values in round-trip precision).
    pub fn to_table(&self) -> String {
        let mut out = format!("# operator={}\nstate,action,value\n", self.operator.name());
        for (s, row) in self.q_table.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{s},{a},{v:e}");
            }
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let operator = match header.strip_prefix("# operator=") {
            Some("retrace") => OperatorKind::Retrace,
            Some("B") => OperatorKind::B,
            Some("bellman") => OperatorKind::Bellman,
            Some("importance_sampling") => OperatorKind::ImportanceSampling,
            _ => return invalid("missing operator line"),
        };
        if lines.next() != Some("state,action,value") {
            return invalid("missing column header");
        }
        let mut q_table: QTable = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut parts = line.split(',');
            let parse_err = || AcerError::InvalidArgument(format!("bad row '{line}'"));
            let s: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(parse_err)?;
            let a: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(parse_err)?;
            let v: f64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(parse_err)?;
            if s == q_table.len() {
                q_table.push(Vec::new());
            }
            if s + 1 != q_table.len() || a != q_table[s].len() {
                return invalid("rows out of order");
            }
            q_table[s].push(v);
        }
        Ok(ExactOperatorResult { q_table, operator })
    }
}

fn check_policy(mdp: &TabularMDP, policy: &PolicyTable, what: &str) -> Result<()> {
    if policy.len() != mdp.n_states() || policy.iter().any(|row| row.len() != mdp.n_actions()) {
        return invalid(format!("{what} table shape does not match the MDP"));
    }
    for row in policy {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return invalid(format!("{what} rows must be distributions"));
        }
    }
    Ok(())
}

fn check_q(mdp: &TabularMDP, q: &QTable) -> Result<()> {
    if q.len() != mdp.n_states() || q.iter().any(|row| row.len() != mdp.n_actions()) {
        return invalid("Q table shape does not match the MDP");
    }
    if q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AcerError::NumericFault("non-finite Q entry".into()));
    }
    Ok(())
}

fn check_coverage(pi: &PolicyTable, mu: &PolicyTable) -> Result<()> {
    for (s, (p_row, m_row)) in pi.iter().zip(mu).enumerate() {
        for (a, (p, m)) in p_row.iter().zip(m_row).enumerate() {
            if *m == 0.0 && *p > 0.0 {
                return Err(AcerError::CoverageViolation { state: s, action: a });
            }
        }
    }
    Ok(())
}

fn expect_under(policy: &[f64], q: &[f64]) -> f64 {
    policy.iter().zip(q).map(|(p, v)| p * v).sum()
}

pub fn state_values(q: &QTable, pi: &PolicyTable) -> Vec<f64> {
    q.iter().zip(pi).map(|(row, p)| expect_under(p, row)).collect()
}

/// `T^pi Q (s, a) = r(s, a) + gamma * sum_s' P(s' | s, a) sum_b pi(b | s') Q(s', b)`
pub fn bellman_operator(mdp: &TabularMDP, pi: &PolicyTable, q: &QTable) -> Result<ExactOperatorResult> {
    check_policy(mdp, pi, "pi")?;
    check_q(mdp, q)?;
    let v = state_values(q, pi);
    let q_table = (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                    mdp.reward[s][a] + mdp.gamma * next
                })
                .collect()
        })
        .collect();
    Ok(ExactOperatorResult { q_table, operator: OperatorKind::Bellman })
}

/// Exact `Q^pi` by value iteration.
///
/// Iterates until the sup-norm residual certifies an error below `1e-13`
/// (`residual * gamma / (1 - gamma)`), or until the residual stops shrinking
/// once it is already below `1e-12`.
pub fn tabular_q_pi(mdp: &TabularMDP, pi: &PolicyTable) -> Result<QTable> {
    check_policy(mdp, pi, "pi")?;
    let gamma = mdp.gamma;
    let mut q: QTable = vec![vec![0.0; mdp.n_actions()]; mdp.n_states()];
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..10_000_000 {
        let next = bellman_operator(mdp, pi, &q)?.q_table;
        let residual = q
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if residual * gamma <= 1e-13 * (1.0 - gamma) {
            break;
        }
        if residual < best {
            best = residual;
            stale = 0;
        } else {
            stale += 1;
        }
        if best < 1e-12 && stale > 100 {
            break;
        }
    }
    Ok(q)
}

/// Trace weight `mu(a) * min(c, rho(a)) = min(c * mu(a), pi(a))` and
/// correction weight `pi(a) * [(rho(a) - c) / rho(a)]_+ = [pi(a) - c * mu(a)]_+`.
fn split_weights(pi: f64, mu: f64, c: f64) -> (f64, f64) {
    if pi == 0.0 {
        return (0.0, 0.0);
    }
    let cm = if c.is_infinite() { f64::INFINITY } else { c * mu };
    (cm.min(pi), (pi - cm).max(0.0))
}

/// Smallest number of terms whose neglected tail is below `tol`.
///
/// Per step, the weighted occupancy shrinks by at most
/// `kappa = gamma * max_s sum_a min(c mu(a|s), pi(a|s)) <= gamma`, so the tail
/// after `H` terms is bounded by `G kappa^H / (1 - kappa)` with `G` the largest
/// per-step summand.
pub fn required_horizon(mdp: &TabularMDP, pi: &PolicyTable, mu: &PolicyTable, q: &QTable, c: f64, tol: f64) -> usize {
    let beta = (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| split_weights(pi[s][a], mu[s][a], c).0).sum::<f64>())
        .fold(0.0, f64::max);
    let kappa = mdp.gamma * beta;
    if kappa <= 0.0 {
        return 1;
    }
    let q_max = q.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = mdp.r_max + (1.0 + mdp.gamma) * q_max;
    if g == 0.0 {
        return 1;
    }
    let needed = ((tol * (1.0 - kappa) / g).ln() / kappa.ln()).ceil();
    needed.max(1.0) as usize
}

/// The operator obtained by recursively applying truncation with bias
/// correction to `Q^pi`:
///
/// `BQ(x, a) = E_mu[ sum_t gamma^t (prod_{i=1..t} rho_bar_i)
///     (r_t + gamma E_{b~pi}([(rho_{t+1}(b) - c) / rho_{t+1}(b)]_+ Q(x_{t+1}, b))) ]`
///
/// Evaluated for every `(x, a)` at once by backward nesting of the first
/// `horizon` terms of the sum.
pub fn apply_operator_b(
    mdp: &TabularMDP,
    pi: &PolicyTable,
    mu: &PolicyTable,
    q: &QTable,
    c: f64,
    horizon: usize,
) -> Result<ExactOperatorResult> {
    check_policy(mdp, pi, "pi")?;
    check_policy(mdp, mu, "mu")?;
    check_q(mdp, q)?;
    check_coverage(pi, mu)?;
    if !(c >= 0.0) || horizon == 0 {
        return invalid("need c >= 0 and a positive horizon");
    }
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma);
    let mut trace = vec![vec![0.0; na]; ns];
    let mut correction = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let (t, k) = split_weights(pi[s][a], mu[s][a], c);
            trace[s][a] = t;
            correction[s] += k * q[s][a];
        }
    }
    let summand: QTable = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let next: f64 = mdp.transition[s][a].iter().zip(&correction).map(|(p, k)| p * k).sum();
                    mdp.reward[s][a] + gamma * next
                })
                .collect()
        })
        .collect();
    let mut acc = summand.clone();
    for _ in 1..horizon {
        let carried: Vec<f64> = (0..ns).map(|s| expect_under(&trace[s], &acc[s])).collect();
        for s in 0..ns {
            for a in 0..na {
                let next: f64 = mdp.transition[s][a].iter().zip(&carried).map(|(p, v)| p * v).sum();
                acc[s][a] = summand[s][a] + gamma * next;
            }
        }
    }
    Ok(ExactOperatorResult { q_table: acc, operator: OperatorKind::B })
}

/// Sum over `t < horizon` of `gamma^t E[w_t summand(x_t, a_t)]` from a fixed
/// start, where the weight picks up `step_weight(s', a')` per transition and
/// actions are drawn from `mu`. Propagates the weighted occupancy forward.
fn forward_weighted_sum(
    mdp: &TabularMDP,
    mu: &PolicyTable,
    step_weight: &QTable,
    summand: &QTable,
    start: (usize, usize),
    horizon: usize,
) -> f64 {
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma);
    let mut occupancy = vec![vec![0.0; na]; ns];
    occupancy[start.0][start.1] = 1.0;
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..horizon {
        let mut term = 0.0;
        for s in 0..ns {
            for a in 0..na {
                term += occupancy[s][a] * summand[s][a];
            }
        }
        total += discount * term;
        if t + 1 == horizon {
            break;
        }
        let mut state_mass = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = occupancy[s][a];
                if w == 0.0 {
                    continue;
                }
                for (next, p) in mdp.transition[s][a].iter().enumerate() {
                    state_mass[next] += w * p;
                }
            }
        }
        for s in 0..ns {
            for a in 0..na {
                occupancy[s][a] = state_mass[s] * mu[s][a] * step_weight[s][a];
            }
        }
        discount *= gamma;
    }
    total
}

fn ratio_table(pi: &PolicyTable, mu: &PolicyTable, cap: f64) -> QTable {
    pi.iter()
        .zip(mu)
        .map(|(p_row, m_row)| {
            p_row
                .iter()
                .zip(m_row)
                .map(|(p, m)| if *m > 0.0 { (p / m).min(cap) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// The Retrace operator with trace `min(c, rho)`:
///
/// `RQ(x, a) = Q(x, a) + E_mu[ sum_t gamma^t (prod_{i=1..t} rho_bar_i)
///     (r_t + gamma E_{b~pi} Q(x_{t+1}, b) - Q(x_t, a_t)) ]`
///
/// Evaluated start by start through forward propagation of the weighted
/// state-action occupancy over the first `horizon` terms.
pub fn apply_retrace_operator(
    mdp: &TabularMDP,
    pi: &PolicyTable,
    mu: &PolicyTable,
    q: &QTable,
    c: f64,
    horizon: usize,
) -> Result<ExactOperatorResult> {
    check_policy(mdp, pi, "pi")?;
    check_policy(mdp, mu, "mu")?;
    check_q(mdp, q)?;
    check_coverage(pi, mu)?;
    if !(c >= 0.0) || horizon == 0 {
        return invalid("need c >= 0 and a positive horizon");
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let trace = ratio_table(pi, mu, c);
    let td = bellman_operator(mdp, pi, q)?.q_table;
    let summand: QTable = (0..ns).map(|s| (0..na).map(|a| td[s][a] - q[s][a]).collect()).collect();
    let q_table = (0..ns)
        .map(|s| (0..na).map(|a| q[s][a] + forward_weighted_sum(mdp, mu, &trace, &summand, (s, a), horizon)).collect())
        .collect();
    Ok(ExactOperatorResult { q_table, operator: OperatorKind::Retrace })
}

/// Pure importance sampling: `E_mu[ sum_t gamma^t (prod_{i=1..t} rho_i) r_t ]`.
pub fn importance_sampling_operator(
    mdp: &TabularMDP,
    pi: &PolicyTable,
    mu: &PolicyTable,
    horizon: usize,
) -> Result<ExactOperatorResult> {
    check_policy(mdp, pi, "pi")?;
    check_policy(mdp, mu, "mu")?;
    check_coverage(pi, mu)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let rho = ratio_table(pi, mu, f64::INFINITY);
    let q_table = (0..ns)
        .map(|s| (0..na).map(|a| forward_weighted_sum(mdp, mu, &rho, &mdp.reward, (s, a), horizon)).collect())
        .collect();
    Ok(ExactOperatorResult { q_table, operator: OperatorKind::ImportanceSampling })
}

pub fn sup_distance(a: &QTable, b: &QTable) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random_simplex, Transition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn discrete_step(state: usize, action: usize, reward: f64, mu: Vec<f64>, terminal: bool) -> Transition {
        Transition {
            state: vec![state as f64],
            action: Action::Discrete(action),
            reward,
            behavior_policy: BehaviorPolicy::Categorical { probs: mu },
            terminal,
        }
    }

    fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> PolicyTable {
        (0..ns).map(|_| random_simplex(na, rng)).collect()
    }

    fn head(p: &[f64]) -> CategoricalHead {
        CategoricalHead::from_logits(p.iter().map(|x| x.ln()).collect()).unwrap()
    }

    #[test]
    fn single_terminal_step() {
        let traj = Trajectory::new(vec![discrete_step(0, 1, 2.5, vec![0.5, 0.5], true)], None).unwrap();
        let est = retrace_discrete(&traj, &[CategoricalHead::uniform(2)], &[vec![3.0, -1.0]], 99.0, 1.0, 0.9).unwrap();
        assert_eq!(est.q_ret, vec![2.5]);
    }

    #[test]
    fn zero_rewards_zero_critic() {
        let steps = (0..4).map(|i| discrete_step(i, i % 2, 0.0, vec![0.3, 0.7], false)).collect();
        let traj = Trajectory::new(steps, Some(vec![0.0])).unwrap();
        let heads = vec![CategoricalHead::uniform(2); 4];
        let est = retrace_discrete(&traj, &heads, &vec![vec![0.0; 2]; 4], 0.0, 1.0, 0.99).unwrap();
        assert!(est.q_ret.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn continuous_on_policy_traces_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5;
        let heads: Vec<GaussianHead> =
            (0..n).map(|_| GaussianHead::new(vec![rng.gen_range(-1.0..1.0)], 0.3).unwrap()).collect();
        let steps = heads
            .iter()
            .map(|h| Transition {
                state: vec![0.0],
                action: Action::Continuous(h.sample(&mut rng)),
                reward: rng.gen_range(-1.0..1.0),
                behavior_policy: BehaviorPolicy::Gaussian { mean: h.mean().to_vec(), sigma: 0.3 },
                terminal: false,
            })
            .collect();
        let traj = Trajectory::new(steps, Some(vec![0.0])).unwrap();
        let qt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let est = retrace_opc_continuous(&traj, &heads, &qt, &v, 0.4, 0.95).unwrap();
        for i in 0..n {
            assert!((est.q_ret[i] - est.q_opc[i]).abs() < 1e-12);
            assert!((est.rho_bar[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_recursions_match_unrolled_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = 5;
            let gamma = 0.9;
            let pis: Vec<GaussianHead> =
                (0..n).map(|_| GaussianHead::new(vec![rng.gen_range(-1.0..1.0); 2], 0.3).unwrap()).collect();
            let steps: Vec<Transition> = (0..n)
                .map(|_| {
                    let mu_mean = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    let a = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    Transition {
                        state: vec![0.0],
                        action: Action::Continuous(a),
                        reward: rng.gen_range(-1.0..1.0),
                        behavior_policy: BehaviorPolicy::Gaussian { mean: mu_mean, sigma: 0.3 },
                        terminal: false,
                    }
                })
                .collect();
            let traj = Trajectory::new(steps, Some(vec![0.0])).unwrap();
            let qt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let boot = rng.gen_range(-1.0..1.0);
            let est = retrace_opc_continuous(&traj, &pis, &qt, &v, boot, gamma).unwrap();
            let r = traj.rewards();
            // Unrolled: target_t = sum_{j>=t} gamma^{j-t} (prod_{i=t+1..j} trace_i) (r_j + gamma [V_{j+1} - trace_{j+1} Qt_{j+1}])
            // with V_n = boot and the final trace term absent.
            for (traces, got) in [(est.rho_bar.clone(), &est.q_ret), (vec![1.0; n], &est.q_opc)] {
                for t in 0..n {
                    let mut total = 0.0;
                    let mut weight = 1.0;
                    for j in t..n {
                        let next = if j + 1 < n { v[j + 1] - traces[j + 1] * qt[j + 1] } else { boot };
                        total += weight * (r[j] + gamma * next);
                        if j + 1 < n {
                            weight *= gamma * traces[j + 1];
                        }
                    }
                    assert!((total - got[t]).abs() < 1e-12, "{total} vs {}", got[t]);
                }
            }
        }
    }

    #[test]
    fn is_return_examples() {
        let steps = vec![
            discrete_step(0, 0, 1.0, vec![0.5, 0.5], false),
            discrete_step(1, 1, 3.0, vec![0.25, 0.75], true),
        ];
        let traj = Trajectory::new(steps, None).unwrap();
        // rho_1 = pi(1)/mu(1) = 1.5 / 0.75 = 2 when pi = (-0.5, 1.5)? Use pi(1) = 1.0 instead: 1/0.75.
        let pi = vec![
            PolicyHead::Categorical(head(&[0.5, 0.5])),
            PolicyHead::Categorical(CategoricalHead::from_logits(vec![f64::NEG_INFINITY.max(-1e300), 0.0]).unwrap()),
        ];
        let rho1 = 1.0 / 0.75;
        let out = is_return(&traj, &pi, 0.0, 0.9).unwrap();
        assert!((out[0] - (1.0 + 0.9 * rho1 * 3.0)).abs() < 1e-12);
        assert_eq!(out[1], 3.0);

        let one = Trajectory::new(vec![discrete_step(0, 0, 4.0, vec![0.9, 0.1], true)], None).unwrap();
        let out = is_return(&one, &[PolicyHead::Categorical(head(&[0.2, 0.8]))], 7.0, 0.9).unwrap();
        assert_eq!(out, vec![4.0]);
    }

    #[test]
    fn is_return_on_policy_is_monte_carlo() {
        let mu = vec![0.3, 0.7];
        let steps: Vec<Transition> =
            (0..4).map(|i| discrete_step(i, i % 2, i as f64 + 1.0, mu.clone(), i == 3)).collect();
        let traj = Trajectory::new(steps, None).unwrap();
        let pi = vec![PolicyHead::Categorical(head(&mu)); 4];
        let out = is_return(&traj, &pi, 0.0, 0.5).unwrap();
        let mc = 1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 4.0;
        assert!((out[0] - mc).abs() < 1e-12);
    }

    #[test]
    fn q_pi_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mdp = TabularMDP::random(3, 2, 0.9, &mut rng);
        mdp.reward = vec![vec![0.0; 2]; 3];
        let pi = random_policy(&mut rng, 3, 2);
        assert!(tabular_q_pi(&mdp, &pi).unwrap().iter().flatten().all(|v| *v == 0.0));

        let absorbing = TabularMDP::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.9, 1.0, vec![]).unwrap();
        let q = tabular_q_pi(&absorbing, &vec![vec![1.0]]).unwrap();
        assert!((q[0][0] - 10.0).abs() < 1e-11);

        let mdp = TabularMDP::random(5, 3, 0.95, &mut rng);
        let pi = random_policy(&mut rng, 5, 3);
        let q = tabular_q_pi(&mdp, &pi).unwrap();
        let tq = bellman_operator(&mdp, &pi, &q).unwrap().q_table;
        assert!(sup_distance(&q, &tq) < 1e-10);
    }

    #[test]
    fn coverage_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = TabularMDP::random(2, 2, 0.9, &mut rng);
        let pi = vec![vec![0.5, 0.5]; 2];
        let mu = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let q = vec![vec![0.0; 2]; 2];
        let err = apply_operator_b(&mdp, &pi, &mu, &q, 1.0, 10).unwrap_err();
        assert!(matches!(err, AcerError::CoverageViolation { state: 0, action: 1 }));
    }

    #[test]
    fn operator_b_limits_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let mdp = TabularMDP::random(4, 3, 0.9, &mut rng);
            let pi = random_policy(&mut rng, 4, 3);
            let mu = random_policy(&mut rng, 4, 3);
            let q: QTable = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();

            let b0 = apply_operator_b(&mdp, &pi, &mu, &q, 0.0, required_horizon(&mdp, &pi, &mu, &q, 0.0, 1e-12)).unwrap();
            let t = bellman_operator(&mdp, &pi, &q).unwrap();
            assert!(sup_distance(&b0.q_table, &t.q_table) < 1e-10);

            let big = 1e12;
            let h = required_horizon(&mdp, &pi, &mu, &q, big, 1e-12);
            let binf = apply_operator_b(&mdp, &pi, &mu, &q, big, h).unwrap();
            let is = importance_sampling_operator(&mdp, &pi, &mu, h).unwrap();
            assert!(sup_distance(&binf.q_table, &is.q_table) < 1e-8);

            let qpi = tabular_q_pi(&mdp, &pi).unwrap();
            for c in [0.0, 0.5, 1.0, 3.0] {
                let h = required_horizon(&mdp, &pi, &mu, &qpi, c, 1e-12);
                let fixed = apply_operator_b(&mdp, &pi, &mu, &qpi, c, h).unwrap();
                assert!(sup_distance(&fixed.q_table, &qpi) < 1e-10);
                let fixed = apply_retrace_operator(&mdp, &pi, &mu, &qpi, c, h).unwrap();
                assert!(sup_distance(&fixed.q_table, &qpi) < 1e-10);
            }
        }
    }

    #[test]
    fn retrace_operator_on_policy_matches_unrolled_enumeration() {
        // pi = mu with c = 1: every trace is 1, so the retrace operator over H
        // terms telescopes to E[sum_{t<H} gamma^t r_t + gamma^H V(x_H)].
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = TabularMDP::random(2, 2, 0.8, &mut rng);
        let pi = random_policy(&mut rng, 2, 2);
        let q: QTable = (0..2).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let h = 4;
        let got = apply_retrace_operator(&mdp, &pi, &pi, &q, 1.0, h).unwrap();
        let v = state_values(&q, &pi);
        for s0 in 0..2 {
            for a0 in 0..2 {
                // Enumerate (s1,a1,...,s_{h-1},a_{h-1}, s_h).
                let mut total = 0.0;
                let mut stack = vec![(s0, a0, 1.0f64, 0.0f64, 0usize)];
                while let Some((s, a, prob, ret, t)) = stack.pop() {
                    let ret = ret + 0.8f64.powi(t as i32) * mdp.reward[s][a];
                    for s2 in 0..2 {
                        let p2 = prob * mdp.transition[s][a][s2];
                        if t + 1 == h {
                            total += p2 * (ret + 0.8f64.powi(h as i32) * v[s2]);
                        } else {
                            for a2 in 0..2 {
                                stack.push((s2, a2, p2 * pi[s2][a2], ret, t + 1));
                            }
                        }
                    }
                }
                assert!((total - got.q_table[s0][a0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_round_trip() {
        let result = ExactOperatorResult { q_table: vec![vec![0.1, -2.5], vec![1e-17, 3.0]], operator: OperatorKind::B };
        let text = result.to_table();
        assert!(text.starts_with("# operator=B\nstate,action,value\n0,0,"));
        assert_eq!(ExactOperatorResult::from_table(&text).unwrap(), result);
    }
}
