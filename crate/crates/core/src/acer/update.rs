//! Gradient assembly for one segment on a frozen copy of the agent.

use rand::Rng;

use crate::approximator::Approximator;
use crate::env::{Action, BehaviorPolicy, Trajectory};
use crate::error::{invalid, AcerError, Result};
use crate::policy::{
    grad_kl_wrt_second_stats, importance_ratio, kl, CategoricalHead, GaussianHead, PolicyHead, TruncationMode,
};
use crate::replay::UpdateDiagnostics;
use crate::returns::{is_return, retrace_discrete, retrace_opc_continuous};
use crate::trust_region::{project, trust_region_backprop, TrustRegionProblem};

use super::agent::{Agent, AgentGradients, Critic};
use super::{AblationSwitch, AcerConfig, Algorithm};

/// Truncation of the trajectory-wide importance weight in the TIS baseline.
pub const TIS_TRUNCATION: f64 = 5.0;

/// The knobs that distinguish ACER, its ablations and the baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRule {
    pub gamma: f64,
    pub c: f64,
    pub trust_region: bool,
    pub delta: f64,
    pub is_returns: bool,
    pub literal_correction: bool,
    pub entropy_coef: f64,
}

impl UpdateRule {
    pub fn new(cfg: &AcerConfig, algo: Algorithm, gamma: f64) -> Self {
        let mut rule = UpdateRule {
            gamma,
            c: cfg.c,
            trust_region: cfg.trust_region,
            delta: cfg.delta,
            is_returns: false,
            literal_correction: cfg.literal_correction,
            entropy_coef: cfg.entropy_coef,
        };
        match algo {
            Algorithm::A3c | Algorithm::Tis => rule.trust_region = false,
            Algorithm::TrustA3c | Algorithm::TrustTis => rule.trust_region = true,
            Algorithm::Acer => {}
            Algorithm::Ablation(AblationSwitch::NoTrustRegion) => rule.trust_region = false,
            Algorithm::Ablation(AblationSwitch::NoTruncationCInf) => rule.c = f64::INFINITY,
            Algorithm::Ablation(AblationSwitch::NoRetraceIsReturns) => rule.is_returns = true,
            Algorithm::Ablation(AblationSwitch::NoSdnSplitNets) => {}
        }
        rule
    }
}

/// One score-function term `weight * d log f(action | phi) / d phi` at a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTerm {
    pub step: usize,
    pub action: Action,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub gradients: AgentGradients,
    pub diagnostics: UpdateDiagnostics,
    /// The policy gradient before entropy and projection, as weighted scores.
    pub score_terms: Vec<ScoreTerm>,
    pub q_ret: Vec<f64>,
}

#[derive(Default)]
struct DiagnosticSums {
    steps: usize,
    objective: f64,
    critic_loss: f64,
    rho: f64,
    truncated: usize,
    kl: f64,
    max_kl: f64,
    violations: usize,
}

impl DiagnosticSums {
    fn finish(self) -> UpdateDiagnostics {
        let n = self.steps.max(1) as f64;
        UpdateDiagnostics {
            steps: self.steps,
            policy_objective: self.objective / n,
            critic_loss: self.critic_loss / n,
            mean_rho: self.rho / n,
            truncation_active_fraction: self.truncated as f64 / n,
            mean_kl_to_average: self.kl / n,
            max_kl_to_average: self.max_kl,
            constraint_violation_fraction: self.violations as f64 / n,
            grad_norm: 0.0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn categorical(head: PolicyHead) -> Result<CategoricalHead> {
    match head {
        PolicyHead::Categorical(h) => Ok(h),
        PolicyHead::Gaussian(_) => invalid("expected a categorical policy"),
    }
}

fn gaussian(head: PolicyHead) -> Result<GaussianHead> {
    match head {
        PolicyHead::Gaussian(h) => Ok(h),
        PolicyHead::Categorical(_) => invalid("expected a gaussian policy"),
    }
}

/// Direction actually applied at a step: the projection when the trust
/// region is on, the raw gradient otherwise. Also reports whether the
/// applied direction breaks `k . z <= delta`.
fn constrain(rule: &UpdateRule, g: Vec<f64>, k: &[f64]) -> Result<(Vec<f64>, bool)> {
    let z = if rule.trust_region {
        project(&TrustRegionProblem::new(g, k.to_vec(), rule.delta)?)?
    } else {
        g
    };
    let violated = dot(k, &z) > rule.delta + 1e-10;
    Ok((z, violated))
}

fn accumulate_scores(head: &PolicyHead, terms: &[ScoreTerm]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; head.stats().len()];
    for term in terms {
        if term.weight == 0.0 {
            continue;
        }
        let score = head.grad_log_prob_wrt_stats(&term.action)?;
        g.iter_mut().zip(score).for_each(|(gi, s)| *gi += term.weight * s);
    }
    Ok(g)
}

fn discrete_score_terms(
    pi: &CategoricalHead,
    mu: &[f64],
    action: usize,
    q_ret: f64,
    q: &[f64],
    c: f64,
    literal_correction: bool,
) -> Result<Vec<(usize, f64)>> {
    let n = pi.n_actions();
    if mu.len() != n || q.len() != n || action >= n {
        return invalid("policy, behavior and critic disagree on the action count");
    }
    if !(mu[action] > 0.0) {
        return Err(AcerError::CorruptedData(format!("behavior probability {} at taken action", mu[action])));
    }
    let p = pi.probs();
    let v = dot(p, q);
    let rho = p[action] / mu[action];
    let mut terms = vec![(action, c.min(rho) * (q_ret - v))];
    for b in 0..n {
        // [1 - c / rho(b)]_+ pi(b) written without the division.
        let weight = (p[b] - c * mu[b]).max(0.0);
        if weight > 0.0 {
            let qb = if literal_correction { q[action] } else { q[b] };
            terms.push((b, weight * (qb - v)));
        }
    }
    Ok(terms)
}

/// Per-step policy gradient in logit space:
///
/// `min(c, rho(a_i)) grad log pi(a_i) (q_ret - V)
///   + sum_a [1 - c / rho(a)]_+ pi(a) grad log pi(a) (Q(a) - V)`
///
/// with `V = sum_a pi(a) Q(a)`. With `literal_correction` the sum uses
/// `Q(a_i)` in place of `Q(a)`.
pub fn discrete_policy_gradient(
    pi: &CategoricalHead,
    mu: &[f64],
    action: usize,
    q_ret: f64,
    q: &[f64],
    c: f64,
    literal_correction: bool,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; pi.n_actions()];
    for (b, w) in discrete_score_terms(pi, mu, action, q_ret, q, c, literal_correction)? {
        let score = pi.grad_log_prob(b)?;
        g.iter_mut().zip(score).for_each(|(gi, s)| *gi += w * s);
    }
    Ok(g)
}

/// Per-step policy gradient in mean space:
///
/// `min(c, rho) grad log f(a) (q_opc - v) + [1 - c / rho']_+ (q_tilde' - v) grad log f(a')`
#[allow(clippy::too_many_arguments)]
pub fn continuous_policy_gradient(
    pi: &GaussianHead,
    action: &[f64],
    rho: f64,
    q_opc: f64,
    v: f64,
    action_prime: &[f64],
    rho_prime: f64,
    q_tilde_prime: f64,
    c: f64,
) -> Result<Vec<f64>> {
    let mut g: Vec<f64> = pi.grad_log_prob(action)?.into_iter().map(|s| c.min(rho) * (q_opc - v) * s).collect();
    let correction = correction_weight(c, rho_prime);
    if correction > 0.0 {
        let score = pi.grad_log_prob(action_prime)?;
        g.iter_mut().zip(score).for_each(|(gi, s)| *gi += correction * (q_tilde_prime - v) * s);
    }
    Ok(g)
}

fn correction_weight(c: f64, rho: f64) -> f64 {
    if rho > 0.0 {
        (1.0 - c / rho).max(0.0)
    } else {
        0.0
    }
}

fn gaussian_ratio(pi: &GaussianHead, mu: &BehaviorPolicy, action: &[f64]) -> Result<f64> {
    match mu {
        BehaviorPolicy::Gaussian { mean, sigma } => {
            let behavior = GaussianHead::new(mean.clone(), *sigma)?;
            Ok((pi.log_prob(action)? - behavior.log_prob(action)?).exp())
        }
        BehaviorPolicy::Categorical { .. } => invalid("expected a gaussian behavior policy"),
    }
}

fn scalar(net: &Approximator, x: &[f64]) -> Result<f64> {
    Ok(net.forward(x)?[0])
}

fn join(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.extend_from_slice(a);
    v
}

/// Discrete ACER on one segment: Retrace targets with traces `min(1, rho)`,
/// truncated importance weights with bias correction, per-step trust region,
/// and the squared-error critic gradient at the taken actions.
pub fn discrete_acer_gradients(agent: &Agent, traj: &Trajectory, rule: &UpdateRule) -> Result<UpdateOutput> {
    let critic = match &agent.critic {
        Critic::QVector(net) => net,
        _ => return invalid("discrete ACER needs an action-value vector critic"),
    };
    let n = traj.len();
    let mut heads = Vec::with_capacity(n);
    let mut avg = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    for t in &traj.transitions {
        heads.push(categorical(agent.head(&t.state)?)?);
        avg.push(agent.average_head(&t.state)?);
        qs.push(critic.forward(&t.state)?);
    }
    let boot = match &traj.bootstrap_state {
        Some(x) => dot(categorical(agent.head(x)?)?.probs(), &critic.forward(x)?),
        None => 0.0,
    };
    let q_ret = if rule.is_returns {
        let wrapped: Vec<PolicyHead> = heads.iter().cloned().map(PolicyHead::Categorical).collect();
        is_return(traj, &wrapped, boot, rule.gamma)?
    } else {
        retrace_discrete(traj, &heads, &qs, boot, 1.0, rule.gamma)?.q_ret
    };

    let mut grads = agent.zero_gradients();
    let mut sums = DiagnosticSums::default();
    let mut score_terms = Vec::new();
    for (i, t) in traj.transitions.iter().enumerate() {
        let a = t.action.index().ok_or_else(|| AcerError::InvalidArgument("discrete action expected".into()))?;
        let mu = match &t.behavior_policy {
            BehaviorPolicy::Categorical { probs } => probs,
            BehaviorPolicy::Gaussian { .. } => return invalid("expected a categorical behavior policy"),
        };
        let cur = PolicyHead::Categorical(heads[i].clone());
        let ratio = importance_ratio(&cur, &t.behavior_policy, &t.action, TruncationMode::Discrete { c: rule.c })?;
        let terms = discrete_score_terms(&heads[i], mu, a, q_ret[i], &qs[i], rule.c, rule.literal_correction)?;
        let terms: Vec<ScoreTerm> =
            terms.into_iter().map(|(b, weight)| ScoreTerm { step: i, action: Action::Discrete(b), weight }).collect();
        let mut g = accumulate_scores(&cur, &terms)?;
        if rule.entropy_coef != 0.0 {
            g.iter_mut().zip(heads[i].grad_entropy()).for_each(|(gi, h)| *gi += rule.entropy_coef * h);
        }
        let k = grad_kl_wrt_second_stats(&avg[i], &cur)?;
        let (z, violated) = constrain(rule, g, &k)?;
        trust_region_backprop(&agent.policy, &t.state, &z, &mut grads.policy)?;

        let err = qs[i][a] - q_ret[i];
        let mut upstream = vec![0.0; qs[i].len()];
        upstream[a] = err;
        critic.backward(&t.state, &upstream, &mut grads.critic[0])?;

        let v = dot(heads[i].probs(), &qs[i]);
        let kl_step = kl(&avg[i], &cur)?;
        sums.steps += 1;
        sums.objective += ratio.rho_bar * (q_ret[i] - v);
        sums.critic_loss += 0.5 * err * err;
        sums.rho += ratio.rho;
        sums.truncated += usize::from(ratio.rho > rule.c);
        sums.kl += kl_step;
        sums.max_kl = sums.max_kl.max(kl_step);
        sums.violations += usize::from(violated);
        score_terms.extend(terms);
    }
    Ok(UpdateOutput { gradients: grads, diagnostics: sums.finish(), score_terms, q_ret })
}

struct ContinuousStep {
    head: GaussianHead,
    avg: PolicyHead,
    rho: f64,
    action_prime: Vec<f64>,
    rho_prime: f64,
    q_tilde: f64,
    q_tilde_prime: f64,
    v: f64,
    /// Baseline samples behind `q_tilde`; empty for the split critic.
    samples: Vec<Vec<f64>>,
}

/// Continuous ACER on one segment: Retrace targets with traces
/// `min(1, rho^(1/d))` for the critic, Q^opc targets for the policy, one
/// resampled action per step for the bias correction, per-step trust region.
///
/// With the dueling critic, the value network also receives the
/// `min(1, rho) (Q^ret - Q~)` regression signal. With the split critic, the
/// action-value network regresses on `Q^ret` and the value network on
/// `rho (Q^ret - V)`.
pub fn continuous_acer_gradients<R: Rng + ?Sized>(
    agent: &Agent,
    traj: &Trajectory,
    rule: &UpdateRule,
    rng: &mut R,
) -> Result<UpdateOutput> {
    let mut steps = Vec::with_capacity(traj.len());
    for t in &traj.transitions {
        let x = &t.state;
        let head = gaussian(agent.head(x)?)?;
        let wrapped = PolicyHead::Gaussian(head.clone());
        let action = t.action.vector().ok_or_else(|| AcerError::InvalidArgument("continuous action expected".into()))?;
        let rho = importance_ratio(&wrapped, &t.behavior_policy, &t.action, TruncationMode::Continuous { d: head.dim() })?.rho;
        let action_prime = head.sample(rng);
        let rho_prime = gaussian_ratio(&head, &t.behavior_policy, &action_prime)?;
        let (q_tilde, q_tilde_prime, v, samples) = match &agent.critic {
            Critic::Sdn(sdn) => {
                let (q, samples) = sdn.sample_q_tilde(&head, x, action, rng)?;
                let (q_prime, _) = sdn.sample_q_tilde(&head, x, &action_prime, rng)?;
                (q, q_prime, sdn.value(x)?, samples)
            }
            Critic::Split { v, q } => (scalar(q, &join(x, action))?, scalar(q, &join(x, &action_prime))?, scalar(v, x)?, Vec::new()),
            _ => return invalid("continuous ACER needs a dueling or split critic"),
        };
        steps.push(ContinuousStep {
            head,
            avg: agent.average_head(x)?,
            rho,
            action_prime,
            rho_prime,
            q_tilde,
            q_tilde_prime,
            v,
            samples,
        });
    }
    let boot = match (&traj.bootstrap_state, &agent.critic) {
        (None, _) => 0.0,
        (Some(x), Critic::Sdn(sdn)) => sdn.value(x)?,
        (Some(x), Critic::Split { v, .. }) => scalar(v, x)?,
        _ => unreachable!("critic kind checked above"),
    };
    let heads: Vec<GaussianHead> = steps.iter().map(|s| s.head.clone()).collect();
    let (q_ret, q_opc) = if rule.is_returns {
        let wrapped: Vec<PolicyHead> = heads.iter().cloned().map(PolicyHead::Gaussian).collect();
        let r = is_return(traj, &wrapped, boot, rule.gamma)?;
        (r.clone(), r)
    } else {
        let q_tilde: Vec<f64> = steps.iter().map(|s| s.q_tilde).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.v).collect();
        let est = retrace_opc_continuous(traj, &heads, &q_tilde, &v, boot, rule.gamma)?;
        (est.q_ret, est.q_opc)
    };

    let mut grads = agent.zero_gradients();
    let mut sums = DiagnosticSums::default();
    let mut score_terms = Vec::new();
    for (i, (t, s)) in traj.transitions.iter().zip(&steps).enumerate() {
        let x = &t.state;
        let action = t.action.vector().expect("checked above");
        let cur = PolicyHead::Gaussian(s.head.clone());
        let terms = vec![
            ScoreTerm { step: i, action: t.action.clone(), weight: rule.c.min(s.rho) * (q_opc[i] - s.v) },
            ScoreTerm {
                step: i,
                action: Action::Continuous(s.action_prime.clone()),
                weight: correction_weight(rule.c, s.rho_prime) * (s.q_tilde_prime - s.v),
            },
        ];
        let g = accumulate_scores(&cur, &terms)?;
        let k = grad_kl_wrt_second_stats(&s.avg, &cur)?;
        let (z, violated) = constrain(rule, g, &k)?;
        trust_region_backprop(&agent.policy, x, &z, &mut grads.policy)?;

        let err = q_ret[i] - s.q_tilde;
        match &agent.critic {
            Critic::Sdn(sdn) => {
                let (gv, ga) = grads.critic.split_at_mut(1);
                sdn.backward_q_tilde(x, action, &s.samples, -err, &mut gv[0], &mut ga[0])?;
                sdn.v_net.backward(x, &[-s.rho.min(1.0) * err], &mut gv[0])?;
            }
            Critic::Split { v, q } => {
                let (gv, gq) = grads.critic.split_at_mut(1);
                q.backward(&join(x, action), &[-err], &mut gq[0])?;
                v.backward(x, &[-s.rho * (q_ret[i] - s.v)], &mut gv[0])?;
            }
            _ => unreachable!("critic kind checked above"),
        }

        let kl_step = kl(&s.avg, &cur)?;
        sums.steps += 1;
        sums.objective += rule.c.min(s.rho) * (q_opc[i] - s.v);
        sums.critic_loss += 0.5 * err * err;
        sums.rho += s.rho;
        sums.truncated += usize::from(s.rho > rule.c);
        sums.kl += kl_step;
        sums.max_kl = sums.max_kl.max(kl_step);
        sums.violations += usize::from(violated);
        score_terms.extend(terms);
    }
    Ok(UpdateOutput { gradients: grads, diagnostics: sums.finish(), score_terms, q_ret })
}

/// k-step advantage actor-critic with a state-value critic.
pub fn a3c_gradients(agent: &Agent, traj: &Trajectory, rule: &UpdateRule) -> Result<UpdateOutput> {
    value_baseline_gradients(agent, traj, rule, false)
}

/// Like [`a3c_gradients`], with every step weighted by
/// `min(5, prod_{i >= t} rho_i)` over the rest of the segment.
pub fn tis_gradients(agent: &Agent, traj: &Trajectory, rule: &UpdateRule) -> Result<UpdateOutput> {
    value_baseline_gradients(agent, traj, rule, true)
}

fn value_baseline_gradients(agent: &Agent, traj: &Trajectory, rule: &UpdateRule, truncated_is: bool) -> Result<UpdateOutput> {
    let critic = match &agent.critic {
        Critic::Value(net) => net,
        _ => return invalid("this update needs a state-value critic"),
    };
    let n = traj.len();
    let mut heads = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut rhos = Vec::with_capacity(n);
    for t in &traj.transitions {
        let head = agent.head(&t.state)?;
        rhos.push(importance_ratio(&head, &t.behavior_policy, &t.action, TruncationMode::Discrete { c: f64::INFINITY })?.rho);
        heads.push(head);
        values.push(scalar(critic, &t.state)?);
    }
    let mut ret = match &traj.bootstrap_state {
        Some(x) => scalar(critic, x)?,
        None => 0.0,
    };
    let mut returns = vec![0.0; n];
    let mut weights = vec![1.0; n];
    let mut product = 1.0;
    for i in (0..n).rev() {
        ret = traj.transitions[i].reward + rule.gamma * ret;
        returns[i] = ret;
        product *= rhos[i];
        if truncated_is {
            weights[i] = product.min(TIS_TRUNCATION);
        }
    }

    let mut grads = agent.zero_gradients();
    let mut sums = DiagnosticSums::default();
    let mut score_terms = Vec::new();
    for (i, t) in traj.transitions.iter().enumerate() {
        let advantage = returns[i] - values[i];
        let term = ScoreTerm { step: i, action: t.action.clone(), weight: weights[i] * advantage };
        let mut g = accumulate_scores(&heads[i], std::slice::from_ref(&term))?;
        if rule.entropy_coef != 0.0 {
            if let PolicyHead::Categorical(h) = &heads[i] {
                g.iter_mut().zip(h.grad_entropy()).for_each(|(gi, e)| *gi += rule.entropy_coef * e);
            }
        }
        let avg = agent.average_head(&t.state)?;
        let k = grad_kl_wrt_second_stats(&avg, &heads[i])?;
        let (z, violated) = constrain(rule, g, &k)?;
        trust_region_backprop(&agent.policy, &t.state, &z, &mut grads.policy)?;
        critic.backward(&t.state, &[-weights[i] * advantage], &mut grads.critic[0])?;

        let kl_step = kl(&avg, &heads[i])?;
        sums.steps += 1;
        sums.objective += weights[i] * advantage;
        sums.critic_loss += 0.5 * advantage * advantage;
        sums.rho += rhos[i];
        sums.truncated += usize::from(truncated_is && weights[i] < product_at(&rhos, i));
        sums.kl += kl_step;
        sums.max_kl = sums.max_kl.max(kl_step);
        sums.violations += usize::from(violated);
        score_terms.push(term);
    }
    Ok(UpdateOutput { gradients: grads, diagnostics: sums.finish(), score_terms, q_ret: returns })
}

fn product_at(rhos: &[f64], i: usize) -> f64 {
    rhos[i..].iter().product()
}
