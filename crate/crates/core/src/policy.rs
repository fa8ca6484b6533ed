//! Action distributions parameterized by statistics.
//!
//! A policy is a distribution family plus the statistics a network produces
//! for a state: logits for the categorical head, the mean for the Gaussian
//! head. Gradients here are always with respect to those statistics; the
//! approximator turns them into parameter gradients.

use std::f64::consts::PI;

use rand::Rng;

use crate::env::{Action, BehaviorPolicy};
use crate::error::{invalid, AcerError, Result};

/// Floor applied to stored behavior probabilities so replayed ratios stay finite.
pub const MIN_BEHAVIOR_PROB: f64 = 1e-8;

/// Standard normal draw by the Box–Muller transform (cosine branch).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalHead {
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl CategoricalHead {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return invalid("categorical head needs at least one action");
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(AcerError::NumericFault("non-finite logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.iter().map(|e| e / sum).collect();
        Ok(CategoricalHead { logits, probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_logits(vec![0.0; n]).expect("nonempty")
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_actions(&self) -> usize {
        self.probs.len()
    }

    fn check(&self, action: usize) -> Result<()> {
        if action >= self.probs.len() {
            return invalid(format!("action {action} out of range for {} actions", self.probs.len()));
        }
        Ok(())
    }

    pub fn log_prob(&self, action: usize) -> Result<f64> {
        self.check(action)?;
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(self.logits[action] - lse)
    }

    /// `one_hot(action) - probs`
    pub fn grad_log_prob(&self, action: usize) -> Result<Vec<f64>> {
        self.check(action)?;
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[action] += 1.0;
        Ok(g)
    }

    /// `KL(self || other)`
    pub fn kl(&self, other: &CategoricalHead) -> Result<f64> {
        if self.n_actions() != other.n_actions() {
            return invalid("categorical heads differ in size");
        }
        let mut kl = 0.0;
        for a in 0..self.n_actions() {
            let p = self.probs[a];
            if p > 0.0 {
                kl += p * (self.log_prob(a)? - other.log_prob(a)?);
            }
        }
        Ok(kl.max(0.0))
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Gradient of the entropy with respect to the logits.
    pub fn grad_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.probs.len() - 1
    }

    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for a in 1..self.probs.len() {
            if self.probs[a] > self.probs[best] {
                best = a;
            }
        }
        best
    }

    /// Probabilities as stored in replay, floored at [`MIN_BEHAVIOR_PROB`].
    pub fn behavior_probs(&self) -> Vec<f64> {
        if self.probs.iter().all(|p| *p >= MIN_BEHAVIOR_PROB) {
            return self.probs.clone();
        }
        let floored: Vec<f64> = self.probs.iter().map(|p| p.max(MIN_BEHAVIOR_PROB)).collect();
        let sum: f64 = floored.iter().sum();
        floored.iter().map(|p| p / sum).collect()
    }
}

/// Diagonal Gaussian with a fixed, shared standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    mean: Vec<f64>,
    sigma: f64,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return invalid("sigma must be positive and finite");
        }
        if mean.is_empty() {
            return invalid("gaussian head needs at least one dimension");
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(AcerError::NumericFault("non-finite mean".into()));
        }
        Ok(GaussianHead { mean, sigma })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.mean.len() {
            return invalid(format!("action has {} dims, head has {}", action.len(), self.mean.len()));
        }
        Ok(())
    }

    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        self.check(action)?;
        let s2 = self.sigma * self.sigma;
        let sq: f64 = action.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * sq / s2 - d * (self.sigma * (2.0 * PI).sqrt()).ln())
    }

    /// `(action - mean) / sigma^2`
    pub fn grad_log_prob(&self, action: &[f64]) -> Result<Vec<f64>> {
        self.check(action)?;
        let s2 = self.sigma * self.sigma;
        Ok(action.iter().zip(&self.mean).map(|(a, m)| (a - m) / s2).collect())
    }

    /// `KL(self || other)` for diagonal Gaussians.
    pub fn kl(&self, other: &GaussianHead) -> Result<f64> {
        if self.dim() != other.dim() {
            return invalid("gaussian heads differ in dimension");
        }
        let (s1, s2) = (self.sigma, other.sigma);
        let sq: f64 = self.mean.iter().zip(&other.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let d = self.dim() as f64;
        Ok(d * ((s2 / s1).ln() + s1 * s1 / (2.0 * s2 * s2) - 0.5) + sq / (2.0 * s2 * s2))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean.iter().map(|m| m + self.sigma * standard_normal(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    Categorical(CategoricalHead),
    Gaussian(GaussianHead),
}

impl PolicyHead {
    pub fn stats(&self) -> &[f64] {
        match self {
            PolicyHead::Categorical(h) => h.logits(),
            PolicyHead::Gaussian(h) => h.mean(),
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (PolicyHead::Categorical(h), Action::Discrete(a)) => h.log_prob(*a),
            (PolicyHead::Gaussian(h), Action::Continuous(x)) => h.log_prob(x),
            _ => invalid("policy head and action kinds differ"),
        }
    }

    /// Gradient of `log f(action | stats)` with respect to the statistics.
    pub fn grad_log_prob_wrt_stats(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (PolicyHead::Categorical(h), Action::Discrete(a)) => h.grad_log_prob(*a),
            (PolicyHead::Gaussian(h), Action::Continuous(x)) => h.grad_log_prob(x),
            _ => invalid("policy head and action kinds differ"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            PolicyHead::Categorical(h) => Action::Discrete(h.sample(rng)),
            PolicyHead::Gaussian(h) => Action::Continuous(h.sample(rng)),
        }
    }

    /// Greedy action for discrete heads, the mean for Gaussian heads.
    pub fn mode(&self) -> Action {
        match self {
            PolicyHead::Categorical(h) => Action::Discrete(h.greedy()),
            PolicyHead::Gaussian(h) => Action::Continuous(h.mean().to_vec()),
        }
    }

    pub fn behavior(&self) -> BehaviorPolicy {
        match self {
            PolicyHead::Categorical(h) => BehaviorPolicy::Categorical { probs: h.behavior_probs() },
            PolicyHead::Gaussian(h) => BehaviorPolicy::Gaussian { mean: h.mean().to_vec(), sigma: h.sigma() },
        }
    }
}

/// `KL(head_a || head_b)`
pub fn kl(head_a: &PolicyHead, head_b: &PolicyHead) -> Result<f64> {
    match (head_a, head_b) {
        (PolicyHead::Categorical(a), PolicyHead::Categorical(b)) => a.kl(b),
        (PolicyHead::Gaussian(a), PolicyHead::Gaussian(b)) => a.kl(b),
        _ => invalid("KL between different families"),
    }
}

/// Gradient of `KL(head_avg || head_cur)` with respect to the current head's statistics.
pub fn grad_kl_wrt_second_stats(head_avg: &PolicyHead, head_cur: &PolicyHead) -> Result<Vec<f64>> {
    match (head_avg, head_cur) {
        (PolicyHead::Categorical(avg), PolicyHead::Categorical(cur)) => {
            if avg.n_actions() != cur.n_actions() {
                return invalid("categorical heads differ in size");
            }
            Ok(cur.probs().iter().zip(avg.probs()).map(|(c, a)| c - a).collect())
        }
        (PolicyHead::Gaussian(avg), PolicyHead::Gaussian(cur)) => {
            if avg.dim() != cur.dim() {
                return invalid("gaussian heads differ in dimension");
            }
            let s2 = cur.sigma() * cur.sigma();
            Ok(cur.mean().iter().zip(avg.mean()).map(|(c, a)| (c - a) / s2).collect())
        }
        _ => invalid("KL between different families"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationMode {
    /// `rho_bar = min(c, rho)`
    Discrete { c: f64 },
    /// `rho_bar = min(1, rho^(1/d))`
    Continuous { d: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceRatio {
    pub rho: f64,
    pub rho_bar: f64,
    pub c: f64,
}

pub fn importance_ratio(
    head_pi: &PolicyHead,
    stored_mu: &BehaviorPolicy,
    action: &Action,
    mode: TruncationMode,
) -> Result<ImportanceRatio> {
    let mu = stored_mu.likelihood(action)?;
    if !(mu > 0.0) {
        return Err(AcerError::CorruptedData(format!("behavior likelihood {mu} at taken action")));
    }
    let rho = match (head_pi, stored_mu, action) {
        (PolicyHead::Gaussian(pi), BehaviorPolicy::Gaussian { .. }, Action::Continuous(a)) => {
            // Ratio in log space; densities can underflow far from the mean.
            (pi.log_prob(a)? - mu.ln()).exp()
        }
        _ => head_pi.log_prob(action)?.exp() / mu,
    };
    Ok(match mode {
        TruncationMode::Discrete { c } => ImportanceRatio { rho, rho_bar: c.min(rho), c },
        TruncationMode::Continuous { d } => {
            ImportanceRatio { rho, rho_bar: rho.powf(1.0 / d as f64).min(1.0), c: 1.0 }
        }
    })
}
