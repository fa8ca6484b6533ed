use rand::Rng;

use crate::error::{invalid, Result};

/// Finite MDP with exact transition and reward tables.
///
/// Terminal states must be absorbing with zero reward, so every quantity
/// defined over infinite sums is well defined without special cases.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub r_max: f64,
    pub terminal_states: Vec<usize>,
}

impl TabularMDP {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        r_max: f64,
        terminal_states: Vec<usize>,
    ) -> Result<Self> {
        let mdp = TabularMDP { transition, reward, gamma, r_max, terminal_states };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let n = self.transition.len();
        if n == 0 || self.reward.len() != n {
            return invalid("transition and reward tables must cover the same nonempty state set");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid("gamma must lie in [0, 1)");
        }
        let na = self.transition[0].len();
        if na == 0 {
            return invalid("at least one action required");
        }
        for s in 0..n {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return invalid("every state needs the same action count");
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != n || row.iter().any(|p| *p < 0.0) {
                    return invalid(format!("bad transition row at ({s}, {a})"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return invalid(format!("transition row ({s}, {a}) sums to {sum}"));
                }
                if !(self.reward[s][a].abs() <= self.r_max) {
                    return invalid(format!("reward at ({s}, {a}) exceeds r_max"));
                }
            }
        }
        for &t in &self.terminal_states {
            if t >= n {
                return invalid("terminal state out of range");
            }
            for a in 0..na {
                if self.transition[t][a][t] != 1.0 || self.reward[t][a] != 0.0 {
                    return invalid(format!("terminal state {t} must be absorbing with zero reward"));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transition[0].len()
    }

    /// Dense random MDP with rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
            .collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        TabularMDP::new(transition, reward, gamma, 1.0, Vec::new()).expect("random MDP is well formed")
    }

    /// Optimal state values by value iteration until the sup-norm change drops below `tol`.
    pub fn optimal_values(&self, tol: f64) -> Vec<f64> {
        let (n, na) = (self.n_states(), self.n_actions());
        let mut v = vec![0.0; n];
        loop {
            let mut delta = 0.0f64;
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    (0..na)
                        .map(|a| self.reward[s][a] + self.gamma * dot(&self.transition[s][a], &v))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for s in 0..n {
                delta = delta.max((next[s] - v[s]).abs());
            }
            v = next;
            if delta < tol {
                return v;
            }
        }
    }
}

/// Random probability vector with every entry bounded away from zero.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    // Put the rounding residue on the largest entry so the row sums to 1 tightly.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);
    p[imax] += residue;
    p
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
