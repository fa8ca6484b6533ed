use super::{one_hot, Action, ActionSpace, EnvSpec, Environment, Observation, Step, TabularMDP};
use crate::error::{invalid, Result};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// A corridor of `length` states followed by an absorbing goal.
///
/// The agent starts in state 0. Moving right from the last state enters the
/// goal and pays 1; every other transition pays 0. Moving left from state 0
/// stays put.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    spec: EnvSpec,
    length: usize,
    position: usize,
    steps: usize,
}

pub fn make_chain_env(length: usize, gamma: f64) -> Result<ChainEnv> {
    if length < 2 {
        return invalid(format!("chain length must be at least 2, got {length}"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return invalid("gamma must lie in [0, 1)");
    }
    Ok(ChainEnv {
        spec: EnvSpec {
            name: format!("chain-{length}"),
            observation_dim: length,
            action_space: ActionSpace::Discrete(2),
            gamma,
            r_max: 1.0,
            max_steps: 200,
        },
        length,
        position: 0,
        steps: 0,
    })
}

impl ChainEnv {
    pub fn length(&self) -> usize {
        self.length
    }

    /// Place the agent in `state` (used by tests and oracles).
    pub fn set_state(&mut self, state: usize) {
        self.position = state.min(self.length - 1);
        self.steps = 0;
    }

    /// Exact model: states `0..length` plus the absorbing goal at index `length`.
    pub fn to_tabular(&self) -> TabularMDP {
        let n = self.length + 1;
        let goal = self.length;
        let mut transition = vec![vec![vec![0.0; n]; 2]; n];
        let mut reward = vec![vec![0.0; 2]; n];
        for s in 0..self.length {
            transition[s][LEFT][s.saturating_sub(1)] = 1.0;
            transition[s][RIGHT][s + 1] = 1.0;
            if s + 1 == goal {
                reward[s][RIGHT] = 1.0;
            }
        }
        transition[goal][LEFT][goal] = 1.0;
        transition[goal][RIGHT][goal] = 1.0;
        TabularMDP::new(transition, reward, self.spec.gamma, 1.0, vec![goal])
            .expect("chain model is well formed")
    }
}

impl Environment for ChainEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Observation {
        self.position = 0;
        self.steps = 0;
        one_hot(0, self.length)
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let a = match action {
            Action::Discrete(a) if *a < 2 => *a,
            _ => return invalid(format!("chain expects action 0 or 1, got {action:?}")),
        };
        self.steps += 1;
        let mut reward = 0.0;
        let mut terminal = false;
        if a == RIGHT {
            if self.position + 1 == self.length {
                reward = 1.0;
                terminal = true;
                self.position = self.length;
            } else {
                self.position += 1;
            }
        } else {
            self.position = self.position.saturating_sub(1);
        }
        Ok(Step {
            observation: one_hot(self.position, self.length),
            reward,
            terminal,
            timeout: !terminal && self.steps >= self.spec.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::returns::tabular_q_pi;

    #[test]
    fn rejects_short_chain() {
        assert!(make_chain_env(1, 0.99).is_err());
        assert!(make_chain_env(0, 0.99).is_err());
    }

    #[test]
    fn goal_pays_one_and_terminates() {
        let mut env = make_chain_env(2, 0.99).unwrap();
        env.reset();
        env.set_state(1);
        let step = env.step(&Action::Discrete(RIGHT)).unwrap();
        assert_eq!(step.reward, 1.0);
        assert!(step.terminal);
    }

    #[test]
    fn optimal_return_from_start() {
        let env = make_chain_env(5, 0.99).unwrap();
        let mdp = env.to_tabular();
        let v = mdp.optimal_values(1e-13);
        assert!((v[0] - 0.96059601).abs() < 1e-10);
        let env = make_chain_env(2, 0.99).unwrap();
        let v = env.to_tabular().optimal_values(1e-13);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_value_matches_linear_solve() {
        // Independent route: for the uniform policy the chain values solve a
        // tridiagonal system, which we solve by fixed-point sweeps on V only.
        let env = make_chain_env(5, 0.99).unwrap();
        let mdp = env.to_tabular();
        let pi = vec![vec![0.5, 0.5]; mdp.n_states()];
        let q = tabular_q_pi(&mdp, &pi).unwrap();
        let g = 0.99;
        let mut v = [0.0f64; 6];
        for _ in 0..200_000 {
            let mut next = [0.0; 6];
            for s in 0..5usize {
                let left = g * v[s.saturating_sub(1)];
                let right = if s == 4 { 1.0 } else { g * v[s + 1] };
                next[s] = 0.5 * left + 0.5 * right;
            }
            v = next;
        }
        let v0 = 0.5 * q[0][0] + 0.5 * q[0][1];
        assert!((v0 - v[0]).abs() < 1e-10, "{v0} vs {}", v[0]);
    }
}
