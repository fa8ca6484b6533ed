use super::{one_hot, Action, ActionSpace, EnvSpec, Environment, Observation, Step, TabularMDP};
use crate::error::{invalid, Result};

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// Four-action gridworld with the goal in the corner opposite the start.
///
/// Cells are indexed `y * width + x`; the agent starts at `(0, 0)` and the goal
/// sits at `(width - 1, height - 1)`. Entering the goal pays 1 and ends the
/// episode. Bumping into a wall leaves the agent in place.
#[derive(Debug, Clone)]
pub struct GridWorldEnv {
    spec: EnvSpec,
    width: usize,
    height: usize,
    x: usize,
    y: usize,
    steps: usize,
}

pub fn make_gridworld_env(width: usize, height: usize) -> Result<GridWorldEnv> {
    if width < 2 || height < 2 {
        return invalid(format!("grid must be at least 2x2, got {width}x{height}"));
    }
    Ok(GridWorldEnv {
        spec: EnvSpec {
            name: format!("grid-{width}x{height}"),
            observation_dim: width * height,
            action_space: ActionSpace::Discrete(4),
            gamma: 0.99,
            r_max: 1.0,
            max_steps: 200,
        },
        width,
        height,
        x: 0,
        y: 0,
        steps: 0,
    })
}

impl GridWorldEnv {
    pub fn goal(&self) -> usize {
        self.width * self.height - 1
    }

    pub fn set_cell(&mut self, x: usize, y: usize) {
        self.x = x.min(self.width - 1);
        self.y = y.min(self.height - 1);
        self.steps = 0;
    }

    fn moved(&self, x: usize, y: usize, action: usize) -> (usize, usize) {
        match action {
            UP => (x, y.saturating_sub(1)),
            RIGHT => ((x + 1).min(self.width - 1), y),
            DOWN => (x, (y + 1).min(self.height - 1)),
            _ => (x.saturating_sub(1), y),
        }
    }

    pub fn to_tabular(&self) -> TabularMDP {
        let n = self.width * self.height;
        let goal = self.goal();
        let mut transition = vec![vec![vec![0.0; n]; 4]; n];
        let mut reward = vec![vec![0.0; 4]; n];
        for s in 0..n {
            for a in 0..4 {
                if s == goal {
                    transition[s][a][s] = 1.0;
                    continue;
                }
                let (nx, ny) = self.moved(s % self.width, s / self.width, a);
                let next = ny * self.width + nx;
                transition[s][a][next] = 1.0;
                if next == goal {
                    reward[s][a] = 1.0;
                }
            }
        }
        TabularMDP::new(transition, reward, self.spec.gamma, 1.0, vec![goal])
            .expect("grid model is well formed")
    }
}

impl Environment for GridWorldEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Observation {
        self.x = 0;
        self.y = 0;
        self.steps = 0;
        one_hot(0, self.width * self.height)
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            _ => return invalid(format!("grid expects an action in 0..4, got {action:?}")),
        };
        self.steps += 1;
        let (x, y) = self.moved(self.x, self.y, a);
        self.x = x;
        self.y = y;
        let cell = y * self.width + x;
        let terminal = cell == self.goal();
        Ok(Step {
            observation: one_hot(cell, self.width * self.height),
            reward: if terminal { 1.0 } else { 0.0 },
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
    fn rejects_degenerate_grid() {
        assert!(make_gridworld_env(1, 3).is_err());
        assert!(make_gridworld_env(3, 1).is_err());
    }

    #[test]
    fn step_into_goal() {
        let mut env = make_gridworld_env(2, 2).unwrap();
        env.reset();
        env.set_cell(1, 0);
        let step = env.step(&Action::Discrete(DOWN)).unwrap();
        assert_eq!(step.reward, 1.0);
        assert!(step.terminal);
    }

    #[test]
    fn shortest_path_return() {
        let mut env = make_gridworld_env(3, 3).unwrap();
        env.reset();
        let mut ret = 0.0;
        let mut discount = 1.0;
        for a in [RIGHT, RIGHT, DOWN, DOWN] {
            let step = env.step(&Action::Discrete(a)).unwrap();
            ret += discount * step.reward;
            discount *= 0.99;
        }
        assert!((ret - 0.970299).abs() < 1e-12);
        let v = env.to_tabular().optimal_values(1e-13);
        assert!((v[0] - 0.970299).abs() < 1e-10);
    }

    #[test]
    fn episode_cap() {
        let mut env = make_gridworld_env(3, 3).unwrap();
        env.reset();
        let mut last = None;
        for _ in 0..200 {
            last = Some(env.step(&Action::Discrete(UP)).unwrap());
        }
        assert!(last.unwrap().timeout);
    }

    #[test]
    fn uniform_values_satisfy_policy_evaluation() {
        let env = make_gridworld_env(3, 3).unwrap();
        let mdp = env.to_tabular();
        let pi = vec![vec![0.25; 4]; mdp.n_states()];
        let q = tabular_q_pi(&mdp, &pi).unwrap();
        // State values of the uniform policy obey the averaged Bellman equation.
        let v: Vec<f64> = q.iter().map(|row| row.iter().sum::<f64>() / 4.0).collect();
        for s in 0..9 {
            if s == 8 {
                assert_eq!(v[s], 0.0);
                continue;
            }
            let mut rhs = 0.0;
            for a in 0..4 {
                let (nx, ny) = env.moved(s % 3, s / 3, a);
                let next = ny * 3 + nx;
                rhs += 0.25 * if next == 8 { 1.0 } else { 0.99 * v[next] };
            }
            assert!((v[s] - rhs).abs() < 1e-10);
        }
        assert!(v[0] > 0.0 && v[0] < 0.970299);
    }
}
