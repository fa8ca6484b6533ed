use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, EnvSpec, Environment, Observation, Step};
use crate::error::{invalid, Result};
use crate::policy::standard_normal;

/// Integration step of the double integrator.
pub const DT: f64 = 0.1;
/// Weight of the action cost in the reward.
pub const ACTION_COST: f64 = 0.1;
pub const HORIZON: usize = 500;
const POSITION_LIMIT: f64 = 5.0;

/// Point mass with `dim` independent double-integrator axes, driven to the origin.
///
/// Observation is `[position - target, velocity]`. The force is clipped to
/// `[-1, 1]` per axis before it is applied or charged. Reward is
/// `-(|position - target|^2 + 0.1 |force|^2)` evaluated at the pre-step state.
/// Starts are drawn uniformly from `[-1, 1]^dim` at rest.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    spec: EnvSpec,
    dim: usize,
    sigma_noise: f64,
    position: Vec<f64>,
    velocity: Vec<f64>,
    target: Vec<f64>,
    steps: usize,
    rng: ChaCha8Rng,
}

pub fn make_point_mass_env(dim: usize, sigma_noise: f64, seed: u64) -> Result<PointMassEnv> {
    if !(1..=3).contains(&dim) {
        return invalid(format!("point mass dimension must be 1, 2 or 3, got {dim}"));
    }
    if !(sigma_noise >= 0.0 && sigma_noise.is_finite()) {
        return invalid("noise scale must be finite and nonnegative");
    }
    Ok(PointMassEnv {
        spec: EnvSpec {
            name: format!("pointmass-{dim}"),
            observation_dim: 2 * dim,
            action_space: ActionSpace::Continuous(dim),
            gamma: 0.99,
            r_max: dim as f64 * (POSITION_LIMIT * POSITION_LIMIT + ACTION_COST),
            max_steps: HORIZON,
        },
        dim,
        sigma_noise,
        position: vec![0.0; dim],
        velocity: vec![0.0; dim],
        target: vec![0.0; dim],
        steps: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl PointMassEnv {
    pub fn set_state(&mut self, position: &[f64], velocity: &[f64]) {
        self.position.copy_from_slice(position);
        self.velocity.copy_from_slice(velocity);
        self.steps = 0;
    }

    pub fn position(&self) -> &[f64] {
        &self.position
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    fn observe(&self) -> Observation {
        let mut obs: Vec<f64> = self.position.iter().zip(&self.target).map(|(p, t)| p - t).collect();
        obs.extend_from_slice(&self.velocity);
        obs
    }
}

impl Environment for PointMassEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Observation {
        for i in 0..self.dim {
            self.position[i] = self.rng.gen_range(-1.0..=1.0);
            self.velocity[i] = 0.0;
        }
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let force: Vec<f64> = match action {
            Action::Continuous(a) if a.len() == self.dim => a.iter().map(|u| u.clamp(-1.0, 1.0)).collect(),
            _ => return invalid(format!("point mass expects a {}-vector action", self.dim)),
        };
        if force.iter().any(|u| !u.is_finite()) {
            return invalid("non-finite action");
        }
        let error: f64 = self.position.iter().zip(&self.target).map(|(p, t)| (p - t) * (p - t)).sum();
        let effort: f64 = force.iter().map(|u| u * u).sum();
        let reward = -(error + ACTION_COST * effort);
        for i in 0..self.dim {
            self.position[i] += DT * self.velocity[i];
            self.velocity[i] += DT * force[i];
            if self.sigma_noise > 0.0 {
                self.velocity[i] += self.sigma_noise * standard_normal(&mut self.rng);
            }
            if self.position[i].abs() > POSITION_LIMIT {
                self.position[i] = self.position[i].clamp(-POSITION_LIMIT, POSITION_LIMIT);
                self.velocity[i] = 0.0;
            }
        }
        self.steps += 1;
        Ok(Step {
            observation: self.observe(),
            reward,
            terminal: false,
            timeout: self.steps >= HORIZON,
        })
    }
}

/// Expected discounted return of the unconstrained linear-quadratic optimum
/// over the reset distribution, by backward Riccati recursion over the horizon.
///
/// Clipping can only lower the achievable return, so this is an upper bound
/// for any policy on the environment.
pub fn riccati_optimal_return(dim: usize, gamma: f64) -> f64 {
    // Per-axis state (p, v): A = [[1, DT], [0, 1]], B = [0, DT], Q = diag(1, 0), R = ACTION_COST.
    let mut p = [[0.0f64; 2]; 2];
    for _ in 0..HORIZON {
        // A'PA
        let pa = [
            [p[0][0], p[0][0] * DT + p[0][1]],
            [p[1][0], p[1][0] * DT + p[1][1]],
        ];
        let apa = [
            [pa[0][0], pa[0][1]],
            [DT * pa[0][0] + pa[1][0], DT * pa[0][1] + pa[1][1]],
        ];
        // B'P B and A'P B
        let bpb = DT * DT * p[1][1];
        let apb = [DT * (p[0][1]), DT * (DT * p[0][1] + p[1][1])];
        let denom = ACTION_COST + gamma * bpb;
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                next[i][j] = gamma * apa[i][j] - gamma * gamma * apb[i] * apb[j] / denom;
            }
        }
        next[0][0] += 1.0;
        p = next;
    }
    // Starts are uniform on [-1, 1] at rest: E[p0^2] = 1/3.
    -(dim as f64) * p[0][0] / 3.0
}

/// Expected discounted return of applying zero force from the reset distribution.
pub fn zero_action_return(dim: usize, gamma: f64) -> f64 {
    let discount_sum: f64 = (0..HORIZON).map(|t| gamma.powi(t as i32)).sum();
    -(dim as f64) * discount_sum / 3.0
}
