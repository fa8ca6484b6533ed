//! Trajectory replay memory and the on-policy/replay interleaving schedule.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvRunner, Trajectory};
use crate::error::{invalid, AcerError, Result};

pub const DEFAULT_CAPACITY_FRAMES: usize = 5000;

/// Whole-trajectory ring buffer bounded by a total frame budget.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity_frames: usize,
    trajectories: VecDeque<Trajectory>,
    current_frames: usize,
    reads: u64,
}

impl ReplayMemory {
    pub fn new(capacity_frames: usize) -> Self {
        ReplayMemory { capacity_frames, trajectories: VecDeque::new(), current_frames: 0, reads: 0 }
    }

    pub fn capacity_frames(&self) -> usize {
        self.capacity_frames
    }

    pub fn current_frames(&self) -> usize {
        self.current_frames
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of successful [`ReplayMemory::sample`] calls so far.
    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        if traj.is_empty() {
            return invalid("cannot store an empty trajectory");
        }
        if traj.len() > self.capacity_frames {
            return invalid(format!(
                "trajectory of {} frames exceeds capacity {}",
                traj.len(),
                self.capacity_frames
            ));
        }
        self.current_frames += traj.len();
        self.trajectories.push_back(traj);
        while self.current_frames > self.capacity_frames {
            let old = self.trajectories.pop_front().expect("frames imply a resident trajectory");
            self.current_frames -= old.len();
        }
        Ok(())
    }

    /// A uniformly chosen resident trajectory.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<&Trajectory> {
        if self.trajectories.is_empty() {
            return Err(AcerError::EmptyMemory);
        }
        self.reads += 1;
        let i = rng.gen_range(0..self.trajectories.len());
        Ok(&self.trajectories[i])
    }
}

/// Draws the number of replay calls per master step from Poisson(r).
#[derive(Debug, Clone)]
pub struct ReplaySchedule {
    replay_ratio: f64,
    threshold: f64,
    rng: ChaCha8Rng,
}

impl ReplaySchedule {
    pub fn new(replay_ratio: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(replay_ratio >= 0.0) || !replay_ratio.is_finite() {
            return invalid("replay ratio must be finite and non-negative");
        }
        Ok(ReplaySchedule { replay_ratio, threshold: (-replay_ratio).exp(), rng })
    }

    pub fn replay_ratio(&self) -> f64 {
        self.replay_ratio
    }

    /// Knuth's multiplication method.
    pub fn poisson_replay_count(&mut self) -> usize {
        let mut product = 1.0;
        let mut count = 0;
        loop {
            product *= self.rng.gen::<f64>();
            if product <= self.threshold {
                return count;
            }
            count += 1;
        }
    }
}

/// Summary of one update call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub steps: usize,
    pub policy_objective: f64,
    pub critic_loss: f64,
    pub mean_rho: f64,
    /// Fraction of steps whose importance weight was clipped at `c`.
    pub truncation_active_fraction: f64,
    pub mean_kl_to_average: f64,
    pub max_kl_to_average: f64,
    /// Fraction of steps where the projected direction violated `k.z <= delta`.
    pub constraint_violation_fraction: f64,
    pub grad_norm: f64,
}

impl UpdateDiagnostics {
    pub fn is_finite(&self) -> bool {
        [
            self.policy_objective,
            self.critic_loss,
            self.mean_rho,
            self.truncation_active_fraction,
            self.mean_kl_to_average,
            self.max_kl_to_average,
            self.constraint_violation_fraction,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A trainer driven by [`master_step`].
pub trait Learner {
    /// Refresh the acting copy from the shared parameters and act for one segment.
    fn collect(&mut self, runner: &mut EnvRunner, rng: &mut ChaCha8Rng) -> Result<Trajectory>;

    /// Compute and apply one update from `traj`.
    fn learn(&mut self, traj: &Trajectory, on_policy: bool, rng: &mut ChaCha8Rng) -> Result<UpdateDiagnostics>;

    /// Whether the fresh on-policy segment is itself used for an update.
    fn on_policy_trains(&self) -> bool {
        true
    }

    fn uses_replay(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct MasterStepReport {
    pub frames: usize,
    pub episodes_completed: usize,
    pub on_policy: Option<UpdateDiagnostics>,
    pub replay: Vec<UpdateDiagnostics>,
    pub replay_scheduled: usize,
}

impl MasterStepReport {
    pub fn updates(&self) -> impl Iterator<Item = &UpdateDiagnostics> {
        self.on_policy.iter().chain(self.replay.iter())
    }
}

/// One on-policy call followed by `Poisson(r)` replay calls.
///
/// The fresh segment enters memory before the replay calls run. Replay calls
/// scheduled while the memory is empty are skipped.
pub fn master_step<L: Learner + ?Sized>(
    learner: &mut L,
    runner: &mut EnvRunner,
    memory: &mut ReplayMemory,
    schedule: &mut ReplaySchedule,
    rng: &mut ChaCha8Rng,
) -> Result<MasterStepReport> {
    let traj = learner.collect(runner, rng)?;
    let mut report = MasterStepReport { frames: traj.len(), ..Default::default() };
    if learner.on_policy_trains() {
        report.on_policy = Some(learner.learn(&traj, true, rng)?);
    }
    if learner.uses_replay() {
        memory.push(traj)?;
        report.replay_scheduled = schedule.poisson_replay_count();
        for _ in 0..report.replay_scheduled {
            if memory.is_empty() {
                continue;
            }
            let sampled = memory.sample(rng)?.clone();
            report.replay.push(learner.learn(&sampled, false, rng)?);
        }
    }
    report.episodes_completed = runner.episodes_completed();
    Ok(report)
}
