//! Seeded training runs with learning-curve output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acer::{AcerConfig, Agent, Algorithm, SharedAgent, Trainer};
use crate::approximator::write_checkpoint;
use crate::env::{evaluate_episode, make_env, EnvRunner, EnvSpec};
use crate::error::{invalid, AcerError, Result};
use crate::replay::{master_step, MasterStepReport, ReplayMemory, ReplaySchedule, UpdateDiagnostics};

pub const CURVE_HEADER: &str = "step,episodes,eval_return_mean,eval_return_std,critic_loss,mean_rho,kl_to_average";
pub const SEED_ENV_VAR: &str = "ACERLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_name: String,
    pub algo: Algorithm,
    /// Checked against the environment when given.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    pub total_master_steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub output_path: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub acer: AcerConfig,
}

fn default_eval_episodes() -> usize {
    5
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| AcerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AcerError::Config(e.to_string()))
    }

    /// Replaces the seed with `ACERLAB_SEED` when that variable is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var(SEED_ENV_VAR) {
            self.seed = value
                .trim()
                .parse()
                .map_err(|_| AcerError::Config(format!("{SEED_ENV_VAR}='{value}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return invalid("eval_every must be at least 1");
        }
        if self.eval_episodes == 0 {
            return invalid("eval_episodes must be at least 1");
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        self.acer.validate()?;
        let spec = make_env(&self.env_name, 0)?.spec().clone();
        let mode = if spec.action_space.is_discrete() { Mode::Discrete } else { Mode::Continuous };
        if let Some(m) = self.mode {
            if m != mode {
                return Err(AcerError::Config(format!("{} has {mode:?} actions, config says {m:?}", self.env_name)));
            }
        }
        Ok(())
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub episodes: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic_loss: f64,
    pub mean_rho: f64,
    pub kl_to_average: f64,
}

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.eval_return_mean,
            self.eval_return_std,
            self.critic_loss,
            self.mean_rho,
            self.kl_to_average
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_name: String,
    pub algo: String,
    pub seed: u64,
    pub master_steps: usize,
    pub updates: usize,
    pub frames: usize,
    pub episodes: usize,
    /// Evaluation of the final parameters.
    pub final_eval_mean: f64,
    pub final_eval_std: f64,
    /// Largest per-step KL to the average policy seen in any update.
    pub max_kl_to_average: f64,
    pub diagnostics_finite: bool,
    pub curve: Vec<CurveRow>,
}

#[derive(Default)]
struct Interval {
    updates: usize,
    critic_loss: f64,
    mean_rho: f64,
    kl: f64,
}

impl Interval {
    fn add(&mut self, d: &UpdateDiagnostics) {
        self.updates += 1;
        self.critic_loss += d.critic_loss;
        self.mean_rho += d.mean_rho;
        self.kl += d.mean_kl_to_average;
    }

    fn means(&self) -> (f64, f64, f64) {
        if self.updates == 0 {
            return (0.0, 0.0, 0.0);
        }
        let n = self.updates as f64;
        (self.critic_loss / n, self.mean_rho / n, self.kl / n)
    }
}

#[derive(Default)]
struct Totals {
    updates: usize,
    frames: usize,
    max_kl: f64,
    finite: bool,
}

impl Totals {
    fn add(&mut self, report: &MasterStepReport, interval: &mut Interval) {
        self.frames += report.frames;
        for d in report.updates() {
            self.updates += 1;
            self.max_kl = self.max_kl.max(d.max_kl_to_average);
            self.finite &= d.is_finite();
            interval.add(d);
        }
    }
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1_0000_0001
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64 + 1);
    rng
}

/// Mean and sample standard deviation of greedy or mean-action returns.
pub fn evaluate(agent: &Agent, env_name: &str, seed: u64, episodes: usize, gamma: f64) -> Result<(f64, f64)> {
    let mut env = make_env(env_name, eval_seed(seed))?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        returns.push(evaluate_episode(env.as_mut(), |x| agent.eval_action(x), gamma)?);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

struct Worker {
    trainer: Trainer,
    runner: EnvRunner,
    memory: ReplayMemory,
    schedule: ReplaySchedule,
    rng: ChaCha8Rng,
}

impl Worker {
    fn new(cfg: &ExperimentConfig, shared: &SharedAgent, spec: &EnvSpec, index: usize) -> Result<Self> {
        let mut rng = worker_rng(cfg.seed, index);
        let env_seed: u64 = rng.gen();
        let schedule_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        Ok(Worker {
            trainer: Trainer::new(shared.clone(), cfg.acer.clone(), cfg.algo, spec.gamma)?,
            runner: EnvRunner::new(make_env(&cfg.env_name, env_seed)?),
            memory: ReplayMemory::new(cfg.acer.replay_capacity),
            schedule: ReplaySchedule::new(cfg.acer.replay_ratio, schedule_rng)?,
            rng,
        })
    }

    fn step(&mut self) -> Result<MasterStepReport> {
        master_step(&mut self.trainer, &mut self.runner, &mut self.memory, &mut self.schedule, &mut self.rng)
    }
}

fn write_params(path: &Path, agent: &Agent) -> Result<()> {
    let named = agent.named_params();
    let refs: Vec<(&str, &crate::approximator::ParamVector)> = named.iter().map(|(n, p)| (n.as_str(), *p)).collect();
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut out, &refs)?;
    out.flush()?;
    Ok(())
}

/// Trains per `cfg`, writing `curve.csv`, `summary.json` and `params.ckpt`
/// under `cfg.output_path`.
///
/// A curve row is written after every `eval_every` master steps. On a
/// numeric fault the last finite parameters are checkpointed and the fault
/// is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_path)?;
    let spec = make_env(&cfg.env_name, 0)?.spec().clone();
    let gamma = cfg.acer.gamma.unwrap_or(spec.gamma);
    let mut init_rng = worker_rng(cfg.seed, 0);
    let agent = Agent::new(&spec, cfg.algo, &cfg.acer, &mut init_rng)?;
    let shared = crate::acer::SharedState::new(agent, &cfg.acer).into_shared();

    let curve_path = cfg.output_path.join("curve.csv");
    let mut curve_file = BufWriter::new(fs::File::create(&curve_path)?);
    writeln!(curve_file, "{CURVE_HEADER}")?;

    let mut totals = Totals { finite: true, ..Default::default() };
    let mut curve = Vec::new();
    let snapshot = |shared: &SharedAgent| shared.lock().expect("shared agent lock poisoned").agent.clone();

    let outcome: Result<usize> = if cfg.workers == 1 {
        let mut worker = Worker::new(cfg, &shared, &spec, 0)?;
        let mut interval = Interval::default();
        let mut last_good = snapshot(&shared);
        let mut done = 0;
        let mut result = Ok(());
        while done < cfg.total_master_steps {
            let report = match worker.step() {
                Ok(r) => r,
                Err(e) => {
                    result = Err((e, last_good.clone()));
                    break;
                }
            };
            totals.add(&report, &mut interval);
            done += 1;
            let current = snapshot(&shared);
            if !current.is_finite() {
                result = Err((AcerError::NumericFault("parameters became non-finite".into()), last_good.clone()));
                break;
            }
            last_good = current;
            if done % cfg.eval_every == 0 {
                let (mean, std) = evaluate(&last_good, &cfg.env_name, cfg.seed, cfg.eval_episodes, gamma)?;
                let (critic_loss, mean_rho, kl) = interval.means();
                let row = CurveRow {
                    step: done,
                    episodes: report.episodes_completed,
                    eval_return_mean: mean,
                    eval_return_std: std,
                    critic_loss,
                    mean_rho,
                    kl_to_average: kl,
                };
                writeln!(curve_file, "{}", row.to_csv())?;
                curve.push(row);
                interval = Interval::default();
            }
        }
        match result {
            Ok(()) => Ok(worker.runner.episodes_completed()),
            Err((e, good)) => {
                curve_file.flush()?;
                write_params(&cfg.output_path.join("params.ckpt"), &good)?;
                return Err(e);
            }
        }
    } else {
        run_parallel(cfg, &shared, &spec, gamma, &mut totals, &mut curve, &mut curve_file)
    };
    let episodes = match outcome {
        Ok(e) => e,
        Err(e) => {
            curve_file.flush()?;
            write_params(&cfg.output_path.join("params.ckpt"), &snapshot(&shared))?;
            return Err(e);
        }
    };
    curve_file.flush()?;

    let final_agent = snapshot(&shared);
    let (final_eval_mean, final_eval_std) = evaluate(&final_agent, &cfg.env_name, cfg.seed, cfg.eval_episodes, gamma)?;
    write_params(&cfg.output_path.join("params.ckpt"), &final_agent)?;
    let summary = RunSummary {
        env_name: cfg.env_name.clone(),
        algo: cfg.algo.to_string(),
        seed: cfg.seed,
        master_steps: cfg.total_master_steps,
        updates: totals.updates,
        frames: totals.frames,
        episodes,
        final_eval_mean,
        final_eval_std,
        max_kl_to_average: totals.max_kl,
        diagnostics_finite: totals.finite,
        curve,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| AcerError::Config(e.to_string()))?;
    fs::write(cfg.output_path.join("summary.json"), json)?;
    Ok(summary)
}

/// Workers share one agent; the calling thread evaluates and writes rows as
/// the global master-step count crosses each evaluation point.
fn run_parallel(
    cfg: &ExperimentConfig,
    shared: &SharedAgent,
    spec: &EnvSpec,
    gamma: f64,
    totals: &mut Totals,
    curve: &mut Vec<CurveRow>,
    curve_file: &mut BufWriter<fs::File>,
) -> Result<usize> {
    let counter = AtomicUsize::new(0);
    let episodes = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let reports = std::sync::Mutex::new(Vec::<MasterStepReport>::new());
    let mut workers = Vec::with_capacity(cfg.workers);
    for i in 0..cfg.workers {
        workers.push(Worker::new(cfg, shared, spec, i)?);
    }
    let failure = std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = workers
            .into_iter()
            .map(|mut w| {
                let (counter, episodes, stop, reports) = (&counter, &episodes, &stop, &reports);
                scope.spawn(move || -> Result<()> {
                    let mut previous = 0;
                    while !stop.load(Ordering::SeqCst) {
                        if counter.fetch_add(1, Ordering::SeqCst) >= cfg.total_master_steps {
                            break;
                        }
                        let report = match w.step() {
                            Ok(r) => r,
                            Err(e) => {
                                stop.store(true, Ordering::SeqCst);
                                return Err(e);
                            }
                        };
                        episodes.fetch_add(report.episodes_completed - previous, Ordering::SeqCst);
                        previous = report.episodes_completed;
                        reports.lock().expect("report lock poisoned").push(report);
                    }
                    Ok(())
                })
            })
            .collect();

        let mut next_eval = cfg.eval_every;
        let mut interval = Interval::default();
        let mut finished = 0;
        loop {
            let all_done = handles.iter().all(|h| h.is_finished());
            for report in reports.lock().expect("report lock poisoned").drain(..) {
                totals.add(&report, &mut interval);
                finished += 1;
            }
            while next_eval <= finished.min(cfg.total_master_steps) {
                let agent = shared.lock().expect("shared agent lock poisoned").agent.clone();
                let (mean, std) = evaluate(&agent, &cfg.env_name, cfg.seed, cfg.eval_episodes, gamma)?;
                let (critic_loss, mean_rho, kl) = interval.means();
                let row = CurveRow {
                    step: next_eval,
                    episodes: episodes.load(Ordering::SeqCst),
                    eval_return_mean: mean,
                    eval_return_std: std,
                    critic_loss,
                    mean_rho,
                    kl_to_average: kl,
                };
                writeln!(curve_file, "{}", row.to_csv())?;
                curve.push(row);
                interval = Interval::default();
                next_eval += cfg.eval_every;
            }
            if all_done {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    });
    failure?;
    Ok(episodes.load(Ordering::SeqCst))
}

/// One random-search trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub trial: usize,
    pub lr: f64,
    pub delta: f64,
    pub final_eval_mean: f64,
    pub status: String,
}

/// Learning rate log-uniform in `[1e-4, 10^-3.3]`, delta uniform in `[0.1, 2]`.
pub fn sample_hyperparameters<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let log_lr = rng.gen_range(-4.0..=-3.3);
    (10f64.powf(log_lr), rng.gen_range(0.1..=2.0))
}

/// Random search over learning rate and trust-region size. Trial `i` runs in
/// `output_path/trial-<i>`; results go to `output_path/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<SweepTrial>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5eeb);
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let (lr, delta) = sample_hyperparameters(&mut rng);
        let mut trial_cfg = cfg.clone();
        trial_cfg.acer.lr = lr;
        trial_cfg.acer.delta = delta;
        trial_cfg.seed = cfg.seed.wrapping_add(trial as u64);
        trial_cfg.output_path = cfg.output_path.join(format!("trial-{trial}"));
        let (final_eval_mean, status) = match run(&trial_cfg) {
            Ok(summary) => (summary.final_eval_mean, "ok".to_string()),
            Err(AcerError::NumericFault(msg)) => (f64::NAN, format!("numeric-fault: {msg}")),
            Err(e) => return Err(e),
        };
        results.push(SweepTrial { trial, lr, delta, final_eval_mean, status });
    }
    let mut out = String::from("trial,lr,delta,final_eval_mean,status\n");
    for r in &results {
        out.push_str(&format!("{},{},{},{},{}\n", r.trial, r.lr, r.delta, r.final_eval_mean, r.status));
    }
    fs::write(cfg.output_path.join("sweep.csv"), out)?;
    Ok(results)
}
