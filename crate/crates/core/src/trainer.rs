//! The curriculum training loop: each epoch draws a fresh candidate goal set,
//! turns it into a goal distribution, collects episodes toward goals drawn from
//! it, and updates the policy and the value ensemble from the shared buffer.

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::HiddenActivation;
use crate::ddpg::{Agent, AgentError, AgentSpec, ExploreConfig, FeatureScale, GoalPolicy};
use crate::maze::{distance, Goal, Maze, MazeError};
use crate::replay::{ReplayBuffer, ReplayError, Transition};
use crate::seeds::stream_rng;
use crate::vds::{EnsembleUpdate, FKind, GoalDistribution, QEnsemble, SamplerError, SamplerMode};

pub const METRICS_HEADER: &str = "epoch,env_steps,success,mean_delta,max_delta,actor_loss,critic_loss,ensemble_loss,seconds";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {key}: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("epoch {epoch}: {source}")]
    Numeric {
        epoch: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub f_kind: FKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_candidates: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub updates_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub tau: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Vds,
            f_kind: FKind::Identity,
            k: 3,
            n_candidates: 100,
            lambda: 1.0,
            temperature: 1.0,
            batch_size: 1000,
            updates_per_epoch: 200,
            hidden: vec![64, 64],
            lr: 1e-3,
            tau: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HerConfig {
    pub enabled: bool,
    pub ratio: f64,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ratio: 4.0,
        }
    }
}

impl HerConfig {
    pub fn effective_ratio(&self) -> f64 {
        if self.enabled {
            self.ratio
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub explore: ExploreConfig,
    pub updates_per_episode: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            tau: 0.95,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch_size: 256,
            hidden: vec![64, 64],
            hidden_activation: HiddenActivation::Relu,
            explore: ExploreConfig::default(),
            updates_per_episode: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub n_epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub eval_every: usize,
    /// Episodes collected with one policy snapshot before their updates run.
    pub n_envs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_epochs: 50,
            episodes_per_epoch: 40,
            eval_episodes: 50,
            eval_every: 1,
            n_envs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maze file path, or `builtin:maze_a|maze_b|maze_c`.
    pub env: String,
    pub sampler: SamplerConfig,
    pub her: HerConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Serial member updates and no wall-clock values in `metrics.csv`.
    pub deterministic: bool,
    pub threads: usize,
    /// Grid points per axis for heatmaps and the density-distance statistic.
    pub heatmap_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "builtin:maze_a".into(),
            sampler: SamplerConfig::default(),
            her: HerConfig::default(),
            agent: AgentConfig::default(),
            schedule: ScheduleConfig::default(),
            buffer_capacity: 200_000,
            seed: 0,
            out_dir: None,
            deterministic: false,
            threads: 1,
            heatmap_resolution: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(TrainError::Config {
                    key: key.into(),
                    message: message.into(),
                })
            }
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let s = &self.sampler;
        check(s.k >= 1, "sampler.K", "must be at least 1")?;
        check(s.n_candidates >= 1, "sampler.n_candidates", "must be at least 1")?;
        check(s.lambda >= 0.0, "sampler.lambda", "must be >= 0")?;
        check(s.temperature > 0.0, "sampler.temperature", "must be > 0")?;
        check(s.batch_size >= 1, "sampler.batch_size", "must be at least 1")?;
        check(s.hidden.iter().all(|&h| h > 0), "sampler.hidden", "widths must be positive")?;
        check(s.lr > 0.0, "sampler.lr", "must be > 0")?;
        check(unit(s.tau), "sampler.tau", "must lie in [0, 1]")?;
        check(self.her.ratio >= 0.0 && self.her.ratio.is_finite(), "her.ratio", "must be finite and >= 0")?;
        let a = &self.agent;
        check(a.gamma > 0.0 && a.gamma < 1.0, "agent.gamma", "must lie in (0, 1)")?;
        check(unit(a.tau), "agent.tau", "must lie in [0, 1]")?;
        check(a.lr_actor > 0.0, "agent.lr_actor", "must be > 0")?;
        check(a.lr_critic > 0.0, "agent.lr_critic", "must be > 0")?;
        check(a.batch_size >= 1, "agent.batch_size", "must be at least 1")?;
        check(a.hidden.iter().all(|&h| h > 0), "agent.hidden", "widths must be positive")?;
        check(unit(a.explore.epsilon_random), "agent.explore.epsilon_random", "must lie in [0, 1]")?;
        check(a.explore.action_noise_scale >= 0.0, "agent.explore.action_noise_scale", "must be >= 0")?;
        let sch = &self.schedule;
        check(sch.n_epochs >= 1, "schedule.n_epochs", "must be at least 1")?;
        check(sch.episodes_per_epoch >= 1, "schedule.episodes_per_epoch", "must be at least 1")?;
        check(sch.eval_episodes >= 1, "schedule.eval_episodes", "must be at least 1")?;
        check(sch.eval_every >= 1, "schedule.eval_every", "must be at least 1")?;
        check(sch.n_envs >= 1, "schedule.n_envs", "must be at least 1")?;
        check(self.buffer_capacity >= 1, "buffer_capacity", "must be at least 1")?;
        check(self.threads >= 1, "threads", "must be at least 1")?;
        check(self.heatmap_resolution >= 2, "heatmap_resolution", "must be at least 2")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub env_steps: u64,
    pub success: f64,
    pub mean_delta: f64,
    pub max_delta: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub ensemble_loss: f64,
    pub seconds: f64,
    /// Weight-averaged distance from the start of this epoch's goal
    /// distribution, re-evaluated over the heatmap grid.
    pub density_distance: f64,
}

impl EpochReport {
    fn csv_row(&self, deterministic: bool) -> String {
        let seconds = if deterministic { 0.0 } else { self.seconds };
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.env_steps,
            self.success,
            self.mean_delta,
            self.max_delta,
            self.actor_loss,
            self.critic_loss,
            self.ensemble_loss,
            seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<EpochReport>,
    pub episodes: u64,
    pub env_steps: u64,
}

impl RunSummary {
    pub fn final_report(&self) -> Option<&EpochReport> {
        self.reports.last()
    }

    /// Environment steps at the first evaluation reaching `threshold`.
    pub fn steps_to_success(&self, threshold: f64) -> Option<u64> {
        self.reports.iter().find(|r| r.success >= threshold).map(|r| r.env_steps)
    }
}

/// Collects one exploratory episode toward `goal`.
pub fn rollout<R: Rng + ?Sized>(
    maze: &Maze,
    agent: &Agent,
    goal: Goal,
    explore: &ExploreConfig,
    episode_id: u64,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut state = maze.reset();
    let mut out = Vec::with_capacity(maze.horizon);
    loop {
        let action = agent.act(state.position, goal, true, explore, rng);
        let step = maze.step(state, action, goal)?;
        out.push(Transition {
            s: state.position,
            a: action,
            r: step.reward,
            s_next: step.state.position,
            g: goal,
            t: state.t,
            episode_id,
        });
        state = step.state;
        if step.done {
            return Ok(out);
        }
    }
}

/// Final position and undiscounted return of a noise-free episode.
pub fn greedy_episode<P: GoalPolicy + ?Sized>(maze: &Maze, policy: &P, goal: Goal) -> ([f64; 2], f64) {
    let mut state = maze.reset();
    let mut ret = 0.0;
    while state.t < maze.horizon {
        let step = maze
            .step(state, policy.greedy_action(state.position, goal), goal)
            .expect("loop stops at the horizon");
        ret += step.reward;
        state = step.state;
    }
    (state.position, ret)
}

pub fn success_on<P: GoalPolicy + ?Sized>(maze: &Maze, policy: &P, goal: Goal) -> bool {
    let (final_pos, _) = greedy_episode(maze, policy, goal);
    distance(final_pos, goal.0) < maze.success_radius
}

/// Fraction of uniformly drawn goals reached at the final step by the
/// noise-free policy.
pub fn evaluate<P: GoalPolicy + ?Sized, R: Rng + ?Sized>(policy: &P, maze: &Maze, n_episodes: usize, rng: &mut R) -> f64 {
    let n = n_episodes.max(1);
    let hits = (0..n)
        .filter(|_| {
            let g = maze.sample_goal_uniform(rng);
            success_on(maze, policy, g)
        })
        .count();
    hits as f64 / n as f64
}

/// Grid points `((i + 0.5) w / res, (j + 0.5) h / res)` that lie in free cells.
pub fn grid_points(maze: &Maze, resolution: usize) -> (Vec<f64>, Vec<f64>) {
    let xs = (0..resolution)
        .map(|i| (i as f64 + 0.5) * maze.width() as f64 / resolution as f64)
        .collect();
    let ys = (0..resolution)
        .map(|j| (j as f64 + 0.5) * maze.height() as f64 / resolution as f64)
        .collect();
    (xs, ys)
}

fn free_grid_goals(maze: &Maze, resolution: usize) -> Vec<Goal> {
    let (xs, ys) = grid_points(maze, resolution);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .filter(|&p| maze.is_free(p))
        .map(Goal)
        .collect()
}

/// Three goal-indexed diagnostic grids; blocked points hold NaN.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub episodic_return: Vec<Vec<f64>>,
    pub mean_q: Vec<Vec<f64>>,
    pub density: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn compute<P: GoalPolicy + ?Sized>(
        policy: &P,
        ensemble: &QEnsemble,
        maze: &Maze,
        resolution: usize,
        f_kind: FKind,
    ) -> Result<Self> {
        if resolution < 2 {
            return Err(TrainError::Config {
                key: "heatmap_resolution".into(),
                message: "must be at least 2".into(),
            });
        }
        let (xs, ys) = grid_points(maze, resolution);
        let goals = free_grid_goals(maze, resolution);
        let s0 = maze.start;
        let mean_q = ensemble.mean_values(policy, s0, &goals);
        let (dist, _) = ensemble.goal_distribution(policy, s0, goals.clone(), f_kind)?;
        let nan_grid = || vec![vec![f64::NAN; resolution]; resolution];
        let (mut ret, mut q, mut dens) = (nan_grid(), nan_grid(), nan_grid());
        let mut k = 0;
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                if !maze.is_free([x, y]) {
                    continue;
                }
                ret[j][i] = greedy_episode(maze, policy, goals[k]).1;
                q[j][i] = mean_q[k];
                dens[j][i] = dist.weights[k];
                k += 1;
            }
        }
        Ok(Self {
            xs,
            ys,
            episodic_return: ret,
            mean_q: q,
            density: dens,
        })
    }

    fn write_grid(&self, path: &Path, grid: &[Vec<f64>]) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        let header: Vec<String> = self.xs.iter().map(|x| x.to_string()).collect();
        let mut text = header.join(",");
        text.push('\n');
        for row in grid {
            let cells: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() })
                .collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(io_err(path))?;
        Ok(())
    }

    /// `heatmap_return.csv`, `heatmap_q.csv`, `heatmap_density.csv`; first row
    /// holds the x coordinates, then one row per y in increasing order.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.write_grid(&dir.join("heatmap_return.csv"), &self.episodic_return)?;
        self.write_grid(&dir.join("heatmap_q.csv"), &self.mean_q)?;
        self.write_grid(&dir.join("heatmap_density.csv"), &self.density)?;
        Ok(())
    }
}

/// Weight-averaged distance of a goal distribution from `origin`.
pub fn density_distance(dist: &GoalDistribution, origin: [f64; 2]) -> f64 {
    dist.goals
        .iter()
        .zip(&dist.weights)
        .map(|(g, w)| w * distance(g.0, origin))
        .sum()
}

const STREAM_AGENT: u64 = 10;
const STREAM_ENSEMBLE: u64 = 11;
const STREAM_ROLLOUT: u64 = 12;
const STREAM_CANDIDATES: u64 = 13;
const STREAM_POLICY_BATCH: u64 = 14;
const STREAM_EVAL: u64 = 15;

pub struct Trainer {
    pub config: TrainConfig,
    pub maze: Maze,
    pub agent: Agent,
    pub ensemble: QEnsemble,
    pub buffer: ReplayBuffer,
    episodes: u64,
    env_steps: u64,
    rollout_rng: ChaCha8Rng,
    candidate_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

struct EpochLosses {
    actor: Vec<f64>,
    critic: Vec<f64>,
    ensemble: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let maze = Maze::load(&config.env)?;
        let scale = FeatureScale::for_maze(&maze);
        let a = &config.agent;
        let agent = Agent::new(
            &AgentSpec {
                hidden: a.hidden.clone(),
                hidden_activation: a.hidden_activation,
                lr_actor: a.lr_actor,
                lr_critic: a.lr_critic,
            },
            scale,
            crate::seeds::derive_seed(config.seed, STREAM_AGENT),
        )?;
        let ensemble = QEnsemble::new(
            config.sampler.k,
            &config.sampler.hidden,
            a.hidden_activation,
            config.sampler.lr,
            scale,
            crate::seeds::derive_seed(config.seed, STREAM_ENSEMBLE),
        )?;
        let buffer = ReplayBuffer::new(config.buffer_capacity, maze.success_radius)?;
        let seed = config.seed;
        Ok(Self {
            maze,
            agent,
            ensemble,
            buffer,
            episodes: 0,
            env_steps: 0,
            rollout_rng: stream_rng(seed, STREAM_ROLLOUT),
            candidate_rng: stream_rng(seed, STREAM_CANDIDATES),
            batch_rng: stream_rng(seed, STREAM_POLICY_BATCH),
            config,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    fn worker_threads(&self) -> usize {
        if self.config.deterministic {
            1
        } else {
            self.config.threads
        }
    }

    /// Goal distribution over a fresh uniform candidate set, with the
    /// disagreement of every candidate.
    pub fn curriculum(&mut self) -> Result<(GoalDistribution, Vec<f64>)> {
        let goals: Vec<Goal> = (0..self.config.sampler.n_candidates)
            .map(|_| self.maze.sample_goal_uniform(&mut self.candidate_rng))
            .collect();
        self.distribution_over(goals)
    }

    fn distribution_over(&self, goals: Vec<Goal>) -> Result<(GoalDistribution, Vec<f64>)> {
        let s = &self.config.sampler;
        let s0 = self.maze.start;
        Ok(match s.mode {
            SamplerMode::Uniform => {
                let deltas = self.ensemble.disagreement(&self.agent, s0, &goals);
                (GoalDistribution::uniform(goals)?, deltas)
            }
            SamplerMode::Vds => self.ensemble.goal_distribution(&self.agent, s0, goals, s.f_kind)?,
            SamplerMode::Ucb => self
                .ensemble
                .ucb_distribution(&self.agent, s0, goals, s.lambda, s.temperature)?,
        })
    }

    /// Distance statistic of the current curriculum over the heatmap grid.
    pub fn grid_density_distance(&self) -> Result<f64> {
        let goals = free_grid_goals(&self.maze, self.config.heatmap_resolution);
        let (dist, _) = self.distribution_over(goals)?;
        Ok(density_distance(&dist, self.maze.start))
    }

    fn train_epoch(&mut self, epoch: usize, dist: &GoalDistribution) -> Result<EpochLosses> {
        let numeric = |e: Box<dyn std::error::Error + Send + Sync>| TrainError::Numeric { epoch, source: e };
        let cfg = self.config.clone();
        let ratio = cfg.her.effective_ratio();
        let mut losses = EpochLosses {
            actor: Vec::new(),
            critic: Vec::new(),
            ensemble: Vec::new(),
        };
        let mut remaining = cfg.schedule.episodes_per_epoch;
        while remaining > 0 {
            let group = remaining.min(cfg.schedule.n_envs);
            remaining -= group;
            for _ in 0..group {
                let goal = dist.sample(&mut self.rollout_rng);
                let episode = rollout(&self.maze, &self.agent, goal, &cfg.agent.explore, self.episodes, &mut self.rollout_rng)?;
                self.env_steps += episode.len() as u64;
                self.episodes += 1;
                self.buffer.push_episode(episode)?;
            }
            for _ in 0..group {
                for _ in 0..cfg.agent.updates_per_episode {
                    let batch = self.buffer.sample_batch(cfg.agent.batch_size, ratio, &mut self.batch_rng)?;
                    losses
                        .critic
                        .push(self.agent.critic_update(&batch, cfg.agent.gamma).map_err(|e| numeric(e.into()))?);
                    losses
                        .actor
                        .push(self.agent.actor_update(&batch).map_err(|e| numeric(e.into()))?);
                }
                self.agent.sync_targets(cfg.agent.tau)?;
            }
        }
        let update = EnsembleUpdate {
            batch_size: cfg.sampler.batch_size,
            gamma: cfg.agent.gamma,
            tau: cfg.sampler.tau,
            relabel_ratio: ratio,
        };
        let threads = self.worker_threads();
        for _ in 0..cfg.sampler.updates_per_epoch {
            let l = self
                .ensemble
                .update(&self.buffer, &self.agent, &update, threads)
                .map_err(|e| numeric(e.into()))?;
            losses.ensemble.push(mean(&l));
        }
        Ok(losses)
    }

    /// Runs the schedule, invoking `on_report` after each evaluation. A
    /// `Break` ends training early; artifacts are still written.
    pub fn run_with<F: FnMut(&EpochReport) -> ControlFlow<()>>(&mut self, mut on_report: F) -> Result<RunSummary> {
        let out_dir = self.config.out_dir.clone();
        let mut metrics = match &out_dir {
            Some(dir) => Some(self.prepare_out_dir(dir)?),
            None => None,
        };
        let started = Instant::now();
        let mut reports = Vec::new();
        let sch = self.config.schedule.clone();
        for epoch in 0..sch.n_epochs {
            let (dist, deltas) = self.curriculum()?;
            let density_distance = self.grid_density_distance()?;
            let losses = self.train_epoch(epoch, &dist)?;
            if (epoch + 1) % sch.eval_every != 0 && epoch + 1 != sch.n_epochs {
                continue;
            }
            let mut eval_rng = stream_rng(self.config.seed, STREAM_EVAL ^ ((epoch as u64) << 8));
            let success = evaluate(&self.agent, &self.maze, sch.eval_episodes, &mut eval_rng);
            let report = EpochReport {
                epoch,
                env_steps: self.env_steps,
                success,
                mean_delta: mean(&deltas),
                max_delta: deltas.iter().copied().fold(0.0, f64::max),
                actor_loss: mean(&losses.actor),
                critic_loss: mean(&losses.critic),
                ensemble_loss: mean(&losses.ensemble),
                seconds: started.elapsed().as_secs_f64(),
                density_distance,
            };
            if let (Some(dir), Some(file)) = (&out_dir, metrics.as_mut()) {
                self.append_report(dir, file, &report)?;
            }
            let flow = on_report(&report);
            reports.push(report);
            if flow.is_break() {
                break;
            }
        }
        if let Some(dir) = &out_dir {
            self.save_checkpoint(&dir.join("ckpt"))?;
            Heatmap::compute(
                &self.agent,
                &self.ensemble,
                &self.maze,
                self.config.heatmap_resolution,
                self.config.sampler.f_kind,
            )?
            .write(dir)?;
            let (dist, deltas) = self.curriculum()?;
            let path = dir.join("distribution.csv");
            dist.write_csv(&deltas, fs::File::create(&path).map_err(io_err(&path))?)
                .map_err(io_err(&path))?;
        }
        Ok(RunSummary {
            reports,
            episodes: self.episodes,
            env_steps: self.env_steps,
        })
    }

    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_with(|_| ControlFlow::Continue(()))
    }

    fn prepare_out_dir(&self, dir: &Path) -> Result<fs::File> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg_path = dir.join("config.json");
        let resolved = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&cfg_path, resolved + "\n").map_err(io_err(&cfg_path))?;
        let metrics_path = dir.join("metrics.csv");
        let mut f = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        writeln!(f, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
        let frontier_path = dir.join("frontier.csv");
        fs::write(&frontier_path, "epoch,env_steps,density_distance\n").map_err(io_err(&frontier_path))?;
        if self.config.deterministic {
            let timing = dir.join("timing.csv");
            fs::write(&timing, "epoch,seconds\n").map_err(io_err(&timing))?;
        }
        Ok(f)
    }

    fn append_report(&self, dir: &Path, metrics: &mut fs::File, r: &EpochReport) -> Result<()> {
        let path = dir.join("metrics.csv");
        writeln!(metrics, "{}", r.csv_row(self.config.deterministic)).map_err(io_err(&path))?;
        let append = |name: &str, line: String| -> Result<()> {
            let path = dir.join(name);
            let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
            writeln!(f, "{line}").map_err(io_err(&path))
        };
        append("frontier.csv", format!("{},{},{:.6}", r.epoch, r.env_steps, r.density_distance))?;
        if self.config.deterministic {
            append("timing.csv", format!("{},{:.3}", r.epoch, r.seconds))?;
        }
        Ok(())
    }

    /// `agent/` and `ensemble/` snapshot directories.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.agent.save(&dir.join("agent"))?;
        self.ensemble.save(&dir.join("ensemble"))?;
        Ok(())
    }
}
