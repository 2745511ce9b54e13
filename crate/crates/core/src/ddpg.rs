//! Deterministic actor-critic learner with target networks, epsilon-random
//! plus Gaussian exploration, and critic targets clipped to the attainable
//! return range of the sparse reward.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{
    polyak_update, AdamConfig, HiddenActivation, MlpParams, NnError, OptState, OutputActivation,
};
use crate::maze::{Action, Goal, Maze};
use crate::replay::{Batch, Transition};
use crate::seeds::derive_seed;

pub const ACTION_DIM: usize = 2;
pub const ACTOR_INPUT: usize = 4;
pub const CRITIC_INPUT: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {0} loss; update rejected")]
    NonFiniteLoss(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreConfig {
    pub epsilon_random: f64,
    /// Gaussian noise std as a fraction of the maximum action magnitude.
    pub action_noise_scale: f64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            epsilon_random: 0.3,
            action_noise_scale: 0.2,
        }
    }
}

/// Maps maze coordinates to roughly `[-1, 1]` network features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScale {
    pub width: f64,
    pub height: f64,
}

impl FeatureScale {
    pub fn for_maze(maze: &Maze) -> Self {
        Self {
            width: maze.width() as f64,
            height: maze.height() as f64,
        }
    }

    pub fn encode(&self, p: [f64; 2]) -> [f64; 2] {
        [2.0 * p[0] / self.width - 1.0, 2.0 * p[1] / self.height - 1.0]
    }

    /// Rows of `[state, goal]` features.
    pub fn actor_inputs(&self, states: &[[f64; 2]], goals: &[Goal]) -> Array2<f64> {
        let mut x = Array2::zeros((states.len(), ACTOR_INPUT));
        for (i, (s, g)) in states.iter().zip(goals).enumerate() {
            let (s, g) = (self.encode(*s), self.encode(g.0));
            x.row_mut(i).assign(&ndarray::aview1(&[s[0], s[1], g[0], g[1]]));
        }
        x
    }

    /// Rows of `[state, goal, action]` features, actions in unit space.
    pub fn critic_inputs(&self, states: &[[f64; 2]], goals: &[Goal], actions: ArrayView2<f64>) -> Array2<f64> {
        let mut x = Array2::zeros((states.len(), CRITIC_INPUT));
        x.slice_mut(s![.., ..ACTOR_INPUT])
            .assign(&self.actor_inputs(states, goals));
        x.slice_mut(s![.., ACTOR_INPUT..]).assign(&actions);
        x
    }
}

/// Anything that maps `(state, goal)` to a deterministic action. Actions are
/// returned in unit space (`[-1, 1]^2`, see [`Action::from_unit`]).
pub trait GoalPolicy {
    fn unit_actions(&self, states: &[[f64; 2]], goals: &[Goal]) -> Array2<f64>;

    fn greedy_action(&self, state: [f64; 2], goal: Goal) -> Action {
        let a = self.unit_actions(&[state], &[goal]);
        Action::from_unit([a[[0, 0]], a[[0, 1]]])
    }
}

/// Critic regression targets `clip(r + gamma * q_next, -1/(1-gamma), 0)`.
pub fn bellman_targets(rewards: &[f64], next_q: &[f64], gamma: f64) -> Vec<f64> {
    let floor = -1.0 / (1.0 - gamma);
    rewards
        .iter()
        .zip(next_q)
        .map(|(r, q)| (r + gamma * q).clamp(floor, 0.0))
        .collect()
}

/// Unit-space actions stored in a batch.
pub fn batch_unit_actions(transitions: &[Transition]) -> Array2<f64> {
    let mut a = Array2::zeros((transitions.len(), ACTION_DIM));
    for (i, tr) in transitions.iter().enumerate() {
        let u = tr.a.to_unit();
        a[[i, 0]] = u[0];
        a[[i, 1]] = u[1];
    }
    a
}

/// One mean-squared-error step of `critic` toward bootstrapped targets built
/// from `target_critic` and `next_actions`. Returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bellman_regression_step(
    critic: &mut MlpParams,
    opt: &mut OptState,
    target_critic: &MlpParams,
    scale: &FeatureScale,
    transitions: &[Transition],
    next_actions: ArrayView2<f64>,
    gamma: f64,
) -> Result<f64> {
    if transitions.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let n = transitions.len();
    let s: Vec<[f64; 2]> = transitions.iter().map(|t| t.s).collect();
    let s_next: Vec<[f64; 2]> = transitions.iter().map(|t| t.s_next).collect();
    let g: Vec<Goal> = transitions.iter().map(|t| t.g).collect();
    let r: Vec<f64> = transitions.iter().map(|t| t.r).collect();

    let next_q = target_critic.forward_batch(scale.critic_inputs(&s_next, &g, next_actions).view())?;
    let targets = bellman_targets(&r, next_q.column(0).as_slice().expect("column of n x 1"), gamma);

    let cache = critic.forward_cached(scale.critic_inputs(&s, &g, batch_unit_actions(transitions).view()).view())?;
    let q = cache.output();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, 1));
    for i in 0..n {
        let err = q[[i, 0]] - targets[i];
        loss += err * err;
        grad[[i, 0]] = 2.0 * err / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(AgentError::NonFiniteLoss("critic"));
    }
    let back = critic.backward_batch(&cache, grad.view())?;
    opt.step(critic, &back.params)?;
    Ok(loss)
}

/// Actor, critic and their slow-moving targets.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    pub critic: MlpParams,
    pub critic_target: MlpParams,
    pub actor_opt: OptState,
    pub critic_opt: OptState,
    pub scale: FeatureScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub hidden: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub lr_actor: f64,
    pub lr_critic: f64,
}

impl Agent {
    pub fn new(spec: &AgentSpec, scale: FeatureScale, seed: u64) -> Result<Self> {
        let actor_sizes = layer_sizes(ACTOR_INPUT, &spec.hidden, ACTION_DIM);
        let critic_sizes = layer_sizes(CRITIC_INPUT, &spec.hidden, 1);
        let actor = MlpParams::init(
            &actor_sizes,
            spec.hidden_activation,
            OutputActivation::Tanh,
            derive_seed(seed, 0),
        )?;
        let critic = MlpParams::init(
            &critic_sizes,
            spec.hidden_activation,
            OutputActivation::Linear,
            derive_seed(seed, 1),
        )?;
        Ok(Self::from_networks(actor, critic, spec.lr_actor, spec.lr_critic, scale))
    }

    /// Wraps existing networks; targets start as copies.
    pub fn from_networks(actor: MlpParams, critic: MlpParams, lr_actor: f64, lr_critic: f64, scale: FeatureScale) -> Self {
        Self {
            actor_opt: OptState::new(&actor, AdamConfig::with_learning_rate(lr_actor)),
            critic_opt: OptState::new(&critic, AdamConfig::with_learning_rate(lr_critic)),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            scale,
        }
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        state: [f64; 2],
        goal: Goal,
        explore: bool,
        cfg: &ExploreConfig,
        rng: &mut R,
    ) -> Action {
        if explore && rng.random_bool(cfg.epsilon_random.clamp(0.0, 1.0)) {
            return Action::new(rng.random_range(0.0..=1.0), rng.random_range(-1.0..=1.0));
        }
        let a = self.unit_actions(&[state], &[goal]);
        let mut u = [a[[0, 0]], a[[0, 1]]];
        if explore {
            for v in u.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = (*v + cfg.action_noise_scale * z).clamp(-1.0, 1.0);
            }
        }
        Action::from_unit(u)
    }

    /// One critic step toward `clip(r + gamma * Q'(s', mu'(s', g), g))`.
    pub fn critic_update(&mut self, batch: &Batch, gamma: f64) -> Result<f64> {
        let tr = &batch.transitions;
        if tr.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let s_next: Vec<[f64; 2]> = tr.iter().map(|t| t.s_next).collect();
        let g: Vec<Goal> = tr.iter().map(|t| t.g).collect();
        let next_actions = self
            .actor_target
            .forward_batch(self.scale.actor_inputs(&s_next, &g).view())?;
        bellman_regression_step(
            &mut self.critic,
            &mut self.critic_opt,
            &self.critic_target,
            &self.scale,
            tr,
            next_actions.view(),
            gamma,
        )
    }

    /// Gradients of `-mean Q(s, mu(s, g), g)` with respect to the actor,
    /// flowing through the critic's action input. Returns the loss and the
    /// gradients without applying them.
    pub fn actor_gradients(&self, batch: &Batch) -> Result<(f64, crate::approximator::ParamGrads)> {
        let tr = &batch.transitions;
        if tr.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let n = tr.len();
        let s: Vec<[f64; 2]> = tr.iter().map(|t| t.s).collect();
        let g: Vec<Goal> = tr.iter().map(|t| t.g).collect();
        let actor_cache = self.actor.forward_cached(self.scale.actor_inputs(&s, &g).view())?;
        let critic_cache = self
            .critic
            .forward_cached(self.scale.critic_inputs(&s, &g, actor_cache.output().view()).view())?;
        let loss = -critic_cache.output().mean().expect("non-empty batch");
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss("actor"));
        }
        let dq = Array2::from_elem((n, 1), -1.0 / n as f64);
        let critic_back = self.critic.backward_batch(&critic_cache, dq.view())?;
        let d_action = critic_back.input.slice(s![.., ACTOR_INPUT..]).to_owned();
        let actor_back = self.actor.backward_batch(&actor_cache, d_action.view())?;
        Ok((loss, actor_back.params))
    }

    /// One deterministic-policy-gradient step on the actor. Returns the
    /// pre-step loss.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.actor_gradients(batch)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(loss)
    }

    pub fn sync_targets(&mut self, tau: f64) -> Result<()> {
        polyak_update(&mut self.actor_target, &self.actor, tau)?;
        polyak_update(&mut self.critic_target, &self.critic, tau)?;
        Ok(())
    }

    /// Writes the four networks plus a `key=value` manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, net) in self.networks() {
            net.write_snapshot(std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.bin")))?))?;
        }
        let manifest = format!(
            "format=VDSNN1\nhidden_activation={}\nwidth={}\nheight={}\nlr_actor={}\nlr_critic={}\nnetworks=actor,actor_target,critic,critic_target\n",
            activation_name(self.actor.hidden_activation),
            self.scale.width,
            self.scale.height,
            self.actor_opt.config.learning_rate,
            self.critic_opt.config.learning_rate,
        );
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Restores networks saved by [`Agent::save`]. Optimizer moments are not
    /// persisted and restart from zero.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join("manifest.txt"))?;
        let get = |k: &str| {
            manifest
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| AgentError::Checkpoint(format!("manifest missing {k}")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| AgentError::Checkpoint(format!("bad {k}")))
        };
        let hidden = parse_activation(&get("hidden_activation")?)?;
        let scale = FeatureScale {
            width: parse_f("width")?,
            height: parse_f("height")?,
        };
        let read = |name: &str, out: OutputActivation| -> Result<MlpParams> {
            let f = fs::File::open(dir.join(format!("{name}.bin")))?;
            Ok(MlpParams::read_snapshot(std::io::BufReader::new(f), hidden, out)?)
        };
        let mut agent = Self::from_networks(
            read("actor", OutputActivation::Tanh)?,
            read("critic", OutputActivation::Linear)?,
            parse_f("lr_actor")?,
            parse_f("lr_critic")?,
            scale,
        );
        agent.actor_target = read("actor_target", OutputActivation::Tanh)?;
        agent.critic_target = read("critic_target", OutputActivation::Linear)?;
        Ok(agent)
    }

    fn networks(&self) -> [(&'static str, &MlpParams); 4] {
        [
            ("actor", &self.actor),
            ("actor_target", &self.actor_target),
            ("critic", &self.critic),
            ("critic_target", &self.critic_target),
        ]
    }
}

impl GoalPolicy for Agent {
    fn unit_actions(&self, states: &[[f64; 2]], goals: &[Goal]) -> Array2<f64> {
        self.actor
            .forward_batch(self.scale.actor_inputs(states, goals).view())
            .expect("actor input width is fixed")
    }
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

pub(crate) fn activation_name(a: HiddenActivation) -> &'static str {
    match a {
        HiddenActivation::Relu => "relu",
        HiddenActivation::Tanh => "tanh",
    }
}

pub(crate) fn parse_activation(s: &str) -> Result<HiddenActivation> {
    match s {
        "relu" => Ok(HiddenActivation::Relu),
        "tanh" => Ok(HiddenActivation::Tanh),
        other => Err(AgentError::Checkpoint(format!("unknown activation {other:?}"))),
    }
}

pub(crate) fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::gradcheck::Comparison;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scale() -> FeatureScale {
        FeatureScale {
            width: 4.0,
            height: 4.0,
        }
    }

    fn small_agent(seed: u64) -> Agent {
        let spec = AgentSpec {
            hidden: vec![8, 8],
            hidden_activation: HiddenActivation::Tanh,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
        };
        Agent::new(&spec, scale(), seed).unwrap()
    }

    fn transition(s: [f64; 2], r: f64, g: [f64; 2]) -> Transition {
        Transition {
            s,
            a: Action::new(0.7, -0.2),
            r,
            s_next: [s[0] + 0.5, s[1]],
            g: Goal(g),
            t: 0,
            episode_id: 0,
        }
    }

    #[test]
    fn targets_are_clipped() {
        assert!((bellman_targets(&[-1.0], &[-5.0], 0.98)[0] + 5.9).abs() < 1e-12);
        assert_eq!(bellman_targets(&[0.0], &[0.0], 0.98)[0], 0.0);
        assert!((bellman_targets(&[-1.0], &[-100.0], 0.98)[0] + 50.0).abs() < 1e-9);
        assert_eq!(bellman_targets(&[0.0], &[3.0], 0.98)[0], 0.0);
    }

    #[test]
    fn greedy_acting_is_deterministic_and_in_range() {
        let agent = small_agent(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ExploreConfig::default();
        let a = agent.act([1.0, 2.0], Goal([3.0, 3.0]), false, &cfg, &mut rng);
        let b = agent.act([1.0, 2.0], Goal([3.0, 3.0]), false, &cfg, &mut rng);
        assert_eq!(a, b);
        for _ in 0..2000 {
            let a = agent.act([0.5, 0.5], Goal([3.0, 1.0]), true, &cfg, &mut rng);
            assert!((0.0..=1.0).contains(&a.speed) && (-1.0..=1.0).contains(&a.heading));
        }
    }

    #[test]
    fn critic_update_reports_pre_step_loss() {
        let mut agent = small_agent(2);
        // zero critic so the pre-step prediction is exactly 0
        agent.critic.weights.iter_mut().for_each(|w| w.fill(0.0));
        agent.critic_target = agent.critic.clone();
        let batch = Batch::from(vec![transition([1.0, 1.0], -1.0, [3.0, 3.0]), transition([2.0, 1.0], 0.0, [2.5, 1.0])]);
        let loss = agent.critic_update(&batch, 0.98).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert_eq!(agent.critic_opt.step_count, 1);
        assert!(matches!(agent.critic_update(&Batch::default(), 0.98), Err(AgentError::EmptyBatch)));
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let agent = small_agent(3);
        let batch = Batch::from(vec![
            transition([1.0, 1.0], -1.0, [3.0, 3.0]),
            transition([0.3, 2.7], -1.0, [1.5, 0.5]),
            transition([2.2, 0.4], 0.0, [2.0, 0.5]),
        ]);
        let (_, grads) = agent.actor_gradients(&batch).unwrap();
        let analytic = grads.to_flat();
        let base = agent.actor.to_flat();
        let h = 1e-5;
        let mut probe = agent.clone();
        for i in 0..base.len() {
            let mut flat = base.clone();
            flat[i] += h;
            probe.actor.set_flat(&flat).unwrap();
            let plus = probe.actor_gradients(&batch).unwrap().0;
            flat[i] -= 2.0 * h;
            probe.actor.set_flat(&flat).unwrap();
            let minus = probe.actor_gradients(&batch).unwrap().0;
            let c = Comparison {
                analytic: analytic[i],
                numeric: (plus - minus) / (2.0 * h),
            };
            assert!(c.within(&Default::default()), "param {i}: {c:?}");
        }
    }

    #[test]
    fn constant_critic_leaves_actor_unchanged() {
        let mut agent = small_agent(4);
        agent.critic.weights.iter_mut().for_each(|w| w.fill(0.0));
        agent.critic.biases.last_mut().unwrap().fill(-3.0);
        let before = agent.actor.clone();
        let batch = Batch::from(vec![transition([1.0, 1.0], -1.0, [3.0, 3.0])]);
        let loss = agent.actor_update(&batch).unwrap();
        assert_eq!(loss, 3.0);
        assert_eq!(agent.actor, before);
    }

    #[test]
    fn actor_climbs_toward_critic_optimum() {
        // Q = -|a0 - 0.5| - |a1 + 0.25|, built exactly from four relu units.
        let target = [0.5, -0.25];
        let mut critic = MlpParams::zeros(&[CRITIC_INPUT, 4, 1], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        for (unit, (input, sign)) in [(4, 1.0), (4, -1.0), (5, 1.0), (5, -1.0)].into_iter().enumerate() {
            critic.weights[0][[unit, input]] = sign;
            critic.biases[0][unit] = -sign * target[input - 4];
            critic.weights[1][[0, unit]] = -1.0;
        }
        let mut agent = small_agent(5);
        agent.critic = critic;
        let batch = Batch::from(vec![transition([1.0, 1.0], -1.0, [3.0, 3.0])]);
        let gap = |a: &Agent| {
            let u = a.unit_actions(&[[1.0, 1.0]], &[Goal([3.0, 3.0])]);
            [(u[[0, 0]] - target[0]).abs(), (u[[0, 1]] - target[1]).abs()]
        };
        let mut prev = gap(&agent);
        for _ in 0..3000 {
            agent.actor_update(&batch).unwrap();
            let now = gap(&agent);
            for d in 0..2 {
                if prev[d] > 0.05 {
                    assert!(now[d] <= prev[d] + 1e-12, "component {d}: {} -> {}", prev[d], now[d]);
                }
            }
            prev = now;
        }
        assert!(prev[0] < 0.05 && prev[1] < 0.05, "{prev:?}");
    }

    #[test]
    fn sync_targets_conventions() {
        let mut agent = small_agent(6);
        agent.actor.weights.iter_mut().for_each(|w| w.fill(0.0));
        agent.actor_target.weights.iter_mut().for_each(|w| w.fill(1.0));
        let frozen = agent.actor_target.clone();
        agent.sync_targets(1.0).unwrap();
        assert_eq!(agent.actor_target, frozen);
        agent.sync_targets(0.95).unwrap();
        agent.sync_targets(0.95).unwrap();
        assert!((agent.actor_target.weights[0][[0, 0]] - 0.9025).abs() < 1e-15);
        agent.sync_targets(0.0).unwrap();
        assert_eq!(agent.actor_target, agent.actor);
        assert_eq!(agent.critic_target, agent.critic);
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = small_agent(7);
        let dir = tempfile::tempdir().unwrap();
        agent.save(dir.path()).unwrap();
        let back = Agent::load(dir.path()).unwrap();
        assert_eq!(back.actor, agent.actor);
        assert_eq!(back.critic_target, agent.critic_target);
        assert_eq!(back.scale, agent.scale);
    }
}
