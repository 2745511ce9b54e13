//! Value disagreement sampling.
//!
//! A `K`-member ensemble of goal-conditioned Q functions is trained by Bellman
//! regression on the shared replay buffer, each member on its own mini-batches.
//! The population standard deviation of the members' values at
//! `(s0, pi(s0, g), g)` scores every candidate goal, and training goals are drawn
//! with probability `f(delta) / Z` over the candidate set.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    polyak_update, AdamConfig, HiddenActivation, MlpParams, NnError, OptState, OutputActivation,
};
use crate::ddpg::{self, bellman_regression_step, AgentError, FeatureScale, GoalPolicy, CRITIC_INPUT};
use crate::maze::Goal;
use crate::replay::{Batch, ReplayBuffer, ReplayError};
use crate::seeds::{derive_seed, stream_rng};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("sampler protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Uniform,
    Vds,
    Ucb,
}

/// Monotone map from disagreement to unnormalized weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FKind {
    Identity,
    Exp,
    Tanh,
    Square,
}

impl FKind {
    pub const ALL: [FKind; 4] = [FKind::Identity, FKind::Exp, FKind::Tanh, FKind::Square];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            FKind::Identity => x,
            FKind::Exp => x.exp(),
            FKind::Tanh => x.tanh(),
            FKind::Square => x * x,
        }
    }
}

impl fmt::Display for FKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FKind::Identity => "identity",
            FKind::Exp => "exp",
            FKind::Tanh => "tanh",
            FKind::Square => "square",
        })
    }
}

impl FromStr for FKind {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self> {
        FKind::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| SamplerError::Config(format!("unknown f kind {s:?}")))
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Uniform => "uniform",
            SamplerMode::Vds => "vds",
            SamplerMode::Ucb => "ucb",
        })
    }
}

/// Population (divide-by-K) standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Normalized categorical distribution over a finite candidate goal set.
#[derive(Debug, Clone)]
pub struct GoalDistribution {
    pub goals: Vec<Goal>,
    pub weights: Vec<f64>,
    pub mode: SamplerMode,
    pub f_kind: FKind,
    pub lambda: f64,
    pub temperature: f64,
    index: WeightedIndex<f64>,
}

impl GoalDistribution {
    fn build(goals: Vec<Goal>, weights: Vec<f64>, mode: SamplerMode) -> Result<Self> {
        if goals.is_empty() {
            return Err(SamplerError::Protocol("empty candidate goal set".into()));
        }
        if goals.len() != weights.len() {
            return Err(SamplerError::Protocol(format!(
                "{} goals but {} weights",
                goals.len(),
                weights.len()
            )));
        }
        let index = WeightedIndex::new(&weights)
            .map_err(|e| SamplerError::Protocol(format!("degenerate weights: {e}")))?;
        Ok(Self {
            goals,
            weights,
            mode,
            f_kind: FKind::Identity,
            lambda: 0.0,
            temperature: 1.0,
            index,
        })
    }

    pub fn uniform(goals: Vec<Goal>) -> Result<Self> {
        let n = goals.len().max(1);
        let weights = vec![1.0 / n as f64; goals.len()];
        Self::build(goals, weights, SamplerMode::Uniform)
    }

    /// `w_n = f(delta_n) / sum_m f(delta_m)`, falling back to uniform when the
    /// normalizer vanishes.
    pub fn from_deltas(goals: Vec<Goal>, deltas: &[f64], f_kind: FKind) -> Result<Self> {
        let weights = vds_weights(deltas, f_kind)?;
        let mut d = Self::build(goals, weights, SamplerMode::Vds)?;
        d.f_kind = f_kind;
        Ok(d)
    }

    /// Softmax of `(mean_return + lambda * delta) / temperature`.
    pub fn ucb(goals: Vec<Goal>, mean_returns: &[f64], deltas: &[f64], lambda: f64, temperature: f64) -> Result<Self> {
        let weights = ucb_weights(mean_returns, deltas, lambda, temperature)?;
        let mut d = Self::build(goals, weights, SamplerMode::Ucb)?;
        d.lambda = lambda;
        d.temperature = temperature;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Goal {
        self.goals[self.sample_index(rng)]
    }

    /// Diagnostic dump with columns `goal_x,goal_y,delta,weight`.
    pub fn write_csv<W: Write>(&self, deltas: &[f64], mut w: W) -> std::io::Result<()> {
        writeln!(w, "goal_x,goal_y,delta,weight")?;
        for ((g, d), p) in self.goals.iter().zip(deltas).zip(&self.weights) {
            writeln!(w, "{},{},{},{}", g.0[0], g.0[1], d, p)?;
        }
        Ok(())
    }
}

pub fn vds_weights(deltas: &[f64], f_kind: FKind) -> Result<Vec<f64>> {
    if let Some(bad) = deltas.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(SamplerError::Protocol(format!("disagreement {bad} is not a finite non-negative value")));
    }
    let n = deltas.len();
    let uniform = || vec![1.0 / n as f64; n];
    let raw: Vec<f64> = match f_kind {
        // shift by the max: exp ratios are unchanged and nothing overflows
        FKind::Exp => {
            let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            deltas.iter().map(|d| (d - max).exp()).collect()
        }
        f => deltas.iter().map(|&d| f.apply(d)).collect(),
    };
    let z: f64 = raw.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Ok(uniform());
    }
    Ok(raw.into_iter().map(|v| v / z).collect())
}

pub fn ucb_weights(mean_returns: &[f64], deltas: &[f64], lambda: f64, temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(SamplerError::Config(format!("temperature {temperature} must be positive")));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(SamplerError::Config(format!("lambda {lambda} must be non-negative")));
    }
    if mean_returns.len() != deltas.len() {
        return Err(SamplerError::Protocol("score vectors differ in length".into()));
    }
    let scores: Vec<f64> = mean_returns
        .iter()
        .zip(deltas)
        .map(|(m, d)| (m + lambda * d) / temperature)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(SamplerError::Protocol("non-finite ucb scores".into()));
    }
    Ok(raw.into_iter().map(|v| v / z).collect())
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub online: MlpParams,
    pub target: MlpParams,
    pub opt: OptState,
    rng: ChaCha8Rng,
}

/// Knobs for one round of ensemble regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleUpdate {
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub relabel_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct QEnsemble {
    members: Vec<EnsembleMember>,
    pub scale: FeatureScale,
}

impl QEnsemble {
    /// `k` members with layer sizes `[6, hidden.., 1]`, each seeded from its
    /// own sub-stream of `seed`; targets start equal to the online networks.
    pub fn new(
        k: usize,
        hidden: &[usize],
        hidden_activation: HiddenActivation,
        learning_rate: f64,
        scale: FeatureScale,
        seed: u64,
    ) -> Result<Self> {
        if k < 1 {
            return Err(SamplerError::Config("ensemble needs at least one member".into()));
        }
        let sizes = ddpg::layer_sizes(CRITIC_INPUT, hidden, 1);
        let members = (0..k as u64)
            .map(|i| {
                let online = MlpParams::init(&sizes, hidden_activation, OutputActivation::Linear, derive_seed(seed, 2 * i))?;
                Ok(EnsembleMember {
                    target: online.clone(),
                    opt: OptState::new(&online, AdamConfig::with_learning_rate(learning_rate)),
                    online,
                    rng: stream_rng(seed, 2 * i + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members, scale })
    }

    /// Builds an ensemble from given networks (targets copy the online nets).
    pub fn from_members(nets: Vec<MlpParams>, learning_rate: f64, scale: FeatureScale, seed: u64) -> Result<Self> {
        if nets.is_empty() {
            return Err(SamplerError::Config("ensemble needs at least one member".into()));
        }
        if nets.iter().any(|n| !n.same_layout(&nets[0]) || n.input_width() != CRITIC_INPUT || n.output_width() != 1) {
            return Err(SamplerError::Config("ensemble members must share a [6, .., 1] layout".into()));
        }
        let members = nets
            .into_iter()
            .enumerate()
            .map(|(i, online)| EnsembleMember {
                target: online.clone(),
                opt: OptState::new(&online, AdamConfig::with_learning_rate(learning_rate)),
                online,
                rng: stream_rng(seed, 2 * i as u64 + 1),
            })
            .collect();
        Ok(Self { members, scale })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    /// One regression step of member `k` on a given batch, then a polyak
    /// sync of its target. Bootstrap actions come from `policy`.
    pub fn update_member_on_batch<P: GoalPolicy + ?Sized>(
        &mut self,
        k: usize,
        batch: &Batch,
        policy: &P,
        gamma: f64,
        tau: f64,
    ) -> Result<f64> {
        let scale = self.scale;
        let member = self
            .members
            .get_mut(k)
            .ok_or_else(|| SamplerError::Config(format!("no ensemble member {k}")))?;
        member_step(member, &scale, batch, policy, gamma, tau)
    }

    /// Every member draws its own relabeled batch and takes one step.
    /// With `threads > 1` members run on scoped worker threads; each owns its
    /// RNG stream, so the result does not depend on the thread count.
    pub fn update<P: GoalPolicy + Sync + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        policy: &P,
        cfg: &EnsembleUpdate,
        threads: usize,
    ) -> Result<Vec<f64>> {
        if buffer.is_empty() {
            return Err(ReplayError::Empty.into());
        }
        let scale = self.scale;
        let run = |member: &mut EnsembleMember| -> Result<f64> {
            let batch = buffer.sample_batch(cfg.batch_size, cfg.relabel_ratio, &mut member.rng)?;
            member_step(member, &scale, &batch, policy, cfg.gamma, cfg.tau)
        };
        if threads <= 1 || self.members.len() == 1 {
            return self.members.iter_mut().map(run).collect();
        }
        let n = self.members.len();
        let chunk = n.div_ceil(threads);
        let run = &run;
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .members
                .chunks_mut(chunk)
                .map(|slice| scope.spawn(move || slice.iter_mut().map(run).collect::<Result<Vec<f64>>>()))
                .collect();
            let mut losses = Vec::with_capacity(n);
            for h in handles {
                losses.extend(h.join().expect("ensemble worker panicked")?);
            }
            Ok(losses)
        })
    }

    /// `Q_k(s0, pi(s0, g), g)` for every member `k` (rows) and goal (columns).
    pub fn member_values<P: GoalPolicy + ?Sized>(&self, policy: &P, s0: [f64; 2], goals: &[Goal]) -> Array2<f64> {
        let states = vec![s0; goals.len()];
        let actions = policy.unit_actions(&states, goals);
        let x = self.scale.critic_inputs(&states, goals, actions.view());
        let mut out = Array2::zeros((self.members.len(), goals.len()));
        for (k, m) in self.members.iter().enumerate() {
            let q = m.online.forward_batch(x.view()).expect("critic width is fixed");
            out.row_mut(k).assign(&q.column(0));
        }
        out
    }

    /// Population standard deviation of the members' values per goal.
    pub fn disagreement<P: GoalPolicy + ?Sized>(&self, policy: &P, s0: [f64; 2], goals: &[Goal]) -> Vec<f64> {
        let values = self.member_values(policy, s0, goals);
        values
            .columns()
            .into_iter()
            .map(|c| population_std(&c.to_vec()))
            .collect()
    }

    pub fn mean_values<P: GoalPolicy + ?Sized>(&self, policy: &P, s0: [f64; 2], goals: &[Goal]) -> Vec<f64> {
        let values = self.member_values(policy, s0, goals);
        values.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)).collect()
    }

    /// Vds-mode distribution over `goals`. Returns the deltas alongside.
    pub fn goal_distribution<P: GoalPolicy + ?Sized>(
        &self,
        policy: &P,
        s0: [f64; 2],
        goals: Vec<Goal>,
        f_kind: FKind,
    ) -> Result<(GoalDistribution, Vec<f64>)> {
        let deltas = self.disagreement(policy, s0, &goals);
        Ok((GoalDistribution::from_deltas(goals, &deltas, f_kind)?, deltas))
    }

    /// Ucb-mode distribution: the teacher's expected reward is the negated
    /// mean member value, plus `lambda` times the disagreement.
    pub fn ucb_distribution<P: GoalPolicy + ?Sized>(
        &self,
        policy: &P,
        s0: [f64; 2],
        goals: Vec<Goal>,
        lambda: f64,
        temperature: f64,
    ) -> Result<(GoalDistribution, Vec<f64>)> {
        let values = self.member_values(policy, s0, &goals);
        let mut teacher_reward = Vec::with_capacity(goals.len());
        let mut deltas = Vec::with_capacity(goals.len());
        for c in values.columns() {
            let v = c.to_vec();
            teacher_reward.push(-(v.iter().sum::<f64>() / v.len() as f64));
            deltas.push(population_std(&v));
        }
        Ok((
            GoalDistribution::ucb(goals, &teacher_reward, &deltas, lambda, temperature)?,
            deltas,
        ))
    }

    /// `member_<k>_{online,target}.bin` snapshots plus `manifest.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (k, m) in self.members.iter().enumerate() {
            m.online
                .write_snapshot(std::io::BufWriter::new(fs::File::create(dir.join(format!("member_{k}_online.bin")))?))?;
            m.target
                .write_snapshot(std::io::BufWriter::new(fs::File::create(dir.join(format!("member_{k}_target.bin")))?))?;
        }
        let first = &self.members[0];
        fs::write(
            dir.join("manifest.txt"),
            format!(
                "format=VDSNN1\nmembers={}\nhidden_activation={}\nwidth={}\nheight={}\nlearning_rate={}\n",
                self.members.len(),
                ddpg::activation_name(first.online.hidden_activation),
                self.scale.width,
                self.scale.height,
                first.opt.config.learning_rate,
            ),
        )?;
        Ok(())
    }

    /// Restores a saved ensemble. Batch RNG streams restart from `seed`.
    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let manifest = ddpg::read_manifest(&dir.join("manifest.txt"))?;
        let get = |k: &str| -> Result<String> {
            manifest
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| SamplerError::Config(format!("ensemble manifest missing {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| SamplerError::Config(format!("bad {k} in ensemble manifest")))
        };
        let hidden = ddpg::parse_activation(&get("hidden_activation")?)?;
        let k = num("members")? as usize;
        let scale = FeatureScale {
            width: num("width")?,
            height: num("height")?,
        };
        let read = |name: String| -> Result<MlpParams> {
            let f = fs::File::open(dir.join(name))?;
            Ok(MlpParams::read_snapshot(std::io::BufReader::new(f), hidden, OutputActivation::Linear)?)
        };
        let nets = (0..k)
            .map(|i| read(format!("member_{i}_online.bin")))
            .collect::<Result<Vec<_>>>()?;
        let mut ens = Self::from_members(nets, num("learning_rate")?, scale, seed)?;
        for (i, m) in ens.members.iter_mut().enumerate() {
            m.target = read(format!("member_{i}_target.bin"))?;
        }
        Ok(ens)
    }
}

fn member_step<P: GoalPolicy + ?Sized>(
    member: &mut EnsembleMember,
    scale: &FeatureScale,
    batch: &Batch,
    policy: &P,
    gamma: f64,
    tau: f64,
) -> Result<f64> {
    let tr = &batch.transitions;
    let s_next: Vec<[f64; 2]> = tr.iter().map(|t| t.s_next).collect();
    let goals: Vec<Goal> = tr.iter().map(|t| t.g).collect();
    let next_actions = policy.unit_actions(&s_next, &goals);
    let loss = bellman_regression_step(
        &mut member.online,
        &mut member.opt,
        &member.target,
        scale,
        tr,
        next_actions.view(),
        gamma,
    )?;
    polyak_update(&mut member.target, &member.online, tau)?;
    Ok(loss)
}
