//! Deep Q-learning: replay, ε-greedy acting, TD targets and the training loop.

mod replay;


use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{cumulative_return, EnvError, EpisodeConfig, SceneData, Transition};
use crate::hash;
use crate::oracle::Oracle;
use crate::qnet::{
    q_backward, sync_target, History, NetConfig, Optimizer, OptimizerKind, QNetError, QNetwork,
    TargetNetwork,
};
use crate::spatial::BoxAction;

pub use replay::{epsilon_at, EpsilonSchedule, ReplayMemory};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("replay holds {size} transitions, {requested} requested")]
    InsufficientReplay { size: usize, requested: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    QNet(#[from] QNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;

/// Training-loop settings. Steps per episode and the discount come from
/// [`EpisodeConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Target sync period, in gradient steps.
    pub target_sync_every: u64,
    pub min_replay_before_learning: usize,
    pub replay_capacity: usize,
    pub seed: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Share of the planned environment steps over which ε decays.
    pub eps_decay_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Save a checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            batch_size: 32,
            lr: 1e-3,
            target_sync_every: 250,
            min_replay_before_learning: 500,
            replay_capacity: 50_000,
            seed: 0,
            eps_start: 1.0,
            eps_end: 0.2,
            eps_decay_fraction: 0.8,
            optimizer: OptimizerKind::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RlError::InvalidConfig(m));
        if self.episodes == 0 || self.batch_size == 0 || self.target_sync_every == 0 {
            return bad("episodes, batch_size and target_sync_every must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.replay_capacity < self.batch_size {
            return bad(format!(
                "replay_capacity {} is smaller than batch_size {}",
                self.replay_capacity, self.batch_size
            ));
        }
        if self.min_replay_before_learning < self.batch_size
            || self.min_replay_before_learning > self.replay_capacity
        {
            return bad(format!(
                "min_replay_before_learning {} must lie in [batch_size, replay_capacity]",
                self.min_replay_before_learning
            ));
        }
        if !(self.eps_decay_fraction > 0.0 && self.eps_decay_fraction <= 1.0) {
            return bad(format!("eps_decay_fraction {} not in (0, 1]", self.eps_decay_fraction));
        }
        EpsilonSchedule::new(self.eps_start, self.eps_end, 1)?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// ε schedule spanning `eps_decay_fraction` of `episodes * T` steps.
    pub fn schedule(&self, env: &EpisodeConfig) -> Result<EpsilonSchedule> {
        let planned = (self.episodes * env.max_steps) as f64;
        let decay = (self.eps_decay_fraction * planned).round().max(1.0) as u64;
        EpsilonSchedule::new(self.eps_start, self.eps_end, decay)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy_action(q: &[f64; 16]) -> BoxAction {
    let mut best = 0;
    for i in 1..q.len() {
        if q[i] > q[best] {
            best = i;
        }
    }
    BoxAction::from_index(best).expect("16 actions")
}

/// ε-greedy choice. One uniform draw decides explore versus exploit, so the
/// RNG stream advances the same way whatever ε is.
pub fn select_action<R: Rng + ?Sized>(
    history: &History,
    net: &QNetwork,
    eps: f64,
    rng: &mut R,
) -> Result<BoxAction> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(RlError::InvalidConfig(format!("epsilon {eps} not in [0, 1]")));
    }
    if rng.gen::<f64>() < eps {
        return Ok(BoxAction::from_index(rng.gen_range(0..16)).expect("16 actions"));
    }
    Ok(greedy_action(&net.q_values(history)?))
}

/// `y = r + [not terminal] * gamma * max_a Q_target(s', a)`.
pub fn td_target(tr: &Transition, target: &TargetNetwork, gamma: f64) -> Result<f64> {
    if tr.terminal || gamma == 0.0 {
        return Ok(tr.reward);
    }
    let q = target.network().q_values(&tr.next.history)?;
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(tr.reward + gamma * best)
}

pub fn td_targets(batch: &[&Transition], target: &TargetNetwork, gamma: f64) -> Result<Vec<f64>> {
    batch.par_iter().map(|tr| td_target(tr, target, gamma)).collect()
}

/// One optimizer step on the mean squared TD error of `batch`. Returns the
/// loss before the update.
pub fn learn_step(
    net: &mut QNetwork,
    opt: &mut Optimizer,
    target: &TargetNetwork,
    batch: &[&Transition],
    gamma: f64,
) -> Result<f64> {
    let ys = td_targets(batch, target, gamma)?;
    let states: Vec<&History> = batch.iter().map(|t| &t.state.history).collect();
    let actions: Vec<BoxAction> = batch.iter().map(|t| t.action).collect();
    let (loss, grads) = q_backward(net, &states, &actions, &ys)?;
    opt.step(net, &grads)?;
    Ok(loss)
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub scene: String,
    pub steps: usize,
    pub conf0: f64,
    pub conf_final: f64,
    #[serde(rename = "return_G")]
    pub return_g: f64,
    /// ε at the episode's first step.
    pub epsilon: f64,
    /// Mean loss over the episode's gradient steps, if any.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub episodes: Vec<EpisodeRecord>,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub target_syncs: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: bool,
    mode: &'a str,
    episodes: usize,
    env_steps: u64,
    grad_steps: u64,
    target_syncs: u64,
}

impl TrainMetrics {
    /// One JSON line per episode, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.episodes {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        let s = Summary {
            summary: true,
            mode: "sequential",
            episodes: self.episodes.len(),
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            target_syncs: self.target_syncs,
        };
        serde_json::to_writer(&mut out, &s)?;
        out.write_all(b"\n")
    }
}

/// Stable scene identifier for metrics: the seed in hex.
fn scene_label(s: &SceneData) -> String {
    format!("{:016x}", s.spec.seed)
}

/// Runs deep Q-learning over `scenes`, cycled round-robin, and returns the
/// online network. `on_episode` sees every finished episode together with the
/// current network.
pub fn train<F>(
    cfg: &TrainerConfig,
    env: &EpisodeConfig,
    net_cfg: &NetConfig,
    scenes: &[SceneData],
    oracle: &mut Oracle,
    mut on_episode: F,
) -> Result<(QNetwork, TrainMetrics)>
where
    F: FnMut(&EpisodeRecord, &QNetwork) -> Result<()>,
{
    cfg.validate()?;
    env.validate()?;
    if scenes.is_empty() {
        return Err(RlError::InvalidConfig("no scenes to train on".into()));
    }
    let sched = cfg.schedule(env)?;
    let shape = net_cfg.obs_shape();
    let mut net = QNetwork::new(net_cfg.clone(), hash::mix(cfg.seed, &[1]))?;
    let mut target = TargetNetwork::from_online(&net);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut memory = ReplayMemory::new(cfg.replay_capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash::mix(cfg.seed, &[2]));
    let mut metrics = TrainMetrics::default();

    for ep in 0..cfg.episodes {
        let scene = &scenes[ep % scenes.len()];
        let episode = scene.episode(*env, shape)?;
        let mut st = episode.init(oracle)?;
        let epsilon = sched.at(metrics.env_steps);
        let mut rewards = Vec::with_capacity(env.max_steps);
        let mut losses = vec![];
        while !st.is_terminal() {
            let eps = sched.at(metrics.env_steps);
            let a = select_action(&st.history, &net, eps, &mut rng)?;
            let out = episode.step(&st, a, oracle)?;
            metrics.env_steps += 1;
            rewards.push(out.reward);
            let next = out.state;
            memory.push(Transition {
                state: st,
                action: a,
                reward: out.reward,
                next: next.clone(),
                terminal: out.terminal,
            });
            if memory.len() >= cfg.min_replay_before_learning {
                let batch = memory.sample(cfg.batch_size, &mut rng)?;
                losses.push(learn_step(&mut net, &mut opt, &target, &batch, env.gamma)?);
                metrics.grad_steps += 1;
                if metrics.grad_steps % cfg.target_sync_every == 0 {
                    sync_target(&net, &mut target)?;
                    metrics.target_syncs += 1;
                }
            }
            st = next;
        }
        let rec = EpisodeRecord {
            episode: ep,
            scene: scene_label(scene),
            steps: st.step_index,
            conf0: st.conf0,
            conf_final: st.conf,
            return_g: cumulative_return(&rewards, env.gamma),
            epsilon,
            mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        };
        on_episode(&rec, &net)?;
        metrics.episodes.push(rec);
    }
    Ok((net, metrics))
}
