//! Offline pretraining on demonstrations and online fine-tuning in the world.
//!
//! Every learned agent owns an independent network, target network, optimizer
//! and prioritized replay buffer. Offline, each demonstration is one
//! sequence trained with backpropagation through time; the target network is
//! synced after every epoch. Online, episodes start from the start positions
//! of a training demonstration, agents without a policy replay that
//! demonstration's actions, and every environment step is followed by one
//! replay update per learned agent (replayed transitions restart the
//! recurrent state from the hidden state stored with them).

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::Episode;
use crate::dtw::{match_expert_index, mix_reward, WarpState};
use crate::env::{assess, observe, observe_into, reset, reset_at, AgentState, Role, World, WorldConfig};
use crate::error::{ensure, Error, Result};
use crate::geom::Vec2;
use crate::kv::{KvMap, KvWriter};
use crate::policy::{demo_actions, epsilon_greedy, open_loop_action, PolicySet};
use crate::qnet::{
    batch_loss_and_grad, clip_grad_norm, sequence_loss_and_grad, Adam, EpisodeSequence, LossTerms, LossWeights,
    NetShape, QNetwork, StepCache, Transition,
};
use crate::replay::ReplayBuffer;

/// Learning method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain double Q-learning on the touch reward.
    Dqn,
    /// Behavioral cloning: action cross-entropy and l2 only, no interaction.
    Bc,
    /// Q-learning plus cross-entropy toward the DTW-aligned expert action.
    Dqaas,
    /// Q-learning on the DTW-shaped reward.
    Dqdil,
    /// DQDIL with the adversarial treatment head.
    Dqcil,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dqn, Method::Bc, Method::Dqaas, Method::Dqdil, Method::Dqcil];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dqn => "dqn",
            Method::Bc => "bc",
            Method::Dqaas => "dqaas",
            Method::Dqdil => "dqdil",
            Method::Dqcil => "dqcil",
        }
    }

    pub fn uses_demos(self) -> bool {
        self != Method::Dqn
    }

    /// Whether the method learns from environment interaction.
    pub fn interacts(self) -> bool {
        self != Method::Bc
    }

    pub fn dtw_shaped(self) -> bool {
        matches!(self, Method::Dqdil | Method::Dqcil)
    }

    pub fn terms(self) -> LossTerms {
        LossTerms {
            td: self != Method::Bc,
            treatment: self == Method::Dqcil,
            supervision: matches!(self, Method::Bc | Method::Dqaas),
            reversal: self == Method::Dqcil,
        }
    }

    /// DQCIL feeds the condition flag straight into the Q heads so a flipped
    /// flag still reaches the policy once the shared features are balanced.
    pub fn net_shape(self, obs_dim: usize) -> NetShape {
        NetShape::new(obs_dim, self == Method::Dqcil)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Contract(format!("unknown method `{s}` (expected dqn, bc, dqaas, dqdil or dqcil)")))
    }
}

/// Exploration and optimization schedule of the online phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub eps_start: f64,
    pub eps_finish: f64,
    /// Steps over which epsilon moves linearly from start to finish.
    pub decay_steps: usize,
    pub eps_test: f64,
    pub total_steps: usize,
    pub target_sync_interval: usize,
    pub learning_rate: f64,
}

impl Schedule {
    pub const DEFAULT_TOTAL_STEPS: usize = 1_005_000;
    pub const DECAY_STEPS: usize = 50_000;
    pub const TARGET_SYNC: usize = 2_000;

    /// Agent domain without pretraining.
    pub fn agent_scratch() -> Self {
        Schedule {
            eps_start: 0.1,
            eps_finish: 0.1,
            decay_steps: Self::DECAY_STEPS,
            eps_test: 0.1,
            total_steps: Self::DEFAULT_TOTAL_STEPS,
            target_sync_interval: Self::TARGET_SYNC,
            learning_rate: 1e-6,
        }
    }

    /// Agent domain fine-tuned after pretraining.
    pub fn agent_finetune() -> Self {
        Schedule {
            eps_start: 0.3,
            eps_finish: 0.1,
            ..Self::agent_scratch()
        }
    }

    /// Biological domains without pretraining (fly and newt learning rate).
    pub fn biological() -> Self {
        Schedule {
            eps_start: 0.5,
            eps_finish: 0.3,
            eps_test: 0.5,
            learning_rate: 1e-4,
            ..Self::agent_scratch()
        }
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        if step >= self.decay_steps || self.decay_steps == 0 {
            return self.eps_finish;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.eps_start + (self.eps_finish - self.eps_start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 <= self.eps_finish && self.eps_finish <= self.eps_start && self.eps_start <= 1.0,
            "need 0 <= eps_finish <= eps_start <= 1"
        );
        ensure!((0.0..=1.0).contains(&self.eps_test), "eps_test must lie in [0, 1]");
        ensure!(self.target_sync_interval > 0, "target_sync_interval must be positive");
        ensure!(self.learning_rate > 0.0, "learning rate must be positive");
        Ok(())
    }
}

/// Prioritized replay settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Environment steps collected before the first update.
    pub warmup: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 100_000,
            batch_size: 32,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            warmup: 1_000,
        }
    }
}

impl ReplayConfig {
    /// Importance exponent annealed linearly over the run.
    pub fn beta(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// How the evader behaves during online training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvaderMode {
    /// Replays the anchor demonstration's evader actions, then idles.
    Replay,
    /// Uses the scripted escape behaviour.
    Scripted,
    /// Learns its own policy alongside the chasers.
    CoTrain,
}

impl fmt::Display for EvaderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvaderMode::Replay => "replay",
            EvaderMode::Scripted => "scripted",
            EvaderMode::CoTrain => "cotrain",
        })
    }
}

impl FromStr for EvaderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replay" => Ok(EvaderMode::Replay),
            "scripted" => Ok(EvaderMode::Scripted),
            "cotrain" => Ok(EvaderMode::CoTrain),
            _ => Err(Error::Contract(format!("unknown evader mode `{s}`"))),
        }
    }
}

/// How the DTW alignment cost enters the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtwReward {
    /// The row minimum `R^DTW_t` itself, as written in the method.
    Absolute,
    /// Its growth since the previous step. The increments are non-negative
    /// and sum to the alignment cost of the whole history, so the episode's
    /// total penalty no longer grows quadratically with its length.
    Increment,
}

impl fmt::Display for DtwReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DtwReward::Absolute => "absolute",
            DtwReward::Increment => "increment",
        })
    }
}

impl FromStr for DtwReward {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(DtwReward::Absolute),
            "increment" => Ok(DtwReward::Increment),
            _ => Err(Error::Contract(format!("unknown DTW reward `{s}`"))),
        }
    }
}

/// Incremental DTW penalty of a growing history against an anchor.
pub struct DtwPenalty {
    warp: WarpState,
    mode: DtwReward,
    last: f64,
}

impl DtwPenalty {
    /// Seeds the alignment with the initial state `s0`.
    pub fn new(expert: Vec<Vec<f64>>, s0: &[f64], mode: DtwReward) -> Result<Self> {
        let mut warp = WarpState::new(expert)?;
        let last = warp.append_step(s0)?;
        Ok(DtwPenalty { warp, mode, last })
    }

    /// Penalty for reaching state `s`.
    pub fn next(&mut self, s: &[f64]) -> Result<f64> {
        let r = self.warp.append_step(s)?;
        let out = match self.mode {
            DtwReward::Absolute => r,
            DtwReward::Increment => r - self.last,
        };
        self.last = r;
        Ok(out)
    }

    pub fn warp(&self) -> &WarpState {
        &self.warp
    }
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub pretrain: bool,
    pub seed: u64,
    pub gamma: f64,
    pub lambda1: f64,
    pub offline_epochs: usize,
    pub offline_lr: f64,
    pub offline_alpha: f64,
    pub offline_lambda2: f64,
    pub offline_lambda3: f64,
    pub online_alpha: f64,
    pub online_lambda2: f64,
    pub online_lambda3: f64,
    pub schedule: Schedule,
    pub replay: ReplayConfig,
    /// Gradient norm cap per update; 0 disables clipping.
    pub grad_clip: f64,
    pub evader: EvaderMode,
    pub dtw_reward: DtwReward,
    /// Online episodes whose start is farther than this from their anchor
    /// demonstration are counted and reported.
    pub anchor_warn_distance: f64,
    /// Online steps between training-log rows.
    pub log_interval: usize,
}

impl RunConfig {
    pub const OFFLINE_EPOCHS: usize = 30;

    /// Agent-domain defaults for `method`.
    pub fn agent_defaults(method: Method, pretrain: bool) -> Self {
        let supervised = matches!(method, Method::Bc | Method::Dqaas);
        let offline_lr = if supervised { 1e-3 } else { 1e-6 };
        let mut schedule = if pretrain {
            Schedule::agent_finetune()
        } else {
            Schedule::agent_scratch()
        };
        schedule.learning_rate = if pretrain { 1e-6 } else { offline_lr };
        RunConfig {
            method,
            pretrain,
            seed: 0,
            gamma: 0.99,
            lambda1: 1e-5,
            offline_epochs: Self::OFFLINE_EPOCHS,
            offline_lr,
            offline_alpha: 10.0,
            offline_lambda2: 10.0,
            offline_lambda3: 50.0,
            online_alpha: 1.0,
            online_lambda2: 1.0,
            online_lambda3: 10.0,
            schedule,
            replay: ReplayConfig::default(),
            grad_clip: 10.0,
            evader: EvaderMode::Replay,
            dtw_reward: DtwReward::Absolute,
            anchor_warn_distance: 0.5,
            log_interval: 1_000,
        }
    }

    pub fn offline_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.offline_lambda2,
            lambda3: self.offline_lambda3,
            gamma: self.gamma,
        }
    }

    pub fn online_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.online_lambda2,
            lambda3: self.online_lambda3,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.offline_weights().validate()?;
        self.online_weights().validate()?;
        ensure!(
            self.offline_alpha >= 0.0 && self.online_alpha >= 0.0,
            "mixing weights must be non-negative"
        );
        ensure!(self.offline_lr > 0.0, "offline learning rate must be positive");
        ensure!(self.replay.batch_size > 0, "batch size must be positive");
        ensure!(self.replay.capacity > 0, "replay capacity must be positive");
        ensure!(self.log_interval > 0, "log_interval must be positive");
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let s = &self.schedule;
        let r = &self.replay;
        let mut w = KvWriter::new();
        w.comment("training run configuration")
            .put("method", self.method)
            .put("pretrain", self.pretrain)
            .put("seed", self.seed)
            .put("gamma", self.gamma)
            .put("lambda1", self.lambda1)
            .put("dtw_reward", self.dtw_reward)
            .blank()
            .comment("offline pretraining")
            .put("offline.epochs", self.offline_epochs)
            .put("offline.learning_rate", self.offline_lr)
            .put("offline.alpha", self.offline_alpha)
            .put("offline.lambda2", self.offline_lambda2)
            .put("offline.lambda3", self.offline_lambda3)
            .blank()
            .comment("online fine-tuning")
            .put("online.alpha", self.online_alpha)
            .put("online.lambda2", self.online_lambda2)
            .put("online.lambda3", self.online_lambda3)
            .put("online.learning_rate", s.learning_rate)
            .put("online.total_steps", s.total_steps)
            .put("online.eps_start", s.eps_start)
            .put("online.eps_finish", s.eps_finish)
            .put("online.eps_decay_steps", s.decay_steps)
            .put("online.eps_test", s.eps_test)
            .put("online.target_sync_interval", s.target_sync_interval)
            .put("online.grad_clip", self.grad_clip)
            .put("online.evader", self.evader)
            .put("online.anchor_warn_distance", self.anchor_warn_distance)
            .put("online.log_interval", self.log_interval)
            .blank()
            .comment("prioritized replay")
            .put("replay.capacity", r.capacity)
            .put("replay.batch_size", r.batch_size)
            .put("replay.alpha", r.alpha)
            .put("replay.beta_start", r.beta_start)
            .put("replay.beta_end", r.beta_end)
            .put("replay.warmup", r.warmup);
        w.finish()
    }

    /// Starts from the defaults of the configured method (and `pretrain`)
    /// and overrides every key present.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let method: Method = kv.get_or("method", Method::Dqdil)?;
        let pretrain: bool = kv.get_or("pretrain", false)?;
        let d = RunConfig::agent_defaults(method, pretrain);
        let ds = d.schedule;
        let dr = d.replay;
        let cfg = RunConfig {
            method,
            pretrain,
            seed: kv.get_or("seed", d.seed)?,
            gamma: kv.get_or("gamma", d.gamma)?,
            lambda1: kv.get_or("lambda1", d.lambda1)?,
            offline_epochs: kv.get_or("offline.epochs", d.offline_epochs)?,
            offline_lr: kv.get_or("offline.learning_rate", d.offline_lr)?,
            offline_alpha: kv.get_or("offline.alpha", d.offline_alpha)?,
            offline_lambda2: kv.get_or("offline.lambda2", d.offline_lambda2)?,
            offline_lambda3: kv.get_or("offline.lambda3", d.offline_lambda3)?,
            online_alpha: kv.get_or("online.alpha", d.online_alpha)?,
            online_lambda2: kv.get_or("online.lambda2", d.online_lambda2)?,
            online_lambda3: kv.get_or("online.lambda3", d.online_lambda3)?,
            schedule: Schedule {
                eps_start: kv.get_or("online.eps_start", ds.eps_start)?,
                eps_finish: kv.get_or("online.eps_finish", ds.eps_finish)?,
                decay_steps: kv.get_or("online.eps_decay_steps", ds.decay_steps)?,
                eps_test: kv.get_or("online.eps_test", ds.eps_test)?,
                total_steps: kv.get_or("online.total_steps", ds.total_steps)?,
                target_sync_interval: kv.get_or("online.target_sync_interval", ds.target_sync_interval)?,
                learning_rate: kv.get_or("online.learning_rate", ds.learning_rate)?,
            },
            replay: ReplayConfig {
                capacity: kv.get_or("replay.capacity", dr.capacity)?,
                batch_size: kv.get_or("replay.batch_size", dr.batch_size)?,
                alpha: kv.get_or("replay.alpha", dr.alpha)?,
                beta_start: kv.get_or("replay.beta_start", dr.beta_start)?,
                beta_end: kv.get_or("replay.beta_end", dr.beta_end)?,
                warmup: kv.get_or("replay.warmup", dr.warmup)?,
            },
            grad_clip: kv.get_or("online.grad_clip", d.grad_clip)?,
            evader: kv.get_or("online.evader", d.evader)?,
            dtw_reward: kv.get_or("dtw_reward", d.dtw_reward)?,
            anchor_warn_distance: kv.get_or("online.anchor_warn_distance", d.anchor_warn_distance)?,
            log_interval: kv.get_or("online.log_interval", d.log_interval)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::read(path)?)
    }

    /// World agents that get a learned policy.
    pub fn learned_agents(&self, world: &WorldConfig) -> Vec<usize> {
        (0..world.n_agents())
            .filter(|&i| world.role_of(i) == Role::Chaser || self.evader == EvaderMode::CoTrain)
            .collect()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub phase: &'static str,
    /// Online environment steps so far (0 during pretraining).
    pub step: usize,
    pub epoch: usize,
    pub episodes: usize,
    pub loss: f64,
    pub td: f64,
    pub treatment: f64,
    pub supervision: f64,
    pub epsilon: f64,
    /// Mean shaped return per learned agent over the episodes in the row.
    pub mean_return: f64,
    pub contact_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn epochs(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.phase == "offline")
    }

    /// Appends the rows to a CSV file, writing the header only when the file
    /// is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Agent states at sample `t` of a recorded episode.
fn states_at(episode: &Episode, t: usize) -> Vec<AgentState> {
    episode
        .agents
        .iter()
        .map(|a| AgentState {
            position: a.positions[t],
            velocity: a.velocities[t],
            role: a.role,
            alive: true,
        })
        .collect()
}

/// Environment rewards of a recorded episode, `[agent][step]`.
pub fn demo_rewards(episode: &Episode, config: &WorldConfig) -> Vec<Vec<f64>> {
    let n = episode.agents.len();
    let mut out = vec![Vec::with_capacity(episode.n_transitions()); n];
    for t in 0..episode.n_transitions() {
        let a = assess(&states_at(episode, t + 1), config, t as f64 * episode.dt);
        for (i, r) in a.rewards.into_iter().enumerate() {
            out[i].push(r);
        }
    }
    out
}

/// Demonstrations split by condition flag, for anchoring.
struct AnchorPool<'a> {
    by_condition: [Vec<Episode>; 2],
    all: &'a [Episode],
}

impl<'a> AnchorPool<'a> {
    fn new(demos: &'a [Episode]) -> Self {
        let pick = |c: u8| demos.iter().filter(|e| e.condition == c).cloned().collect::<Vec<_>>();
        AnchorPool {
            by_condition: [pick(0), pick(1)],
            all: demos,
        }
    }

    /// Nearest-start demonstration with the same condition (any condition
    /// if none share it), and the start distance.
    fn anchor(&self, start: &[Vec2], condition: u8) -> Result<(&Episode, f64)> {
        let pool: &[Episode] = match &self.by_condition[condition.min(1) as usize] {
            p if !p.is_empty() => p,
            _ => self.all,
        };
        let e = &pool[match_expert_index(start, pool)?];
        let d2: f64 = e
            .start_positions()
            .iter()
            .zip(start)
            .map(|(a, b)| a.distance(*b).powi(2))
            .sum();
        Ok((e, d2.sqrt()))
    }
}

/// DTW pseudo-rewards `R^DTW_t` of a history against `expert`, one per
/// transition (the initial state seeds the alignment).
fn dtw_penalties(history: &[Vec<f64>], expert: Vec<Vec<f64>>, mode: DtwReward) -> Result<Vec<f64>> {
    let mut pen = DtwPenalty::new(expert, &history[0], mode)?;
    history[1..].iter().map(|s| pen.next(s)).collect()
}

/// The demonstration as a training sequence for `agent`.
fn demo_sequence(
    episode: &Episode,
    agent: usize,
    actions: &[u8],
    rewards: &[f64],
    penalties: Option<&[f64]>,
    alpha: f64,
) -> EpisodeSequence {
    let obs = (0..episode.len()).map(|t| observe(&states_at(episode, t), agent, episode.condition)).collect();
    let rewards = rewards
        .iter()
        .enumerate()
        .map(|(t, &r)| match penalties {
            Some(p) => mix_reward(r, p[t], alpha),
            None => r,
        })
        .collect();
    EpisodeSequence {
        obs,
        actions: actions.to_vec(),
        rewards,
        terminal: episode.outcome != crate::env::TerminationCause::None,
        condition: episode.condition,
        expert_actions: None,
    }
}

/// Training sequences of every demonstration for every learned agent,
/// `[agent slot][episode]`.
fn demo_sequences(
    demos: &[Episode],
    agents: &[usize],
    config: &WorldConfig,
    method: Method,
    alpha: f64,
    mode: DtwReward,
) -> Result<Vec<Vec<EpisodeSequence>>> {
    let pool = AnchorPool::new(demos);
    let mut out = vec![Vec::with_capacity(demos.len()); agents.len()];
    for e in demos {
        ensure!(e.agents.len() == config.n_agents(), "demonstration {} has the wrong agent count", e.episode_id);
        if e.n_transitions() == 0 {
            continue;
        }
        let actions = demo_actions(e, config);
        let rewards = demo_rewards(e, config);
        let penalties = if method.dtw_shaped() {
            let (anchor, _) = pool.anchor(&e.start_positions(), e.condition)?;
            Some(dtw_penalties(&e.joint_positions(), anchor.joint_positions(), mode)?)
        } else {
            None
        };
        for (k, &i) in agents.iter().enumerate() {
            out[k].push(demo_sequence(e, i, &actions[i], &rewards[i], penalties.as_deref(), alpha));
        }
    }
    Ok(out)
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm > 0.0 {
        clip_grad_norm(grad, max_norm);
    }
}

/// Trains every network of `policy` on the demonstrations for the configured
/// number of epochs (one optimizer step per demonstration, shuffled each
/// epoch). Appends one log row per epoch. DQN ignores demonstrations and
/// returns immediately.
pub fn pretrain_offline(
    policy: &mut PolicySet,
    demos: &[Episode],
    config: &WorldConfig,
    run: &RunConfig,
    log: &mut TrainLog,
) -> Result<()> {
    run.validate()?;
    if !run.method.uses_demos() {
        return Ok(());
    }
    ensure!(!demos.is_empty(), "offline pretraining needs demonstrations");
    let agents = policy.agents();
    let sequences = demo_sequences(demos, &agents, config, run.method, run.offline_alpha, run.dtw_reward)?;
    ensure!(!sequences[0].is_empty(), "demonstrations contain no transitions");
    let w = run.offline_weights();
    let terms = run.method.terms();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x0ff1_1e00);
    let mut targets: Vec<QNetwork> = policy.nets.iter().map(|(_, n)| n.clone()).collect();
    let mut opts: Vec<Adam> = policy.nets.iter().map(|(_, n)| Adam::new(n.n_params(), run.offline_lr)).collect();
    let mut grad = policy.nets[0].1.new_grad();
    let mut order: Vec<usize> = (0..sequences[0].len()).collect();
    for epoch in 1..=run.offline_epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut td, mut tr, mut sup, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, (_, net)) in policy.nets.iter_mut().enumerate() {
            for &e in &order {
                grad.fill(0.0);
                let rep = sequence_loss_and_grad(net, &targets[k], &sequences[k][e], &w, terms, &mut grad)?;
                clip(&mut grad, run.grad_clip);
                opts[k].step(net.params_mut(), &grad);
                loss += rep.total;
                td += rep.td;
                tr += rep.treatment;
                sup += rep.supervision;
                n += 1.0;
            }
            targets[k].copy_from(net);
        }
        log.rows.push(LogRow {
            phase: "offline",
            step: 0,
            epoch,
            episodes: order.len(),
            loss: loss / n,
            td: td / n,
            treatment: tr / n,
            supervision: sup / n,
            epsilon: 0.0,
            mean_return: 0.0,
            contact_rate: 0.0,
        });
        log::info!("offline epoch {epoch}: loss {:.5}", loss / n);
    }
    Ok(())
}

/// Counters of an online run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlineSummary {
    pub steps: usize,
    pub episodes: usize,
    pub contacts: usize,
    /// Episodes whose start was far from every demonstration of its condition.
    pub far_anchor_episodes: usize,
}

struct Learner {
    target: QNetwork,
    opt: Adam,
    buffer: ReplayBuffer,
    hidden: Vec<f64>,
    /// Observation, action and hidden state of the step in flight.
    pending: Option<(Vec<f64>, u8, Vec<f64>)>,
    episode_return: f64,
}

/// Fills each learner's replay buffer with the demonstration transitions,
/// storing the hidden states the current network produces along each one.
fn seed_replay(
    policy: &PolicySet,
    learners: &mut [Learner],
    sequences: &[Vec<EpisodeSequence>],
) -> Result<()> {
    let mut cache = StepCache::default();
    for (k, (_, net)) in policy.nets.iter().enumerate() {
        for (e, seq) in sequences[k].iter().enumerate() {
            let mut h = net.zero_hidden();
            for t in 0..seq.len() {
                let tr = Transition {
                    obs: seq.obs[t].clone(),
                    h_prev: h.clone(),
                    action: seq.actions[t],
                    reward: seq.rewards[t],
                    next_obs: seq.obs[t + 1].clone(),
                    terminal: seq.terminal && t + 1 == seq.len(),
                    condition: seq.condition,
                    expert_action: Some(seq.actions[t]),
                };
                if learners[k].buffer.len() + 1 >= learners[k].buffer.capacity() {
                    return Ok(());
                }
                learners[k].buffer.push(tr, true, e as u64, t)?;
                net.step_into(&seq.obs[t], &h, &mut cache)?;
                h.copy_from_slice(&cache.h);
            }
        }
    }
    Ok(())
}

/// Fine-tunes `policy` in the world for `schedule.total_steps` steps.
///
/// Episodes start from a randomly drawn demonstration's start positions and
/// condition; the nearest-start demonstration of that condition anchors the
/// DTW shaping, supplies the DQAAS expert actions and scripts the agents
/// without a policy. Without demonstrations (DQN) starts are random and those
/// agents use the scripted behaviours.
pub fn train_online(
    policy: &mut PolicySet,
    demos: &[Episode],
    config: &WorldConfig,
    run: &RunConfig,
    log: &mut TrainLog,
) -> Result<OnlineSummary> {
    run.validate()?;
    ensure!(run.method.interacts(), "{} does not interact with the environment", run.method);
    let s = run.schedule;
    let w = run.online_weights();
    let terms = run.method.terms();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x0011_11e0);
    let use_demos = run.method.uses_demos() && !demos.is_empty();
    let pool = AnchorPool::new(demos);

    let mut learners: Vec<Learner> = policy
        .nets
        .iter()
        .map(|(_, n)| Learner {
            target: n.clone(),
            opt: Adam::new(n.n_params(), s.learning_rate),
            buffer: ReplayBuffer::new(run.replay.capacity, run.replay.alpha),
            hidden: n.zero_hidden(),
            pending: None,
            episode_return: 0.0,
        })
        .collect();
    if use_demos {
        let seqs = demo_sequences(demos, &policy.agents(), config, run.method, run.online_alpha, run.dtw_reward)?;
        seed_replay(policy, &mut learners, &seqs)?;
    }

    let n = config.n_agents();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    for (k, (i, _)) in policy.nets.iter().enumerate() {
        slot[*i] = Some(k);
    }
    let mut summary = OnlineSummary::default();
    let mut grad = policy.nets[0].1.new_grad();
    let mut cache = StepCache::default();
    let mut obs = Vec::with_capacity(config.obs_dim());
    let mut actions = vec![0usize; n];
    let mut window = Window::default();
    let mut step = 0usize;

    while step < s.total_steps {
        // Episode setup.
        let (start, condition, anchor) = if demos.is_empty() {
            let start: Vec<Vec2> = reset(config, rng.random()).iter().map(|a| a.position).collect();
            (start, rng.random_range(0..=1u8), None)
        } else {
            let e = &demos[rng.random_range(0..demos.len())];
            let start = e.start_positions();
            let (anchor, dist) = pool.anchor(&start, e.condition)?;
            if dist > run.anchor_warn_distance {
                summary.far_anchor_episodes += 1;
            }
            (start, e.condition, Some(anchor))
        };
        let script = match (anchor, run.evader) {
            (Some(a), EvaderMode::Replay) => Some(demo_actions(a, config)),
            _ => None,
        };
        let mut world = World::new(config.clone(), reset_at(config, &start)?)?;
        // DQAAS uses the alignment only to pick expert actions.
        let mut warp = match anchor {
            Some(a) if run.method.dtw_shaped() || run.method == Method::Dqaas => Some(DtwPenalty::new(
                a.joint_positions(),
                &joint_position(world.states()),
                run.dtw_reward,
            )?),
            _ => None,
        };
        let anchor_actions = anchor.filter(|_| run.method == Method::Dqaas).map(|a| demo_actions(a, config));
        for l in &mut learners {
            l.hidden.fill(0.0);
            l.episode_return = 0.0;
        }

        while !world.is_done() && step < s.total_steps {
            let t = world.steps();
            let mut rank = 0;
            for i in 0..n {
                actions[i] = match slot[i] {
                    Some(k) => {
                        observe_into(world.states(), i, condition, &mut obs);
                        let net = &policy.nets[k].1;
                        net.step_into(&obs, &learners[k].hidden, &mut cache)?;
                        let a = epsilon_greedy(&cache.q, s.epsilon(step), &mut rng);
                        let l = &mut learners[k];
                        l.pending = Some((obs.clone(), a as u8, l.hidden.clone()));
                        l.hidden.copy_from_slice(&cache.h);
                        a
                    }
                    None => open_loop_action(&world, i, t, condition, script.as_deref(), rank),
                };
                if world.states()[i].role == Role::Chaser {
                    rank += 1;
                }
            }
            let out = world.step(&actions).map_err(|e| match e {
                Error::InvalidState(m) => Error::InvalidState(format!("online step {step}: {m}")),
                other => other,
            })?;
            let penalty = match warp.as_mut() {
                Some(wp) => {
                    let pen = wp.next(&joint_position(&out.next_states))?;
                    run.method.dtw_shaped().then_some(pen)
                }
                None => None,
            };
            for (k, (i, _)) in policy.nets.iter().enumerate() {
                let l = &mut learners[k];
                let (o, a, h_prev) = l.pending.take().expect("every learner acted");
                let reward = match penalty {
                    Some(p) => mix_reward(out.rewards[*i], p, run.online_alpha),
                    None => out.rewards[*i],
                };
                l.episode_return += reward;
                let expert_action = match (&anchor_actions, &warp) {
                    (Some(acts), Some(wp)) => {
                        let j = wp.warp().aligned_index().min(acts[*i].len().saturating_sub(1));
                        acts[*i].get(j).copied()
                    }
                    _ => None,
                };
                let tr = Transition {
                    obs: o,
                    h_prev,
                    action: a,
                    reward,
                    next_obs: observe(&out.next_states, *i, condition),
                    terminal: out.terminated,
                    condition,
                    expert_action,
                };
                l.buffer.push(tr, false, summary.episodes as u64, t)?;
            }
            step += 1;

            if step >= run.replay.warmup {
                let beta = run.replay.beta(step, s.total_steps);
                for (k, (_, net)) in policy.nets.iter_mut().enumerate() {
                    let l = &mut learners[k];
                    if l.buffer.len() < run.replay.batch_size {
                        continue;
                    }
                    let sample = l.buffer.per_sample(run.replay.batch_size, beta, &mut rng)?;
                    let batch: Vec<Transition> =
                        sample.indices.iter().map(|&j| l.buffer.item(j).transition.clone()).collect();
                    grad.fill(0.0);
                    let rep = batch_loss_and_grad(net, &l.target, &batch, Some(&sample.weights), &w, terms, &mut grad)?;
                    clip(&mut grad, run.grad_clip);
                    l.opt.step(net.params_mut(), &grad);
                    if terms.td {
                        l.buffer.update_priorities(&sample.indices, &rep.td_errors);
                    }
                    window.add_loss(rep.total, rep.td, rep.treatment, rep.supervision);
                }
            }
            if step.is_multiple_of(s.target_sync_interval) {
                for (k, (_, net)) in policy.nets.iter().enumerate() {
                    learners[k].target.copy_from(net);
                }
            }
            if out.terminated {
                summary.episodes += 1;
                let contact = out.cause == crate::env::TerminationCause::Contact;
                summary.contacts += contact as usize;
                let ret = learners.iter().map(|l| l.episode_return).sum::<f64>() / learners.len() as f64;
                window.add_episode(ret, contact);
            }
            if step.is_multiple_of(run.log_interval) {
                log.rows.push(window.row(step, s.epsilon(step)));
                window = Window::default();
            }
        }
    }
    summary.steps = step;
    Ok(summary)
}

/// Concatenated positions of every agent.
fn joint_position(states: &[AgentState]) -> Vec<f64> {
    states.iter().flat_map(|s| [s.position.x, s.position.y]).collect()
}

/// Running means between two online log rows.
#[derive(Default)]
struct Window {
    loss: f64,
    td: f64,
    treatment: f64,
    supervision: f64,
    updates: usize,
    returns: f64,
    episodes: usize,
    contacts: usize,
}

impl Window {
    fn add_loss(&mut self, total: f64, td: f64, treatment: f64, supervision: f64) {
        self.loss += total;
        self.td += td;
        self.treatment += treatment;
        self.supervision += supervision;
        self.updates += 1;
    }

    fn add_episode(&mut self, ret: f64, contact: bool) {
        self.returns += ret;
        self.episodes += 1;
        self.contacts += contact as usize;
    }

    fn row(&self, step: usize, epsilon: f64) -> LogRow {
        let u = self.updates.max(1) as f64;
        let e = self.episodes.max(1) as f64;
        LogRow {
            phase: "online",
            step,
            epoch: 0,
            episodes: self.episodes,
            loss: self.loss / u,
            td: self.td / u,
            treatment: self.treatment / u,
            supervision: self.supervision / u,
            epsilon,
            mean_return: self.returns / e,
            contact_rate: self.contacts as f64 / e,
        }
    }
}

/// Full training run: fresh networks, optional pretraining, then online
/// fine-tuning for every method that interacts with the world.
pub fn train(demos: &[Episode], config: &WorldConfig, run: &RunConfig) -> Result<(PolicySet, TrainLog)> {
    run.validate()?;
    let mut policy = PolicySet::new(run.method, config, &run.learned_agents(config), run.seed);
    let mut log = TrainLog::default();
    if run.pretrain || run.method == Method::Bc {
        pretrain_offline(&mut policy, demos, config, run, &mut log)?;
    }
    if run.method.interacts() && run.schedule.total_steps > 0 {
        let summary = train_online(&mut policy, demos, config, run, &mut log)?;
        log::info!(
            "online: {} steps, {} episodes, {} contacts, {} far anchors",
            summary.steps,
            summary.episodes,
            summary.contacts,
            summary.far_anchor_episodes
        );
    }
    Ok((policy, log))
}
