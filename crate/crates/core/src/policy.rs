//! Learned policies and the rollouts they drive.
//!
//! A [`PolicySet`] holds one independent Q-network per learned agent. Agents
//! without a network follow an open-loop action script (for example the
//! evader actions of a demonstration) and idle once it runs out, or fall
//! back to the scripted behaviours when no script is given.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::{AgentTrack, Episode};
use crate::env::{observe_into, reset, reset_at, Role, TerminationCause, World, WorldConfig, N_ACTIONS};
use crate::error::{ensure, Error, Result};
use crate::geom::Vec2;
use crate::kv::{KvMap, KvWriter};
use crate::locomotion::infer_track_actions;
use crate::qnet::{argmax, NetShape, QNetwork, StepCache};
use crate::scripted::{chaser_action, evader_action, PursuitStyle};
use crate::training::Method;

/// Epsilon-greedy choice over `q` (uniform over all actions with probability `eps`).
pub fn epsilon_greedy<R: Rng>(q: &[f64], eps: f64, rng: &mut R) -> usize {
    if eps > 0.0 && rng.random::<f64>() < eps {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Per-agent action labels of a demonstration: the recorded actions when
/// present, otherwise actions inferred from the velocities with the world's
/// motion parameters.
pub fn demo_actions(episode: &Episode, config: &WorldConfig) -> Vec<Vec<u8>> {
    episode
        .agents
        .iter()
        .map(|a| match &a.actions {
            Some(actions) => actions.clone(),
            None => infer_track_actions(a, config.motion(a.role), episode.dt),
        })
        .collect()
}

/// What to roll out: where agents start, which flag they see, and the
/// open-loop script for agents without a policy.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSpec<'a> {
    pub start: &'a [Vec2],
    pub condition: u8,
    /// Per-agent action scripts, indexed like the world's agents.
    pub script: Option<&'a [Vec<u8>]>,
    pub epsilon: f64,
    pub seed: u64,
    pub episode_id: u64,
}

/// Anything that can produce an episode from a rollout spec.
pub trait EpisodeModel {
    fn run_episode(&self, config: &WorldConfig, spec: &RolloutSpec) -> Result<Episode>;
}

/// Records the trajectory of a running world.
pub(crate) struct Recorder {
    tracks: Vec<AgentTrack>,
    cause: TerminationCause,
    winner: Role,
}

impl Recorder {
    pub(crate) fn new(world: &World) -> Self {
        Recorder {
            tracks: world
                .states()
                .iter()
                .map(|s| AgentTrack {
                    role: s.role,
                    positions: vec![s.position],
                    velocities: vec![s.velocity],
                    actions: Some(Vec::new()),
                })
                .collect(),
            cause: TerminationCause::None,
            winner: Role::Evader,
        }
    }

    pub(crate) fn record(&mut self, actions: &[usize], out: &crate::env::StepOutcome) {
        for (i, s) in out.next_states.iter().enumerate() {
            let t = &mut self.tracks[i];
            t.positions.push(s.position);
            t.velocities.push(s.velocity);
            t.actions.as_mut().expect("recorder tracks carry actions").push(actions[i] as u8);
        }
        if out.terminated {
            self.cause = out.cause;
            self.winner = out.winner.unwrap_or(Role::Evader);
        }
    }

    pub(crate) fn finish(self, episode_id: u64, condition: u8, dt: f64) -> Episode {
        let len = self.tracks[0].positions.len();
        Episode {
            episode_id,
            condition,
            dt,
            agents: self.tracks,
            outcome: self.cause,
            winner_role: self.winner,
            duration: (len - 1) as f64 * dt,
        }
    }
}

/// Action of an agent without a policy at step `t`.
pub(crate) fn open_loop_action(
    world: &World,
    agent: usize,
    t: usize,
    condition: u8,
    script: Option<&[Vec<u8>]>,
    chaser_rank: usize,
) -> usize {
    if let Some(script) = script {
        return script[agent].get(t).map_or(0, |&a| a as usize);
    }
    let cfg = world.config();
    match world.states()[agent].role {
        Role::Chaser => chaser_action(world.states(), agent, chaser_rank, PursuitStyle::for_condition(condition), cfg),
        Role::Evader => evader_action(world.states(), agent, cfg),
    }
}

/// Independent Q-networks for the learned agents of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub method: Method,
    pub shape: NetShape,
    /// `(agent index, network)` pairs in increasing agent order.
    pub nets: Vec<(usize, QNetwork)>,
}

impl PolicySet {
    /// Fresh networks for `agents`, seeded deterministically from `seed`.
    pub fn new(method: Method, config: &WorldConfig, agents: &[usize], seed: u64) -> Self {
        let shape = method.net_shape(config.obs_dim());
        let nets = agents
            .iter()
            .map(|&i| (i, QNetwork::new(shape, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64))))
            .collect();
        PolicySet { method, shape, nets }
    }

    pub fn agents(&self) -> Vec<usize> {
        self.nets.iter().map(|(i, _)| *i).collect()
    }

    pub fn net(&self, agent: usize) -> Option<&QNetwork> {
        self.nets.iter().find(|(i, _)| *i == agent).map(|(_, n)| n)
    }

    /// Random starts from `reset(seed + k)`; agents without a policy use the
    /// scripted behaviours.
    pub fn rollout(&self, config: &WorldConfig, eps: f64, n_episodes: usize, condition: u8, seed: u64) -> Result<Vec<Episode>> {
        (0..n_episodes)
            .map(|k| {
                let start: Vec<Vec2> = reset(config, seed.wrapping_add(k as u64)).iter().map(|s| s.position).collect();
                self.run_episode(
                    config,
                    &RolloutSpec {
                        start: &start,
                        condition,
                        script: None,
                        epsilon: eps,
                        seed: seed.wrapping_add(k as u64),
                        episode_id: k as u64,
                    },
                )
            })
            .collect()
    }

    /// Rolls out from the start of every episode in `gt`, replaying each
    /// one's actions for the agents without a policy.
    pub fn rollout_from(&self, config: &WorldConfig, gt: &[Episode], condition: Option<u8>, eps: f64, seed: u64) -> Result<Vec<Episode>> {
        gt.iter()
            .enumerate()
            .map(|(k, e)| {
                let start = e.start_positions();
                let script = demo_actions(e, config);
                self.run_episode(
                    config,
                    &RolloutSpec {
                        start: &start,
                        condition: condition.unwrap_or(e.condition),
                        script: Some(&script),
                        epsilon: eps,
                        seed: seed.wrapping_add(k as u64),
                        episode_id: e.episode_id,
                    },
                )
            })
            .collect()
    }

    fn metadata(&self, config: &WorldConfig) -> String {
        let agents: Vec<String> = self.agents().iter().map(|i| i.to_string()).collect();
        let mut w = KvWriter::new();
        w.comment("policy set")
            .put("method", self.method)
            .put("obs_dim", self.shape.obs_dim)
            .put("n_actions", self.shape.n_actions)
            .put("flag_to_heads", self.shape.flag_to_heads)
            .put("agents", agents.join(","));
        let mut text = w.finish();
        for line in config.to_kv().lines().filter(|l| l.contains('=') && !l.starts_with('#')) {
            text.push_str("world.");
            text.push_str(line.trim());
            text.push('\n');
        }
        text
    }

    pub fn to_checkpoint(&self, config: &WorldConfig) -> Checkpoint {
        let mut c = Checkpoint::new(self.metadata(config));
        for (i, net) in &self.nets {
            c.add_network(&format!("agent{i}"), net);
        }
        c
    }

    /// Rebuilds the policy set and the world it was trained in.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, WorldConfig)> {
        let meta = c.meta()?;
        let method: Method = meta.require("method")?;
        let obs_dim: usize = meta.require("obs_dim")?;
        let flag: bool = meta.require("flag_to_heads")?;
        let shape = NetShape::new(obs_dim, flag);
        let n_actions: usize = meta.require("n_actions")?;
        if n_actions != shape.n_actions {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint has {n_actions} actions, expected {}",
                shape.n_actions
            )));
        }
        let agents: String = meta.require("agents")?;
        let mut nets = Vec::new();
        for tok in agents.split(',').filter(|s| !s.is_empty()) {
            let i: usize = tok
                .parse()
                .map_err(|_| Error::ArtifactMismatch(format!("bad agent index `{tok}`")))?;
            nets.push((i, c.network(&format!("agent{i}"), shape)?));
        }
        let world_text: String = meta
            .keys()
            .filter_map(|k| k.strip_prefix("world.").map(|w| format!("{w} = {}\n", meta.get_str(k).unwrap_or(""))))
            .collect();
        let world = WorldConfig::from_kv(&KvMap::parse(&world_text)?)?;
        ensure!(
            world.obs_dim() == obs_dim,
            "checkpoint world has observation size {}, networks expect {obs_dim}",
            world.obs_dim()
        );
        Ok((PolicySet { method, shape, nets }, world))
    }

    pub fn save(&self, path: &Path, config: &WorldConfig) -> Result<()> {
        self.to_checkpoint(config).save(path).map(|_| ())
    }

    pub fn load(path: &Path) -> Result<(Self, WorldConfig)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl EpisodeModel for PolicySet {
    fn run_episode(&self, config: &WorldConfig, spec: &RolloutSpec) -> Result<Episode> {
        ensure!(spec.condition <= 1, "condition flag must be 0 or 1");
        ensure!(
            config.obs_dim() == self.shape.obs_dim,
            "world observation size {} does not match the policy's {}",
            config.obs_dim(),
            self.shape.obs_dim
        );
        let mut world = World::new(config.clone(), reset_at(config, spec.start)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = config.n_agents();
        let mut slot: Vec<Option<usize>> = vec![None; n];
        for (k, (i, _)) in self.nets.iter().enumerate() {
            ensure!(*i < n, "policy for agent {i} in a world of {n} agents");
            slot[*i] = Some(k);
        }
        let mut hidden: Vec<Vec<f64>> = self.nets.iter().map(|(_, net)| net.zero_hidden()).collect();
        let mut cache = StepCache::default();
        let mut obs = Vec::with_capacity(config.obs_dim());
        let mut actions = vec![0usize; n];
        let mut rec = Recorder::new(&world);
        while !world.is_done() {
            let t = world.steps();
            let mut rank = 0;
            for i in 0..n {
                actions[i] = match slot[i] {
                    Some(k) => {
                        observe_into(world.states(), i, spec.condition, &mut obs);
                        let net = &self.nets[k].1;
                        net.step_into(&obs, &hidden[k], &mut cache)?;
                        hidden[k].copy_from_slice(&cache.h);
                        epsilon_greedy(&cache.q, spec.epsilon, &mut rng)
                    }
                    None => open_loop_action(&world, i, t, spec.condition, spec.script, rank),
                };
                debug_assert!(actions[i] < N_ACTIONS);
                if world.states()[i].role == Role::Chaser {
                    rank += 1;
                }
            }
            let out = world.step(&actions)?;
            rec.record(&actions, &out);
        }
        Ok(rec.finish(spec.episode_id, spec.condition, config.dt))
    }
}
