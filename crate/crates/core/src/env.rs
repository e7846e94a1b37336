//! Multi-agent chase-escape world.
//!
//! Agents are discs moving in a square arena under a damped discrete-input
//! velocity model: `v' = (1 - d) v + u a dt`, where `a` is one of 13 unit
//! directions expressed in the agent's local frame (or zero). Chasers receive
//! `u` scaled by the configured mobility factor. Episodes end on
//! chaser-evader contact, on any agent leaving the boundary square, or at the
//! time limit.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geom::Vec2;
use crate::kv::{KvMap, KvWriter};

/// Number of discrete actions: no-op plus 12 directions.
pub const N_ACTIONS: usize = 13;

/// Angular spacing of the directional actions.
pub const ACTION_SPACING_DEG: f64 = 30.0;

/// Speeds below this use the world frame as the local frame.
pub const MIN_HEADING_SPEED: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Chaser,
    Evader,
}

impl Role {
    pub fn opponent(self) -> Role {
        match self {
            Role::Chaser => Role::Evader,
            Role::Evader => Role::Chaser,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Chaser => "chaser",
            Role::Evader => "evader",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chaser" => Ok(Role::Chaser),
            "evader" => Ok(Role::Evader),
            _ => Err(Error::Contract(format!("unknown role `{s}`"))),
        }
    }
}

/// Damping and input amplitude of the velocity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub d: f64,
    pub u: f64,
}

impl MotionParams {
    pub fn new(d: f64, u: f64) -> Self {
        MotionParams { d, u }
    }

    /// Steady-state speed under a constant directional input.
    pub fn terminal_speed(&self, dt: f64) -> f64 {
        self.u * dt / self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub arena_half_width: f64,
    pub boundary_half_width: f64,
    pub dt: f64,
    pub time_limit: f64,
    pub agent_diameter: f64,
    pub n_chasers: usize,
    pub n_evaders: usize,
    pub chaser_mobility_scale: f64,
    pub boundary_penalty: f64,
    pub contact_reward: f64,
    pub rng_seed: u64,
    /// Damping shared by all roles.
    pub damping: f64,
    /// Evader input amplitude; chasers use `input_amplitude * chaser_mobility_scale`.
    pub input_amplitude: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            arena_half_width: 1.0,
            boundary_half_width: 1.1,
            dt: 0.1,
            time_limit: 14.8,
            agent_diameter: 0.1,
            n_chasers: 2,
            n_evaders: 1,
            chaser_mobility_scale: 1.2,
            boundary_penalty: -10.0,
            contact_reward: 1.0,
            rng_seed: 0,
            damping: 0.25,
            input_amplitude: 3.0,
        }
    }
}

impl WorldConfig {
    /// The longer episode limit of the original particle-environment task.
    pub const LONG_TIME_LIMIT: f64 = 30.0;

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dt > 0.0 && self.dt.is_finite(), "dt must be > 0");
        ensure!(self.time_limit > 0.0, "time_limit must be > 0");
        ensure!(
            self.boundary_half_width > self.arena_half_width,
            "boundary_half_width must exceed arena_half_width"
        );
        ensure!(self.agent_diameter > 0.0, "agent_diameter must be > 0");
        ensure!(
            self.chaser_mobility_scale > 0.0,
            "chaser_mobility_scale must be > 0"
        );
        ensure!(
            (0.0..=1.0).contains(&self.damping),
            "damping must lie in [0, 1]"
        );
        ensure!(self.input_amplitude >= 0.0, "input_amplitude must be >= 0");
        ensure!(self.n_chasers + self.n_evaders >= 1, "world has no agents");
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.n_chasers + self.n_evaders
    }

    /// Chasers occupy indices `0..n_chasers`, evaders follow.
    pub fn role_of(&self, agent: usize) -> Role {
        if agent < self.n_chasers {
            Role::Chaser
        } else {
            Role::Evader
        }
    }

    pub fn motion(&self, role: Role) -> MotionParams {
        match role {
            Role::Chaser => MotionParams::new(
                self.damping,
                self.input_amplitude * self.chaser_mobility_scale,
            ),
            Role::Evader => MotionParams::new(self.damping, self.input_amplitude),
        }
    }

    /// Upper bound on the number of steps in one episode.
    pub fn max_steps(&self) -> usize {
        (self.time_limit / self.dt - 1e-9).ceil() as usize
    }

    pub fn obs_dim(&self) -> usize {
        observation_dim(self.n_agents())
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("world configuration")
            .put("arena_half_width", self.arena_half_width)
            .put("boundary_half_width", self.boundary_half_width)
            .put("dt", self.dt)
            .put("time_limit", self.time_limit)
            .put("agent_diameter", self.agent_diameter)
            .put("n_chasers", self.n_chasers)
            .put("n_evaders", self.n_evaders)
            .put("chaser_mobility_scale", self.chaser_mobility_scale)
            .put("boundary_penalty", self.boundary_penalty)
            .put("contact_reward", self.contact_reward)
            .put("rng_seed", self.rng_seed)
            .put("damping", self.damping)
            .put("input_amplitude", self.input_amplitude);
        w.finish()
    }

    /// Reads the keys this struct knows; missing keys keep their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = WorldConfig::default();
        let cfg = WorldConfig {
            arena_half_width: kv.get_or("arena_half_width", d.arena_half_width)?,
            boundary_half_width: kv.get_or("boundary_half_width", d.boundary_half_width)?,
            dt: kv.get_or("dt", d.dt)?,
            time_limit: kv.get_or("time_limit", d.time_limit)?,
            agent_diameter: kv.get_or("agent_diameter", d.agent_diameter)?,
            n_chasers: kv.get_or("n_chasers", d.n_chasers)?,
            n_evaders: kv.get_or("n_evaders", d.n_evaders)?,
            chaser_mobility_scale: kv.get_or("chaser_mobility_scale", d.chaser_mobility_scale)?,
            boundary_penalty: kv.get_or("boundary_penalty", d.boundary_penalty)?,
            contact_reward: kv.get_or("contact_reward", d.contact_reward)?,
            rng_seed: kv.get_or("rng_seed", d.rng_seed)?,
            damping: kv.get_or("damping", d.damping)?,
            input_amplitude: kv.get_or("input_amplitude", d.input_amplitude)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub role: Role,
    pub alive: bool,
}

impl AgentState {
    pub fn at_rest(position: Vec2, role: Role) -> Self {
        AgentState {
            position,
            velocity: Vec2::ZERO,
            role,
            alive: true,
        }
    }
}

/// Local-frame unit vector of a directional action, zero for the no-op.
///
/// Index `k` in `1..=12` points at `(k - 1) * 30` degrees from the heading.
pub fn action_direction(index: usize) -> Vec2 {
    assert!(index < N_ACTIONS, "action index {index} out of range");
    if index == 0 {
        Vec2::ZERO
    } else {
        Vec2::from_angle((index - 1) as f64 * ACTION_SPACING_DEG.to_radians())
    }
}

/// All 13 local-frame action vectors in index order.
pub fn action_set() -> [Vec2; N_ACTIONS] {
    std::array::from_fn(action_direction)
}

/// Index of the directional action nearest to the local-frame angle `theta`.
///
/// An angle exactly halfway between two bins resolves to the lower index;
/// the 345 degree midpoint between the last bin and the first resolves to 1.
pub fn nearest_direction(theta: f64) -> usize {
    let spacing = ACTION_SPACING_DEG.to_radians();
    let t = theta.rem_euclid(2.0 * PI);
    let k = t / spacing;
    let lo = k.floor();
    let bin = if (k - lo - 0.5).abs() < 1e-9 {
        let a = lo as usize % 12;
        a.min((a + 1) % 12)
    } else {
        k.round() as usize % 12
    };
    bin + 1
}

/// World-frame heading used as the agent's local x-axis.
pub fn heading_of(velocity: Vec2) -> Vec2 {
    velocity
        .normalized(MIN_HEADING_SPEED)
        .unwrap_or(Vec2::new(1.0, 0.0))
}

/// One application of the velocity model.
pub fn velocity_transition(
    v: Vec2,
    action_index: usize,
    params: MotionParams,
    heading: Vec2,
    dt: f64,
) -> Result<Vec2> {
    if !v.is_finite() || !heading.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite velocity {v:?} or heading {heading:?}"
        )));
    }
    ensure!(action_index < N_ACTIONS, "action index {action_index} out of range");
    ensure!(
        (0.0..=1.0).contains(&params.d) && params.u >= 0.0 && dt > 0.0,
        "invalid motion parameters {params:?} / dt {dt}"
    );
    let a = action_direction(action_index).rotate_into(heading);
    Ok(v * (1.0 - params.d) + a * (params.u * dt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminationCause {
    None,
    Contact,
    Timeout,
    Boundary,
}

impl fmt::Display for TerminationCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationCause::None => "none",
            TerminationCause::Contact => "contact",
            TerminationCause::Timeout => "timeout",
            TerminationCause::Boundary => "boundary",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_states: Vec<AgentState>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub cause: TerminationCause,
    /// Winning role when the episode ended.
    pub winner: Option<Role>,
}

/// Advances every agent by one step from time `t`.
pub fn step(
    state: &[AgentState],
    joint_action: &[usize],
    config: &WorldConfig,
    t: f64,
) -> Result<StepOutcome> {
    ensure!(
        state.len() == joint_action.len(),
        "{} agents but {} actions",
        state.len(),
        joint_action.len()
    );
    ensure!(
        t <= config.time_limit + 1e-9,
        "t = {t} beyond time limit {}",
        config.time_limit
    );
    ensure!(state.iter().all(|s| s.alive), "stepping a finished episode");

    let dt = config.dt;
    let mut next = Vec::with_capacity(state.len());
    for (s, &a) in state.iter().zip(joint_action) {
        if !s.position.is_finite() {
            return Err(Error::InvalidState(format!("non-finite position {:?}", s.position)));
        }
        let v = velocity_transition(s.velocity, a, config.motion(s.role), heading_of(s.velocity), dt)?;
        next.push(AgentState {
            position: s.position + v * dt,
            velocity: v,
            role: s.role,
            alive: true,
        });
    }

    let Assessment { rewards, cause, winner } = assess(&next, config, t);
    let terminated = cause != TerminationCause::None;
    if terminated {
        for s in &mut next {
            s.alive = false;
        }
    }
    Ok(StepOutcome {
        next_states: next,
        rewards,
        terminated,
        cause,
        winner,
    })
}

/// Rewards and termination of the joint state `next` reached by a step
/// taken at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub rewards: Vec<f64>,
    pub cause: TerminationCause,
    pub winner: Option<Role>,
}

/// Applies the contact, boundary and timeout rules (in that order) to the
/// post-step state `next`. Also used to score recorded demonstrations.
pub fn assess(next: &[AgentState], config: &WorldConfig, t: f64) -> Assessment {
    let dt = config.dt;
    let mut rewards = vec![0.0; next.len()];
    let mut cause = TerminationCause::None;
    let mut winner = None;

    // Chaser-chaser overlap is ignored; only chaser-evader contact counts.
    for (i, c) in next.iter().enumerate().filter(|(_, s)| s.role == Role::Chaser) {
        let touching = next
            .iter()
            .filter(|s| s.role == Role::Evader)
            .any(|e| in_contact(c.position, e.position, config.agent_diameter));
        if touching {
            rewards[i] += config.contact_reward;
            cause = TerminationCause::Contact;
            winner = Some(Role::Chaser);
        }
    }

    if cause == TerminationCause::None {
        let bw = config.boundary_half_width;
        for (i, s) in next.iter().enumerate() {
            if s.position.x.abs() > bw || s.position.y.abs() > bw {
                rewards[i] += config.boundary_penalty;
                if cause == TerminationCause::None {
                    winner = Some(s.role.opponent());
                }
                cause = TerminationCause::Boundary;
            }
        }
    }

    if cause == TerminationCause::None && t + dt >= config.time_limit - 1e-9 {
        cause = TerminationCause::Timeout;
        winner = Some(Role::Evader);
    }

    // Evaders earn elapsed time for every step they survive inside the arena.
    if cause != TerminationCause::Contact {
        for (i, s) in next.iter().enumerate() {
            if s.role == Role::Evader && rewards[i] == 0.0 {
                rewards[i] += dt;
            }
        }
    }

    Assessment { rewards, cause, winner }
}

pub fn in_contact(a: Vec2, b: Vec2, diameter: f64) -> bool {
    a.distance(b) <= diameter
}

/// Initial state: positions i.i.d. uniform on `[-0.5, 0.5]^2`, at rest.
pub fn reset(config: &WorldConfig, seed: u64) -> Vec<AgentState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.n_agents())
        .map(|i| {
            let p = Vec2::new(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
            AgentState::at_rest(p, config.role_of(i))
        })
        .collect()
}

/// Starts agents at rest at the given positions.
pub fn reset_at(config: &WorldConfig, positions: &[Vec2]) -> Result<Vec<AgentState>> {
    ensure!(
        positions.len() == config.n_agents(),
        "{} start positions for {} agents",
        positions.len(),
        config.n_agents()
    );
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, &p)| AgentState::at_rest(p, config.role_of(i)))
        .collect())
}

pub fn observation_dim(n_agents: usize) -> usize {
    4 + 4 * n_agents.saturating_sub(1) + 1
}

/// Own position and velocity, then relative position and velocity of every
/// other agent in index order, then the condition flag.
pub fn observe(state: &[AgentState], agent_index: usize, condition_flag: u8) -> Vec<f64> {
    let mut obs = Vec::with_capacity(observation_dim(state.len()));
    observe_into(state, agent_index, condition_flag, &mut obs);
    obs
}

pub fn observe_into(state: &[AgentState], agent_index: usize, condition_flag: u8, obs: &mut Vec<f64>) {
    assert!(agent_index < state.len(), "agent index out of range");
    obs.clear();
    let me = &state[agent_index];
    obs.extend([me.position.x, me.position.y, me.velocity.x, me.velocity.y]);
    for (j, o) in state.iter().enumerate() {
        if j == agent_index {
            continue;
        }
        let dp = o.position - me.position;
        let dv = o.velocity - me.velocity;
        obs.extend([dp.x, dp.y, dv.x, dv.y]);
    }
    obs.push(condition_flag as f64);
}

/// Stateful wrapper around [`step`] that tracks elapsed time.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    states: Vec<AgentState>,
    steps: usize,
    done: bool,
}

impl World {
    pub fn new(config: WorldConfig, states: Vec<AgentState>) -> Result<Self> {
        config.validate()?;
        ensure!(
            states.len() == config.n_agents(),
            "{} states for {} agents",
            states.len(),
            config.n_agents()
        );
        Ok(World {
            config,
            states,
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.dt
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(|s| s.position).collect()
    }

    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome> {
        ensure!(!self.done, "episode already terminated");
        let out = step(&self.states, joint_action, &self.config, self.time())?;
        self.states = out.next_states.clone();
        self.steps += 1;
        self.done = out.terminated;
        Ok(out)
    }
}
