//! Hand-written chase and escape behaviours used to synthesize demonstrations.
//!
//! Every scripted agent picks, among the 13 actions, the one whose resulting
//! velocity lands closest to a desired velocity (ties go to the lower index).

use crate::env::{action_direction, heading_of, AgentState, MotionParams, Role, WorldConfig, N_ACTIONS};
use crate::geom::Vec2;

/// Heading error (degrees) within which a moving agent keeps accelerating
/// straight ahead instead of steering.
const STRAIGHT_TOLERANCE_DEG: f64 = 30.0;

/// Action whose next velocity is closest to `target_velocity`, except that a
/// moving agent already pointed within the straight-ahead tolerance of the
/// target keeps pushing forward (action 1).
pub fn match_velocity(v: Vec2, target_velocity: Vec2, params: MotionParams, dt: f64) -> usize {
    if let (Some(h), Some(t)) = (v.normalized(1e-3), target_velocity.normalized(1e-9)) {
        if h.dot(t) >= STRAIGHT_TOLERANCE_DEG.to_radians().cos() {
            return 1;
        }
    }
    let heading = heading_of(v);
    let carry = v * (1.0 - params.d);
    let mut best = (f64::INFINITY, 0);
    for k in 0..N_ACTIONS {
        let next = carry + action_direction(k).rotate_into(heading) * (params.u * dt);
        let err = next.distance(target_velocity);
        if err < best.0 - 1e-12 {
            best = (err, k);
        }
    }
    best.1
}

/// Pursuit style of the chasers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PursuitStyle {
    /// Each chaser heads for the evader's predicted position.
    Direct,
    /// Chasers steer +/- the flank angle off the bearing to the evader (one
    /// each side), collapsing to direct pursuit at close range. The constant
    /// offset bends their approach into a curve, lengthening the chase.
    Flank,
}

impl PursuitStyle {
    pub fn for_condition(condition: u8) -> Self {
        if condition == 0 {
            PursuitStyle::Direct
        } else {
            PursuitStyle::Flank
        }
    }
}

const FLANK_ANGLE_DEG: f64 = 22.0;
const FLANK_CLOSE_RANGE: f64 = 0.3;
const LEAD_HORIZON: f64 = 0.6;

const WALL_MARGIN: f64 = 0.2;

/// Scripted chaser decision for agent `me` (a chaser with rank `chaser_rank`).
pub fn chaser_action(
    states: &[AgentState],
    me: usize,
    chaser_rank: usize,
    style: PursuitStyle,
    config: &WorldConfig,
) -> usize {
    let own = &states[me];
    let params = config.motion(Role::Chaser);
    let Some(evader) = nearest(states, own.position, Role::Evader) else {
        return 0;
    };
    let dist = own.position.distance(evader.position);
    let top = params.terminal_speed(config.dt);
    let lead = (dist / top).min(LEAD_HORIZON);
    let predicted = evader.position + evader.velocity * lead;

    let aim = match style {
        PursuitStyle::Direct => predicted,
        PursuitStyle::Flank if dist <= FLANK_CLOSE_RANGE => predicted,
        PursuitStyle::Flank => {
            let bearing = (predicted - own.position)
                .normalized(1e-9)
                .unwrap_or(Vec2::new(1.0, 0.0));
            let sign = if chaser_rank.is_multiple_of(2) { 1.0 } else { -1.0 };
            let swung = Vec2::from_angle(sign * FLANK_ANGLE_DEG.to_radians()).rotate_into(bearing);
            own.position + swung * dist
        }
    };
    let dir = (aim - own.position)
        .normalized(1e-9)
        .unwrap_or(Vec2::new(1.0, 0.0));
    match_velocity(own.velocity, dir * top, params, config.dt)
}

const EVADE_CANDIDATES: usize = 24;
const EVADE_LOOKAHEAD: f64 = 0.5;
const EVADE_WALL_WEIGHT: f64 = 4.0;
const RUN_LOOKAHEAD: f64 = 0.3;
const RUN_THREAT_RANGE: f64 = 0.5;

/// Scripted evader. While running fast along a heading that stays inside the
/// arena and does not lead toward a nearby chaser, it keeps accelerating
/// straight ahead; otherwise it re-plans, choosing among evenly spaced
/// headings the one that maximizes the predicted clearance from the nearest
/// chaser after a short lookahead, with a penalty for approaching the walls.
pub fn evader_action(states: &[AgentState], me: usize, config: &WorldConfig) -> usize {
    let own = &states[me];
    let params = config.motion(Role::Evader);
    let top = params.terminal_speed(config.dt);
    let edge = config.arena_half_width - WALL_MARGIN;
    let inside = |p: Vec2| p.x.abs() <= edge && p.y.abs() <= edge;

    if own.velocity.norm() > 0.3 * top {
        let h = heading_of(own.velocity);
        let ahead = own.position + h * (top * RUN_LOOKAHEAD);
        let threatened = states.iter().filter(|s| s.role == Role::Chaser).any(|c| {
            let rel = c.position - own.position;
            rel.norm() < RUN_THREAT_RANGE && rel.dot(h) > 0.0
        });
        if inside(ahead) && !threatened {
            return 1;
        }
    }

    let chasers: Vec<Vec2> = states
        .iter()
        .filter(|s| s.role == Role::Chaser)
        .map(|s| s.position + s.velocity * EVADE_LOOKAHEAD)
        .collect();
    let mut best = (f64::NEG_INFINITY, Vec2::new(1.0, 0.0));
    for k in 0..EVADE_CANDIDATES {
        let dir = Vec2::from_angle(k as f64 * std::f64::consts::TAU / EVADE_CANDIDATES as f64);
        let p = own.position + dir * (top * EVADE_LOOKAHEAD);
        let clearance = chasers.iter().map(|c| c.distance(p)).fold(f64::INFINITY, f64::min);
        let overshoot = (p.x.abs() - edge).max(0.0) + (p.y.abs() - edge).max(0.0);
        let score = clearance - EVADE_WALL_WEIGHT * overshoot;
        if score > best.0 + 1e-12 {
            best = (score, dir);
        }
    }
    match_velocity(own.velocity, best.1 * top, params, config.dt)
}

/// Joint scripted decision for every agent in the world.
pub fn joint_action(states: &[AgentState], style: PursuitStyle, config: &WorldConfig) -> Vec<usize> {
    let mut rank = 0;
    states
        .iter()
        .enumerate()
        .map(|(i, s)| match s.role {
            Role::Chaser => {
                let a = chaser_action(states, i, rank, style, config);
                rank += 1;
                a
            }
            Role::Evader => evader_action(states, i, config),
        })
        .collect()
}

fn nearest(states: &[AgentState], from: Vec2, role: Role) -> Option<&AgentState> {
    states
        .iter()
        .filter(|s| s.role == role)
        .min_by(|a, b| {
            a.position
                .distance(from)
                .total_cmp(&b.position.distance(from))
        })
}
