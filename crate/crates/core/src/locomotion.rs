//! Identification of damping and input amplitude from observed trajectories.
//!
//! Rest-to-motion onsets give the typical speed reached after one input step
//! (`v_on`); the median of the top percentile of speeds gives the sustained
//! top speed (`v_max`). Then `u = v_on / dt` and `d = v_on / v_max`. The fit is
//! checked by the RMSE of one-step velocity predictions.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{AgentTrack, Episode};
use crate::env::{heading_of, nearest_direction, velocity_transition, MotionParams, Role, N_ACTIONS};
use crate::error::{ensure, Error, Result};
use crate::geom::Vec2;
use crate::kv::{KvMap, KvWriter};

/// Default acceleration threshold for onset detection, length/s^2.
pub const DEFAULT_TH_ACC: f64 = 0.5;

/// Minimum pooled sample count for the top-percentile statistic.
pub const MIN_SAMPLES: usize = 100;

/// Residual norm (in units of one input step) below which a transition is
/// read as the no-op action.
pub const NOOP_RESIDUAL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocomotionParams {
    pub d: f64,
    pub u: f64,
    pub v_on: f64,
    pub v_max: f64,
    pub rmse: f64,
    pub n_transitions: usize,
    pub n_onsets: usize,
}

impl LocomotionParams {
    pub fn motion(&self) -> MotionParams {
        MotionParams::new(self.d, self.u)
    }

    /// `d > 1` means onsets outrun the top-percentile speed; reported, not clamped.
    pub fn damping_exceeds_one(&self) -> bool {
        self.d > 1.0
    }
}

/// Tracks of one agent role sampled at a common interval.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub tracks: Vec<AgentTrack>,
    pub dt: f64,
}

impl TrajectoryBatch {
    /// Collects every track with `role`; tracks shorter than 3 samples are skipped.
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>, role: Role) -> Result<Self> {
        let mut dt = None;
        let mut tracks = Vec::new();
        for e in episodes {
            match dt {
                None => dt = Some(e.dt),
                Some(d) => ensure!(
                    (d - e.dt).abs() <= 1e-12 * d,
                    "mixed sampling intervals {d} and {}",
                    e.dt
                ),
            }
            if e.len() < 3 {
                log::warn!("skipping episode {} with {} samples", e.episode_id, e.len());
                continue;
            }
            tracks.extend(e.agents.iter().filter(|a| a.role == role).cloned());
        }
        Ok(TrajectoryBatch {
            tracks,
            dt: dt.unwrap_or(0.1),
        })
    }

    pub fn n_transitions(&self) -> usize {
        self.tracks.iter().map(|t| t.positions.len().saturating_sub(1)).sum()
    }

    /// Recorded actions of every track, if all tracks carry them.
    pub fn recorded_actions(&self) -> Option<Vec<Vec<u8>>> {
        self.tracks.iter().map(|t| t.actions.clone()).collect()
    }
}

/// Indices `t` with `|v|_t < th_acc * dt <= |v|_{t+1}`.
pub fn detect_onsets(speeds: &[f64], th_acc: f64, dt: f64) -> Result<Vec<usize>> {
    ensure!(th_acc > 0.0, "th_acc must be positive");
    ensure!(dt > 0.0, "dt must be positive");
    let eps = th_acc * dt;
    Ok(speeds
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < eps && w[1] >= eps)
        .map(|(t, _)| t)
        .collect())
}

/// Lower median (deterministic for even counts).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Core estimator over per-track speed sequences. `rmse` is left at zero.
pub fn estimate_from_speeds(speed_tracks: &[Vec<f64>], th_acc: f64, dt: f64) -> Result<LocomotionParams> {
    let mut onset_speeds = Vec::new();
    let mut all = Vec::new();
    for speeds in speed_tracks {
        for t in detect_onsets(speeds, th_acc, dt)? {
            onset_speeds.push(speeds[t + 1]);
        }
        all.extend_from_slice(speeds);
    }
    let fail = |reason: String| Error::EstimationFailed { th_acc, reason };
    if all.len() < MIN_SAMPLES {
        return Err(fail(format!(
            "{} speed samples, at least {MIN_SAMPLES} required",
            all.len()
        )));
    }
    let v_on = lower_median(&onset_speeds)
        .ok_or_else(|| fail("no rest-to-motion onsets found".into()))?;
    let p99 = percentile(&all, 99.0);
    // Inclusive so a plateau that never exceeds its onset speed yields d = 1.
    let top: Vec<f64> = all.iter().copied().filter(|&s| s >= p99).collect();
    let v_max = lower_median(&top).ok_or_else(|| fail("no speeds in the top percentile".into()))?;
    Ok(LocomotionParams {
        d: v_on / v_max,
        u: v_on / dt,
        v_on,
        v_max,
        rmse: 0.0,
        n_transitions: speed_tracks.iter().map(|s| s.len().saturating_sub(1)).sum(),
        n_onsets: onset_speeds.len(),
    })
}

/// Fits `(d, u)` on the batch and fills in the one-step RMSE, using the
/// recorded actions when every track has them and inferred ones otherwise.
pub fn estimate(batch: &TrajectoryBatch, th_acc: f64) -> Result<LocomotionParams> {
    let speeds: Vec<Vec<f64>> = batch.tracks.iter().map(|t| t.speeds().collect()).collect();
    let mut params = estimate_from_speeds(&speeds, th_acc, batch.dt)?;
    let actions = match batch.recorded_actions() {
        Some(a) => a,
        None => infer_actions(batch, &params)?,
    };
    params.rmse = validate(&params, batch, &actions)?;
    Ok(params)
}

/// Root-mean-square norm of the one-step velocity prediction error.
pub fn validate(params: &LocomotionParams, batch: &TrajectoryBatch, actions: &[Vec<u8>]) -> Result<f64> {
    ensure!(
        actions.len() == batch.tracks.len(),
        "{} action tracks for {} trajectories",
        actions.len(),
        batch.tracks.len()
    );
    let motion = params.motion();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (track, acts) in batch.tracks.iter().zip(actions) {
        ensure!(
            acts.len() + 1 == track.velocities.len(),
            "{} actions for {} samples",
            acts.len(),
            track.velocities.len()
        );
        for (w, &a) in track.velocities.windows(2).zip(acts) {
            let pred = velocity_transition(w[0], a as usize, motion, heading_of(w[0]), batch.dt)?;
            let err = pred - w[1];
            sum += err.dot(err);
            n += 1;
        }
    }
    ensure!(n > 0, "no transitions to validate");
    Ok((sum / n as f64).sqrt())
}

/// Recovers the action index for one transition.
pub fn infer_action(v: Vec2, v_next: Vec2, params: MotionParams, dt: f64) -> usize {
    let heading = heading_of(v);
    let residual = (v_next - v * (1.0 - params.d)) * (1.0 / (params.u * dt));
    if residual.norm() < NOOP_RESIDUAL {
        return 0;
    }
    let local = residual.rotate_out_of(heading);
    nearest_direction(local.angle())
}

pub fn infer_actions(batch: &TrajectoryBatch, params: &LocomotionParams) -> Result<Vec<Vec<u8>>> {
    ensure!(params.u > 0.0, "cannot infer actions with u = 0");
    Ok(batch
        .tracks
        .iter()
        .map(|t| infer_track_actions(t, params.motion(), batch.dt))
        .collect())
}

pub fn infer_track_actions(track: &AgentTrack, params: MotionParams, dt: f64) -> Vec<u8> {
    track
        .velocities
        .windows(2)
        .map(|w| {
            let a = infer_action(w[0], w[1], params, dt);
            debug_assert!(a < N_ACTIONS);
            a as u8
        })
        .collect()
}

/// Per-role estimates laid out as a plain key-value report.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterReport {
    pub th_acc: f64,
    pub dt: f64,
    pub roles: Vec<(Role, LocomotionParams)>,
}

impl ParameterReport {
    pub fn estimate_roles(episodes: &[Episode], th_acc: f64) -> Result<Self> {
        let mut roles = Vec::new();
        let mut dt = 0.1;
        for role in [Role::Chaser, Role::Evader] {
            let batch = TrajectoryBatch::from_episodes(episodes, role)?;
            dt = batch.dt;
            if batch.tracks.is_empty() {
                continue;
            }
            roles.push((role, estimate(&batch, th_acc)?));
        }
        ensure!(!roles.is_empty(), "no trajectories to estimate from");
        Ok(ParameterReport { th_acc, dt, roles })
    }

    pub fn get(&self, role: Role) -> Option<&LocomotionParams> {
        self.roles.iter().find(|(r, _)| *r == role).map(|(_, p)| p)
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        let mut table = String::from("role      damping_d  input_amplitude_u  velocity_rmse\n");
        for (role, p) in &self.roles {
            let _ = writeln!(table, "{:<9} {:>9.3}  {:>17.3}  {:>13.3}", role.to_string(), p.d, p.u, p.rmse);
        }
        w.comment("locomotion parameter estimates");
        w.comment(&table);
        w.put("th_acc", self.th_acc).put("dt", self.dt);
        for (role, p) in &self.roles {
            w.blank()
                .put(&format!("{role}.d"), p.d)
                .put(&format!("{role}.u"), p.u)
                .put(&format!("{role}.rmse"), p.rmse)
                .put(&format!("{role}.v_on"), p.v_on)
                .put(&format!("{role}.v_max"), p.v_max)
                .put(&format!("{role}.n_transitions"), p.n_transitions)
                .put(&format!("{role}.n_onsets"), p.n_onsets)
                .put(&format!("{role}.d_exceeds_one"), p.damping_exceeds_one());
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let mut roles = Vec::new();
        for role in [Role::Chaser, Role::Evader] {
            let key = |k: &str| format!("{role}.{k}");
            if kv.get_str(&key("d")).is_none() {
                continue;
            }
            roles.push((
                role,
                LocomotionParams {
                    d: kv.require(&key("d"))?,
                    u: kv.require(&key("u"))?,
                    rmse: kv.require(&key("rmse"))?,
                    v_on: kv.require(&key("v_on"))?,
                    v_max: kv.require(&key("v_max"))?,
                    n_transitions: kv.require(&key("n_transitions"))?,
                    n_onsets: kv.require(&key("n_onsets"))?,
                },
            ));
        }
        Ok(ParameterReport {
            th_acc: kv.require("th_acc")?,
            dt: kv.require("dt")?,
            roles,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::action_direction;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Rollout of the velocity model with random actions, pausing with no-ops
    /// long enough to come to rest now and then.
    fn synthetic_track(params: MotionParams, dt: f64, len: usize, rng: &mut ChaCha8Rng) -> AgentTrack {
        synthetic_track_from(Vec2::ZERO, 0.15, params, dt, len, rng)
    }

    fn synthetic_track_from(
        v0: Vec2,
        p_pause: f64,
        params: MotionParams,
        dt: f64,
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> AgentTrack {
        let mut v = v0;
        let mut vel = vec![v];
        let mut actions = Vec::new();
        let mut hold = 0usize;
        let mut current = 1usize;
        for _ in 0..len {
            if hold == 0 {
                current = if rng.random_bool(p_pause) { 0 } else { rng.random_range(1..13) };
                hold = if current == 0 { rng.random_range(60..90) } else { rng.random_range(10..40) };
            }
            hold -= 1;
            let a = if current == 0 { 0 } else if hold.is_multiple_of(5) { current } else { 1 };
            v = velocity_transition(v, a, params, heading_of(v), dt).unwrap();
            vel.push(v);
            actions.push(a as u8);
        }
        let mut p = Vec2::ZERO;
        let positions = vel
            .iter()
            .map(|&v| {
                p += v * dt;
                p
            })
            .collect();
        AgentTrack {
            role: Role::Evader,
            positions,
            velocities: vel,
            actions: Some(actions),
        }
    }

    #[test]
    fn onsets_single_crossing() {
        assert_eq!(detect_onsets(&[0.0, 0.0, 0.3, 0.3], 1.0, 0.1).unwrap(), vec![1]);
        assert!(detect_onsets(&[0.5, 0.6, 0.7], 1.0, 0.1).unwrap().is_empty());
        assert!(detect_onsets(&[0.0], 1.0, 0.1).unwrap().is_empty());
        assert!(detect_onsets(&[0.0, 1.0], 0.0, 0.1).is_err());
    }

    #[test]
    fn onsets_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let track = synthetic_track(MotionParams::new(0.25, 3.0), 0.1, 2000, &mut rng);
        let speeds: Vec<f64> = track.speeds().collect();
        let eps = DEFAULT_TH_ACC * 0.1;
        let mut brute = Vec::new();
        for t in 0..speeds.len() - 1 {
            let at_rest = speeds[t] < eps;
            let moving = speeds[t + 1] >= eps;
            if at_rest && moving {
                brute.push(t);
            }
        }
        assert!(!brute.is_empty());
        assert_eq!(detect_onsets(&speeds, DEFAULT_TH_ACC, 0.1).unwrap(), brute);
    }

    #[test]
    fn jump_to_plateau_gives_unit_damping() {
        let mut speeds = vec![0.0; 10];
        speeds.extend(std::iter::repeat_n(0.4, 200));
        let p = estimate_from_speeds(&[speeds], DEFAULT_TH_ACC, 0.1).unwrap();
        assert_eq!(p.v_on, 0.4);
        assert_eq!(p.v_max, 0.4);
        assert_eq!(p.d, 1.0);
        assert!(!p.damping_exceeds_one());
    }

    #[test]
    fn no_onsets_is_an_error() {
        let speeds = vec![vec![1.0; 200]];
        assert!(matches!(
            estimate_from_speeds(&speeds, 0.5, 0.1),
            Err(Error::EstimationFailed { .. })
        ));
        let too_short = vec![vec![0.0, 1.0, 1.0]];
        assert!(estimate_from_speeds(&too_short, 0.5, 0.1).is_err());
    }

    #[test]
    fn recovers_parameters_from_model_rollouts() {
        let truth = MotionParams::new(0.10, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tracks: Vec<AgentTrack> = (0..500).map(|_| synthetic_track(truth, 0.1, 150, &mut rng)).collect();
        let batch = TrajectoryBatch { tracks, dt: 0.1 };
        let p = estimate(&batch, DEFAULT_TH_ACC).unwrap();
        assert!((p.d - truth.d).abs() <= 0.05 * truth.d, "d = {}", p.d);
        assert!((p.u - truth.u).abs() <= 0.05 * truth.u, "u = {}", p.u);
    }

    #[test]
    fn round_trip_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &d in &[0.1, 0.25, 0.5] {
            for &u in &[1.0, 2.0, 3.0] {
                let truth = MotionParams::new(d, u);
                let tracks: Vec<AgentTrack> = (0..200).map(|_| synthetic_track(truth, 0.1, 150, &mut rng)).collect();
                let p = estimate(&TrajectoryBatch { tracks, dt: 0.1 }, DEFAULT_TH_ACC).unwrap();
                assert!((p.d - d).abs() <= 0.05 * d, "d={d} u={u}: got d={}", p.d);
                assert!((p.u - u).abs() <= 0.05 * u, "d={d} u={u}: got u={}", p.u);
            }
        }
    }

    #[test]
    fn exact_model_data_has_zero_rmse() {
        let truth = MotionParams::new(0.25, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tracks: Vec<AgentTrack> = (0..20).map(|_| synthetic_track(truth, 0.1, 100, &mut rng)).collect();
        let batch = TrajectoryBatch { tracks, dt: 0.1 };
        let actions = batch.recorded_actions().unwrap();
        let params = LocomotionParams {
            d: 0.25,
            u: 3.0,
            v_on: 0.3,
            v_max: 1.2,
            rmse: 0.0,
            n_transitions: 0,
            n_onsets: 0,
        };
        assert!(validate(&params, &batch, &actions).unwrap() < 1e-12);
        assert!(validate(&params, &batch, &actions[1..]).is_err());
    }

    #[test]
    fn noise_floor_rmse() {
        // Observation noise sigma on each velocity component. The prediction
        // error is e_{t+1} - (1 - d) e_t in 2-D, so its RMS norm is
        // sigma * sqrt(2 * (1 + (1 - d)^2)) ~ 0.035 for sigma = 0.02, d = 0.25.
        // Tracks keep moving so the noisy heading stays well defined.
        let truth = MotionParams::new(0.25, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let tracks: Vec<AgentTrack> = (0..50)
            .map(|_| {
                let mut t = synthetic_track_from(Vec2::new(1.2, 0.0), 0.0, truth, 0.1, 200, &mut rng);
                for v in &mut t.velocities {
                    *v += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
                t
            })
            .collect();
        let batch = TrajectoryBatch { tracks, dt: 0.1 };
        let actions = batch.recorded_actions().unwrap();
        let params = LocomotionParams {
            d: 0.25,
            u: 3.0,
            v_on: 0.3,
            v_max: 1.2,
            rmse: 0.0,
            n_transitions: 0,
            n_onsets: 0,
        };
        let rmse = validate(&params, &batch, &actions).unwrap();
        assert!((0.02..=0.04).contains(&rmse), "rmse = {rmse}");
    }

    #[test]
    fn inferred_actions_match_truth() {
        let truth = MotionParams::new(0.25, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tracks: Vec<AgentTrack> = (0..30).map(|_| synthetic_track(truth, 0.1, 150, &mut rng)).collect();
        let batch = TrajectoryBatch { tracks, dt: 0.1 };
        let params = LocomotionParams {
            d: 0.25,
            u: 3.0,
            v_on: 0.3,
            v_max: 1.2,
            rmse: 0.0,
            n_transitions: 0,
            n_onsets: 0,
        };
        assert_eq!(infer_actions(&batch, &params).unwrap(), batch.recorded_actions().unwrap());
    }

    #[test]
    fn pure_decay_and_tie_break() {
        let p = MotionParams::new(0.25, 3.0);
        let v = Vec2::new(0.4, 0.2);
        assert_eq!(infer_action(v, v * 0.75, p, 0.1), 0);

        // Residual exactly 15 degrees off the heading, at rest (world frame).
        let a = Vec2::from_angle(15f64.to_radians()) * (p.u * 0.1);
        assert_eq!(infer_action(Vec2::ZERO, a, p, 0.1), 1);
        let b = action_direction(3) * (p.u * 0.1);
        assert_eq!(infer_action(Vec2::ZERO, b, p, 0.1), 3);
    }

    #[test]
    fn zero_amplitude_rejected() {
        let batch = TrajectoryBatch { tracks: vec![], dt: 0.1 };
        let params = LocomotionParams {
            d: 0.25,
            u: 0.0,
            v_on: 0.0,
            v_max: 1.0,
            rmse: 0.0,
            n_transitions: 0,
            n_onsets: 0,
        };
        assert!(infer_actions(&batch, &params).is_err());
    }

    #[test]
    fn report_round_trip() {
        let p = LocomotionParams {
            d: 0.254,
            u: 2.957,
            v_on: 0.2957,
            v_max: 1.164,
            rmse: 0.043,
            n_transitions: 1000,
            n_onsets: 400,
        };
        let report = ParameterReport {
            th_acc: 0.5,
            dt: 0.1,
            roles: vec![(Role::Chaser, p), (Role::Evader, p)],
        };
        assert_eq!(ParameterReport::from_text(&report.to_text()).unwrap(), report);
    }

    proptest! {
        #[test]
        fn scale_equivariance(scale in 0.5f64..4.0, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tracks: Vec<AgentTrack> = (0..10)
                .map(|_| synthetic_track(MotionParams::new(0.25, 3.0), 0.1, 200, &mut rng))
                .collect();
            let speeds: Vec<Vec<f64>> = tracks.iter().map(|t| t.speeds().collect()).collect();
            let scaled: Vec<Vec<f64>> = speeds.iter().map(|s| s.iter().map(|x| x * scale).collect()).collect();
            // Rest samples are exactly zero and the first moving speed is 0.3,
            // so the onset set is unchanged for thresholds below 0.3 * scale.
            let a = estimate_from_speeds(&speeds, 1.0, 0.1).unwrap();
            let b = estimate_from_speeds(&scaled, 1.0, 0.1).unwrap();
            prop_assert!((b.v_on - scale * a.v_on).abs() <= 1e-9 * b.v_on);
            prop_assert!((b.v_max - scale * a.v_max).abs() <= 1e-9 * b.v_max);
            prop_assert!((b.u - scale * a.u).abs() <= 1e-9 * b.u);
            prop_assert!((b.d - a.d).abs() <= 1e-9);
        }
    }
}
