//! Dynamic time warping between state histories, the incremental per-step
//! pseudo-reward, and reward mixing.
//!
//! The local cost is the Euclidean distance between state vectors. Cells are
//! filled with `W[t][j] = d(a_t, b_j) + min(W[t-1][j], W[t][j-1], W[t-1][j-1])`,
//! where boundary cells only use the predecessors that exist.

use crate::dataset::Episode;
use crate::error::{ensure, Result};
use crate::geom::Vec2;

/// Euclidean distance between two equally long vectors.
pub fn local_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Full warping matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMatrix {
    n: usize,
    m: usize,
    cells: Vec<f64>,
}

impl WarpMatrix {
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.cells[t * self.m + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.cells[t * self.m..(t + 1) * self.m]
    }

    /// Alignment cost of the complete sequences, `W[n-1][m-1]`.
    pub fn distance(&self) -> f64 {
        self.cells[self.n * self.m - 1]
    }
}

fn check_sequences<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<usize> {
    ensure!(!a.is_empty() && !b.is_empty(), "DTW needs non-empty sequences");
    let dim = b[0].as_ref().len();
    ensure!(
        a.iter().all(|v| v.as_ref().len() == dim) && b.iter().all(|v| v.as_ref().len() == dim),
        "DTW sequences must share one vector dimension"
    );
    Ok(dim)
}

/// Fills one row from the previous one (`None` for the first row).
fn fill_row<B: AsRef<[f64]>>(prev: Option<&[f64]>, s: &[f64], expert: &[B], out: &mut [f64]) {
    for j in 0..expert.len() {
        let cost = local_cost(s, expert[j].as_ref());
        let best = match (prev, j) {
            (None, 0) => 0.0,
            (None, _) => out[j - 1],
            (Some(p), 0) => p[0],
            (Some(p), _) => p[j].min(out[j - 1]).min(p[j - 1]),
        };
        out[j] = cost + best;
    }
}

/// Complete DTW matrix between `a` (rows) and `b` (columns).
pub fn dtw_full<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<WarpMatrix> {
    check_sequences(a, b)?;
    let (n, m) = (a.len(), b.len());
    let mut cells = vec![0.0; n * m];
    for t in 0..n {
        let (done, rest) = cells.split_at_mut(t * m);
        let prev = (t > 0).then(|| &done[(t - 1) * m..]);
        fill_row(prev, a[t].as_ref(), b, &mut rest[..m]);
    }
    Ok(WarpMatrix { n, m, cells })
}

/// DTW distance only, using two rows of memory.
pub fn dtw_distance<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64> {
    check_sequences(a, b)?;
    let m = b.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    fill_row(None, a[0].as_ref(), b, &mut prev);
    for s in &a[1..] {
        fill_row(Some(&prev), s.as_ref(), b, &mut cur);
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Incremental alignment of a growing simulated history against a fixed
/// expert sequence. Each appended state costs `O(m)`.
#[derive(Debug, Clone)]
pub struct WarpState {
    expert: Vec<Vec<f64>>,
    row: Vec<f64>,
    scratch: Vec<f64>,
    t: usize,
}

impl WarpState {
    pub fn new(expert: Vec<Vec<f64>>) -> Result<Self> {
        check_sequences(&expert, &expert)?;
        let m = expert.len();
        Ok(WarpState {
            expert,
            row: vec![0.0; m],
            scratch: vec![0.0; m],
            t: 0,
        })
    }

    /// Computes the next row of the warping matrix and returns its minimum,
    /// the pseudo-reward magnitude `R^DTW_t`.
    pub fn append_step(&mut self, s: &[f64]) -> Result<f64> {
        ensure!(
            s.len() == self.expert[0].len(),
            "state has dimension {}, expert sequence has {}",
            s.len(),
            self.expert[0].len()
        );
        if self.t == 0 {
            fill_row(None, s, &self.expert, &mut self.row);
        } else {
            fill_row(Some(&self.row), s, &self.expert, &mut self.scratch);
            std::mem::swap(&mut self.row, &mut self.scratch);
        }
        self.t += 1;
        Ok(self.min_cost())
    }

    /// Number of appended states.
    pub fn t(&self) -> usize {
        self.t
    }

    /// The current row (all zeros before the first append).
    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn expert(&self) -> &[Vec<f64>] {
        &self.expert
    }

    pub fn min_cost(&self) -> f64 {
        self.row.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Expert index with the smallest cumulative cost in the current row
    /// (lowest index on ties); the expert step the history is aligned to.
    pub fn aligned_index(&self) -> usize {
        let mut best = 0;
        for (j, &c) in self.row.iter().enumerate() {
            if c < self.row[best] {
                best = j;
            }
        }
        best
    }
}

/// Touch reward mixed with a weighted DTW penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardMix {
    pub alpha: f64,
    pub touch_reward: f64,
    pub dtw_penalty: f64,
}

impl RewardMix {
    pub fn total(&self) -> f64 {
        mix_reward(self.touch_reward, self.dtw_penalty, self.alpha)
    }
}

/// `touch - alpha * dtw`.
pub fn mix_reward(touch: f64, dtw_pseudo: f64, alpha: f64) -> f64 {
    debug_assert!(alpha >= 0.0, "mixing weight must be non-negative");
    touch - alpha * dtw_pseudo
}

/// Demonstration whose initial joint position is nearest (Euclidean) to
/// `start`; ties go to the lowest episode id.
pub fn match_expert<'a>(start: &[Vec2], pool: &'a [Episode]) -> Result<&'a Episode> {
    match_expert_index(start, pool).map(|i| &pool[i])
}

/// Index into `pool` of the episode chosen by [`match_expert`].
pub fn match_expert_index(start: &[Vec2], pool: &[Episode]) -> Result<usize> {
    ensure!(!pool.is_empty(), "cannot match against an empty demonstration pool");
    let mut best: Option<(f64, u64, usize)> = None;
    for (i, e) in pool.iter().enumerate() {
        ensure!(
            e.agents.len() == start.len(),
            "episode {} has {} agents, start has {}",
            e.episode_id,
            e.agents.len(),
            start.len()
        );
        let d2: f64 = e
            .agents
            .iter()
            .zip(start)
            .map(|(a, p)| {
                let d = a.positions[0].distance(*p);
                d * d
            })
            .sum();
        let better = match best {
            None => true,
            Some((bd, bid, _)) => d2 < bd || (d2 == bd && e.episode_id < bid),
        };
        if better {
            best = Some((d2, e.episode_id, i));
        }
    }
    Ok(best.expect("pool is non-empty").2)
}

/// DTW distance between the joint position histories of two episodes.
pub fn episode_dtw(a: &Episode, b: &Episode) -> Result<f64> {
    dtw_distance(&a.joint_positions(), &b.joint_positions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AgentTrack;
    use crate::env::{Role, TerminationCause};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum cost over every monotone, continuous path from (0,0) to
    /// (n-1,m-1), summing local costs from the start in path order.
    fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn walk(a: &[Vec<f64>], b: &[Vec<f64>], t: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + local_cost(&a[t], &b[j]);
            if t + 1 == a.len() && j + 1 == b.len() {
                *best = best.min(acc);
                return;
            }
            if t + 1 < a.len() {
                walk(a, b, t + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                walk(a, b, t, j + 1, acc, best);
            }
            if t + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, t + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: impl rand::distr::uniform::SampleRange<usize>, dim: usize) -> Vec<Vec<f64>> {
        let len = rng.random_range(len);
        (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_seq(&mut rng, 9..=9, 6);
        assert_eq!(dtw_full(&a, &a).unwrap().distance(), 0.0);
    }

    #[test]
    fn single_cell() {
        let w = dtw_full(&[vec![0.0]], &[vec![1.0]]).unwrap();
        assert_eq!(w.distance(), 1.0);
    }

    #[test]
    fn matches_exhaustive_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_seq(&mut rng, 1..=5, 2);
            let b = random_seq(&mut rng, 1..=7, 2);
            let w = dtw_full(&a, &b).unwrap();
            assert_eq!(w.distance(), brute_force(&a, &b));
            assert_eq!(dtw_distance(&a, &b).unwrap(), w.distance());
        }
    }

    #[test]
    fn distance_is_symmetric_and_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_seq(&mut rng, 1..20, 3);
            let b = random_seq(&mut rng, 1..20, 3);
            let ab = dtw_full(&a, &b).unwrap();
            let ba = dtw_full(&b, &a).unwrap();
            assert!((ab.distance() - ba.distance()).abs() <= 1e-12 * ab.distance().max(1.0));
            assert!(ab.cells.iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn incremental_rows_equal_full_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = random_seq(&mut rng, 1..60, 6);
            let b = random_seq(&mut rng, 1..60, 6);
            let full = dtw_full(&a, &b).unwrap();
            let mut ws = WarpState::new(b.clone()).unwrap();
            for (t, s) in a.iter().enumerate() {
                let r = ws.append_step(s).unwrap();
                assert_eq!(ws.row(), full.row(t));
                assert_eq!(r, full.row(t).iter().copied().fold(f64::INFINITY, f64::min));
            }
        }
    }

    #[test]
    fn identical_prefix_gives_zero_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expert = random_seq(&mut rng, 12..=12, 6);
        let mut ws = WarpState::new(expert.clone()).unwrap();
        for (t, s) in expert.iter().enumerate().take(8) {
            assert_eq!(ws.append_step(s).unwrap(), 0.0);
            assert_eq!(ws.aligned_index(), t);
        }
    }

    #[test]
    fn constant_offset_first_reward_is_offset() {
        let expert: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let mut ws = WarpState::new(expert).unwrap();
        assert_eq!(ws.append_step(&[0.25]).unwrap(), 0.25);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut ws = WarpState::new(vec![vec![0.0, 0.0]]).unwrap();
        assert!(ws.append_step(&[0.0]).is_err());
        assert!(dtw_full::<Vec<f64>, Vec<f64>>(&[], &[vec![1.0]]).is_err());
        assert!(dtw_full(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn mixing() {
        assert!((mix_reward(1.0, 0.05, 10.0) - 0.5).abs() < 1e-15);
        assert_eq!(mix_reward(0.7, 3.0, 0.0), 0.7);
        assert!((mix_reward(0.0, 2.3, 1.0) + 2.3).abs() < 1e-15);
        let m = RewardMix {
            alpha: 10.0,
            touch_reward: 1.0,
            dtw_penalty: 0.05,
        };
        assert!((m.total() - 0.5).abs() < 1e-15);
    }

    fn episode_at(id: u64, starts: &[Vec2]) -> Episode {
        let roles = [Role::Chaser, Role::Chaser, Role::Evader];
        Episode {
            episode_id: id,
            condition: 0,
            dt: 0.1,
            agents: starts
                .iter()
                .zip(roles)
                .map(|(p, role)| AgentTrack {
                    role,
                    positions: vec![*p, *p],
                    velocities: vec![Vec2::ZERO; 2],
                    actions: None,
                })
                .collect(),
            outcome: TerminationCause::Timeout,
            winner_role: Role::Evader,
            duration: 0.1,
        }
    }

    #[test]
    fn match_expert_agrees_with_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = || Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        for _ in 0..30 {
            let pool: Vec<Episode> = (0..15).map(|i| episode_at(100 - i, &[p(), p(), p()])).collect();
            let start = [p(), p(), p()];
            // Oracle: flatten to 6-vectors and scan.
            let flat = |s: &[Vec2]| s.iter().flat_map(|v| [v.x, v.y]).collect::<Vec<f64>>();
            let target = flat(&start);
            let mut best = (f64::INFINITY, u64::MAX);
            for e in &pool {
                let d = local_cost(&flat(&e.start_positions()), &target);
                if d < best.0 || (d == best.0 && e.episode_id < best.1) {
                    best = (d, e.episode_id);
                }
            }
            assert_eq!(match_expert(&start, &pool).unwrap().episode_id, best.1);
        }
    }

    #[test]
    fn match_expert_exact_ties_and_edge_cases() {
        let s = [Vec2::new(0.1, 0.1), Vec2::new(-0.2, 0.3), Vec2::new(0.0, 0.0)];
        let far = [Vec2::new(0.4, 0.4), Vec2::new(0.4, 0.4), Vec2::new(0.4, 0.4)];
        let pool = vec![episode_at(7, &far), episode_at(9, &s), episode_at(3, &s)];
        assert_eq!(match_expert(&s, &pool).unwrap().episode_id, 3);
        assert_eq!(match_expert(&s, &pool[..1]).unwrap().episode_id, 7);
        assert!(match_expert(&s, &[]).is_err());
    }
}
