//! Episode records, the line-delimited dataset format, and train/validation/test
//! splitting.
//!
//! A dataset file is UTF-8 text. Line 1 is a JSON header carrying the format
//! name and schema version; every following non-empty line is one JSON-encoded
//! [`Episode`]. Floats are written with shortest round-trip formatting and read
//! back bit-exactly. Concatenating two files after dropping the second header
//! yields a valid file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Role, TerminationCause};
use crate::error::{ensure, Error, Result};
use crate::geom::Vec2;

pub const FORMAT_NAME: &str = "pursuit-episodes";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub role: Role,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    /// Action taken at each transition; `positions.len() - 1` entries when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<u8>>,
}

impl AgentTrack {
    pub fn speeds(&self) -> impl Iterator<Item = f64> + '_ {
        self.velocities.iter().map(|v| v.norm())
    }

    pub fn path_length(&self) -> f64 {
        self.positions.windows(2).map(|w| w[0].distance(w[1])).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: u64,
    /// Zero-based condition flag (condition "1" is 0, condition "2" is 1).
    pub condition: u8,
    pub dt: f64,
    pub agents: Vec<AgentTrack>,
    pub outcome: TerminationCause,
    pub winner_role: Role,
    pub duration: f64,
}

impl Episode {
    /// Number of recorded samples per agent.
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.positions.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_transitions(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.condition <= 1, "condition flag must be 0 or 1");
        ensure!(self.dt > 0.0, "dt must be positive");
        ensure!(!self.agents.is_empty(), "episode {} has no agents", self.episode_id);
        let n = self.len();
        ensure!(n >= 1, "episode {} is empty", self.episode_id);
        for a in &self.agents {
            ensure!(
                a.positions.len() == n && a.velocities.len() == n,
                "episode {}: agent sequences differ in length",
                self.episode_id
            );
            if let Some(actions) = &a.actions {
                ensure!(
                    actions.len() == n - 1,
                    "episode {}: {} actions for {} samples",
                    self.episode_id,
                    actions.len(),
                    n
                );
                ensure!(actions.iter().all(|&x| (x as usize) < crate::env::N_ACTIONS), "action out of range");
            }
            ensure!(
                a.positions.iter().chain(&a.velocities).all(|p| p.is_finite()),
                "episode {}: non-finite sample",
                self.episode_id
            );
        }
        let expected = (n - 1) as f64 * self.dt;
        ensure!(
            (self.duration - expected).abs() <= 1e-9 * expected.max(1.0),
            "episode {}: duration {} != (len - 1) * dt = {}",
            self.episode_id,
            self.duration,
            expected
        );
        Ok(())
    }

    pub fn agent_indices(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.agents
            .iter()
            .enumerate()
            .filter(move |(_, a)| a.role == role)
            .map(|(i, _)| i)
    }

    pub fn start_positions(&self) -> Vec<Vec2> {
        self.agents.iter().map(|a| a.positions[0]).collect()
    }

    /// Concatenated positions of every agent at sample `t`.
    pub fn joint_position(&self, t: usize) -> Vec<f64> {
        self.agents
            .iter()
            .flat_map(|a| [a.positions[t].x, a.positions[t].y])
            .collect()
    }

    pub fn joint_positions(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|t| self.joint_position(t)).collect()
    }

    pub fn mean_chaser_path_length(&self) -> f64 {
        let lengths: Vec<f64> = self
            .agent_indices(Role::Chaser)
            .map(|i| self.agents[i].path_length())
            .collect();
        if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<f64>() / lengths.len() as f64
        }
    }

    /// Keeps every `stride`-th sample and rescales `dt`. Actions are dropped
    /// because they no longer describe single transitions.
    pub fn downsample(&self, stride: usize) -> Result<Episode> {
        ensure!(stride >= 1, "stride must be >= 1");
        let agents: Vec<AgentTrack> = self
            .agents
            .iter()
            .map(|a| AgentTrack {
                role: a.role,
                positions: a.positions.iter().step_by(stride).copied().collect(),
                velocities: a.velocities.iter().step_by(stride).copied().collect(),
                actions: if stride == 1 { a.actions.clone() } else { None },
            })
            .collect();
        let n = agents.first().map_or(0, |a| a.positions.len());
        let dt = self.dt * stride as f64;
        Ok(Episode {
            agents,
            dt,
            duration: n.saturating_sub(1) as f64 * dt,
            ..self.clone()
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_dataset(episodes: &[Episode], path: &Path) -> Result<()> {
    for e in episodes {
        e.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(episodes, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset_to(episodes: &[Episode], w: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for e in episodes {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file))
}

pub fn read_dataset_from(reader: impl BufRead) -> Result<Vec<Episode>> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_NAME {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unknown format `{}`", header.format),
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let mut episodes = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ep.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Requested sizes of one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const fn new(train: usize, validation: usize, test: usize) -> Self {
        SplitCounts {
            train,
            validation,
            test,
        }
    }

    /// 400/50/50 used for parameter estimation and offline learning.
    pub const AGENT_DEFAULT: SplitCounts = SplitCounts::new(400, 50, 50);

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageSplit {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

impl StageSplit {
    pub fn select<'a>(&self, ids: &[u64], episodes: &'a [Episode]) -> Vec<&'a Episode> {
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        episodes
            .iter()
            .filter(|e| wanted.contains(&e.episode_id))
            .collect()
    }
}

/// Splits for every pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub estimation: StageSplit,
    pub offline: StageSplit,
    pub online: StageSplit,
}

impl SplitSpec {
    /// Estimation and offline learning share one stratified split; online
    /// adjustment draws `online_train` and `online_test` episodes from the
    /// offline validation and test pools, never from offline training data.
    pub fn build(
        episodes: &[Episode],
        counts: SplitCounts,
        online_train: usize,
        online_test: usize,
        seed: u64,
    ) -> Result<SplitSpec> {
        let offline = make_splits(episodes, counts, seed)?;
        let mut held_out: Vec<u64> = offline.validation.clone();
        held_out.extend(&offline.test);
        ensure!(
            online_train + online_test <= held_out.len(),
            "online split needs {} held-out episodes, {} available",
            online_train + online_test,
            held_out.len()
        );
        // Online test comes from the offline test pool so it stays unseen.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0011);
        let mut test_pool = offline.test.clone();
        test_pool.shuffle(&mut rng);
        ensure!(online_test <= test_pool.len(), "not enough offline test episodes");
        let test: Vec<u64> = test_pool[..online_test].to_vec();
        let mut rest: Vec<u64> = held_out.into_iter().filter(|id| !test.contains(id)).collect();
        rest.shuffle(&mut rng);
        let online = StageSplit {
            train: rest[..online_train].to_vec(),
            validation: Vec::new(),
            test,
        };
        let spec = SplitSpec {
            estimation: offline.clone(),
            offline,
            online,
        };
        spec.check_isolation()?;
        Ok(spec)
    }

    /// Test ids of each stage must not appear in that stage's training ids,
    /// nor in the training ids of any earlier stage.
    pub fn check_isolation(&self) -> Result<()> {
        let stages = [
            ("estimation", &self.estimation),
            ("offline", &self.offline),
            ("online", &self.online),
        ];
        let mut seen_train: BTreeSet<u64> = BTreeSet::new();
        for (name, stage) in stages {
            seen_train.extend(&stage.train);
            if let Some(id) = stage.test.iter().find(|id| seen_train.contains(id)) {
                return Err(Error::Contract(format!(
                    "{name} test episode {id} was used for training"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic, condition-stratified split.
pub fn make_splits(episodes: &[Episode], counts: SplitCounts, seed: u64) -> Result<StageSplit> {
    ensure!(
        counts.total() <= episodes.len(),
        "requested {} episodes but dataset has {}",
        counts.total(),
        episodes.len()
    );
    let mut by_condition: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
    for e in episodes {
        by_condition.entry(e.condition).or_default().push(e.episode_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_condition.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
    }

    let total = episodes.len();
    let sizes: Vec<usize> = by_condition.values().map(Vec::len).collect();
    let mut cursor = vec![0usize; sizes.len()];
    let mut out = StageSplit::default();
    for (which, want) in [counts.train, counts.validation, counts.test].into_iter().enumerate() {
        let alloc = proportional(want, &sizes, total);
        for (c, ids) in by_condition.values().enumerate() {
            let take = alloc[c];
            ensure!(
                cursor[c] + take <= ids.len(),
                "condition stratum {c} cannot supply {take} more episodes"
            );
            let chunk = &ids[cursor[c]..cursor[c] + take];
            cursor[c] += take;
            let dst = match which {
                0 => &mut out.train,
                1 => &mut out.validation,
                _ => &mut out.test,
            };
            dst.extend_from_slice(chunk);
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `want` across strata.
fn proportional(want: usize, sizes: &[usize], total: usize) -> Vec<usize> {
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| want * s / total).collect();
    let mut rem: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((want * s) % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = want - alloc.iter().sum::<usize>();
    for (_, i) in rem {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_episode(id: u64, condition: u8) -> Episode {
        let track = |role, x0: f64| AgentTrack {
            role,
            positions: vec![Vec2::new(x0, 0.0), Vec2::new(x0 + 0.03, 0.0)],
            velocities: vec![Vec2::ZERO, Vec2::new(0.3, 0.0)],
            actions: Some(vec![1]),
        };
        Episode {
            episode_id: id,
            condition,
            dt: 0.1,
            agents: vec![track(Role::Chaser, -0.4), track(Role::Chaser, 0.1), track(Role::Evader, 0.4)],
            outcome: TerminationCause::Timeout,
            winner_role: Role::Evader,
            duration: 0.1,
        }
    }

    fn balanced(n: usize) -> Vec<Episode> {
        (0..n as u64).map(|i| tiny_episode(i, (i % 2) as u8)).collect()
    }

    #[test]
    fn round_trip_in_memory() {
        let eps = vec![tiny_episode(3, 0), tiny_episode(4, 1)];
        let mut buf = Vec::new();
        write_dataset_to(&eps, &mut buf).unwrap();
        let back = read_dataset_from(&buf[..]).unwrap();
        assert_eq!(back, eps);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut buf = Vec::new();
        write_dataset_to(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_dataset_from(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = "{\"format\":\"pursuit-episodes\",\"version\":9}\n";
        assert!(matches!(
            read_dataset_from(text.as_bytes()),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut buf = Vec::new();
        write_dataset_to(&[tiny_episode(0, 0), tiny_episode(1, 0)], &mut buf).unwrap();
        let cut = buf.len() - 20;
        match read_dataset_from(&buf[..cut]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concatenated_files_stay_valid() {
        let mut a = Vec::new();
        write_dataset_to(&[tiny_episode(0, 0)], &mut a).unwrap();
        let mut b = Vec::new();
        write_dataset_to(&[tiny_episode(1, 1)], &mut b).unwrap();
        let body_b = b.splitn(2, |&c| c == b'\n').nth(1).unwrap().to_vec();
        a.extend(body_b);
        assert_eq!(read_dataset_from(&a[..]).unwrap().len(), 2);
    }

    #[test]
    fn invariants_checked() {
        let mut e = tiny_episode(0, 0);
        e.duration = 0.5;
        assert!(e.validate().is_err());
        let mut e = tiny_episode(0, 0);
        e.agents[1].positions.pop();
        assert!(e.validate().is_err());
        let mut e = tiny_episode(0, 2);
        e.condition = 2;
        assert!(e.validate().is_err());
    }

    #[test]
    fn default_split_sizes_and_strata() {
        let eps = balanced(500);
        let s = make_splits(&eps, SplitCounts::AGENT_DEFAULT, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (400, 50, 50));
        let cond = |ids: &[u64]| ids.iter().filter(|&&i| i % 2 == 1).count();
        assert_eq!(cond(&s.train), 200);
        assert_eq!(cond(&s.validation), 25);
        assert_eq!(cond(&s.test), 25);
        let all: BTreeSet<u64> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        assert_eq!(all.len(), 500);
    }

    #[test]
    fn splits_are_deterministic() {
        let eps = balanced(100);
        let c = SplitCounts::new(60, 20, 20);
        assert_eq!(make_splits(&eps, c, 5).unwrap(), make_splits(&eps, c, 5).unwrap());
        assert_ne!(make_splits(&eps, c, 5).unwrap(), make_splits(&eps, c, 6).unwrap());
    }

    #[test]
    fn degenerate_split_puts_everything_in_test() {
        let eps = balanced(30);
        let s = make_splits(&eps, SplitCounts::new(0, 0, 30), 0).unwrap();
        assert!(s.train.is_empty() && s.validation.is_empty());
        assert_eq!(s.test.len(), 30);
    }

    #[test]
    fn infeasible_split_rejected() {
        let eps = balanced(10);
        assert!(make_splits(&eps, SplitCounts::new(8, 2, 1), 0).is_err());
    }

    #[test]
    fn stage_isolation() {
        let eps = balanced(500);
        let spec = SplitSpec::build(&eps, SplitCounts::AGENT_DEFAULT, 50, 10, 3).unwrap();
        assert_eq!(spec.online.train.len(), 50);
        assert_eq!(spec.online.test.len(), 10);
        spec.check_isolation().unwrap();
        let mut broken = spec.clone();
        broken.online.test.push(spec.offline.train[0]);
        assert!(broken.check_isolation().is_err());
    }

    #[test]
    fn downsample_rescales_dt() {
        let mut e = tiny_episode(0, 0);
        for a in &mut e.agents {
            a.positions = (0..7).map(|i| Vec2::new(i as f64, 0.0)).collect();
            a.velocities = vec![Vec2::ZERO; 7];
            a.actions = None;
        }
        e.duration = 0.6;
        let d = e.downsample(3).unwrap();
        assert_eq!(d.len(), 3);
        assert!((d.dt - 0.3).abs() < 1e-15);
        assert!((d.duration - 0.6).abs() < 1e-12);
        d.validate().unwrap();
    }
}
