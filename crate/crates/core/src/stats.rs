//! Episode metrics, kernel-density distribution gaps and bootstrap inference.
//!
//! Bootstrap intervals are plain percentile intervals (2.5 / 50 / 97.5 with
//! linear interpolation between order statistics). Every routine takes an
//! explicit seed and is bit-for-bit reproducible.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::dtw::{episode_dtw, match_expert};
use crate::env::{reset, TerminationCause, WorldConfig};
use crate::error::{ensure, Error, Result};
use crate::locomotion::percentile_sorted;
use crate::policy::{EpisodeModel, RolloutSpec};

/// Default number of bootstrap replicates.
pub const DEFAULT_REPLICATES: usize = 10_000;

/// Number of grid points for the density gap.
pub const KDE_GRID: usize = 512;

/// Grid margin beyond the pooled range, in bandwidths.
pub const KDE_MARGIN: f64 = 3.0;

/// Distance convention used by [`kde_gap`]; written into report headers.
pub const KDE_CONVENTION: &str =
    "L1 distance between Gaussian KDEs (Silverman bandwidth, 512-point trapezoid); L2 and Jensen-Shannon not implemented";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: u64,
    /// Number of contacts with the target (0 or 1).
    #[serde(rename = "return")]
    pub ret: f64,
    /// Mean path length over chasers.
    pub path_length: f64,
    pub duration: f64,
    /// DTW distance to the matched ground-truth episode.
    pub dtw_to_gt: f64,
    pub condition: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub statistic: String,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub n_replicates: usize,
    pub seed: u64,
}

impl BootstrapResult {
    /// Builds the summary from raw replicate values.
    pub fn from_replicates(statistic: &str, mut replicates: Vec<f64>, n: usize, seed: u64) -> Self {
        replicates.sort_by(f64::total_cmp);
        BootstrapResult {
            statistic: statistic.to_string(),
            median: percentile_sorted(&replicates, 50.0),
            ci_low: percentile_sorted(&replicates, 2.5),
            ci_high: percentile_sorted(&replicates, 97.5),
            n,
            n_replicates: replicates.len(),
            seed,
        }
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Metrics of each episode. The ground-truth partner is the pool episode
/// with the same id, or the one with the nearest start when no id matches.
pub fn compute_metrics(episodes: &[Episode], gt_pool: &[Episode]) -> Result<Vec<EpisodeMetrics>> {
    ensure!(!episodes.is_empty(), "no episodes to measure");
    episodes
        .iter()
        .map(|e| {
            let dtw_to_gt = if gt_pool.is_empty() {
                f64::NAN
            } else {
                let gt = match gt_pool.iter().find(|g| g.episode_id == e.episode_id) {
                    Some(g) => g,
                    None => match_expert(&e.start_positions(), gt_pool)?,
                };
                episode_dtw(e, gt)?
            };
            Ok(EpisodeMetrics {
                episode_id: e.episode_id,
                ret: if e.outcome == TerminationCause::Contact { 1.0 } else { 0.0 },
                path_length: e.mean_chaser_path_length(),
                duration: e.n_transitions() as f64 * e.dt,
                dtw_to_gt,
                condition: e.condition,
            })
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Silverman's rule-of-thumb bandwidth `sigma * (3n/4)^(-1/5)`.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    ensure!(sample.len() >= 2, "bandwidth needs at least two values");
    let sigma = std_dev(sample);
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::DegenerateSample(format!(
            "sample of {} values has zero or non-finite spread",
            sample.len()
        )));
    }
    Ok(sigma * (0.75 * sample.len() as f64).powf(-0.2))
}

/// Gaussian kernel density of `sample` with bandwidth `h` at `x`.
pub fn kde_density(sample: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (sample.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    sample.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm
}

/// Integrated absolute difference between the Gaussian KDEs of two samples
/// (0 for identical samples, 2 for disjoint supports).
pub fn kde_gap(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    let ha = silverman_bandwidth(sample_a)?;
    let hb = silverman_bandwidth(sample_b)?;
    let pooled = sample_a.iter().chain(sample_b);
    let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min) - KDE_MARGIN * ha.max(hb);
    let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max) + KDE_MARGIN * ha.max(hb);
    let step = (hi - lo) / (KDE_GRID - 1) as f64;
    let diffs: Vec<f64> = (0..KDE_GRID)
        .map(|k| {
            let x = lo + step * k as f64;
            (kde_density(sample_a, ha, x) - kde_density(sample_b, hb, x)).abs()
        })
        .collect();
    let inner: f64 = diffs[1..KDE_GRID - 1].iter().sum();
    Ok(step * (inner + 0.5 * (diffs[0] + diffs[KDE_GRID - 1])))
}

/// Percentile bootstrap of the mean paired difference.
pub fn paired_bootstrap(diffs: &[f64], n_rep: usize, seed: u64) -> Result<BootstrapResult> {
    ensure!(diffs.len() >= 2, "paired bootstrap needs at least two differences, got {}", diffs.len());
    ensure!(n_rep >= 1, "need at least one replicate");
    ensure!(diffs.iter().all(|d| d.is_finite()), "differences must be finite");
    let n = diffs.len();
    // Means are taken relative to the first value so that constant input
    // reproduces that constant exactly.
    let origin = diffs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replicates: Vec<f64> = (0..n_rep)
        .map(|_| origin + (0..n).map(|_| diffs[rng.random_range(0..n)] - origin).sum::<f64>() / n as f64)
        .collect();
    Ok(BootstrapResult::from_replicates("mean_difference", replicates, n, seed))
}

/// Classical one-way ANOVA F statistic (between-group over within-group
/// mean squares). Zero within-group spread yields infinity (or NaN when the
/// groups also share a mean).
pub fn f_statistic(groups: &[&[f64]]) -> f64 {
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in groups {
        let m = mean(g);
        between += g.len() as f64 * (m - grand).powi(2);
        within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnovaResult {
    pub f: BootstrapResult,
    /// Whether the F interval lies strictly above zero, which licenses the
    /// planned follow-up contrasts.
    pub follow_up: bool,
}

/// Bootstrap one-way ANOVA: each replicate resamples within every group and
/// recomputes F.
pub fn bootstrap_anova(groups: &[Vec<f64>], n_rep: usize, seed: u64) -> Result<AnovaResult> {
    ensure!(groups.len() >= 2, "ANOVA needs at least two groups");
    ensure!(groups.iter().all(|g| g.len() >= 2), "every ANOVA group needs at least two values");
    ensure!(
        groups.iter().flatten().all(|v| v.is_finite()),
        "ANOVA values must be finite"
    );
    ensure!(
        groups.iter().any(|g| g.iter().any(|&v| v != g[0])),
        "every group is constant; F is undefined"
    );
    ensure!(n_rep >= 1, "need at least one replicate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffers: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut replicates = Vec::with_capacity(n_rep);
    for _ in 0..n_rep {
        for (g, buf) in groups.iter().zip(&mut buffers) {
            for slot in buf.iter_mut() {
                *slot = g[rng.random_range(0..g.len())];
            }
        }
        let views: Vec<&[f64]> = buffers.iter().map(|b| b.as_slice()).collect();
        let f = f_statistic(&views);
        // A resample can collapse every group to a constant; its F is then
        // unbounded (or undefined when the means also coincide).
        replicates.push(if f.is_nan() { 0.0 } else { f });
    }
    let n = groups.iter().map(|g| g.len()).sum();
    let f = BootstrapResult::from_replicates("anova_f", replicates, n, seed);
    let follow_up = f.ci_low > 0.0;
    Ok(AnovaResult { f, follow_up })
}

/// Paired contrasts between named groups, restricted to the `allowed` pairs.
/// Each result bootstraps `b - a` for the pair `(a, b)`.
pub fn planned_contrasts(
    groups: &[(String, Vec<f64>)],
    allowed: &[(String, String)],
    n_rep: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>> {
    let find = |name: &str| {
        groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Contract(format!("unknown group `{name}` in contrast list")))
    };
    allowed
        .iter()
        .map(|(a, b)| {
            let (va, vb) = (find(a)?, find(b)?);
            ensure!(va.len() == vb.len(), "contrast {a} vs {b}: groups are not paired");
            let diffs: Vec<f64> = va.iter().zip(vb).map(|(x, y)| y - x).collect();
            let mut r = paired_bootstrap(&diffs, n_rep, seed)?;
            r.statistic = format!("{b}-{a}");
            Ok(r)
        })
        .collect()
}

/// Path-length shift when the condition flag seen by the model flips from
/// `from` to `to` (sign convention: `to - from`). Both members of a pair
/// share the start and the random stream.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_shift(
    model: &impl EpisodeModel,
    config: &WorldConfig,
    from: u8,
    to: u8,
    n_episodes: usize,
    epsilon: f64,
    n_rep: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    ensure!(from <= 1 && to <= 1, "condition flags must be 0 or 1");
    ensure!(n_episodes >= 2, "need at least two paired episodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let start: Vec<_> = reset(config, rng.random()).iter().map(|s| s.position).collect();
        let run = |condition: u8| {
            model.run_episode(
                config,
                &RolloutSpec {
                    start: &start,
                    condition,
                    script: None,
                    epsilon,
                    seed: seed.wrapping_add(k as u64),
                    episode_id: k as u64,
                },
            )
        };
        let a = run(from)?;
        let b = run(to)?;
        diffs.push(b.mean_chaser_path_length() - a.mean_chaser_path_length());
    }
    let mut r = paired_bootstrap(&diffs, n_rep, seed)?;
    r.statistic = format!("path_shift_{}to{}", from + 1, to + 1);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MetricsRow<'a> {
    method: &'a str,
    episode_id: u64,
    #[serde(rename = "return")]
    ret: f64,
    path_length: f64,
    duration: f64,
    dtw_to_gt: f64,
    condition: u8,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Per-episode metrics, one row per (method, episode).
pub fn write_metrics_csv(path: &Path, rows: &[(String, Vec<EpisodeMetrics>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (method, metrics) in rows {
        for m in metrics {
            w.serialize(MetricsRow {
                method,
                episode_id: m.episode_id,
                ret: m.ret,
                path_length: m.path_length,
                duration: m.duration,
                dtw_to_gt: m.dtw_to_gt,
                condition: m.condition,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    statistic: &'a str,
    median: f64,
    ci_low: f64,
    ci_high: f64,
    n: usize,
    n_replicates: usize,
    seed: u64,
}

/// Bootstrap summaries: statistic, median, ci_low, ci_high, n, n_replicates, seed.
pub fn write_bootstrap_csv(path: &Path, results: &[BootstrapResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in results {
        w.serialize(SummaryRow {
            statistic: &r.statistic,
            median: r.median,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n: r.n,
            n_replicates: r.n_replicates,
            seed: r.seed,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format data for violin plots: method, metric, value.
pub fn write_violin_csv(path: &Path, rows: &[(String, Vec<EpisodeMetrics>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "metric", "value"])?;
    for (method, metrics) in rows {
        for m in metrics {
            for (name, value) in [
                ("return", m.ret),
                ("path_length", m.path_length),
                ("duration", m.duration),
                ("dtw_to_gt", m.dtw_to_gt),
            ] {
                w.write_record([method.as_str(), name, &value.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text header describing the conventions behind a report.
pub fn report_header(out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "# density gap: {KDE_CONVENTION}")?;
    writeln!(out, "# intervals: percentile bootstrap, 95%, 2.5/50/97.5")?;
    writeln!(out, "# shifts: counterfactual minus factual (to - from)")
}
