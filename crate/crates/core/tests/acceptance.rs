//! End-to-end acceptance checks.
//!
//! Runs as a plain binary (no libtest harness) so that every criterion prints
//! exactly one PASS/FAIL line, in order. Pass a substring as the first
//! argument to run only the matching criteria, e.g.
//! `cargo test --release --test acceptance -- dtw`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pursuit_core::checkpoint::Checkpoint;
use pursuit_core::dataset::{make_splits, read_dataset, read_dataset_from, write_dataset, Episode, SplitCounts};
use pursuit_core::demos::generate_balanced;
use pursuit_core::dtw::{dtw_full, local_cost, WarpState};
use pursuit_core::env::{Role, TerminationCause, WorldConfig};
use pursuit_core::locomotion::{percentile, percentile_sorted, ParameterReport, DEFAULT_TH_ACC};
use pursuit_core::policy::PolicySet;
use pursuit_core::qnet::{
    argmax, dueling_combine, sequence_loss_and_grad, treatment_loss, EpisodeSequence, LossTerms, LossWeights,
    NetShape, QNetwork,
};
use pursuit_core::qnet::Transition;
use pursuit_core::replay::ReplayBuffer;
use pursuit_core::stats::{
    compute_metrics, counterfactual_shift, paired_bootstrap, BootstrapResult, EpisodeMetrics, DEFAULT_REPLICATES,
};
use pursuit_core::training::{train, DtwReward, Method, RunConfig};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. Locomotion parameter recovery.

fn parameter_recovery() -> Outcome {
    let config = WorldConfig::default();
    let episodes = generate_balanced(&config, 400, 2024).map_err(|e| e.to_string())?;
    let report = ParameterReport::estimate_roles(&episodes, DEFAULT_TH_ACC).map_err(|e| e.to_string())?;
    let p = report.get(Role::Evader).ok_or("no evader estimate")?;
    let ok = (0.2375..=0.2625).contains(&p.d) && (2.85..=3.15).contains(&p.u) && p.rmse < 0.05;
    check(
        ok,
        format!("evader d = {:.4}, u = {:.4}, rmse = {:.4} (truth 0.25 / 3.0)", p.d, p.u, p.rmse),
    )
}

// ---------------------------------------------------------------------------
// 2. DTW against exhaustive path enumeration and incremental rows.

fn random_seq(rng: &mut ChaCha8Rng, max_len: usize, dim: usize) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Minimum over every monotone, continuous warping path from the first to
/// the last cell, accumulating local costs in path order.
fn brute_force_dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + local_cost(&a[i], &b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn dtw_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..1000 {
        let a = random_seq(&mut rng, 7, 6);
        let b = random_seq(&mut rng, 7, 6);
        let dp = dtw_full(&a, &b).map_err(|e| e.to_string())?.distance();
        let bf = brute_force_dtw(&a, &b);
        if dp != bf {
            return Err(format!("pair {k}: dynamic program {dp} vs enumeration {bf}"));
        }
    }
    for k in 0..100 {
        let a = random_seq(&mut rng, 200, 6);
        let b = random_seq(&mut rng, 200, 6);
        let full = dtw_full(&a, &b).map_err(|e| e.to_string())?;
        let mut ws = WarpState::new(b).map_err(|e| e.to_string())?;
        for (t, s) in a.iter().enumerate() {
            ws.append_step(s).map_err(|e| e.to_string())?;
            if ws.row() != full.row(t) {
                return Err(format!("pair {k}: incremental row {t} differs from the full matrix"));
            }
        }
    }
    Ok("1000 short pairs equal exhaustive enumeration; 100 long pairs match row by row".into())
}

// ---------------------------------------------------------------------------
// 3. Gradient of the counterfactual objective against finite differences.

fn random_obs(rng: &mut ChaCha8Rng, flag: u8) -> Vec<f64> {
    let mut v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    v.push(flag as f64);
    v
}

const SEQ_LEN: usize = 4;

fn random_sequence(rng: &mut ChaCha8Rng) -> EpisodeSequence {
    let flag = rng.random_range(0..=1u8);
    EpisodeSequence {
        obs: (0..=SEQ_LEN).map(|_| random_obs(rng, flag)).collect(),
        actions: (0..SEQ_LEN).map(|_| rng.random_range(0..13u8)).collect(),
        rewards: (0..SEQ_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        terminal: rng.random_bool(0.5),
        condition: flag,
        expert_actions: None,
    }
}

/// The objective written out directly: mean squared TD error against frozen
/// double-Q targets, l2 penalty, and weighted treatment cross-entropy.
fn objective(net: &QNetwork, seq: &EpisodeSequence, targets: &[f64], w: &LossWeights) -> f64 {
    let caches = net.forward_sequence(&seq.obs).expect("forward");
    let n = SEQ_LEN as f64;
    let mut j = w.lambda1 * net.l2();
    for t in 0..SEQ_LEN {
        let e = targets[t] - caches[t].q[seq.actions[t] as usize];
        j += e * e / n;
        j += w.lambda2 * treatment_loss(seq.condition, caches[t].prob) / n;
    }
    j
}

fn frozen_targets(net: &QNetwork, target: &QNetwork, seq: &EpisodeSequence, gamma: f64) -> Vec<f64> {
    let online = net.forward_sequence(&seq.obs).expect("forward");
    let tq = target.forward_sequence(&seq.obs).expect("forward");
    (0..SEQ_LEN)
        .map(|t| {
            if t + 1 == SEQ_LEN && seq.terminal {
                seq.rewards[t]
            } else {
                seq.rewards[t] + gamma * tq[t + 1].q[argmax(&online[t + 1].q)]
            }
        })
        .collect()
}

/// Distance of the closest ReLU pre-activation to its kink along `seq`.
fn kink_margin(net: &QNetwork, seq: &EpisodeSequence) -> f64 {
    net.forward_sequence(&seq.obs)
        .expect("forward")
        .iter()
        .flat_map(|c| c.relu_preactivations().collect::<Vec<_>>())
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// Inputs are redrawn until every ReLU sits at least this far from its kink,
/// so central differences with step 1e-5 never straddle one.
const KINK_MARGIN: f64 = 1e-3;

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Method::Dqcil.net_shape(13);
    let w = LossWeights {
        lambda1: 1e-3,
        lambda2: 0.8,
        lambda3: 0.0,
        gamma: 0.99,
    };
    let plain = LossTerms {
        td: true,
        treatment: true,
        supervision: false,
        reversal: false,
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut redraws = 0usize;
    for inst in 0..50u64 {
        let net = QNetwork::new(shape, 1000 + inst);
        let target = QNetwork::new(shape, 2000 + inst);
        let mut seq = random_sequence(&mut rng);
        while kink_margin(&net, &seq) < KINK_MARGIN {
            seq = random_sequence(&mut rng);
            redraws += 1;
        }
        let mut grad = net.new_grad();
        sequence_loss_and_grad(&net, &target, &seq, &w, plain, &mut grad).map_err(|e| e.to_string())?;
        let ys = frozen_targets(&net, &target, &seq, w.gamma);
        let mut probe = net.clone();
        let h = 1e-5;
        for (i, &g) in grad.iter().enumerate().take(net.n_params()) {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let jp = objective(&probe, &seq, &ys, &w);
            probe.params_mut()[i] = orig - h;
            let jm = objective(&probe, &seq, &ys, &w);
            probe.params_mut()[i] = orig;
            let fd = (jp - jm) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            if rel >= 1e-4 {
                return Err(format!(
                    "instance {inst}, {} [{i}]: analytic {} vs finite difference {fd}",
                    net.param_name(i),
                    g
                ));
            }
        }

        // Treatment component alone, with and without the reversal layer.
        let tr_only = |reversal| LossTerms {
            td: false,
            treatment: true,
            supervision: false,
            reversal,
        };
        let w_tr = LossWeights { lambda1: 0.0, ..w };
        let mut g_plain = net.new_grad();
        let mut g_rev = net.new_grad();
        sequence_loss_and_grad(&net, &target, &seq, &w_tr, tr_only(false), &mut g_plain).map_err(|e| e.to_string())?;
        sequence_loss_and_grad(&net, &target, &seq, &w_tr, tr_only(true), &mut g_rev).map_err(|e| e.to_string())?;
        for spec in net.layout() {
            for i in spec.range() {
                let expected = if spec.is_shared() { -g_plain[i] } else { g_plain[i] };
                if g_rev[i] != expected {
                    return Err(format!(
                        "instance {inst}, {}: reversed {} vs expected {expected}",
                        spec.name, g_rev[i]
                    ));
                }
            }
        }
    }
    Ok(format!(
        "{checked} partial derivatives over 50 networks ({redraws} inputs redrawn off ReLU kinks), worst relative error {worst:.2e}; reversal flips shared gradients exactly"
    ))
}

// ---------------------------------------------------------------------------
// 4. Dueling and recurrence invariants.

fn forward_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..20u64 {
        let net = QNetwork::new(NetShape::new(13, inst % 2 == 1), 300 + inst);
        let obs: Vec<Vec<f64>> = (0..6).map(|_| random_obs(&mut rng, (inst % 2) as u8)).collect();
        for c in net.forward_sequence(&obs).map_err(|e| e.to_string())? {
            let mean_q = c.q.iter().sum::<f64>() / c.q.len() as f64;
            if (mean_q - c.value).abs() > 1e-10 {
                return Err(format!("instance {inst}: mean Q {mean_q} vs V {}", c.value));
            }
            let shift = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = c.advantage.iter().map(|a| a + shift).collect();
            for (a, b) in dueling_combine(c.value, &shifted).zip(&c.q) {
                if (a - b).abs() > 1e-10 {
                    return Err(format!("instance {inst}: advantage shift moved Q by {}", a - b));
                }
            }
        }
        let other: Vec<Vec<f64>> = (0..9).map(|_| random_obs(&mut rng, 1)).collect();
        let alone = net.forward_sequence(&obs).map_err(|e| e.to_string())?;
        net.forward_sequence(&other).map_err(|e| e.to_string())?;
        let after = net.forward_sequence(&obs).map_err(|e| e.to_string())?;
        if alone.iter().zip(&after).any(|(a, b)| a.q != b.q || a.h != b.h || a.prob != b.prob) {
            return Err(format!("instance {inst}: an earlier episode leaked into the next one"));
        }
    }
    Ok("mean Q = V and shift invariance within 1e-10; hidden reset isolation bit-exact (20 networks)".into())
}

// ---------------------------------------------------------------------------
// 5. Prioritized sampling law.

fn dummy(reward: f64) -> Transition {
    Transition {
        obs: vec![0.0],
        h_prev: vec![],
        action: 0,
        reward,
        next_obs: vec![0.0],
        terminal: false,
        condition: 0,
        expert_action: None,
    }
}

/// Upper 1% point of the chi-squared distribution with 9 degrees of freedom.
const CHI2_9DF_P01: f64 = 21.666;

fn per_sampling_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut two = ReplayBuffer::new(2, 1.0);
    two.push(dummy(0.0), false, 0, 0).map_err(|e| e.to_string())?;
    two.push(dummy(1.0), false, 0, 1).map_err(|e| e.to_string())?;
    two.set_priority(0, 3.0);
    two.set_priority(1, 1.0);
    let draws = 100_000;
    let s = two.per_sample(draws, 0.4, &mut rng).map_err(|e| e.to_string())?;
    let first = s.indices.iter().filter(|&&i| i == 0).count() as f64;
    let ratio = first / (draws as f64 - first);
    let ratio_ok = (ratio / 3.0 - 1.0).abs() < 0.02;

    let mut uniform = ReplayBuffer::new(10, 0.6);
    for k in 0..10 {
        uniform.push(dummy(k as f64), false, 0, k).map_err(|e| e.to_string())?;
    }
    let s = uniform.per_sample(draws, 0.4, &mut rng).map_err(|e| e.to_string())?;
    let mut counts = [0f64; 10];
    for &i in &s.indices {
        counts[i] += 1.0;
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    check(
        ratio_ok && chi2 < CHI2_9DF_P01,
        format!("3:1 ratio observed {ratio:.4}; uniform chi2 = {chi2:.2} (< {CHI2_9DF_P01} for p > 0.01)"),
    )
}

// ---------------------------------------------------------------------------
// 6. Bootstrap machinery.

/// Percentile of the exact bootstrap distribution of the mean: every one of
/// the n^n ordered resamples is equally likely.
fn exhaustive_means(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let total = n.pow(n as u32);
    let mut means = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[c % n] - values[0];
            c /= n;
        }
        means.push(values[0] + sum / n as f64);
    }
    means.sort_by(f64::total_cmp);
    means
}

fn bootstrap_machinery() -> Outcome {
    let values = [0.3, -1.2, 2.5, 0.9, 4.1];
    let exact = exhaustive_means(&values);
    let reps = 1_000_000;
    let mc = paired_bootstrap(&values, reps, 6).map_err(|e| e.to_string())?;
    // Monte-Carlo tolerance: the sample p-quantile stays within a band of
    // four binomial standard errors around p in the exact distribution.
    let band = |p: f64| {
        let se = (p * (1.0 - p) / reps as f64).sqrt() * 4.0;
        (
            percentile_sorted(&exact, 100.0 * (p - se)),
            percentile_sorted(&exact, 100.0 * (p + se)),
        )
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for (p, got) in [(0.025, mc.ci_low), (0.5, mc.median), (0.975, mc.ci_high)] {
        let (lo, hi) = band(p);
        let exact_q = percentile_sorted(&exact, 100.0 * p);
        ok &= lo <= got && got <= hi;
        detail.push(format!("q{:.1}: {got:.4} vs exact {exact_q:.4}", p * 100.0));
    }
    let flat = paired_bootstrap(&[1.75; 8], 10_000, 1).map_err(|e| e.to_string())?;
    ok &= flat.ci_low == 1.75 && flat.ci_high == 1.75 && flat.median == 1.75;
    let again = paired_bootstrap(&values, reps, 6).map_err(|e| e.to_string())?;
    ok &= again == mc;
    check(ok, format!("{}; constant input degenerate; reruns bit-identical", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// Shared desk-scale training setup for 7 and 8.

/// Held-out evaluation uses the agent-domain test exploration rate.
const EPS_TEST: f64 = 0.1;

/// Demonstrations and their stratified 400/50/50 split.
fn demo_split(seed: u64) -> Result<(Vec<Episode>, Vec<Episode>), String> {
    let config = WorldConfig::default();
    let episodes = generate_balanced(&config, 500, seed).map_err(|e| e.to_string())?;
    let split = make_splits(&episodes, SplitCounts::AGENT_DEFAULT, seed).map_err(|e| e.to_string())?;
    let owned = |ids: &[u64]| split.select(ids, &episodes).into_iter().cloned().collect::<Vec<_>>();
    Ok((owned(&split.train), owned(&split.test)))
}

/// Pretrained run with the desk-scale optimizer settings used throughout.
fn desk_run(method: Method, seed: u64, online_steps: usize) -> RunConfig {
    let mut run = RunConfig::agent_defaults(method, true);
    run.seed = seed;
    run.offline_lr = 1e-3;
    run.schedule.learning_rate = 5e-4;
    run.schedule.total_steps = online_steps;
    run.gamma = 0.95;
    run.dtw_reward = DtwReward::Increment;
    run.log_interval = 10_000;
    run
}

fn fit(demos: &[Episode], run: &RunConfig) -> Result<PolicySet, String> {
    train(demos, &WorldConfig::default(), run)
        .map(|(p, _)| p)
        .map_err(|e| format!("{} training failed: {e}", run.method))
}

// ---------------------------------------------------------------------------
// 7. End-to-end imitation: DQDIL against behavioral cloning.

const IMITATION_STEPS: usize = 200_000;

fn end_to_end_imitation() -> Outcome {
    let config = WorldConfig::default();
    let (demos, test) = demo_split(7)?;
    let bc = fit(&demos, &RunConfig { seed: 1, ..RunConfig::agent_defaults(Method::Bc, true) })?;
    let dqdil = fit(&demos, &desk_run(Method::Dqdil, 1, IMITATION_STEPS))?;
    let score = |p: &PolicySet| -> Result<Vec<EpisodeMetrics>, String> {
        let sims = p.rollout_from(&config, &test, None, EPS_TEST, 99).map_err(|e| e.to_string())?;
        compute_metrics(&sims, &test).map_err(|e| e.to_string())
    };
    let (m_bc, m_dq) = (score(&bc)?, score(&dqdil)?);
    let contact = m_dq.iter().map(|m| m.ret).sum::<f64>() / m_dq.len() as f64;
    let median = |m: &[EpisodeMetrics]| percentile(&m.iter().map(|x| x.dtw_to_gt).collect::<Vec<_>>(), 50.0);
    let (med_bc, med_dq) = (median(&m_bc), median(&m_dq));
    let diffs: Vec<f64> = m_bc.iter().zip(&m_dq).map(|(b, d)| b.dtw_to_gt - d.dtw_to_gt).collect();
    let boot = paired_bootstrap(&diffs, DEFAULT_REPLICATES, 7).map_err(|e| e.to_string())?;
    check(
        contact >= 0.8 && med_dq < med_bc && boot.median > 0.0,
        format!(
            "contact {contact:.2} (>= 0.8); median DTW dqdil {med_dq:.3} vs bc {med_bc:.3}; \
             bc - dqdil {:.3} [{:.3}, {:.3}] over {} held-out starts",
            boot.median, boot.ci_low, boot.ci_high, boot.n
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Counterfactual direction.

// Ten training runs must fit the 45 minute budget on one core. At this length DQCIL is still
// learning to catch, and at least one seed still shifts the wrong way; a clean positive shift on
// every seed would need runs near 2e5 steps.
const COUNTERFACTUAL_STEPS: usize = 40_000;
const COUNTERFACTUAL_EPISODES: usize = 100;

fn counterfactual_direction() -> Outcome {
    let config = WorldConfig::default();
    let mut cil_positive = 0;
    let mut dil_null = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let (demos, _) = demo_split(seed)?;
        let shift = |method: Method| -> Result<BootstrapResult, String> {
            let policy = fit(&demos, &desk_run(method, seed, COUNTERFACTUAL_STEPS))?;
            counterfactual_shift(&policy, &config, 0, 1, COUNTERFACTUAL_EPISODES, EPS_TEST, DEFAULT_REPLICATES, seed)
                .map_err(|e| e.to_string())
        };
        let cil = shift(Method::Dqcil)?;
        let dil = shift(Method::Dqdil)?;
        cil_positive += usize::from(cil.ci_low > 0.0);
        dil_null += usize::from(dil.contains(0.0));
        lines.push(format!(
            "seed {seed}: cil {:.3} [{:.3}, {:.3}], dil {:.3} [{:.3}, {:.3}]",
            cil.median, cil.ci_low, cil.ci_high, dil.median, dil.ci_low, dil.ci_high
        ));
    }
    check(
        cil_positive == 5 && dil_null >= 3,
        format!(
            "dqcil 1->2 CI above zero in {cil_positive}/5 seeds, dqdil CI covers zero in {dil_null}/5; {}",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Format stability.

fn format_stability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = WorldConfig::default();
    let episodes = generate_balanced(&config, 40, 9).map_err(|e| e.to_string())?;
    let path = dir.path().join("episodes.jsonl");
    write_dataset(&episodes, &path).map_err(|e| e.to_string())?;
    let back = read_dataset(&path).map_err(|e| e.to_string())?;
    let bits = |eps: &[Episode]| -> Vec<u64> {
        eps.iter()
            .flat_map(|e| e.agents.iter())
            .flat_map(|a| a.positions.iter().chain(&a.velocities))
            .flat_map(|p| [p.x.to_bits(), p.y.to_bits()])
            .collect()
    };
    if back != episodes || bits(&back) != bits(&episodes) {
        return Err("dataset round trip changed the episodes".into());
    }

    let golden = read_dataset_from(&include_bytes!("data/golden_episode.jsonl")[..]).map_err(|e| e.to_string())?;
    let g = golden.first().ok_or("golden file holds no episode")?;
    let golden_ok = golden.len() == 1
        && g.episode_id == 7
        && g.condition == 1
        && g.dt == 0.1
        && g.len() == 3
        && g.outcome == TerminationCause::Contact
        && g.winner_role == Role::Chaser
        && g.agents.iter().map(|a| a.role).collect::<Vec<_>>() == [Role::Chaser, Role::Chaser, Role::Evader]
        && g.agents[0].positions[2].x == 0.401
        && g.agents[2].velocities[1].y == 0.3
        && g.agents[1].actions.as_deref() == Some(&[1u8, 1][..]);
    if !golden_ok {
        return Err(format!("golden episode parsed to unexpected values: {g:?}"));
    }

    let policy = PolicySet::new(Method::Dqcil, &config, &[0, 1], 9);
    let ckpt_path = dir.path().join("policy.ckpt");
    policy.save(&ckpt_path, &config).map_err(|e| e.to_string())?;
    let (loaded, _) = PolicySet::load(&ckpt_path).map_err(|e| e.to_string())?;
    if loaded != policy {
        return Err("checkpoint round trip changed the policy".into());
    }
    let mut blob = std::fs::read(&ckpt_path).map_err(|e| e.to_string())?;
    blob[20] ^= 0x40;
    std::fs::write(&ckpt_path, &blob).map_err(|e| e.to_string())?;
    if Checkpoint::load(&ckpt_path).is_ok() {
        return Err("a corrupted checkpoint passed its manifest check".into());
    }
    Ok("dataset round trip bit-exact; golden file parsed; checkpoint checksum verified and tampering rejected".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion {
            id: 1,
            name: "parameter recovery",
            budget: Duration::from_secs(30),
            run: parameter_recovery,
        },
        Criterion {
            id: 2,
            name: "dtw oracle equivalence",
            budget: Duration::from_secs(60),
            run: dtw_equivalence,
        },
        Criterion {
            id: 3,
            name: "gradient correctness",
            budget: Duration::from_secs(120),
            run: gradient_correctness,
        },
        Criterion {
            id: 4,
            name: "dueling and forward invariants",
            budget: Duration::from_secs(60),
            run: forward_invariants,
        },
        Criterion {
            id: 5,
            name: "per sampling law",
            budget: Duration::from_secs(60),
            run: per_sampling_law,
        },
        Criterion {
            id: 6,
            name: "bootstrap machinery",
            budget: Duration::from_secs(60),
            run: bootstrap_machinery,
        },
        Criterion {
            id: 7,
            name: "end-to-end imitation",
            budget: Duration::from_secs(30 * 60),
            run: end_to_end_imitation,
        },
        Criterion {
            id: 8,
            name: "counterfactual direction",
            budget: Duration::from_secs(45 * 60),
            run: counterfactual_direction,
        },
        Criterion {
            id: 9,
            name: "format stability",
            budget: Duration::from_secs(60),
            run: format_stability,
        },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if let Some(f) = &filter {
            if !c.name.contains(f.as_str()) && c.id.to_string() != *f {
                continue;
            }
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; took {elapsed:.1?}, budget {:?}", c.budget)),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({}): {} [{:.1?}]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
