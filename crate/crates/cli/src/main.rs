//! `pursuit`: the chase-and-escape imitation pipeline as one binary.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or I/O error,
//! 3 locomotion estimation failed, 4 artifact/manifest mismatch.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pursuit_core::dataset::{make_splits, read_dataset, write_dataset};
use pursuit_core::demos::{generate_balanced, generate_demos};
use pursuit_core::locomotion::{percentile, DEFAULT_TH_ACC};
use pursuit_core::stats::{
    compute_metrics, counterfactual_shift, kde_gap, paired_bootstrap, report_header, write_bootstrap_csv,
    write_metrics_csv, write_violin_csv, DEFAULT_REPLICATES,
};
use pursuit_core::training::train;
use pursuit_core::{
    BootstrapResult, Episode, EpisodeMetrics, Error, Method, ParameterReport, PolicySet, Role, RunConfig,
    SplitCounts, WorldConfig,
};

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "pursuit", version, about = "Chase-and-escape imitation learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scripted demonstration episodes.
    Generate(GenerateArgs),
    /// Estimate damping and input amplitude per role from trajectories.
    Estimate(EstimateArgs),
    /// Split a dataset into stratified train/validation/test files.
    Split(SplitArgs),
    /// Train a policy (pretraining and/or online fine-tuning).
    Train(TrainArgs),
    /// Roll out a checkpoint on ground-truth starts and compute statistics.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Number of episodes.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Condition 1 (direct pursuit) or 2 (flanking); omit for a balanced mix.
    #[arg(long, value_parser = parse_condition)]
    condition: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// World configuration file (key = value); defaults to d=0.25, u=3.0.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Acceleration threshold for movement onsets.
    #[arg(long, default_value_t = DEFAULT_TH_ACC)]
    th_acc: f64,
    /// Output report file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = SplitCounts::AGENT_DEFAULT.train)]
    train: usize,
    #[arg(long, default_value_t = SplitCounts::AGENT_DEFAULT.validation)]
    validation: usize,
    #[arg(long, default_value_t = SplitCounts::AGENT_DEFAULT.test)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for train.jsonl, validation.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// One of dqn, bc, dqaas, dqdil, dqcil [default: dqdil, or the config file's].
    #[arg(long)]
    method: Option<Method>,
    /// Pretrain offline on the demonstrations for 30 epochs first.
    #[arg(long)]
    pretrain: bool,
    /// Run configuration file (key = value); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World configuration file; defaults to d=0.25, u=3.0, 14.8 s episodes.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Parameter report from `estimate`; its evader row sets d and u.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Demonstration dataset.
    #[arg(long)]
    data: PathBuf,
    /// Online environment steps [default: 1005000].
    #[arg(long)]
    steps: Option<usize>,
    /// Online learning rate [default: 1e-6; 1e-3 for bc/dqaas without pretraining].
    #[arg(long)]
    lr: Option<f64>,
    /// Discount factor [default: 0.99].
    #[arg(long)]
    gamma: Option<f64>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "episodes"])))]
struct EvaluateArgs {
    /// Checkpoint to roll out from every ground-truth start.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score a recorded dataset instead of a checkpoint.
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Ground-truth dataset.
    #[arg(long)]
    gt_data: PathBuf,
    /// Restrict to condition 1 or 2 (and show that flag to the policy).
    #[arg(long, value_parser = parse_condition)]
    condition: Option<u8>,
    /// Counterfactual flag flip FROM:TO with conditions numbered 1 and 2.
    #[arg(long, value_parser = parse_flip)]
    flip: Option<(u8, u8)>,
    /// Episodes for the counterfactual comparison.
    #[arg(long, default_value_t = 100)]
    flip_episodes: usize,
    /// Exploration rate during evaluation rollouts.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Paired bootstrap replicates.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// "1" or "2" on the command line; flag 0 or 1 internally.
fn parse_condition(s: &str) -> Result<u8, String> {
    match s {
        "1" => Ok(0),
        "2" => Ok(1),
        _ => Err(format!("condition must be 1 or 2, got `{s}`")),
    }
}

fn parse_flip(s: &str) -> Result<(u8, u8), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected FROM:TO, got `{s}`"))?;
    Ok((parse_condition(a)?, parse_condition(b)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::EstimationFailed { .. } => 3,
                Error::ArtifactMismatch(_) | Error::Version { .. } => 4,
                Error::Io { .. } | Error::Parse { .. } | Error::Contract(_) | Error::Csv(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn run(command: Command) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = match command {
        Command::Generate(a) => generate(a)?,
        Command::Estimate(a) => estimate(a)?,
        Command::Split(a) => split(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Evaluate(a) => evaluate(a)?,
    };
    manifest.duration = started.elapsed();
    let dir = output_dir(&manifest.outputs[0]);
    manifest.write(&dir)?;
    Ok(())
}

/// Directory that receives the manifest for an output path.
fn output_dir(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.to_path_buf();
    }
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn manifest(subcommand: &'static str) -> RunManifest {
    RunManifest {
        subcommand,
        config: None,
        seed: None,
        inputs: Vec::new(),
        outputs: Vec::new(),
        duration: Default::default(),
    }
}

fn load_world(path: Option<&Path>) -> anyhow::Result<WorldConfig> {
    Ok(match path {
        Some(p) => WorldConfig::load(p)?,
        None => WorldConfig::default(),
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<RunManifest> {
    let world = load_world(a.world.as_deref())?;
    let episodes = match a.condition {
        Some(flag) => generate_demos(&world, a.n, flag, a.seed)?,
        None => generate_balanced(&world, a.n, a.seed)?,
    };
    write_dataset(&episodes, &a.out)?;
    log::info!("wrote {} episodes to {}", episodes.len(), a.out.display());
    Ok(RunManifest {
        config: a.world,
        seed: Some(a.seed),
        outputs: vec![a.out],
        ..manifest("generate")
    })
}

fn estimate(a: EstimateArgs) -> anyhow::Result<RunManifest> {
    let episodes = read_dataset(&a.data)?;
    let report = ParameterReport::estimate_roles(&episodes, a.th_acc)?;
    let text = report.to_text();
    fs::write(&a.out, &text).map_err(|e| Error::io(&a.out, e))?;
    print!("{text}");
    Ok(RunManifest {
        inputs: vec![a.data],
        outputs: vec![a.out],
        ..manifest("estimate")
    })
}

fn split(a: SplitArgs) -> anyhow::Result<RunManifest> {
    let episodes = read_dataset(&a.data)?;
    let s = make_splits(&episodes, SplitCounts::new(a.train, a.validation, a.test), a.seed)?;
    create_dir(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    for (name, ids) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        let part: Vec<Episode> = s.select(ids, &episodes).into_iter().cloned().collect();
        write_dataset(&part, &path)?;
        log::info!("{name}: {} episodes", part.len());
        outputs.push(path);
    }
    Ok(RunManifest {
        seed: Some(a.seed),
        inputs: vec![a.data],
        outputs,
        ..manifest("split")
    })
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<RunManifest> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::agent_defaults(a.method.unwrap_or(Method::Dqdil), a.pretrain),
    };
    if let Some(m) = a.method {
        run.method = m;
    }
    if a.pretrain && !run.pretrain {
        run.pretrain = true;
        run.schedule = RunConfig::agent_defaults(run.method, true).schedule;
    }
    if let Some(v) = a.steps {
        run.schedule.total_steps = v;
    }
    if let Some(v) = a.lr {
        run.schedule.learning_rate = v;
    }
    if let Some(v) = a.gamma {
        run.gamma = v;
    }
    if let Some(v) = a.seed {
        run.seed = v;
    }
    run.validate()?;

    let mut world = load_world(a.world.as_deref())?;
    if let Some(p) = &a.params {
        let report = ParameterReport::load(p)?;
        let evader = report
            .get(Role::Evader)
            .with_context(|| format!("{} has no evader row", p.display()))?;
        world.damping = evader.d;
        world.input_amplitude = evader.u;
        world.validate()?;
    }
    let demos = read_dataset(&a.data)?;
    if !run.method.uses_demos() && !run.method.interacts() {
        bail!("method {} neither uses demonstrations nor interacts", run.method);
    }
    create_dir(&a.out)?;
    let (policy, log) = train(&demos, &world, &run)?;

    let ckpt = a.out.join("policy.ckpt");
    policy.save(&ckpt, &world)?;
    let log_path = a.out.join("train_log.csv");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    log.append_csv(&log_path)?;
    let cfg_path = a.out.join("run_config.txt");
    fs::write(&cfg_path, run.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
    let world_path = a.out.join("world.txt");
    fs::write(&world_path, world.to_kv()).map_err(|e| Error::io(&world_path, e))?;
    log::info!(
        "{}: {} offline epochs, {} online log rows",
        run.method,
        log.epochs().count(),
        log.rows.len() - log.epochs().count()
    );

    let mut inputs = vec![a.data];
    inputs.extend(a.params);
    Ok(RunManifest {
        config: a.config,
        seed: Some(run.seed),
        inputs,
        outputs: vec![a.out, ckpt, log_path, cfg_path, world_path],
        ..manifest("train")
    })
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<RunManifest> {
    let mut gt = read_dataset(&a.gt_data)?;
    if let Some(flag) = a.condition {
        gt.retain(|e| e.condition == flag);
    }
    if gt.len() < 2 {
        return Err(Error::Contract(format!("need at least two ground-truth episodes, have {}", gt.len())).into());
    }
    let mut inputs = vec![a.gt_data.clone()];
    let (label, episodes, policy) = match (&a.checkpoint, &a.episodes) {
        (Some(ckpt), _) => {
            let (policy, world) = PolicySet::load(ckpt)?;
            let sims = policy.rollout_from(&world, &gt, a.condition, a.epsilon, a.seed)?;
            inputs.push(ckpt.clone());
            (policy.method.name().to_string(), sims, Some((policy, world)))
        }
        (None, Some(path)) => {
            if a.flip.is_some() {
                return Err(Error::Contract("--flip needs a checkpoint".into()).into());
            }
            let mut eps = read_dataset(path)?;
            if let Some(flag) = a.condition {
                eps.retain(|e| e.condition == flag);
            }
            inputs.push(path.clone());
            ("episodes".to_string(), eps, None)
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let metrics = compute_metrics(&episodes, &gt)?;
    let gt_metrics = compute_metrics(&gt, &gt)?;

    let mut results: Vec<BootstrapResult> = Vec::new();
    let dtw: Vec<f64> = metrics.iter().map(|m| m.dtw_to_gt).collect();
    let mut r = paired_bootstrap(&dtw, a.replicates, a.seed)?;
    r.statistic = "dtw_to_gt".into();
    results.push(r);
    let path_diffs = paired_path_diffs(&metrics, &gt_metrics);
    if path_diffs.len() >= 2 {
        let mut r = paired_bootstrap(&path_diffs, a.replicates, a.seed)?;
        r.statistic = "path_length_minus_gt".into();
        results.push(r);
    }
    if let (Some((from, to)), Some((policy, world))) = (a.flip, &policy) {
        results.push(counterfactual_shift(
            policy,
            world,
            from,
            to,
            a.flip_episodes,
            a.epsilon,
            a.replicates,
            a.seed,
        )?);
    }

    create_dir(&a.out)?;
    let rows = vec![(label.clone(), metrics.clone()), ("gt".to_string(), gt_metrics.clone())];
    let metrics_path = a.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;
    let violin_path = a.out.join("violin.csv");
    write_violin_csv(&violin_path, &rows)?;
    let boot_path = a.out.join("bootstrap.csv");
    write_bootstrap_csv(&boot_path, &results)?;

    let path_a: Vec<f64> = metrics.iter().map(|m| m.path_length).collect();
    let path_b: Vec<f64> = gt_metrics.iter().map(|m| m.path_length).collect();
    let gap = match kde_gap(&path_a, &path_b) {
        Ok(g) => format!("{g:.6}"),
        Err(e) => format!("nan ({e})"),
    };
    let mut text = Vec::new();
    report_header(&mut text)?;
    let mut text = String::from_utf8(text)?;
    let contact = metrics.iter().map(|m| m.ret).sum::<f64>() / metrics.len() as f64;
    text.push_str(&format!("model = {label}\n"));
    text.push_str(&format!("n_episodes = {}\n", metrics.len()));
    text.push_str(&format!("contact_rate = {contact:.6}\n"));
    text.push_str(&format!("dtw_to_gt_median = {:.6}\n", percentile(&dtw, 50.0)));
    text.push_str(&format!("kde_gap_path_length = {gap}\n"));
    for r in &results {
        text.push_str(&format!(
            "{} = {:.6} [{:.6}, {:.6}] (n = {}, replicates = {}, seed = {})\n",
            r.statistic, r.median, r.ci_low, r.ci_high, r.n, r.n_replicates, r.seed
        ));
    }
    let report_path = a.out.join("report.txt");
    fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    print!("{text}");

    Ok(RunManifest {
        seed: Some(a.seed),
        inputs,
        outputs: vec![a.out, metrics_path, violin_path, boot_path, report_path],
        ..manifest("evaluate")
    })
}

/// Model path length minus its ground-truth partner's, matched by episode id.
fn paired_path_diffs(model: &[EpisodeMetrics], gt: &[EpisodeMetrics]) -> Vec<f64> {
    model
        .iter()
        .filter_map(|m| {
            gt.iter()
                .find(|g| g.episode_id == m.episode_id)
                .map(|g| m.path_length - g.path_length)
        })
        .collect()
}
