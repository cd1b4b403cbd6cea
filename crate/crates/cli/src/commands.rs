use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ghvae_core::data::dataset::{generate_dataset, load_dataset};
use ghvae_core::data::Episode;
use ghvae_core::memory::{self, MemBreakdown, MemMode, SavingsRow, Schedule};
use ghvae_core::metrics::{psnr, sample_rollouts, EvalConfig, EvalReport};
use ghvae_core::model::checkpoint::{manifest_of, read_manifest};
use ghvae_core::model::{
    load_checkpoint, module_hash, save_checkpoint, train_phase, CheckpointManifest, GhvaeStack, ImageSpec,
    LatentSource, ModelConfig, StepRecord, TrainMode, TrainPhaseConfig,
};
use ghvae_core::planner::{plan_episode, LearnedDynamics, OracleDynamics, PushTask, Transcript};
use ghvae_core::seed;
use ghvae_core::tensor::Tensor;
use ghvae_core::verify::{self, CheckOutcome, KlMonteCarlo};
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, EvalArgs, MemoryArgs, PlanArgs, PriorArg, RolloutArgs, TrainArgs, VerifyArgs};
use crate::config::{DynamicsKind, LevelChannels, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::media;
use crate::report::Reporter;

/// Training records averaged for the summary in each train report.
const SUMMARY_WINDOW: usize = 50;
/// Candidates rolled out together by learned dynamics.
const PLAN_CHUNK: usize = 20;
/// Magnification of frames in PNG and GIF output.
const MEDIA_SCALE: u32 = 4;

/// Resolve the run config from the flags, then dispatch.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train(a) => train(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a).map(|_| ()),
        Command::Rollout(a) => rollout(&cfg, &a),
        Command::Plan(a) => plan(&cfg, &a),
        Command::MemoryReport(a) => memory_report(&cfg, &a),
        Command::Verify(a) => verify(&cfg, &a),
    }
}

pub fn checkpoint_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join("checkpoints").join(name)
}

/// The checkpoint the configured mode finishes with.
pub fn final_checkpoint_name(cfg: &RunConfig) -> String {
    match cfg.mode {
        TrainMode::Greedy => format!("phase{}", cfg.depth()),
        TrainMode::E2e => "e2e".into(),
        TrainMode::E2eFinetune => "finetune".into(),
    }
}

fn display_path(cfg: &RunConfig, path: &Path) -> String {
    path.strip_prefix(&cfg.out).unwrap_or(path).display().to_string()
}

#[derive(Serialize)]
struct DataSummary {
    episodes: usize,
    length: usize,
    train: usize,
    held_out: usize,
    seed: u64,
}

fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let reporter = Reporter::start("gen-data");
    let dir = cfg.dataset_dir();
    let dcfg = cfg.dataset_config();
    generate_dataset(&dcfg, &dir)?;
    let summary = DataSummary {
        episodes: dcfg.episodes,
        length: dcfg.length,
        train: dcfg.episodes - cfg.dataset.held_out,
        held_out: cfg.dataset.held_out,
        seed: dcfg.seed,
    };
    reporter.write(&cfg.out, "data", cfg, &summary)?;
    println!("wrote {} episodes of {} frames to {}", dcfg.episodes, dcfg.length, dir.display());
    Ok(())
}

/// Training and held-out episodes, after checking the dataset on disk was
/// generated from this config.
pub fn load_split(cfg: &RunConfig) -> CliResult<(Vec<Episode>, Vec<Episode>)> {
    let dir = cfg.dataset_dir();
    if !dir.join("index.json").is_file() {
        return Err(CliError::Invalid(format!(
            "dataset not found at {}; run gen-data first",
            dir.display()
        )));
    }
    let dataset = load_dataset(&dir)?;
    if dataset.config != cfg.dataset_config() {
        return Err(CliError::Invalid(format!(
            "dataset at {} was generated from a different config; rerun gen-data",
            dir.display()
        )));
    }
    Ok(dataset.split(cfg.dataset.held_out)?)
}

fn require_checkpoint(dir: &Path, what: &str) -> CliResult<()> {
    if dir.join("manifest.json").is_file() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{what} checkpoint not found at {}", dir.display())))
    }
}

/// Load a checkpoint and check that it belongs to this config's ladder.
fn load_matching(cfg: &RunConfig, dir: &Path, depth: usize) -> CliResult<GhvaeStack> {
    let stack = load_checkpoint(dir)?;
    if stack.ladder() != cfg.ladder()?.truncated(depth) || stack.config != cfg.model() || stack.seed != cfg.init_seed() {
        return Err(CliError::Invalid(format!(
            "checkpoint at {} was trained from a different config",
            dir.display()
        )));
    }
    Ok(stack)
}

fn train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let depth = cfg.depth();
    if let Some(k) = args.phase {
        if cfg.mode == TrainMode::E2e {
            return Err(CliError::Invalid(
                "end-to-end mode trains every level at once; use --all".into(),
            ));
        }
        if k == 0 || k > depth {
            return Err(CliError::Invalid(format!("phase must be between 1 and {depth}, got {k}")));
        }
        let stack = greedy_stack(cfg, k)?;
        let (train_eps, _) = load_split(cfg)?;
        run_phase(cfg, stack, &cfg.phase(k, TrainMode::Greedy), &format!("phase{k}"), &train_eps)?;
        return Ok(());
    }
    if args.finetune {
        let stack = finetune_stack(cfg)?;
        let (train_eps, _) = load_split(cfg)?;
        run_phase(cfg, stack, &cfg.finetune(), "finetune", &train_eps)?;
        return Ok(());
    }
    let (train_eps, _) = load_split(cfg)?;
    match cfg.mode {
        TrainMode::E2e => {
            let stack = GhvaeStack::from_ladder(&cfg.ladder()?, cfg.model(), cfg.init_seed())?;
            run_phase(cfg, stack, &cfg.e2e(), "e2e", &train_eps)?;
        }
        TrainMode::Greedy | TrainMode::E2eFinetune => {
            for k in 1..=depth {
                let stack = greedy_stack(cfg, k)?;
                run_phase(cfg, stack, &cfg.phase(k, TrainMode::Greedy), &format!("phase{k}"), &train_eps)?;
            }
            if cfg.mode == TrainMode::E2eFinetune {
                run_phase(cfg, finetune_stack(cfg)?, &cfg.finetune(), "finetune", &train_eps)?;
            }
        }
    }
    Ok(())
}

/// The stack greedy phase `k` starts from: a fresh first module, or the
/// previous phase's checkpoint with one new module on top.
fn greedy_stack(cfg: &RunConfig, k: usize) -> CliResult<GhvaeStack> {
    let ladder = cfg.ladder()?;
    if k == 1 {
        return Ok(GhvaeStack::from_ladder(&ladder.truncated(1), cfg.model(), cfg.init_seed())?);
    }
    let prev = checkpoint_dir(cfg, &format!("phase{}", k - 1));
    require_checkpoint(&prev, &format!("phase {}", k - 1))?;
    let mut stack = load_matching(cfg, &prev, k - 1)?;
    stack.add_module(ladder.levels[k - 1])?;
    Ok(stack)
}

fn finetune_stack(cfg: &RunConfig) -> CliResult<GhvaeStack> {
    let depth = cfg.depth();
    let dir = checkpoint_dir(cfg, &format!("phase{depth}"));
    require_checkpoint(&dir, &format!("phase {depth}"))?;
    load_matching(cfg, &dir, depth)
}

#[derive(Serialize)]
pub struct ModuleSummary {
    pub level: usize,
    pub frozen: bool,
    pub sha256: String,
}

#[derive(Serialize)]
struct TrainSummary {
    name: String,
    phase: TrainPhaseConfig,
    /// Averages over the last records of the phase.
    final_loss: f64,
    final_recon: f64,
    final_kl: f64,
    final_elbo: f64,
    modules: Vec<ModuleSummary>,
    /// Every module that was frozen going in hashes the same coming out.
    frozen_unchanged: bool,
}

fn csv_writer(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?);
    writeln!(w, "step,recon,kl,elbo").map_err(|e| io_error(path, e))?;
    Ok(w)
}

/// Train, log, check frozen modules, checkpoint and report one phase.
fn run_phase(
    cfg: &RunConfig,
    mut stack: GhvaeStack,
    phase: &TrainPhaseConfig,
    name: &str,
    train_eps: &[Episode],
) -> CliResult<GhvaeStack> {
    let reporter = Reporter::start(&format!("train {name}"));
    let log_path = cfg.out.join("logs").join(format!("train_{name}.csv"));
    let mut csv = csv_writer(&log_path)?;
    let mut write_err = None;
    let frozen_before: Vec<(usize, String)> = match phase.mode {
        TrainMode::Greedy => stack
            .modules
            .iter()
            .filter(|m| m.level() != phase.phase)
            .map(|m| (m.level(), module_hash(m)))
            .collect(),
        TrainMode::E2e | TrainMode::E2eFinetune => Vec::new(),
    };
    let steps = phase.steps;
    let log = train_phase(&mut stack, train_eps, phase, |r: &StepRecord| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{},{},{},{}", r.step, r.recon, r.kl, r.elbo) {
                write_err = Some(e);
            }
        }
        if (r.step + 1).is_multiple_of(100) || r.step + 1 == steps {
            eprintln!("{name} step {}/{steps} loss {:.5} kl {:.3}", r.step + 1, r.loss, r.kl);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_error(&log_path, e));
    }
    csv.flush().map_err(|e| io_error(&log_path, e))?;
    for (level, before) in &frozen_before {
        let after = module_hash(stack.module(*level));
        if &after != before {
            return Err(ghvae_core::Error::HashMismatch {
                module: *level,
                expected: before.clone(),
                actual: after,
            }
            .into());
        }
    }
    let dir = checkpoint_dir(cfg, name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    let manifest = save_checkpoint(&stack, &dir)?;
    let tail = &log[log.len().saturating_sub(SUMMARY_WINDOW)..];
    let avg = |f: fn(&StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    let summary = TrainSummary {
        name: name.to_string(),
        phase: *phase,
        final_loss: avg(|r| r.loss),
        final_recon: avg(|r| r.recon),
        final_kl: avg(|r| r.kl),
        final_elbo: avg(|r| r.elbo),
        modules: module_summaries(&manifest),
        frozen_unchanged: true,
    };
    reporter.write(&cfg.out, &format!("train_{name}"), cfg, &summary)?;
    println!(
        "{name}: {} steps, loss {:.5}, checkpoint {}",
        steps,
        summary.final_loss,
        dir.display()
    );
    Ok(stack)
}

fn module_summaries(m: &CheckpointManifest) -> Vec<ModuleSummary> {
    m.modules
        .iter()
        .map(|e| ModuleSummary {
            level: e.spec.level,
            frozen: e.frozen,
            sha256: e.sha256.clone(),
        })
        .collect()
}

/// Load the named (or configured final) checkpoint and check its image.
fn checkpoint_for(cfg: &RunConfig, explicit: Option<&PathBuf>) -> CliResult<(PathBuf, GhvaeStack)> {
    let dir = explicit.cloned().unwrap_or_else(|| checkpoint_dir(cfg, &final_checkpoint_name(cfg)));
    require_checkpoint(&dir, "trained")?;
    let stack = load_checkpoint(&dir)?;
    if stack.image != cfg.image {
        return Err(CliError::Invalid(format!(
            "checkpoint at {} models {:?} frames but the config's image is {:?}",
            dir.display(),
            stack.image,
            cfg.image
        )));
    }
    Ok((dir, stack))
}

#[derive(Serialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub modules: Vec<ModuleSummary>,
    pub report: EvalReport,
}

fn source_of(cfg: &RunConfig, prior: Option<PriorArg>) -> LatentSource {
    match prior {
        Some(PriorArg::Learned) => LatentSource::LearnedPrior,
        Some(PriorArg::Uniform) => LatentSource::UniformPrior,
        None => cfg.eval.prior,
    }
}

fn eval(cfg: &RunConfig, args: &EvalArgs) -> CliResult<EvalSummary> {
    let reporter = Reporter::start("eval");
    let (dir, stack) = checkpoint_for(cfg, args.checkpoint.as_ref())?;
    let (_, test) = load_split(cfg)?;
    let source = source_of(cfg, args.prior);
    let report = ghvae_core::metrics::evaluate(&stack, &test, &cfg.eval_config(source))?;
    print!("{}", report.table());
    let summary = EvalSummary {
        checkpoint: display_path(cfg, &dir),
        modules: module_summaries(&manifest_of(&stack)),
        report,
    };
    let name = match source {
        LatentSource::LearnedPrior => "eval",
        LatentSource::UniformPrior => "eval_uniform_prior",
    };
    reporter.write(&cfg.out, name, cfg, &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct RolloutSummary {
    checkpoint: String,
    episode: usize,
    /// Mean PSNR over predicted frames, per sample.
    psnr: Vec<f64>,
    media: Vec<String>,
}

fn rollout(cfg: &RunConfig, args: &RolloutArgs) -> CliResult<()> {
    let reporter = Reporter::start("rollout");
    if args.samples == 0 {
        return Err(CliError::Invalid("samples must be at least 1".into()));
    }
    let (dir, stack) = checkpoint_for(cfg, args.checkpoint.as_ref())?;
    let (_, test) = load_split(cfg)?;
    let ep = test.get(args.episode).ok_or_else(|| {
        CliError::Invalid(format!("episode {} is out of range; {} are held out", args.episode, test.len()))
    })?;
    let ec = EvalConfig {
        samples: args.samples,
        ..cfg.eval_config(cfg.eval.prior)
    };
    let preds = sample_rollouts(&stack, std::slice::from_ref(ep), &ec, cfg.rollout_seed())?;
    let (ctx, horizon) = (cfg.context, cfg.horizon);
    let truth: Vec<Tensor<f32>> = (0..ctx + horizon).map(|t| ep.frame(t)).collect();
    let samples: Vec<Vec<Tensor<f32>>> = (0..args.samples)
        .map(|s| {
            truth[..ctx]
                .iter()
                .cloned()
                .chain(preds.iter().map(|p| p.index_axis0(s)))
                .collect()
        })
        .collect();
    let mut scores = Vec::with_capacity(args.samples);
    for row in &samples {
        let mut total = 0.0;
        for t in ctx..ctx + horizon {
            total += psnr(&row[t], &truth[t], 1.0)?;
        }
        scores.push(total / horizon as f64);
    }
    let media_dir = cfg.out.join("media");
    let mut written = Vec::new();
    if args.strip || !args.gif {
        let mut rows = vec![truth.clone()];
        rows.extend(samples.iter().cloned());
        let path = media_dir.join(format!("rollout_ep{}.png", args.episode));
        media::write_png(&media::grid(&rows, MEDIA_SCALE)?, &path)?;
        written.push(display_path(cfg, &path));
    }
    if args.gif {
        let frames = (0..ctx + horizon)
            .map(|t| {
                let row: Vec<Tensor<f32>> = std::iter::once(truth[t].clone())
                    .chain(samples.iter().map(|s| s[t].clone()))
                    .collect();
                media::grid(&[row], MEDIA_SCALE)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let path = media_dir.join(format!("rollout_ep{}.gif", args.episode));
        media::write_gif(&frames, 250, &path)?;
        written.push(display_path(cfg, &path));
    }
    for (s, p) in scores.iter().enumerate() {
        println!("sample {s}: psnr {p:.3} dB");
    }
    for w in &written {
        println!("wrote {}", cfg.out.join(w).display());
    }
    let summary = RolloutSummary {
        checkpoint: display_path(cfg, &dir),
        episode: args.episode,
        psnr: scores,
        media: written,
    };
    reporter.write(&cfg.out, &format!("rollout_ep{}", args.episode), cfg, &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct TrialSummary {
    trial: usize,
    success: bool,
    steps: usize,
    rounds: usize,
}

#[derive(Serialize)]
struct PlanSummary {
    dynamics: DynamicsKind,
    checkpoint: Option<String>,
    trials: Vec<TrialSummary>,
    successes: usize,
    success_rate: f64,
}

/// Trial `i` of the configured push tasks, with the simulator as dynamics
/// when `stack` is `None`.
pub fn plan_trial(cfg: &RunConfig, i: usize, stack: Option<&GhvaeStack>) -> CliResult<(PushTask, Transcript)> {
    let trial_seed = seed::derive(cfg.plan_seed(), i as u64);
    let task = cfg.plan.task.generate(seed::derive(trial_seed, 0))?;
    let request = cfg.plan_request(seed::derive(trial_seed, 1));
    let transcript = match stack {
        None => plan_episode(&task, &OracleDynamics, &request)?,
        Some(stack) => {
            let dynamics = LearnedDynamics {
                stack,
                context: cfg.context,
                seed: seed::derive(trial_seed, 2),
                chunk: PLAN_CHUNK,
            };
            plan_episode(&task, &dynamics, &request)?
        }
    };
    Ok((task, transcript))
}

fn plan(cfg: &RunConfig, args: &PlanArgs) -> CliResult<()> {
    let reporter = Reporter::start("plan");
    let kind = args.dynamics.unwrap_or(cfg.plan.dynamics);
    let trials = args.trials.unwrap_or(cfg.plan.trials);
    if trials == 0 {
        return Err(CliError::Invalid("trials must be at least 1".into()));
    }
    let learned = match kind {
        DynamicsKind::Oracle => None,
        DynamicsKind::Learned => Some(checkpoint_for(cfg, args.checkpoint.as_ref())?),
    };
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let (task, transcript) = plan_trial(cfg, i, learned.as_ref().map(|(_, s)| s))?;
        let mut row = vec![task.goal_image.clone()];
        row.extend(transcript.frames.iter().cloned());
        let path = cfg.out.join("media").join(format!("plan_trial{i}.png"));
        media::write_png(&media::grid(&[row], 2)?, &path)?;
        println!(
            "trial {i}: {} after {} steps",
            if transcript.success { "reached" } else { "missed" },
            transcript.steps
        );
        out.push(TrialSummary {
            trial: i,
            success: transcript.success,
            steps: transcript.steps,
            rounds: transcript.plans.len(),
        });
    }
    let successes = out.iter().filter(|t| t.success).count();
    println!("{successes}/{trials} goals reached with {kind:?} dynamics");
    let summary = PlanSummary {
        dynamics: kind,
        checkpoint: learned.as_ref().map(|(d, _)| display_path(cfg, d)),
        success_rate: successes as f64 / trials as f64,
        successes,
        trials: out,
    };
    reporter.write(&cfg.out, "plan", cfg, &summary)?;
    Ok(())
}

fn default_kernel() -> usize {
    ModelConfig::default().kernel_size
}

/// A bare ladder to cost, without training settings.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LadderInput {
    image: ImageSpec,
    levels: Vec<LevelChannels>,
    #[serde(default = "default_kernel")]
    kernel_size: usize,
    #[serde(default)]
    action_dim: usize,
}

/// A checkpoint manifest, a ladder, or a full run config, in that order.
fn memory_input(cfg: &RunConfig, input: Option<&PathBuf>) -> CliResult<(ghvae_core::model::Ladder, ModelConfig)> {
    let Some(path) = input else {
        return Ok((cfg.ladder()?, cfg.model()));
    };
    if path.is_dir() {
        let m = read_manifest(path)?;
        return Ok((m.ladder(), m.config));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(m) = serde_json::from_str::<CheckpointManifest>(&text) {
        return Ok((m.ladder(), m.config));
    }
    if let Ok(l) = serde_json::from_str::<LadderInput>(&text) {
        let channels: Vec<(usize, usize)> = l.levels.iter().map(|c| (c.hidden, c.latent)).collect();
        let ladder = ghvae_core::model::Ladder::from_channels(l.image, &channels)?;
        let model = ModelConfig {
            kernel_size: l.kernel_size,
            action_dim: l.action_dim,
            ..ModelConfig::default()
        };
        model.validate()?;
        return Ok((ladder, model));
    }
    match serde_json::from_str::<RunConfig>(&text) {
        Ok(rc) => {
            rc.validate()?;
            Ok((rc.ladder()?, rc.model()))
        }
        Err(e) => Err(CliError::Invalid(format!(
            "{} is neither a checkpoint manifest, a ladder nor a run config: {e}",
            path.display()
        ))),
    }
}

#[derive(Serialize)]
struct MemorySummary {
    batch: usize,
    dtype_bytes: usize,
    schedule: Schedule,
    greedy: Vec<MemBreakdown>,
    e2e: MemBreakdown,
    savings: SavingsRow,
    curve: Option<Vec<SavingsRow>>,
}

fn mib(bytes: usize) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn memory_report(cfg: &RunConfig, args: &MemoryArgs) -> CliResult<()> {
    let reporter = Reporter::start("memory-report");
    if args.dtype_bytes == 0 || args.batch == Some(0) {
        return Err(CliError::Invalid("batch and dtype-bytes must be at least 1".into()));
    }
    let (ladder, model) = memory_input(cfg, args.input.as_ref())?;
    let desc = memory::describe_ladder(&ladder, &model);
    let batch = args.batch.unwrap_or(cfg.batch_size);
    let schedule = Schedule::of(cfg.window());
    let greedy = (1..=ladder.depth())
        .map(|k| memory::estimate(&desc, MemMode::Greedy { phase: k }, batch, schedule, args.dtype_bytes))
        .collect::<ghvae_core::Result<Vec<_>>>()?;
    let e2e = memory::estimate(&desc, MemMode::E2e, batch, schedule, args.dtype_bytes)?;
    let savings = memory::savings(&desc, batch, schedule, args.dtype_bytes)?;
    println!(
        "batch {batch}, {} context + {} predicted frames, {}-byte values",
        cfg.context, cfg.horizon, args.dtype_bytes
    );
    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>12} {:>10}",
        "mode", "params", "grads", "adam", "activations", "total MiB"
    );
    let rows = greedy
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("phase {}", i + 1), b))
        .chain(std::iter::once(("e2e".to_string(), &e2e)));
    for (label, b) in rows {
        println!(
            "{:<10} {:>10.3} {:>10.3} {:>10.3} {:>12.3} {:>10.3}",
            label,
            mib(b.params_bytes),
            mib(b.grads_bytes),
            mib(b.optimizer_bytes),
            mib(b.activations_bytes),
            mib(b.total_bytes)
        );
    }
    println!(
        "greedy peak {:.3} MiB at phase {}, end-to-end {:.3} MiB: {:.1}% saved",
        mib(savings.greedy_peak_bytes),
        savings.peak_phase,
        mib(savings.e2e_bytes),
        100.0 * savings.savings
    );
    let curve = if args.curve {
        let rows = memory::savings_curve(
            memory::default_family,
            1..=6,
            ModelConfig::default(),
            args.batch.unwrap_or(memory::DEFAULT_BATCH),
            Schedule::of(memory::DEFAULT_WINDOW),
            args.dtype_bytes,
        )?;
        println!("\nsavings against depth, default ladder family:");
        print!("{}", memory::savings_table(&rows));
        Some(rows)
    } else {
        None
    };
    let summary = MemorySummary {
        batch,
        dtype_bytes: args.dtype_bytes,
        schedule,
        greedy,
        e2e,
        savings,
        curve,
    };
    reporter.write(&cfg.out, "memory", cfg, &summary)?;
    Ok(())
}

/// Pairs of Gaussians checked for nonnegative KL, and their dimension.
const KL_PAIRS: usize = 1000;
const KL_DIM: usize = 16;

#[derive(Serialize)]
struct VerifySummary {
    gradients: Vec<CheckOutcome>,
    kl_monte_carlo: KlMonteCarlo,
    kl_z_score: f64,
    kl_min_over_pairs: f64,
    /// Largest `elbo - log evidence` over the random miniatures.
    elbo_max_gap: f64,
    sigma_post: f64,
    passed: bool,
}

fn verify(cfg: &RunConfig, args: &VerifyArgs) -> CliResult<()> {
    let reporter = Reporter::start("verify");
    if args.instances == 0 || args.kl_samples < 2 || args.miniatures == 0 {
        return Err(CliError::Invalid("verify needs at least one instance, two samples and one miniature".into()));
    }
    let s = cfg.verify_seed();
    let gradients = verify::gradient_suite(args.instances, seed::derive(s, 0))?;
    let kl = verify::kl_monte_carlo(KL_DIM, args.kl_samples, seed::derive(s, 1))?;
    let kl_min = verify::kl_min_over_pairs(KL_PAIRS, KL_DIM, seed::derive(s, 2))?;
    let gaps = verify::elbo_gaps(args.miniatures, seed::derive(s, 3))?;
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut failed = Vec::new();
    for g in &gradients {
        println!(
            "{} gradient {:<24} worst relative error {:.2e}",
            if g.passed { "ok  " } else { "FAIL" },
            g.name,
            g.worst
        );
        if !g.passed {
            failed.push(format!("gradient of {}", g.name));
        }
    }
    let z = kl.z_score();
    let checks = [
        (z < 3.0, format!("KL closed form {:.6} vs Monte Carlo {:.6} (z = {z:.2})", kl.closed_form, kl.estimate)),
        (kl_min >= 0.0, format!("smallest KL over {KL_PAIRS} random pairs {kl_min:.3e}")),
        (max_gap <= 1e-6, format!("largest elbo - log evidence over {} miniatures {max_gap:.3e}", gaps.len())),
    ];
    for (ok, line) in &checks {
        println!("{} {line}", if *ok { "ok  " } else { "FAIL" });
        if !ok {
            failed.push(line.clone());
        }
    }
    println!("posterior std {}", cfg.sigma_post);
    let summary = VerifySummary {
        gradients,
        kl_z_score: z,
        kl_monte_carlo: kl,
        kl_min_over_pairs: kl_min,
        elbo_max_gap: max_gap,
        sigma_post: cfg.sigma_post,
        passed: failed.is_empty(),
    };
    reporter.write(&cfg.out, "verify", cfg, &summary)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("verification failed: {}", failed.join("; "))))
    }
}
