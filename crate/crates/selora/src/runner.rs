//! CLI entry points: run, sweep, report, selftest, and the artifact files
//! they write.
//!
//! A run directory holds exactly five files: `effective_config.json`,
//! `run.json`, `events.jsonl`, `loss_curve.csv`, `rank_trajectory.csv`.
//! `report` adds `rank_report.csv` next to them. A sweep writes one run
//! directory per lambda plus `sweep_summary.csv` at the top level. Wall time
//! never enters `run.json`, so reruns of the same config are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, TaskConfig};
use crate::error::{Error, Result};
use crate::fisher::RatioOrientation;
use crate::harness::denoiser::{gen_toy_denoiser_task, ToyDenoiserSpec};
use crate::harness::teacher::{gen_linear_teacher, LinearHeadsNet, LinearTeacherSpec};
use crate::harness::train::{rank_report, train, RunReport, TrainConfig};

#[derive(Parser)]
#[command(
    name = "selora",
    version,
    about = "Self-expanding low-rank adapter experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run and write its artifacts.
    Run {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the run artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured Fisher-ratio orientation.
        #[arg(long, value_enum)]
        ratio_orientation: Option<OrientationArg>,
        /// Overwrite an existing completed run directory.
        #[arg(long)]
        force: bool,
        /// Progress lines on stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Execute one run per lambda in the config's sweep block.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ratio_orientation: Option<OrientationArg>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        verbose: bool,
        /// Parallel sweep workers (runs are independent).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a completed run directory to stdout.
    Report {
        /// Directory previously written by `run` or one sweep entry.
        dir: PathBuf,
    },
    /// Built-in smoke test of the run pipeline and its failure paths.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrientationArg {
    ExpOverOrig,
    PaperLiteral,
}

impl From<OrientationArg> for RatioOrientation {
    fn from(a: OrientationArg) -> Self {
        match a {
            OrientationArg::ExpOverOrig => RatioOrientation::ExpOverOrig,
            OrientationArg::PaperLiteral => RatioOrientation::PaperLiteral,
        }
    }
}

/// Parse arguments, dispatch, and map errors to process exit codes.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            ratio_orientation,
            force,
            verbose,
        } => {
            let cfg = load_with_overrides(&config, seed, ratio_orientation)?;
            run_command(&cfg, &out, force, verbose)
        }
        Command::Sweep {
            config,
            out,
            seed,
            ratio_orientation,
            force,
            verbose,
            jobs,
        } => {
            let cfg = load_with_overrides(&config, seed, ratio_orientation)?;
            sweep_command(&cfg, &out, force, verbose, jobs)
        }
        Command::Report { dir } => report_command(&dir),
        Command::Selftest => selftest_command(),
    }
}

fn load_with_overrides(
    path: &Path,
    seed: Option<u64>,
    orientation: Option<OrientationArg>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = orientation {
        cfg.policy.ratio_orientation = o.into();
    }
    Ok(cfg)
}

fn train_config(cfg: &ExperimentConfig, verbose: bool) -> TrainConfig {
    TrainConfig {
        total_steps: cfg.train.total_steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        policy: cfg.policy(),
        orientation: cfg.policy.ratio_orientation,
        seed: cfg.train.seed,
        baseline_mode: cfg.train.baseline_mode,
        eval_interval: cfg.train.eval_interval,
        inject_non_finite_at_step: cfg.train.inject_non_finite_at_step,
        verbose,
    }
}

/// Build the configured task and train on it. The single `train.seed` drives
/// task generation, adapter initialization, and batch sampling; the derived
/// RNG streams keep them independent.
pub fn execute(cfg: &ExperimentConfig, verbose: bool) -> Result<RunReport> {
    if cfg.policy.lambda < 1.0 {
        eprintln!(
            "warning: lambda {} < 1 accepts every expansion test (always-expand)",
            cfg.policy.lambda
        );
    }
    let tc = train_config(cfg, verbose);
    match &cfg.task {
        TaskConfig::LinearTeacher(t) => {
            let spec = LinearTeacherSpec {
                layer_dims: t.layer_dims.clone(),
                true_ranks: t.true_ranks.clone(),
                noise_std: t.noise_std,
                n_samples: t.n_samples,
                seed: cfg.train.seed,
            };
            let task = gen_linear_teacher(&spec)?;
            let mut net = LinearHeadsNet::build(
                &task,
                &cfg.train.baseline_mode,
                cfg.train.max_rank,
                cfg.train.seed,
            )?;
            train(&mut net, &task.dataset, &tc)
        }
        TaskConfig::ToyDenoiser(d) => {
            let spec = ToyDenoiserSpec {
                image_dim: d.image_dim,
                text_dim: d.text_dim,
                hidden_dim: d.hidden_dim,
                n_attention_blocks: d.n_attention_blocks,
                vocab_size: d.vocab_size,
                condition_strength: d.condition_strength,
                n_samples: d.n_samples,
                pretrain_steps: d.pretrain_steps,
                seed: cfg.train.seed,
            };
            let (mut net, data) =
                gen_toy_denoiser_task(&spec, &cfg.train.baseline_mode, cfg.train.max_rank)?;
            train(&mut net, &data, &tc)
        }
    }
}

/// One training run into `out`: guards the directory, trains, and writes the
/// five artifact files. A non-finite-loss abort leaves `diagnostic.json`
/// behind and propagates the error (exit code 2).
pub fn run_command(cfg: &ExperimentConfig, out: &Path, force: bool, verbose: bool) -> Result<()> {
    prepare_run_dir(out, force)?;
    let report = match execute(cfg, verbose) {
        Ok(r) => r,
        Err(e) => {
            write_diagnostic(out, &e)?;
            return Err(e);
        }
    };
    write_run_files(out, cfg, &report)?;
    eprintln!(
        "run complete: {} (final eval loss {}, total final rank {}, {:.1}s)",
        out.display(),
        report
            .final_eval_loss()
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        report.total_final_rank(),
        report.wall_time_seconds,
    );
    Ok(())
}

/// Row of `sweep_summary.csv`, one per lambda, in config order.
struct SweepRow {
    lambda: f64,
    report: RunReport,
}

/// One run per lambda into `out/lambda_<value>/`, plus `sweep_summary.csv`.
/// Runs are independent and execute on up to `jobs` worker threads; the
/// summary keeps the config's lambda order regardless of completion order.
pub fn sweep_command(
    cfg: &ExperimentConfig,
    out: &Path,
    force: bool,
    verbose: bool,
    jobs: usize,
) -> Result<()> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config {
        path: "sweep".into(),
        message: "config has no sweep block; `run` executes a single config".into(),
    })?;
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let lambdas = sweep.lambdas.clone();

    // Per-lambda effective config: the sweep block collapses into the
    // single lambda that the run actually used.
    let sub_configs: Vec<ExperimentConfig> = lambdas
        .iter()
        .map(|&l| {
            let mut sub = cfg.clone();
            sub.policy.lambda = l;
            sub.sweep = None;
            sub
        })
        .collect();
    let dirs: Vec<PathBuf> = lambdas
        .iter()
        .map(|&l| out.join(format!("lambda_{}", lambda_label(l))))
        .collect();
    fs::create_dir_all(out)?;
    for dir in &dirs {
        prepare_run_dir(dir, force)?;
    }

    let n = lambdas.len();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunReport>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let workers = jobs.min(n);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = run_command(&sub_configs[i], &dirs[i], force, verbose);
                let report = result.and_then(|()| read_run_json(&dirs[i]));
                *slots[i].lock().unwrap() = Some(report);
            });
        }
    });

    let mut rows = Vec::with_capacity(n);
    for (i, slot) in slots.into_iter().enumerate() {
        let report = slot
            .into_inner()
            .unwrap()
            .expect("sweep worker finished without a result")?;
        rows.push(SweepRow {
            lambda: lambdas[i],
            report,
        });
    }

    let mut csv = String::from("lambda,total_final_rank,final_eval_loss,param_count,seconds\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.3}",
            lambda_label(row.lambda),
            row.report.total_final_rank(),
            row.report
                .final_eval_loss()
                .map(|l| l.to_string())
                .unwrap_or_else(|| "nan".into()),
            row.report.final_param_count,
            row.report.wall_time_seconds,
        );
    }
    fs::write(out.join("sweep_summary.csv"), csv)?;
    eprintln!("sweep complete: {} ({} lambdas)", out.display(), n);
    Ok(())
}

/// Human-readable summary of a completed run; also emits `rank_report.csv`.
pub fn report_command(dir: &Path) -> Result<()> {
    let report = read_run_json(dir)?;
    let rows = rank_report(&report);

    // One rendering for the share column: the stdout table and the CSV must
    // agree cell for cell.
    let share = |s: f64| format!("{s:.4}");

    let mut csv = String::from("layer_id,final_rank,param_count,share\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.layer_id,
            r.final_rank,
            r.param_count,
            share(r.share)
        );
    }
    fs::write(dir.join("rank_report.csv"), csv)?;

    let id_width = rows
        .iter()
        .map(|r| r.layer_id.len())
        .chain(std::iter::once("layer_id".len()))
        .max()
        .unwrap_or(8);
    println!("{:<id_width$}  final_rank  param_count  share", "layer_id");
    for r in &rows {
        println!(
            "{:<id_width$}  {:>10}  {:>11}  {}",
            r.layer_id,
            r.final_rank,
            r.param_count,
            share(r.share)
        );
    }
    println!(
        "total final rank {}, trainable params {}",
        report.total_final_rank(),
        report.final_param_count
    );

    if report.expansion_events.is_empty() {
        println!("no expansions");
    } else {
        let mut events = report.expansion_events.clone();
        events.sort_by(|a, b| b.fi_ratio.total_cmp(&a.fi_ratio));
        println!("top expansions by fi_ratio:");
        for e in events.iter().take(5) {
            println!(
                "  step {:>6}  {}  {} -> {}  fi_ratio {:.6}",
                e.step, e.layer_id, e.old_rank, e.new_rank, e.fi_ratio
            );
        }
    }
    Ok(())
}

/// Smoke test: a tiny deterministic run twice (byte-identical `run.json`,
/// all artifacts present), then a forced non-finite abort (diagnostic file,
/// numerical-failure error). Cleans up after itself.
pub fn selftest_command() -> Result<()> {
    let base = std::env::temp_dir().join(format!("selora-selftest-{}", std::process::id()));
    let result = selftest_in(&base);
    let _ = fs::remove_dir_all(&base);
    result?;
    println!("selftest passed");
    Ok(())
}

fn selftest_in(base: &Path) -> Result<()> {
    let mut cfg: ExperimentConfig = serde_json::from_str(
        r#"{
            "task": { "linear_teacher": {
                "layer_dims": [[8, 8], [8, 8]],
                "true_ranks": [0, 1],
                "n_samples": 40
            } },
            "train": { "total_steps": 60, "eval_interval": 20 },
            "policy": { "test_interval": 20 }
        }"#,
    )?;
    cfg.validate()?;

    let dir_a = base.join("a");
    let dir_b = base.join("b");
    run_command(&cfg, &dir_a, false, false)?;
    run_command(&cfg, &dir_b, false, false)?;
    for name in RUN_FILES {
        for dir in [&dir_a, &dir_b] {
            if !dir.join(name).exists() {
                return Err(Error::Usage(format!("selftest: {name} missing in {}", dir.display())));
            }
        }
    }
    let bytes_a = fs::read(dir_a.join("run.json"))?;
    let bytes_b = fs::read(dir_b.join("run.json"))?;
    if bytes_a != bytes_b {
        return Err(Error::Usage(
            "selftest: repeated runs produced different run.json bytes".into(),
        ));
    }
    println!("selftest: deterministic rerun ok ({} bytes)", bytes_a.len());

    let dir_c = base.join("c");
    cfg.train.inject_non_finite_at_step = Some(10);
    match run_command(&cfg, &dir_c, false, false) {
        Err(Error::NonFiniteLoss { step: 10, .. }) => {}
        Err(e) => {
            return Err(Error::Usage(format!(
                "selftest: expected a non-finite-loss abort, got: {e}"
            )))
        }
        Ok(()) => {
            return Err(Error::Usage(
                "selftest: injected non-finite loss did not abort the run".into(),
            ))
        }
    }
    if !dir_c.join("diagnostic.json").exists() {
        return Err(Error::Usage(
            "selftest: numerical abort left no diagnostic.json".into(),
        ));
    }
    println!("selftest: non-finite abort ok (diagnostic.json written)");
    Ok(())
}

/// The files every completed run directory contains.
pub const RUN_FILES: [&str; 5] = [
    "effective_config.json",
    "run.json",
    "events.jsonl",
    "loss_curve.csv",
    "rank_trajectory.csv",
];

/// Directory label for one sweep entry; finite lambdas use their shortest
/// round-trip decimal form, the infinite sentinel uses "inf".
pub fn lambda_label(lambda: f64) -> String {
    if lambda.is_finite() {
        format!("{lambda}")
    } else {
        "inf".into()
    }
}

fn prepare_run_dir(out: &Path, force: bool) -> Result<()> {
    if out.join("run.json").exists() && !force {
        return Err(Error::Usage(format!(
            "{} already contains a completed run; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn read_run_json(dir: &Path) -> Result<RunReport> {
    let path = dir.join("run.json");
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Usage(format!(
            "{} is not a completed run directory (run.json unreadable)",
            dir.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_diagnostic(out: &Path, e: &Error) -> Result<()> {
    let record = match e {
        Error::NonFiniteLoss { step, details } => serde_json::json!({
            "error": "non_finite_loss",
            "step": step,
            "details": details,
        }),
        other => serde_json::json!({
            "error": "run_failed",
            "details": other.to_string(),
        }),
    };
    fs::write(
        out.join("diagnostic.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(())
}

/// Write the five artifact files for a completed run.
pub fn write_run_files(out: &Path, cfg: &ExperimentConfig, report: &RunReport) -> Result<()> {
    fs::write(
        out.join("effective_config.json"),
        cfg.to_effective_json()? + "\n",
    )?;
    fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;

    let mut events = String::new();
    for e in &report.expansion_events {
        let _ = writeln!(events, "{}", serde_json::to_string(e)?);
    }
    fs::write(out.join("events.jsonl"), events)?;

    let mut loss = String::from("step,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(loss, "{},{}", i + 1, l);
    }
    fs::write(out.join("loss_curve.csv"), loss)?;

    let mut ranks = String::from("step,layer_id,rank\n");
    for p in &report.rank_trajectory {
        let _ = writeln!(ranks, "{},{},{}", p.step, p.layer_id, p.rank);
    }
    fs::write(out.join("rank_trajectory.csv"), ranks)?;
    Ok(())
}
