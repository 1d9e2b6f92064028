//! Command-line entry point wiring the configuration file to the pipeline:
//! reference-gait generation, retargeting, teacher training, student
//! distillation, and evaluation.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime
//! failure. Set `LOCOLAB_LOG=debug` (or `info`) for extra diagnostics.

use clap::{Parser, Subcommand};
use locolab_core::adaptation::distill;
use locolab_core::bundle::{BundleKind, Checkpoint};
use locolab_core::config::{ConfigError, EvalCell, RunConfig};
use locolab_core::eval::{run_eval, EvalAgent};
use locolab_core::motion::{load_clip, mirror, retarget, save_clip, synth_gait, MotionClip};
use locolab_core::ppo::{train_teacher, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "locolab",
    about = "Planar quadruped locomotion learning laboratory",
    version
)]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force single-threaded execution for bitwise reproducibility.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override the output directory for checkpoints, logs, and reports.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Validate and print the resolved configuration without side effects.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic reference gait clips (plus mirrored variants).
    GenMocap,
    /// Retarget a clip onto the configured morphology.
    Retarget {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Mirror a clip left/right.
    Mirror {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Phase 1: train the privileged teacher policy.
    TrainTeacher {
        /// Resume from a training-state file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase 2: distill the history predictor from a frozen teacher.
    Distill {
        /// Teacher bundle produced by train-teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the evaluation suite and write metrics.csv / report.csv.
    Evaluate {
        /// Bundle to evaluate (student by default, teacher with --path-mode).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Action path: student (history predictor) or teacher (privileged).
        #[arg(long, default_value = "student")]
        path_mode: String,
        /// Evaluate a scripted agent instead of a bundle:
        /// always-falls | oracle | stands.
        #[arg(long)]
        scripted: Option<String>,
        /// Restrict the suite to these cells: "kind:difficulty:command"
        /// entries separated by commas.
        #[arg(long)]
        cells: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LOCOLAB_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Configuration problems exit 1, runtime failures 2.
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    if let Some(out_dir) = &cli.out_dir {
        config.paths.out_dir = out_dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = load_config(&cli)?;
    println!("# resolved configuration");
    println!("{}", config.to_toml());
    if cli.dry_run {
        println!("dry run: configuration is valid, nothing executed");
        return Ok(ExitCode::SUCCESS);
    }
    match cli.command {
        Command::GenMocap => cmd_gen_mocap(&config),
        Command::Retarget { input, output } => cmd_retarget(&config, &input, &output),
        Command::Mirror { input, output } => cmd_mirror(&input, &output),
        Command::TrainTeacher { resume } => cmd_train_teacher(&config, resume.as_deref()),
        Command::Distill { teacher } => cmd_distill(&config, teacher.as_deref()),
        Command::Evaluate {
            bundle,
            path_mode,
            scripted,
            cells,
        } => cmd_evaluate(
            &config,
            bundle.as_deref(),
            &path_mode,
            scripted.as_deref(),
            cells.as_deref(),
        ),
    }
}

fn cmd_gen_mocap(config: &RunConfig) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&config.paths.clips_dir)?;
    let mut written = Vec::new();
    for (name, params) in config.gaits.presets() {
        let clip = synth_gait(
            &params,
            &config.morphology,
            config.gaits.frames,
            config.gaits.frame_rate,
        )?;
        clip.validate(&config.morphology)?;
        let path = config.paths.clips_dir.join(format!("{name}.clip"));
        save_clip(&clip, &path)?;
        written.push(path);
        if config.gaits.mirrored {
            let path = config.paths.clips_dir.join(format!("{name}_mirrored.clip"));
            save_clip(&mirror(&clip), &path)?;
            written.push(path);
        }
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!("{} clips in {}", written.len(), config.paths.clips_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_retarget(config: &RunConfig, input: &Path, output: &Path) -> anyhow::Result<ExitCode> {
    let clip = load_clip(input)?;
    let out = retarget(&clip, &config.morphology)?;
    out.validate(&config.morphology)?;
    save_clip(&out, output)?;
    println!(
        "retargeted {} ({} frames, leg length {} -> {}) to {}",
        input.display(),
        out.frames.len(),
        clip.leg_length,
        out.leg_length,
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_mirror(input: &Path, output: &Path) -> anyhow::Result<ExitCode> {
    let clip = load_clip(input)?;
    save_clip(&mirror(&clip), output)?;
    println!("mirrored {} to {}", input.display(), output.display());
    Ok(ExitCode::SUCCESS)
}

fn load_clips(config: &RunConfig) -> anyhow::Result<Vec<MotionClip>> {
    let dir = &config.paths.clips_dir;
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "clip"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    if paths.is_empty() && config.amp.enabled {
        anyhow::bail!(
            "no .clip files in {} — run `locolab gen-mocap` first (or disable [amp])",
            dir.display()
        );
    }
    let mut clips = Vec::with_capacity(paths.len());
    for path in &paths {
        clips.push(load_clip(path)?);
    }
    log::info!("loaded {} clips from {}", clips.len(), dir.display());
    Ok(clips)
}

fn cmd_train_teacher(config: &RunConfig, resume: Option<&Path>) -> anyhow::Result<ExitCode> {
    let clips = load_clips(config)?;
    std::fs::create_dir_all(&config.paths.out_dir)?;
    let log_path = config.paths.out_dir.join("train_log.csv");
    let state_path = config.paths.out_dir.join("train_state.bin");
    let bundle_path = config.paths.out_dir.join("teacher.bundle");

    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::load_state(config, &clips, path)?;
            println!("resumed from {} at iteration {}", path.display(), t.iteration);
            t
        }
        None => Trainer::new(config, &clips)?,
    };

    let mut log_file: Box<dyn std::io::Write> = if trainer.iteration > 0 {
        Box::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?,
        )
    } else {
        Box::new(std::fs::File::create(&log_path)?)
    };

    let total = config.ppo.iterations;
    let started = std::time::Instant::now();
    let stats = train_teacher(
        &mut trainer,
        &mut log_file,
        |t| {
            t.save_state(&state_path)?;
            t.checkpoint().save(&bundle_path)?;
            Ok(())
        },
        |it| {
            if it.iteration % 10 == 0 || it.iteration == total {
                println!(
                    "iter {:>5}/{total}  task {:.3}  style {:.3}  track {:.1}%  disc {:.3}  [{:.0}s]",
                    it.iteration,
                    it.mean_task_reward,
                    it.mean_style_reward,
                    100.0 * it.mean_tracking_ratio,
                    it.report.disc_loss,
                    started.elapsed().as_secs_f64()
                );
            }
        },
    )?;
    // A zero-iteration smoke run still produces a valid bundle.
    trainer.checkpoint().save(&bundle_path)?;
    trainer.save_state(&state_path)?;

    println!(
        "trained {} iterations in {:.0}s; bundle at {}, log at {}",
        stats.len(),
        started.elapsed().as_secs_f64(),
        bundle_path.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_distill(config: &RunConfig, teacher: Option<&Path>) -> anyhow::Result<ExitCode> {
    let default_path = config.paths.out_dir.join("teacher.bundle");
    let teacher_path = teacher.unwrap_or(&default_path);
    let teacher_ck = Checkpoint::load(teacher_path)?;
    if !matches!(teacher_ck.kind, BundleKind::Teacher) {
        anyhow::bail!(
            "{} is not a teacher bundle; distillation needs the phase-1 output",
            teacher_path.display()
        );
    }
    let started = std::time::Instant::now();
    let (student, report) = distill(&teacher_ck, config)?;
    std::fs::create_dir_all(&config.paths.out_dir)?;
    let student_path = config.paths.out_dir.join("student.bundle");
    student.save(&student_path)?;

    let log_path = config.paths.out_dir.join("distill_log.csv");
    let mut log = String::from("epoch,train_mse,val_mse\n");
    log.push_str(&format!("0,,{}\n", report.initial_val_mse));
    for (i, (t, v)) in report
        .epoch_train_mse
        .iter()
        .zip(&report.epoch_val_mse)
        .enumerate()
    {
        log.push_str(&format!("{},{t},{v}\n", i + 1));
    }
    std::fs::write(&log_path, log)?;

    println!(
        "distilled in {:.0}s: val MSE {} -> {} over {} epochs; student at {}",
        started.elapsed().as_secs_f64(),
        report.initial_val_mse,
        report.final_val_mse(),
        report.epoch_val_mse.len(),
        student_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_cells(text: &str) -> anyhow::Result<Vec<EvalCell>> {
    let mut cells = Vec::new();
    for part in text.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            anyhow::bail!("cell '{part}' is not kind:difficulty:command");
        }
        cells.push(EvalCell {
            kind: fields[0].parse().map_err(|e: String| anyhow::anyhow!(e))?,
            difficulty: fields[1].parse()?,
            command: fields[2].parse()?,
        });
    }
    Ok(cells)
}

fn cmd_evaluate(
    config: &RunConfig,
    bundle: Option<&Path>,
    path_mode: &str,
    scripted: Option<&str>,
    cells: Option<&str>,
) -> anyhow::Result<ExitCode> {
    let mut config = config.clone();
    if let Some(cells) = cells {
        config.eval.cells = parse_cells(cells)?;
        config.validate()?;
    }

    let loaded;
    let agent = match scripted {
        Some(name) => EvalAgent::Scripted(name.parse().map_err(|e: String| anyhow::anyhow!(e))?),
        None => {
            let default_path = config.paths.out_dir.join("student.bundle");
            let path = bundle.unwrap_or(&default_path);
            loaded = Checkpoint::load(path)?;
            match path_mode {
                "student" => {
                    if let BundleKind::Student { teacher_policy_checksum } = loaded.kind {
                        locolab_core::adaptation::verify_student(&loaded, teacher_policy_checksum)?;
                    }
                    EvalAgent::Student(&loaded)
                }
                "teacher" => EvalAgent::Teacher(&loaded),
                other => anyhow::bail!("unknown path mode '{other}' (use student or teacher)"),
            }
        }
    };

    let started = std::time::Instant::now();
    let report = run_eval(&config, &agent)?;
    std::fs::create_dir_all(&config.paths.out_dir)?;
    let metrics_path = config.paths.out_dir.join("metrics.csv");
    let report_path = config.paths.out_dir.join("report.csv");
    std::fs::write(&metrics_path, report.metrics_csv())?;
    std::fs::write(&report_path, report.report_csv())?;

    println!("{}", report.table());
    println!(
        "{} trials in {:.0}s; wrote {} and {}",
        report.trials.len(),
        started.elapsed().as_secs_f64(),
        metrics_path.display(),
        report_path.display()
    );

    if let Some(gate) = config.eval.gate_min_success {
        let worst = report
            .rows
            .iter()
            .map(|r| r.success_rate)
            .fold(f64::INFINITY, f64::min);
        if worst < gate {
            eprintln!("success-rate gate failed: worst cell {worst} < {gate}");
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}
