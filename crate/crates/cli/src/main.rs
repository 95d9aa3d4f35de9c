use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fiqnn::distill::Stage2Input;
use fiqnn::runtime::RequantMode;
use fiqnn_cli::trap::Workload;
use fiqnn_cli::verify::{verify, VerifyOptions};
use fiqnn_cli::*;

#[derive(Parser)]
#[command(name = "fiqnn", version, about = "BatchNorm-free integer quantized networks")]
struct Cli {
    /// Configuration file (key = value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training, distillation and calibration sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Requantization mode: exact_rational or multiply_shift.
    #[arg(long, global = true)]
    mode: Option<RequantMode>,
    /// Stage-2 input: teacher_prefix or student_prefix.
    #[arg(long = "stage2-input", global = true)]
    stage2_input: Option<Stage2Input>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the BatchNorm teacher and save teacher.ckpt.
    TrainTeacher,
    /// Distill the teacher into the BN-free student and save student.ckpt.
    Distill {
        /// Teacher checkpoint [default: <out>/teacher.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Export the frozen student to model.fiqn.
    Export {
        /// Student checkpoint [default: <out>/student.ckpt].
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Integer inference on test samples.
    Infer {
        /// Model file [default: <out>/model.fiqn].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of test samples to classify.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Write per-layer activations to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Top-1/top-5 error of a teacher, student or integer model file.
    Evaluate {
        /// Checkpoint or model file [default: <out>/model.fiqn].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Equivalence, deviation and float-trap checks on an exported model.
    Verify {
        /// Model file [default: <out>/model.fiqn].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Student checkpoint to compare against [default: <out>/student.ckpt].
        #[arg(long)]
        student: Option<PathBuf>,
        /// Limit the test samples checked.
        #[arg(long)]
        samples: Option<usize>,
        /// Samples compared in exact rational arithmetic.
        #[arg(long, default_value_t = 500)]
        exact_samples: usize,
        /// Samples single-stepped by the float trap in each mode.
        #[arg(long, default_value_t = 1)]
        trap_samples: usize,
    },
    /// Train, distill, export, evaluate and verify.
    Run,
    #[command(name = "__float-trap", hide = true)]
    FloatTrap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        workload: String,
    },
}

fn threads() -> Result<()> {
    if let Ok(v) = std::env::var("FIQNN_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            fiqnn::Error::Config(format!("FIQNN_THREADS must be a positive integer, got {v:?}"))
        })?;
        fiqnn::init_threads(n)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::FloatTrap { model, input, workload } = &cli.command {
        let w = match workload.as_str() {
            "infer" => Workload::Infer,
            "control" => Workload::Control,
            other => anyhow::bail!("unknown workload {other:?}"),
        };
        return float_trap_child(model, input, w);
    }
    threads()?;
    let o = Overrides { seed: cli.seed, mode: cli.mode, stage2_input: cli.stage2_input };
    let cfg = load_config(cli.config.as_deref(), &o)?;
    let out = &cli.out;
    let stdout = std::io::stdout();
    let log = &mut stdout.lock();
    match cli.command {
        Command::TrainTeacher => {
            cmd_train_teacher(&cfg, out, log)?;
        }
        Command::Distill { teacher } => {
            cmd_distill(&cfg, out, &default_path(out, teacher, TEACHER_FILE), log)?;
        }
        Command::Export { student } => {
            cmd_export(out, &default_path(out, student, STUDENT_FILE), log)?;
        }
        Command::Infer { model, samples, trace } => {
            cmd_infer(&cfg, &default_path(out, model, MODEL_FILE), samples, trace.as_deref(), log)?;
        }
        Command::Evaluate { model } => {
            cmd_evaluate(&cfg, &default_path(out, model, MODEL_FILE), log)?;
        }
        Command::Verify { model, student, samples, exact_samples, trap_samples } => {
            let opts = VerifyOptions { samples, exact_samples, trap_samples, ..Default::default() };
            let exe = std::env::current_exe().context("locating the fiqnn binary")?;
            let report = verify(
                &cfg,
                &default_path(out, model, MODEL_FILE),
                &default_path(out, student, STUDENT_FILE),
                out,
                &exe,
                &opts,
            )?;
            write!(log, "{report}")?;
            if !report.passed() {
                return Err(VerifyFailed(report.failures()).into());
            }
        }
        Command::Run => {
            let exe = std::env::current_exe().context("locating the fiqnn binary")?;
            let report = cmd_run(&cfg, out, &exe, log)?;
            if !report.passed() {
                return Err(VerifyFailed(report.failures()).into());
            }
        }
        Command::FloatTrap { .. } => unreachable!(),
    }
    Ok(())
}
