//! Command implementations behind the `fiqnn` binary.

pub mod trap;
pub mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use fiqnn::config::RunConfig;
use fiqnn::data::Dataset;
use fiqnn::distill::{run_distillation, StageReport, Stage2Input};
use fiqnn::eval::{evaluate, Metrics};
use fiqnn::network::{StudentNet, TeacherNet};
use fiqnn::runtime::{export, format_trace, IntegerModel, IntegerRunner, RequantMode, KIND_INTEGER_MODEL, KIND_STUDENT, KIND_TEACHER};
use fiqnn::train::{train_teacher, TrainReport};
use fiqnn::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const MODEL_FILE: &str = "model.fiqn";
pub const CONFIG_FILE: &str = "run.cfg";
pub const STAGES_FILE: &str = "stages.txt";
pub const TRACE_FILE: &str = "trace.txt";

/// Networks are trained and distilled in single precision.
pub type Teacher = TeacherNet<f32>;
pub type Student = StudentNet<f32>;

/// Marker error for a failed verification suite.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verification check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

/// Process exit code for an error, by failure class.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY;
    }
    let core = e
        .downcast_ref::<Error>()
        .or_else(|| e.downcast_ref::<fiqnn::distill::DistillError>().map(|d| &d.error));
    match core {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Data(_)) => EXIT_DATA,
        Some(Error::Training { .. } | Error::Stage { .. } | Error::Degenerate(_) | Error::Numeric(_)) => EXIT_TRAINING,
        _ => EXIT_OTHER,
    }
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<RequantMode>,
    pub stage2_input: Option<Stage2Input>,
}

pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve_paths(Path::new(""))?;
            cfg
        }
    };
    if let Some(s) = o.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(s) = o.stage2_input {
        cfg.distill.stage2_input = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved configuration beside the run's outputs.
pub fn archive(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn data_error(e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Data(_) => e,
        other => Error::Data(other.to_string()),
    }
}

pub fn train_set(cfg: &RunConfig) -> Result<Dataset> {
    Ok(cfg.data.train_set(cfg.classes).map_err(data_error)?)
}

pub fn test_set(cfg: &RunConfig) -> Result<Dataset> {
    Ok(cfg.data.test_set(cfg.classes).map_err(data_error)?)
}

pub fn metrics_table(rows: &[(&str, Metrics)]) -> String {
    let mut s = format!("{:<10} {:>8} {:>9} {:>9} {:>9}\n", "model", "samples", "top1 err", "top5 err", "loss");
    for (name, m) in rows {
        s += &format!(
            "{:<10} {:>8} {:>8.2}% {:>8.2}% {:>9.4}\n",
            name,
            m.samples,
            100.0 * m.top1_error(),
            100.0 * m.top5_error(),
            m.loss
        );
    }
    s
}

pub fn metrics_record(name: &str, m: &Metrics) -> String {
    format!(
        "metrics model={name} samples={} top1_errors={} top5_errors={} top1_error={} top5_error={} loss={}",
        m.samples,
        m.top1_errors,
        m.top5_errors,
        m.top1_error(),
        m.top5_error(),
        m.loss
    )
}

pub fn print_metrics(log: &mut dyn Write, name: &str, m: &Metrics) -> Result<()> {
    write!(log, "{}", metrics_table(&[(name, *m)]))?;
    writeln!(log, "{}", metrics_record(name, m))?;
    Ok(())
}

pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<(Teacher, TrainReport)> {
    archive(cfg, out)?;
    let train = train_set(cfg)?;
    let test = test_set(cfg)?;
    writeln!(log, "training teacher on {} samples, testing on {}", train.len(), test.len())?;
    let start = Instant::now();
    let (teacher, report) = train_teacher::<f32>(cfg.network_spec()?, &train, Some(&test), &cfg.train, |e| {
        let _ = writeln!(
            log,
            "epoch {} lr={} loss={:.5} train_acc={:.4} elapsed={:.1}s",
            e.epoch,
            e.learning_rate,
            e.loss,
            e.train_accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    teacher.save(&out.join(TEACHER_FILE))?;
    if let Some(m) = &report.test {
        print_metrics(log, "teacher", m)?;
    }
    Ok((teacher, report))
}

pub fn cmd_distill(
    cfg: &RunConfig,
    out: &Path,
    teacher_path: &Path,
    log: &mut dyn Write,
) -> Result<(Student, Vec<StageReport>)> {
    archive(cfg, out)?;
    let teacher = Teacher::load(teacher_path).with_context(|| format!("loading {}", teacher_path.display()))?;
    let train = train_set(cfg)?;
    let spec = teacher.spec().to_student();
    let start = Instant::now();
    let result = run_distillation(&teacher, &spec, &train, &cfg.distill, |r| {
        let _ = writeln!(
            log,
            "stage {} layer {}: alpha={} loss {:.6} -> {:.6} epochs={}{}{} elapsed={:.1}s",
            r.stage,
            r.layer,
            r.alpha,
            r.baseline_loss,
            r.final_loss,
            r.epochs,
            if r.degenerate { " degenerate" } else { "" },
            if r.reverted { " reverted" } else { "" },
            start.elapsed().as_secs_f64()
        );
    });
    let (student, reports) = match result {
        Ok(ok) => ok,
        Err(e) => {
            write_stages(out, &e.reports)?;
            return Err(e.into());
        }
    };
    write_stages(out, &reports)?;
    student.save(&out.join(STUDENT_FILE))?;
    let test = test_set(cfg)?;
    print_metrics(log, "student", &evaluate(&student, &test)?)?;
    Ok((student, reports))
}

fn write_stages(out: &Path, reports: &[StageReport]) -> Result<()> {
    let text: String = reports.iter().map(|r| r.to_record() + "\n").collect();
    fs::write(out.join(STAGES_FILE), text)?;
    Ok(())
}

pub fn cmd_export(out: &Path, student_path: &Path, log: &mut dyn Write) -> Result<IntegerModel> {
    fs::create_dir_all(out)?;
    let student = Student::load(student_path).with_context(|| format!("loading {}", student_path.display()))?;
    let model = export(&student)?;
    let path = out.join(MODEL_FILE);
    model.save(&path)?;
    writeln!(log, "wrote {} ({} layers)", path.display(), model.linear_layers().count())?;
    for (i, l) in model.linear_layers().enumerate() {
        writeln!(
            log,
            "layer {i}: alpha={} scale={}/{} multiplier={} shift={}",
            l.alpha.get(),
            l.requant.numerator(),
            l.requant.denominator(),
            l.requant.multiplier(),
            l.requant.shift()
        )?;
    }
    Ok(model)
}

/// Predictions for the first `samples` test rows, optionally tracing every
/// layer to `trace`.
pub fn cmd_infer(
    cfg: &RunConfig,
    model_path: &Path,
    samples: usize,
    trace: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<usize>> {
    let model = IntegerModel::load(model_path)?;
    let test = test_set(cfg)?;
    let runner = IntegerRunner::new(&model, cfg.mode)?;
    let rows: Vec<usize> = (0..samples.min(test.len())).collect();
    let mut preds = Vec::new();
    let mut text = String::new();
    for chunk in rows.chunks(fiqnn::eval::EVAL_BATCH) {
        let (scores, layers) = runner.trace(&test, chunk)?;
        if trace.is_some() {
            text += &format_trace(chunk[0], &layers);
        }
        preds.extend(scores.data().chunks(model.classes()).map(fiqnn::eval::argmax));
    }
    if let Some(p) = trace {
        fs::write(p, text)?;
    }
    for (&r, p) in rows.iter().zip(&preds) {
        writeln!(log, "sample={r} prediction={p} label={}", test.labels()[r])?;
    }
    Ok(preds)
}

/// File kind byte of a model or checkpoint.
pub fn file_kind(path: &Path) -> Result<u8> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 8 || &bytes[..4] != fiqnn::runtime::MAGIC {
        return Err(Error::Format { offset: 0, reason: "not a FIQN file".into() }.into());
    }
    Ok(bytes[7])
}

/// Metrics of a teacher checkpoint, student checkpoint or integer model.
pub fn cmd_evaluate(cfg: &RunConfig, path: &Path, log: &mut dyn Write) -> Result<Metrics> {
    let test = test_set(cfg)?;
    let (name, m) = match file_kind(path)? {
        KIND_TEACHER => ("teacher", evaluate(&Teacher::load(path)?, &test)?),
        KIND_STUDENT => ("student", evaluate(&Student::load(path)?, &test)?),
        KIND_INTEGER_MODEL => {
            let model = IntegerModel::load(path)?;
            ("integer", evaluate(&IntegerRunner::new(&model, cfg.mode)?, &test)?)
        }
        k => return Err(Error::Format { offset: 7, reason: format!("unknown file kind {k}") }.into()),
    };
    print_metrics(log, name, &m)?;
    Ok(m)
}

/// Teacher, distillation, export, evaluation and verification in one go.
pub fn cmd_run(cfg: &RunConfig, out: &Path, exe: &Path, log: &mut dyn Write) -> Result<verify::VerifyReport> {
    let (teacher, _) = cmd_train_teacher(cfg, out, log)?;
    cmd_distill(cfg, out, &out.join(TEACHER_FILE), log)?;
    let model = cmd_export(out, &out.join(STUDENT_FILE), log)?;
    let test = test_set(cfg)?;
    let rows = [
        ("teacher", evaluate(&teacher, &test)?),
        ("student", evaluate(&Student::load(&out.join(STUDENT_FILE))?, &test)?),
        ("integer", evaluate(&IntegerRunner::new(&model, cfg.mode)?, &test)?),
    ];
    write!(log, "{}", metrics_table(&rows))?;
    for (n, m) in &rows {
        writeln!(log, "{}", metrics_record(n, m))?;
    }
    let opts = verify::VerifyOptions::default();
    let report = verify::verify(cfg, &out.join(MODEL_FILE), &out.join(STUDENT_FILE), out, exe, &opts)?;
    write!(log, "{report}")?;
    Ok(report)
}

/// Hidden child of the float trap: stop, run the workload, stop again.
pub fn float_trap_child(model_path: &Path, input: &Path, workload: trap::Workload) -> Result<()> {
    let model = IntegerModel::load(model_path)?;
    let x = verify::read_codes(&model, input)?;
    for mode in [RequantMode::ExactRational, RequantMode::MultiplyShift] {
        std::hint::black_box(fiqnn::runtime::infer(&model, &x, mode)?);
    }
    match workload {
        trap::Workload::Infer => {
            trap::marker_start()?;
            let exact = fiqnn::runtime::infer(&model, &x, RequantMode::ExactRational);
            let shift = fiqnn::runtime::infer(&model, &x, RequantMode::MultiplyShift);
            trap::marker_end();
            std::hint::black_box((exact?, shift?));
        }
        trap::Workload::Control => {
            let n = std::hint::black_box(x.len());
            trap::marker_start()?;
            let mut acc = 1.0f64;
            for i in 0..n.min(64) {
                acc = std::hint::black_box(acc * 1.5 + (i as f64).sqrt());
            }
            trap::marker_end();
            std::hint::black_box(acc);
        }
    }
    Ok(())
}

/// Path of a default artifact inside the output directory.
pub fn default_path(out: &Path, given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| out.join(name))
}
