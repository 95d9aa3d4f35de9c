//! The verification suite: file round trip, reference-vs-integer
//! equivalence, multiply-shift deviation and the float trap.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Result;
use fiqnn::config::RunConfig;
use fiqnn::eval::{argmax, EVAL_BATCH};
use fiqnn::network::StudentNet;
use fiqnn::runtime::{infer, mode_deviation, IntegerModel, IntegerRunner, RequantMode};
use fiqnn::{CodeKind, Exact, IntTensor};

use crate::trap::{self, Workload};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Test samples checked against the f64 reference and between modes;
    /// `None` checks the whole test set.
    pub samples: Option<usize>,
    /// Test samples also checked against the exact rational reference.
    pub exact_samples: usize,
    /// Run the float trap at all.
    pub float_trap: bool,
    /// Samples inferred under the float trap.
    pub trap_samples: usize,
    /// Largest fraction of samples whose prediction may change under
    /// multiply-shift.
    pub max_argmax_changes: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { samples: None, exact_samples: 500, float_trap: true, trap_samples: 1, max_argmax_changes: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Not runnable on this platform.
    Skip,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Hidden-layer code mismatches against the f64 reference, per layer.
    pub reference_mismatches: Vec<usize>,
    /// Logit scores that differ from the f64 reference logits scaled onto the
    /// score grid.
    pub reference_score_mismatches: usize,
    /// Samples whose snapped f64-reference and exact-mode predictions differ.
    pub reference_argmax_changes: usize,
    /// Samples compared against the exact rational reference, and mismatches.
    pub exact_samples: usize,
    pub exact_mismatches: usize,
    /// Largest per-layer code deviation between modes on shared inputs.
    pub mode_deviation: Vec<i64>,
    /// Largest per-layer code deviation between full runs in each mode.
    pub end_to_end_deviation: Vec<i64>,
    pub shift_argmax_changes: usize,
    pub samples: usize,
    pub float_ops: Option<u64>,
    pub traced_instructions: u64,
    pub control_float_ops: Option<u64>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != Outcome::Fail)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| c.outcome == Outcome::Fail).count()
    }

    fn push(&mut self, name: &'static str, pass: bool, detail: String) {
        let outcome = if pass { Outcome::Pass } else { Outcome::Fail };
        self.checks.push(Check { name, outcome, detail });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match c.outcome {
                Outcome::Pass => "PASS",
                Outcome::Fail => "FAIL",
                Outcome::Skip => "SKIP",
            };
            writeln!(f, "{tag} {:<22} {}", c.name, c.detail)?;
        }
        for c in &self.checks {
            writeln!(f, "verify check={} outcome={:?} {}", c.name, c.outcome, c.detail.replace(' ', "_"))?;
        }
        Ok(())
    }
}

/// Pixel codes in `path`, one model input after another.
pub fn read_codes(model: &IntegerModel, path: &Path) -> Result<IntTensor<u8>> {
    let bytes = fs::read(path)?;
    let per: usize = model.input_shape().iter().product();
    if bytes.is_empty() || bytes.len() % per != 0 {
        anyhow::bail!("{} does not hold whole inputs of {per} codes", path.display());
    }
    let mut shape = vec![bytes.len() / per];
    shape.extend_from_slice(model.input_shape());
    Ok(IntTensor::new(shape, bytes, model.input_bits(), CodeKind::Unsigned)?)
}

fn max_into(acc: &mut Vec<i64>, values: impl IntoIterator<Item = i64>) {
    for (i, v) in values.into_iter().enumerate() {
        if acc.len() <= i {
            acc.push(0);
        }
        acc[i] = acc[i].max(v);
    }
}

/// Run every check. `exe` is the `fiqnn` binary, used for the float trap;
/// scratch files go to `scratch`.
pub fn verify(
    cfg: &RunConfig,
    model_path: &Path,
    student_path: &Path,
    scratch: &Path,
    exe: &Path,
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let bytes = fs::read(model_path)?;
    let model = IntegerModel::from_bytes(&bytes)?;
    let same = model.to_bytes()? == bytes;
    report.push(
        "round-trip",
        same,
        format!("{} bytes, {} layers, no normalization records", bytes.len(), model.linear_layers().count()),
    );

    let student = StudentNet::<f64>::load(student_path)?;
    if fiqnn::runtime::export(&student)? != model {
        report.push("model-matches-student", false, "model is not the export of the student".into());
        return Ok(report);
    }
    let test = crate::test_set(cfg)?;
    let n = opts.samples.map_or(test.len(), |s| s.min(test.len()));
    report.samples = n;
    let rows: Vec<usize> = (0..n).collect();
    let exact_runner = IntegerRunner::new(&model, RequantMode::ExactRational)?;
    let shift_runner = IntegerRunner::new(&model, RequantMode::MultiplyShift)?;
    let levels: Vec<Option<i64>> =
        model.linear_layers().map(|l| l.output_bits.map(|b| (1i64 << b) - 1)).collect();
    report.reference_mismatches = vec![0; levels.len() - 1];
    let mut max_logit_gap = 0f64;
    for chunk in rows.chunks(EVAL_BATCH) {
        let (scores, trace) = exact_runner.trace(&test, chunk)?;
        let (shift_scores, shift_trace) = shift_runner.trace(&test, chunk)?;
        let x = test.batch::<f64>(chunk, model.input_shape())?;
        let (logits, acts) = student.forward(&x, None)?;
        for (l, (t, a)) in trace.iter().zip(&acts).enumerate() {
            if let Some(lv) = levels[l] {
                let bad = t.data().iter().zip(a.output.data()).filter(|(&c, &r)| c as f64 / lv as f64 != r).count();
                report.reference_mismatches[l] += bad;
            }
        }
        let (_, den) = *model.dequant_scales().last().expect("model has layers");
        let k = model.classes();
        for (s, r) in scores.data().chunks(k).zip(logits.data().chunks(k)) {
            let snapped: Vec<i64> = r.iter().map(|&ri| (ri * den as f64).round() as i64).collect();
            report.reference_argmax_changes += usize::from(argmax(s) != argmax(&snapped));
            report.reference_score_mismatches += s.iter().zip(&snapped).filter(|(a, b)| a != b).count();
            for (&si, &ri) in s.iter().zip(r) {
                max_logit_gap = max_logit_gap.max((si as f64 / den as f64 - ri).abs());
            }
        }
        for (a, b) in scores.data().chunks(k).zip(shift_scores.data().chunks(k)) {
            report.shift_argmax_changes += usize::from(argmax(a) != argmax(b));
        }
        let e2e = trace.iter().zip(&shift_trace).take(levels.len() - 1).map(|(a, b)| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
        });
        max_into(&mut report.end_to_end_deviation, e2e);
        max_into(&mut report.mode_deviation, mode_deviation(&model, &test.codes(chunk, model.input_shape())?)?);
    }
    let total_mismatch: usize = report.reference_mismatches.iter().sum();
    report.push(
        "reference-f64",
        total_mismatch == 0 && report.reference_score_mismatches == 0 && report.reference_argmax_changes == 0,
        format!(
            "{n} samples, hidden code mismatches {:?}, score mismatches {}, argmax changes {}, max logit gap {max_logit_gap:.3e}",
            report.reference_mismatches, report.reference_score_mismatches, report.reference_argmax_changes
        ),
    );

    let exact_student: StudentNet<Exact> = student.cast()?;
    let m = opts.exact_samples.min(n);
    report.exact_samples = m;
    let (_, den) = *model.dequant_scales().last().expect("model has layers");
    for chunk in rows[..m].chunks(50) {
        let (_, trace) = exact_runner.trace(&test, chunk)?;
        let (_, acts) = exact_student.forward(&test.batch::<Exact>(chunk, model.input_shape())?, None)?;
        for (l, (t, a)) in trace.iter().zip(&acts).enumerate() {
            let d = levels[l].unwrap_or(den);
            report.exact_mismatches += t.data().iter().zip(a.output.data()).filter(|(&c, &r)| Exact::new(c, d) != r).count();
        }
    }
    report.push(
        "reference-exact",
        report.exact_mismatches == 0,
        format!("{m} samples, every layer incl. logits, mismatches {}", report.exact_mismatches),
    );

    let changes = report.shift_argmax_changes as f64 / n.max(1) as f64;
    report.push(
        "multiply-shift",
        report.mode_deviation.iter().all(|&d| d <= 1) && changes <= opts.max_argmax_changes,
        format!(
            "per-layer max deviation {:?}, end-to-end {:?}, argmax changes {} ({:.3}%)",
            report.mode_deviation,
            report.end_to_end_deviation,
            report.shift_argmax_changes,
            100.0 * changes
        ),
    );

    if !opts.float_trap {
        return Ok(report);
    }
    if !trap::available() {
        report.checks.push(Check {
            name: "float-trap",
            outcome: Outcome::Skip,
            detail: "ptrace single-step needs x86_64 Linux; source audit only".into(),
        });
        return Ok(report);
    }
    fs::create_dir_all(scratch)?;
    let input = scratch.join("trap-input.bin");
    let t = opts.trap_samples.clamp(1, test.len());
    let trap_rows: Vec<usize> = (0..t).collect();
    fs::write(&input, test.codes(&trap_rows, model.input_shape())?.into_data())?;
    let sanity = infer(&model, &read_codes(&model, &input)?, RequantMode::ExactRational)?;
    debug_assert_eq!(sanity.shape()[0], t);
    let control = trap::trace(exe, model_path, &input, Workload::Control)?;
    let run = trap::trace(exe, model_path, &input, Workload::Infer)?;
    let _ = fs::remove_file(&input);
    report.float_ops = Some(run.float_ops);
    report.traced_instructions = run.instructions;
    report.control_float_ops = Some(control.float_ops);
    report.push(
        "float-trap",
        run.float_ops == 0 && control.float_ops > 0 && run.instructions > 0,
        format!(
            "{t} sample(s) in both modes: {} instructions single-stepped, {} float ops{}; control {} float ops",
            run.instructions,
            run.float_ops,
            if run.examples.is_empty() { String::new() } else { format!(" e.g. {}", run.examples.join(", ")) },
            control.float_ops
        ),
    );
    Ok(report)
}
