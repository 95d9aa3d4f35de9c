//! Progressive tandem distillation of a batchnorm teacher into its
//! batchnorm-free student.
//!
//! Stage 1 fits each block's integer scale against the teacher's post-BN
//! activations. Stage 2 then trains the student one block at a time on the
//! L2 distance to the teacher's block output, freezing every finished block.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{check_duality, NetworkSpec, StudentNet, TeacherNet};
use crate::quant::ScaleFactor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Adam;

/// Where a Stage-2 block takes its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Input {
    /// The teacher's frozen activation of the previous block.
    TeacherPrefix,
    /// The frozen student prefix.
    StudentPrefix,
}

impl fmt::Display for Stage2Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage2Input::TeacherPrefix => "teacher_prefix",
            Stage2Input::StudentPrefix => "student_prefix",
        })
    }
}

impl FromStr for Stage2Input {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_prefix" => Ok(Stage2Input::TeacherPrefix),
            "student_prefix" => Ok(Stage2Input::StudentPrefix),
            other => Err(Error::Config(format!("unknown stage-2 input {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub batch_size: usize,
    /// Batches in the Stage-1 calibration set; the same rows score Stage 2.
    pub calibration_batches: usize,
    /// Gradient passes over the calibration set after fitting each scale.
    pub stage1_weight_steps: usize,
    pub stage1_learning_rate: f64,
    pub stage2_epochs: usize,
    pub stage2_learning_rate: f64,
    pub momentum: f64,
    /// Samples per Stage-2 epoch; all training samples when `None`.
    pub stage2_samples: Option<usize>,
    pub stage2_input: Stage2Input,
    /// Relative loss improvement below which an epoch counts as stalled.
    pub threshold: f64,
    /// Stalled epochs tolerated before a stage stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            calibration_batches: 8,
            stage1_weight_steps: 0,
            stage1_learning_rate: 0.01,
            stage2_epochs: 2,
            stage2_learning_rate: 0.01,
            momentum: 0.9,
            stage2_samples: None,
            stage2_input: Stage2Input::TeacherPrefix,
            threshold: 1e-3,
            patience: 1,
            seed: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("convergence threshold must be positive".into()));
        }
        if self.batch_size < 1 || self.calibration_batches < 1 {
            return Err(Error::Config("batch size and calibration batches must be positive".into()));
        }
        if !(self.stage1_learning_rate > 0.0) || !(self.stage2_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Outcome of one stage on one block. Losses are summed squared errors
/// averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    /// 1 for scale fitting, 2 for tandem training.
    pub stage: u8,
    pub layer: usize,
    pub final_loss: f64,
    pub alpha: u32,
    pub epochs: usize,
    pub trajectory: Vec<f64>,
    /// Stage 1: residual with a unit scale. Stage 2: loss before training.
    pub baseline_loss: f64,
    /// Stage 1: the student activation was all zero and the scale defaulted to 1.
    pub degenerate: bool,
    /// Stage 2: training did not beat the starting weights, which were kept.
    pub reverted: bool,
}

impl StageReport {
    /// One plain-text record, fields in declaration order.
    pub fn to_record(&self) -> String {
        let traj: Vec<String> = self.trajectory.iter().map(|v| v.to_string()).collect();
        format!(
            "stage={} layer={} final_loss={} alpha={} epochs={} trajectory={} baseline_loss={} degenerate={} reverted={}",
            self.stage,
            self.layer,
            self.final_loss,
            self.alpha,
            self.epochs,
            if traj.is_empty() { "-".to_string() } else { traj.join(",") },
            self.baseline_loss,
            self.degenerate,
            self.reverted
        )
    }

    pub fn parse_record(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("stage record: bad {what} in {line:?}"));
        let mut fields = std::collections::BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad("field"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(k));
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
        let trajectory = match get("trajectory")? {
            "-" => Vec::new(),
            t => t.split(',').map(|v| v.parse::<f64>().map_err(|_| bad("trajectory"))).collect::<Result<_>>()?,
        };
        Ok(Self {
            stage: get("stage")?.parse().map_err(|_| bad("stage"))?,
            layer: get("layer")?.parse().map_err(|_| bad("layer"))?,
            final_loss: num("final_loss")?,
            alpha: get("alpha")?.parse().map_err(|_| bad("alpha"))?,
            epochs: get("epochs")?.parse().map_err(|_| bad("epochs"))?,
            trajectory,
            baseline_loss: num("baseline_loss")?,
            degenerate: get("degenerate")?.parse().map_err(|_| bad("degenerate"))?,
            reverted: get("reverted")?.parse().map_err(|_| bad("reverted"))?,
        })
    }
}

/// `||t - alpha * s||^2`.
pub fn alpha_loss<T: Scalar>(t: &Tensor<T>, s: &Tensor<T>, alpha: i64) -> Result<T> {
    let a = T::from_i64(alpha);
    let scaled = s.map(|v| a * v);
    t.sum_sq_diff(&scaled)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Integer scale minimizing `||t - alpha * s||^2` over `alpha >= 1`.
pub fn fit_alpha<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<ScaleFactor> {
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", teacher.shape(), student.shape())));
    }
    alpha_from_moments(dot(teacher.data(), student.data()), dot(student.data(), student.data()))
}

/// Scale from the moments `ts = <t, s>` and `ss = <s, s>`: the better of the
/// two integers around `ts / ss`, the smaller one on a tie.
pub fn alpha_from_moments<T: Scalar>(ts: T, ss: T) -> Result<ScaleFactor> {
    if !(ss > T::zero()) {
        return Err(Error::Degenerate("student activation is all zero".into()));
    }
    let lower = (ts / ss).floor();
    let two = T::from_i64(2);
    // loss(lower) - loss(lower + 1)
    let gap = two * ts - (two * lower + T::one()) * ss;
    let best = if gap <= T::zero() { lower } else { lower + T::one() };
    let alpha = if best < T::one() {
        1
    } else if best > T::from_i64(u32::MAX as i64) {
        u32::MAX as i64
    } else {
        best.to_integer().ok_or_else(|| Error::Degenerate(format!("scale {best:?} is not an integer")))?
    };
    ScaleFactor::new(alpha)
}

fn check_nets<T: Scalar>(teacher: &TeacherNet<T>, student: &StudentNet<T>) -> Result<()> {
    check_duality(teacher.spec(), student.spec())
}

/// Input of block `layer` for the batch `x`, given the teacher's outputs of
/// blocks `0..layer`.
fn block_input<'a, T: Scalar>(x: &'a Tensor<T>, teacher_outputs: &'a [Tensor<T>], layer: usize) -> &'a Tensor<T> {
    if layer == 0 {
        x
    } else {
        &teacher_outputs[layer - 1]
    }
}

/// Fit every block's scale on calibration batches; optionally refine the
/// weights against the same loss. Scales are fixed afterwards.
pub fn stage1_init<T: Scalar>(
    teacher: &TeacherNet<T>,
    student: &mut StudentNet<T>,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    check_nets(teacher, student)?;
    let shape = teacher.spec().input_shape.clone();
    let mut xs = Vec::new();
    let mut outputs = Vec::new();
    let mut post_norms = Vec::new();
    for rows in data.sample_batches(cfg.seed, cfg.calibration_batches, cfg.batch_size) {
        let x = data.batch::<T>(&rows, &shape)?;
        let (_, acts) = teacher.forward_eval(&x)?;
        outputs.push(acts.iter().map(|a| a.output.clone()).collect::<Vec<_>>());
        post_norms.push(acts.into_iter().map(|a| a.post_norm).collect::<Vec<_>>());
        xs.push(x);
    }
    let samples = xs.iter().map(|x| x.batch()).sum::<usize>() as f64;
    let residual = |student: &StudentNet<T>, layer: usize, alpha: i64| -> Result<f64> {
        let mut total = 0.0;
        for b in 0..xs.len() {
            let s = student.blocks[layer].pre_norm(block_input(&xs[b], &outputs[b], layer))?;
            total += alpha_loss(&post_norms[b][layer], &s, alpha)?.to_f64();
        }
        Ok(total / samples)
    };
    let mut reports = Vec::with_capacity(student.depth());
    for layer in 0..student.depth() {
        let (mut ts, mut ss) = (T::zero(), T::zero());
        for b in 0..xs.len() {
            let s = student.blocks[layer].pre_norm(block_input(&xs[b], &outputs[b], layer))?;
            let t = &post_norms[b][layer];
            ts += dot(t.data(), s.data());
            ss += dot(s.data(), s.data());
        }
        let (alpha, degenerate) = match alpha_from_moments(ts, ss) {
            Ok(a) => (a, false),
            Err(Error::Degenerate(_)) => (ScaleFactor::ONE, true),
            Err(e) => return Err(e),
        };
        let a = alpha.get() as i64;
        let baseline_loss = residual(student, layer, 1)?;
        let mut trajectory = vec![residual(student, layer, a)?];
        if cfg.stage1_weight_steps > 0 {
            let mut opt = Adam::new(student.blocks[layer].weight().len());
            let lr = T::from_f64(cfg.stage1_learning_rate);
            let momentum = T::from_f64(cfg.momentum);
            let at = T::from_i64(a);
            for _ in 0..cfg.stage1_weight_steps {
                let block = &mut student.blocks[layer];
                for b in 0..xs.len() {
                    let x = block_input(&xs[b], &outputs[b], layer);
                    let s = block.pre_norm(x)?;
                    let k = T::from_i64(2) * at / T::from_i64(x.batch() as i64);
                    let grad = s.zip_map(&post_norms[b][layer], |sv, tv| k * (at * sv - tv))?;
                    let dw = block.linear_weight_grad(x, &grad)?;
                    opt.step(block.weight_mut().data_mut(), dw.data(), lr, momentum);
                }
                let loss = residual(student, layer, a)?;
                if !loss.is_finite() {
                    return Err(Error::Stage { layer, reason: "stage-1 weight refinement diverged".into() });
                }
                trajectory.push(loss);
            }
        }
        student.blocks[layer].set_alpha(alpha)?;
        reports.push(StageReport {
            stage: 1,
            layer,
            final_loss: *trajectory.last().expect("non-empty"),
            alpha: alpha.get(),
            epochs: cfg.stage1_weight_steps,
            trajectory,
            baseline_loss,
            degenerate,
            reverted: false,
        });
    }
    Ok(reports)
}

/// Block input and target for Stage 2.
fn stage2_pair<T: Scalar>(
    teacher: &TeacherNet<T>,
    student: &StudentNet<T>,
    layer: usize,
    x: &Tensor<T>,
    mode: Stage2Input,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let acts = teacher.forward_eval_upto(x, layer)?;
    let target = acts[layer].output.clone();
    let input = match (layer, mode) {
        (0, _) => x.clone(),
        (_, Stage2Input::TeacherPrefix) => acts[layer - 1].output.clone(),
        (_, Stage2Input::StudentPrefix) => student.forward(x, Some(layer - 1))?.0,
    };
    Ok((input, target))
}

/// Train block `layer` alone on `||teacher output - student output||^2`,
/// then quantize and freeze it.
pub fn stage2_train_layer<T: Scalar>(
    layer: usize,
    teacher: &TeacherNet<T>,
    student: &mut StudentNet<T>,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    check_nets(teacher, student)?;
    if layer >= student.depth() {
        return Err(Error::Config(format!("layer {layer} past depth {}", student.depth())));
    }
    if let Some(j) = (0..layer).find(|&j| !student.is_frozen(j)) {
        return Err(Error::State(format!("layer {j} must be frozen before training layer {layer}")));
    }
    let alpha = student.blocks[layer]
        .alpha()
        .ok_or_else(|| Error::State(format!("layer {layer} has no scale factor")))?;
    let prefix = student.checksum(layer)?;
    let shape = teacher.spec().input_shape.clone();
    let diverged = |reason: String| Error::Stage { layer, reason };

    let mut scoring = Vec::new();
    for rows in data.sample_batches(cfg.seed, cfg.calibration_batches, cfg.batch_size) {
        let x = data.batch::<T>(&rows, &shape)?;
        scoring.push(stage2_pair(teacher, student, layer, &x, cfg.stage2_input)?);
    }
    let samples = scoring.iter().map(|(x, _)| x.batch()).sum::<usize>() as f64;
    let score = |student: &StudentNet<T>| -> Result<f64> {
        let mut total = 0.0;
        for (input, target) in &scoring {
            total += student.blocks[layer].forward(input)?.output.sum_sq_diff(target)?.to_f64();
        }
        Ok(total / samples)
    };

    let baseline_loss = score(student)?;
    let start = student.blocks[layer].weight().clone();
    let mut trajectory = Vec::new();
    if baseline_loss > 0.0 {
        let lr = T::from_f64(cfg.stage2_learning_rate);
        let momentum = T::from_f64(cfg.momentum);
        let mut opt = Adam::new(start.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + layer as u64));
        let mut stalled = 0;
        for _ in 0..cfg.stage2_epochs {
            let mut order = data.shuffled(&mut rng);
            if let Some(n) = cfg.stage2_samples {
                order.truncate(n);
            }
            let (mut loss_sum, mut seen) = (0.0, 0usize);
            for rows in order.chunks(cfg.batch_size) {
                let x = data.batch::<T>(rows, &shape)?;
                let (input, target) = stage2_pair(teacher, student, layer, &x, cfg.stage2_input)?;
                let block = &mut student.blocks[layer];
                let (out, cache) = block.forward_train(&input)?;
                let diff = out.output.zip_map(&target, |y, t| y - t)?;
                let scale = T::from_i64(2) / T::from_i64(rows.len() as i64);
                loss_sum += diff.data().iter().fold(T::zero(), |a, &d| a + d * d).to_f64();
                seen += rows.len();
                let grads = block.backward(&diff.map(|d| scale * d), &cache)?;
                opt.step(block.weight_mut().data_mut(), grads.weight.data(), lr, momentum);
                if !block.weight().all_finite() {
                    return Err(diverged("weights are not finite".into()));
                }
            }
            let loss = loss_sum / seen.max(1) as f64;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            let previous = trajectory.last().copied();
            trajectory.push(loss);
            if loss == 0.0 {
                break;
            }
            if let Some(prev) = previous {
                if (prev - loss) / prev < cfg.threshold {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                if stalled >= cfg.patience {
                    break;
                }
            }
        }
    }
    let epochs = trajectory.len();
    student.blocks[layer].set_alpha(alpha)?;
    student.freeze(layer)?;
    let mut final_loss = score(student)?;
    let mut reverted = false;
    if final_loss > baseline_loss {
        student.blocks[layer].set_weight(start)?;
        student.freeze(layer)?;
        final_loss = score(student)?;
        reverted = true;
    }
    if student.checksum(layer)? != prefix {
        return Err(Error::State(format!("frozen prefix changed while training layer {layer}")));
    }
    Ok(StageReport {
        stage: 2,
        layer,
        final_loss,
        alpha: alpha.get(),
        epochs,
        trajectory,
        baseline_loss,
        degenerate: false,
        reverted,
    })
}

/// Failure of [`run_distillation`] with every report finished before it.
#[derive(Debug)]
pub struct DistillError {
    pub error: Error,
    pub reports: Vec<StageReport>,
}

impl fmt::Display for DistillError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} completed stage reports)", self.error, self.reports.len())
    }
}

impl std::error::Error for DistillError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Stage 1 over all blocks, Stage 2 for each block in order, then a fully
/// frozen student. `observer` sees each report as it is produced.
pub fn run_distillation<T: Scalar>(
    teacher: &TeacherNet<T>,
    spec: &NetworkSpec,
    data: &Dataset,
    cfg: &DistillConfig,
    mut observer: impl FnMut(&StageReport),
) -> std::result::Result<(StudentNet<T>, Vec<StageReport>), DistillError> {
    let mut reports = Vec::new();
    let fail = |error: Error, reports: &Vec<StageReport>| DistillError { error, reports: reports.clone() };
    if let Err(e) = check_duality(teacher.spec(), spec) {
        return Err(fail(e, &reports));
    }
    let mut student = StudentNet::from_teacher(teacher).map_err(|e| fail(e, &reports))?;
    for r in stage1_init(teacher, &mut student, data, cfg).map_err(|e| fail(e, &reports))? {
        observer(&r);
        reports.push(r);
    }
    for layer in 0..student.depth() {
        let r = stage2_train_layer(layer, teacher, &mut student, data, cfg).map_err(|e| fail(e, &reports))?;
        observer(&r);
        reports.push(r);
    }
    if !student.is_fully_frozen() {
        return Err(fail(Error::State("student not fully frozen after distillation".into()), &reports));
    }
    Ok((student, reports))
}

#[cfg(test)]
mod tests;
