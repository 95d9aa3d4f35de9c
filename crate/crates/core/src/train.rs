//! Teacher training: SGD with momentum on real-valued master weights,
//! quantized on the fly in the forward pass.

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, Metrics};
use crate::network::{NetworkSpec, TeacherNet};
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) at whose start the rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train on the first `n` samples only.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.05,
            lr_decay_epochs: vec![2],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            max_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch statistics".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate, momentum or weight decay out of range".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning-rate decay must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + g + decay * p`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub(crate) struct Momentum<T> {
    velocity: Vec<T>,
}

impl<T: Scalar> Momentum<T> {
    pub(crate) fn new(len: usize) -> Self {
        Self { velocity: vec![T::zero(); len] }
    }

    pub(crate) fn step(&mut self, params: &mut [T], grad: &[T], lr: T, momentum: T, decay: T) {
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = momentum * *v + g + decay * *p;
            *p -= lr * *v;
        }
    }
}

/// Adam with bias correction; `beta1` doubles as the momentum setting.
pub(crate) struct Adam<T> {
    first: Vec<T>,
    second: Vec<T>,
    beta1_t: T,
    beta2_t: T,
}

impl<T: Scalar> Adam<T> {
    const BETA2: f64 = 0.999;
    const EPSILON: f64 = 1e-8;

    pub(crate) fn new(len: usize) -> Self {
        Self { first: vec![T::zero(); len], second: vec![T::zero(); len], beta1_t: T::one(), beta2_t: T::one() }
    }

    pub(crate) fn step(&mut self, params: &mut [T], grad: &[T], lr: T, beta1: T) {
        let beta2 = T::from_f64(Self::BETA2);
        let eps = T::from_f64(Self::EPSILON);
        self.beta1_t = self.beta1_t * beta1;
        self.beta2_t = self.beta2_t * beta2;
        let (c1, c2) = (T::one() - self.beta1_t, T::one() - self.beta2_t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
            *m = beta1 * *m + (T::one() - beta1) * g;
            *v = beta2 * *v + (T::one() - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training cross-entropy.
    pub loss: f64,
    /// Running accuracy of the train-mode forward passes.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    pub test: Option<Metrics>,
}

/// Softmax cross-entropy: mean loss, gradient w.r.t. the logits, and the
/// number of correct top-1 predictions.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, usize)> {
    let n = logits.batch();
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} logit rows for {} labels", labels.len())));
    }
    let k = logits.len() / n;
    let inv_n = T::one() / T::from_i64(n as i64);
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = T::zero();
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&l| Float::exp(l - max)).collect();
        let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
        loss += Float::ln(sum) + max - row[label];
        correct += usize::from(argmax(row) == label);
        for (j, e) in exps.into_iter().enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((e / sum - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?, correct))
}

struct Optimizer<T> {
    weights: Vec<Momentum<T>>,
    gamma: Vec<Momentum<T>>,
    beta: Vec<Momentum<T>>,
}

/// Train a teacher from a seeded initialization. `observer` sees every
/// finished epoch.
pub fn train_teacher<T: Real>(
    spec: NetworkSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochStats),
) -> Result<(TeacherNet<T>, TrainReport)> {
    cfg.validate()?;
    if data.classes() != spec.classes {
        return Err(Error::Data(format!("dataset has {} classes, network {}", data.classes(), spec.classes)));
    }
    let input_shape = spec.input_shape.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = TeacherNet::<T>::init(spec, &mut rng)?;
    let mut opt = Optimizer {
        weights: net.blocks.iter().map(|b| Momentum::new(b.weight().len())).collect(),
        gamma: net.blocks.iter().map(|b| Momentum::new(b.bn().map_or(0, |bn| bn.channels()))).collect(),
        beta: net.blocks.iter().map(|b| Momentum::new(b.bn().map_or(0, |bn| bn.channels()))).collect(),
    };
    let train = match cfg.max_samples {
        Some(n) => data.take(n)?,
        None => data.clone(),
    };
    let momentum = T::from_f64(cfg.momentum);
    let decay = T::from_f64(cfg.weight_decay);
    let mut report = TrainReport { epochs: Vec::new(), train_accuracy: 0.0, test: None };
    for epoch in 0..cfg.epochs {
        let lr_f = cfg.learning_rate_at(epoch);
        let lr = T::from_f64(lr_f);
        let order = train.shuffled(&mut rng);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0, 0, 0);
        for rows in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let x = train.batch::<T>(rows, &input_shape)?;
            let labels = train.batch_labels(rows);
            let (logits, _, caches) = net.forward_train(&x).map_err(|e| match e {
                Error::Numeric(reason) | Error::Range(reason) => Error::Training { epoch, reason },
                other => other,
            })?;
            let (loss, mut grad, ok) = softmax_cross_entropy(&logits, &labels)?;
            if !Float::is_finite(loss) {
                return Err(Error::Training { epoch, reason: format!("loss {loss:?} after {batches} batches") });
            }
            loss_sum += loss.to_f64();
            correct += ok;
            seen += rows.len();
            batches += 1;
            for (i, block) in net.blocks.iter_mut().enumerate().rev() {
                let g = block.backward(&grad, &caches[i])?;
                opt.weights[i].step(block.weight_mut().data_mut(), g.weight.data(), lr, momentum, decay);
                if let (Some(bn), Some(dg), Some(db)) = (block.bn_mut(), &g.gamma, &g.beta) {
                    opt.gamma[i].step(&mut bn.gamma, dg, lr, momentum, T::zero());
                    opt.beta[i].step(&mut bn.beta, db, lr, momentum, T::zero());
                }
                grad = g.input;
            }
            if let Some(b) = net.blocks.iter().find(|b| !b.weight().all_finite()) {
                return Err(Error::Training { epoch, reason: format!("block {} weights are not finite", b.spec.index) });
            }
        }
        if batches == 0 {
            return Err(Error::Data("training set yields no batch of two or more samples".into()));
        }
        let stats = EpochStats {
            epoch,
            learning_rate: lr_f,
            loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / seen as f64,
        };
        observer(&stats);
        report.train_accuracy = stats.train_accuracy;
        report.epochs.push(stats);
    }
    net.snap_to_grid()?;
    if let Some(test) = test {
        report.test = Some(evaluate(&net, test)?);
    }
    Ok((net, report))
}
