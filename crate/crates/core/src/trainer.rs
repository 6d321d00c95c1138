//! Cohort training: every student minimizes its cross-entropy plus the mean
//! Rényi divergence from its peers' predictions.
//!
//! For student `k` in a cohort of `K`:
//!
//! ```text
//! L_k = CE(P_k, y) + psi / (K - 1) * sum_{j != k} mean_batch D_alpha(P_j || P_k)
//! ```
//!
//! Peer predictions enter as constants, so the gradient only reaches `theta_k`.
//! Within a step students are updated in index order and student `k + 1`
//! already sees student `k`'s new parameters ([`UpdateMode::Sequential`]).

use crate::autodiff::{Tape, Var};
use crate::data::{batches, Batch, Dataset, SplitKind};
use crate::divergence::{cross_entropy, floor_log_probs, renyi_on_tape, DivergenceSpec, DEFAULT_EPSILON_FLOOR};
use crate::error::{config_err, Error, Result};
use crate::metrics::{top1_accuracy, EpochRecord};
use crate::models::StudentModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Student `k + 1` sees student `k`'s update from the same step.
    Sequential,
    /// All gradients are taken at the pre-step parameters.
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `D(P_peer || P_self)`.
    PeerToSelf,
    /// `D(P_self || P_peer)`.
    SelfToPeer,
}

/// Loss-side settings shared by every student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub divergence: DivergenceSpec,
    pub psi: f64,
    pub direction: Direction,
}

impl LossConfig {
    pub fn new(alpha: f64, psi: f64) -> Result<Self> {
        Ok(Self {
            divergence: DivergenceSpec::new(alpha)?,
            psi,
            direction: Direction::PeerToSelf,
        })
    }
}

/// SGD hyperparameters applied to a single student's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub clip_max_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub students: usize,
    pub alpha: f64,
    pub epsilon_floor: f64,
    pub psi: f64,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// 0-based epoch indices; epoch `e` trains at `lr * factor^(#milestones <= e)`.
    pub lr_decay_epochs: Vec<usize>,
    pub clip_max_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
    pub direction: Direction,
}

impl TrainConfig {
    /// Optimizer and schedule settings used for the CIFAR-style runs, on a
    /// cohort of two.
    pub fn new(alpha: f64, epochs: usize, seed: u64) -> Self {
        Self {
            students: 2,
            alpha,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            psi: 1.0,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            lr_decay_factor: 0.2,
            lr_decay_epochs: Vec::new(),
            clip_max_norm: Some(5.0),
            epochs,
            batch_size: 128,
            seed,
            update_mode: UpdateMode::Sequential,
            direction: Direction::PeerToSelf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.students == 0 {
            return Err(config_err("students", "need at least one student"));
        }
        self.divergence()?;
        if !(self.psi.is_finite() && self.psi >= 0.0) {
            return Err(config_err("psi", format!("{} must be finite and >= 0", self.psi)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(config_err("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err(
                "weight_decay",
                format!("{} must be >= 0", self.weight_decay),
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(config_err(
                "lr_decay_factor",
                format!("{} is outside (0, 1]", self.lr_decay_factor),
            ));
        }
        if let Some(c) = self.clip_max_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(config_err("clip_max_norm", format!("{c} must be positive")));
            }
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn divergence(&self) -> Result<DivergenceSpec> {
        DivergenceSpec::new(self.alpha)?.with_floor(self.epsilon_floor)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            divergence: self.divergence()?,
            psi: self.psi,
            direction: self.direction,
        })
    }

    pub fn sgd(&self) -> Sgd {
        Sgd {
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            clip_max_norm: self.clip_max_norm,
        }
    }

    /// Learning rate for a 0-based epoch index.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Initialization seed of student `k` in a run seeded with `run_seed`.
///
/// Student 0 of any cohort shares its initialization with the independent
/// run of the same seed, which pairs the comparisons.
pub fn student_seed(run_seed: u64, k: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(k as u64))
}

/// Shuffle seed of a 0-based epoch.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    splitmix64(splitmix64(run_seed).wrapping_add(epoch as u64))
}

/// Identical architectures, one seed per student.
pub fn init_cohort(layer_sizes: &[usize], config: &TrainConfig) -> Result<Vec<StudentModel>> {
    (0..config.students)
        .map(|k| StudentModel::init(layer_sizes, student_seed(config.seed, k)))
        .collect()
}

/// The recorded loss of one student on one batch.
#[derive(Debug, Clone)]
pub struct DmlLoss {
    pub total: Var,
    pub base: Var,
    /// Mean peer divergence before scaling by psi; `None` without peers or with psi = 0.
    pub divergence: Option<Var>,
    /// `psi * divergence`.
    pub scaled_divergence: Option<Var>,
    /// The student's parameter leaves, in storage order.
    pub params: Vec<Var>,
    /// Each peer's parameter leaves, recorded as constants.
    pub peer_params: Vec<Vec<Var>>,
}

/// Records student `k`'s mutual-learning loss on `tape`.
pub fn dml_loss(
    tape: &mut Tape,
    k: usize,
    x: &Tensor,
    y: &[usize],
    models: &[StudentModel],
    loss: &LossConfig,
) -> Result<DmlLoss> {
    if k >= models.len() {
        return Err(config_err(
            "student",
            format!("index {k} with {} students", models.len()),
        ));
    }
    let xv = tape.constant(x.clone());
    let own = models[k].forward(tape, xv, true)?;
    let own_lp = tape.log_softmax(own.logits)?;
    let base = cross_entropy(tape, own_lp, y)?;
    if models.len() == 1 || loss.psi == 0.0 {
        return Ok(DmlLoss {
            total: base,
            base,
            divergence: None,
            scaled_divergence: None,
            params: own.params,
            peer_params: Vec::new(),
        });
    }

    let floor = loss.divergence.epsilon_floor;
    let own_floored = floor_log_probs(tape, own_lp, floor)?;
    let mut sum: Option<Var> = None;
    let mut peer_params = Vec::with_capacity(models.len() - 1);
    for (j, peer) in models.iter().enumerate().filter(|(j, _)| *j != k) {
        let fwd = peer.forward(tape, xv, false).map_err(|e| match e {
            Error::ShapeMismatch { lhs, rhs, .. } => Error::ShapeMismatch {
                op: "peer forward",
                lhs,
                rhs,
            },
            other => other,
        })?;
        debug_assert!(!tape.requires_grad(fwd.logits), "peer {j} must be detached");
        let peer_lp = tape.log_softmax(fwd.logits)?;
        peer_params.push(fwd.params);
        let peer_floored = floor_log_probs(tape, peer_lp, floor)?;
        let rows = match loss.direction {
            Direction::PeerToSelf => renyi_on_tape(tape, peer_floored, own_floored, &loss.divergence)?,
            Direction::SelfToPeer => renyi_on_tape(tape, own_floored, peer_floored, &loss.divergence)?,
        };
        let batch_mean = tape.mean(rows, None)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, batch_mean)?,
            None => batch_mean,
        });
    }
    let divergence = tape.scale(sum.expect("at least one peer"), 1.0 / (models.len() - 1) as f64)?;
    let scaled = tape.scale(divergence, loss.psi)?;
    let total = tape.add(base, scaled)?;
    Ok(DmlLoss {
        total,
        base,
        divergence: Some(divergence),
        scaled_divergence: Some(scaled),
        params: own.params,
        peer_params,
    })
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

/// Momentum buffers for one student, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One SGD update. The raw loss gradient is clipped first, then weight
    /// decay and (Nesterov) momentum are applied:
    ///
    /// ```text
    /// g <- clip(g);  g <- g + wd * theta;  v <- mu * v + g
    /// step = g + mu * v  (Nesterov)  or  v
    /// theta <- theta - lr * step
    /// ```
    ///
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [Tensor], mut grads: Vec<Tensor>, sgd: &Sgd, lr: f64) -> Result<f64> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(config_err("optimizer", "parameter, gradient and buffer counts differ"));
        }
        for ((p, g), v) in params.iter().zip(&grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let norm = match sgd.clip_max_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt(),
        };
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(self.velocity.iter_mut()) {
            for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = grad + sgd.weight_decay * *theta;
                let update = if sgd.momentum > 0.0 {
                    *vel = sgd.momentum * *vel + d;
                    if sgd.nesterov {
                        d + sgd.momentum * *vel
                    } else {
                        *vel
                    }
                } else {
                    d
                };
                *theta -= lr * update;
            }
        }
        Ok(norm)
    }
}

/// Per-student outcome of one [`train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

fn student_gradients(
    k: usize,
    batch: &Batch,
    models: &[StudentModel],
    loss: &LossConfig,
    context: impl Fn() -> String,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let out = dml_loss(&mut tape, k, &batch.x, &batch.y, models, loss).map_err(|e| match e {
        Error::NonFinite { op } => Error::Diverged {
            context: format!("{} ({op})", context()),
            what: "forward value",
        },
        other => other,
    })?;
    let value = tape.value(out.total).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged {
            context: context(),
            what: "loss",
        });
    }
    tape.backward(out.total)?;
    let grads: Vec<Tensor> = out
        .params
        .iter()
        .zip(models[k].params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Diverged {
            context: context(),
            what: "gradient",
        });
    }
    Ok((value, grads))
}

/// One pass of the cohort over a shared batch.
pub fn train_step(
    models: &mut [StudentModel],
    states: &mut [OptimizerState],
    batch: &Batch,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    if models.len() != states.len() || models.len() != config.students {
        return Err(config_err(
            "students",
            format!("{} models, {} optimizer states", models.len(), states.len()),
        ));
    }
    let loss = config.loss_config()?;
    let sgd = config.sgd();
    let k_total = models.len();
    let mut report = StepReport {
        losses: vec![0.0; k_total],
        grad_norms: vec![0.0; k_total],
    };
    match config.update_mode {
        UpdateMode::Sequential => {
            for k in 0..k_total {
                let (value, grads) = student_gradients(k, batch, models, &loss, || format!("student {k}"))?;
                report.losses[k] = value;
                report.grad_norms[k] = states[k].step(models[k].params_mut(), grads, &sgd, lr)?;
            }
        }
        UpdateMode::Simultaneous => {
            let mut pending = Vec::with_capacity(k_total);
            for k in 0..k_total {
                pending.push(student_gradients(k, batch, models, &loss, || format!("student {k}"))?);
            }
            for (k, (value, grads)) in pending.into_iter().enumerate() {
                report.losses[k] = value;
                report.grad_norms[k] = states[k].step(models[k].params_mut(), grads, &sgd, lr)?;
            }
        }
    }
    Ok(report)
}

/// Test-split cross-entropy and top-1 accuracy (percent) of one model.
pub fn evaluate(model: &StudentModel, x: &Tensor, y: &[usize]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, false)?;
    let lp = tape.log_softmax(fwd.logits)?;
    let ce = cross_entropy(&mut tape, lp, y)?;
    Ok((tape.value(ce).data()[0], top1_accuracy(tape.value(fwd.logits), y)))
}

/// Trains the cohort for `config.epochs` epochs and returns one record per
/// epoch per student, ordered by epoch then student.
pub fn train(models: &mut [StudentModel], data: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if models.len() != config.students {
        return Err(config_err(
            "students",
            format!("config says {}, got {} models", config.students, models.len()),
        ));
    }
    if data.split().train.is_empty() || data.split().test.is_empty() {
        return Err(config_err("dataset", "train and test splits must be non-empty"));
    }
    for (k, m) in models.iter().enumerate() {
        if m.input_dim() != data.dim() || m.classes() != data.classes() {
            return Err(Error::ShapeMismatch {
                op: if k == 0 {
                    "model vs dataset"
                } else {
                    "peer model vs dataset"
                },
                lhs: vec![m.input_dim(), m.classes()],
                rhs: vec![data.dim(), data.classes()],
            });
        }
    }
    let (x_test, y_test) = data.subset(SplitKind::Test);
    let mut states: Vec<OptimizerState> = models.iter().map(|m| OptimizerState::new(m.params())).collect();
    let mut records = Vec::with_capacity(config.epochs * models.len());

    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut loss_sums = vec![0.0; models.len()];
        let mut seen = 0usize;
        for (step, batch) in batches(
            data,
            SplitKind::Train,
            config.batch_size,
            epoch_seed(config.seed, epoch),
        )?
        .iter()
        .enumerate()
        {
            let report = train_step(models, &mut states, batch, config, lr).map_err(|e| match e {
                Error::Diverged { context, what } => Error::Diverged {
                    context: format!("epoch {} step {step} {context}", epoch + 1),
                    what,
                },
                other => other,
            })?;
            let n = batch.indices.len();
            for (acc, l) in loss_sums.iter_mut().zip(&report.losses) {
                *acc += l * n as f64;
            }
            seen += n;
        }
        for (k, model) in models.iter().enumerate() {
            let (test_loss, test_acc) = evaluate(model, &x_test, &y_test)?;
            records.push(EpochRecord {
                epoch: epoch + 1,
                student: k,
                train_loss: loss_sums[k] / seen as f64,
                test_loss,
                test_acc,
            });
        }
    }
    Ok(records)
}
