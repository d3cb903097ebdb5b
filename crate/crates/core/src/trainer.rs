//! One training session of the frozen-head method: grow the bank, train
//! the new head on balanced current/memory minibatches with plateau LR
//! decay and early stopping, update the replay memory, then fit the bias
//! correction on the validation memory.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier_bank::{apply_bic_in_place, softmax_ce, BiCLayer, ClassifierBank, GradTarget};
use crate::datasets::{Dataset, LabeledExample, Session};
use crate::error::{Error, Result};
use crate::memory_buffer::{Partition, ReplayBuffer};
use crate::numerics::Rng;
use crate::parallel::Exec;

/// Minimum decrease that counts as an improvement of the validation loss.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Multiply by `lr_decay_factor` after `lr_patience` epochs without improvement.
    Plateau,
    /// `lr0 · exp_decay_rate^epoch`.
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub lr0: f64,
    pub stop_patience: usize,
    pub lr_patience: usize,
    pub lr_decay_factor: f64,
    pub exp_decay_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hidden_width: usize,
    pub use_activation: bool,
    pub val_fraction: f64,
    pub bic_epochs: usize,
    pub bic_lr: f64,
    /// Overrides the method's own schedule when set.
    pub lr_schedule: Option<LrSchedule>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            stop_patience: 10,
            lr_patience: 3,
            lr_decay_factor: 0.1,
            exp_decay_rate: 0.95,
            batch_size: 32,
            max_epochs: 200,
            hidden_width: 16,
            use_activation: true,
            val_fraction: 0.10,
            bic_epochs: 100,
            bic_lr: 0.001,
            lr_schedule: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidArgument(format!("session.{field}: {why}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor", format!("must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if !(self.exp_decay_rate > 0.0 && self.exp_decay_rate <= 1.0) {
            return bad("exp_decay_rate", format!("must lie in (0, 1], got {}", self.exp_decay_rate));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size", format!("must be even and >= 2, got {}", self.batch_size));
        }
        if self.stop_patience == 0 || self.lr_patience == 0 {
            return bad("stop_patience", "patience values must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be >= 1".into());
        }
        if self.hidden_width == 0 {
            return bad("hidden_width", "must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", format!("must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.bic_lr >= 0.0 && self.bic_lr.is_finite()) {
            return bad("bic_lr", format!("must be non-negative, got {}", self.bic_lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub buffer_train_counts: BTreeMap<usize, usize>,
    pub buffer_val_counts: BTreeMap<usize, usize>,
    /// Not part of serialized reports; it would break byte-for-byte reruns.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Where a minibatch example came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Current,
    Memory,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub example: &'a LabeledExample,
    pub source: Source,
}

/// Half the batch uniformly from `current`, half from the replay train
/// partition (all of it from `current` while the memory is empty), in
/// shuffled order.
pub fn compose_minibatch<'a>(
    current: &'a Dataset,
    buffer: &'a ReplayBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchItem<'a>>> {
    if current.is_empty() {
        return Err(Error::Empty("current training set"));
    }
    if !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} is odd")));
    }
    let n_current = if buffer.is_empty(Partition::Train) { batch_size } else { batch_size / 2 };
    let n = current.len();
    let picks: Vec<&LabeledExample> = if n_current <= n {
        rng.sample_indices(n, n_current).into_iter().map(|i| &current.examples()[i]).collect()
    } else {
        (0..n_current).map(|_| &current.examples()[rng.below(n)]).collect()
    };
    mix_with_memory(picks, buffer, batch_size - n_current, rng)
}

fn mix_with_memory<'a>(
    current: Vec<&'a LabeledExample>,
    buffer: &'a ReplayBuffer,
    n_memory: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchItem<'a>>> {
    let mut items: Vec<BatchItem<'a>> = current
        .into_iter()
        .map(|example| BatchItem { example, source: Source::Current })
        .collect();
    for example in buffer.sample_batch(Partition::Train, n_memory, rng)? {
        items.push(BatchItem { example, source: Source::Memory });
    }
    rng.shuffle(&mut items);
    Ok(items)
}

/// One epoch over `current`: a shuffled pass in chunks, each chunk topped
/// up with memory samples to form balanced minibatches.
pub(crate) fn replay_epoch<'a>(
    current: &'a Dataset,
    buffer: &'a ReplayBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<&'a LabeledExample>>> {
    if current.is_empty() {
        return Err(Error::Empty("current training set"));
    }
    let memory_empty = buffer.is_empty(Partition::Train);
    let chunk = if memory_empty { batch_size } else { batch_size / 2 };
    let mut order: Vec<usize> = (0..current.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(chunk)
        .map(|idx| {
            let picks = idx.iter().map(|&i| &current.examples()[i]).collect();
            let n_memory = if memory_empty { 0 } else { batch_size / 2 };
            Ok(mix_with_memory(picks, buffer, n_memory, rng)?
                .into_iter()
                .map(|b| b.example)
                .collect())
        })
        .collect()
}

/// Shuffled pass over a plain list of examples in chunks of `batch_size`.
pub(crate) fn plain_epoch<'a>(items: &'a [LabeledExample], batch_size: usize, rng: &mut Rng) -> Vec<Vec<&'a LabeledExample>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|idx| idx.iter().map(|&i| &items[i]).collect())
        .collect()
}

/// True iff the running minimum of `val_losses` has not improved by more
/// than [`IMPROVEMENT_EPS`] within the last `patience` entries.
pub fn should_stop(val_losses: &[f64], patience: usize) -> bool {
    match best_index(val_losses) {
        Some(best) => val_losses.len() - 1 - best >= patience,
        None => false,
    }
}

/// Index of the last strict improvement of the running minimum.
fn best_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b - IMPROVEMENT_EPS => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// A model the shared epoch loop can train and checkpoint.
pub(crate) trait Learner: Clone + Sync {
    /// One SGD step on `batch`; returns the batch-mean loss before the step.
    fn sgd_step(&mut self, batch: &[&LabeledExample], lr: f64) -> Result<f64>;
    /// Raw logits, no bias correction.
    fn raw_logits(&self, x: &[f64]) -> Vec<f64>;
    fn logit_position(&self, class: usize) -> Option<usize>;
}

impl Learner for ClassifierBank {
    fn sgd_step(&mut self, batch: &[&LabeledExample], lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads_for(batch, GradTarget::AllTrainable)?;
        self.apply_grads(&grads, lr)?;
        Ok(loss)
    }

    fn raw_logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_unchecked(x)
    }

    fn logit_position(&self, class: usize) -> Option<usize> {
        self.position_of(class)
    }
}

/// Mean cross-entropy of `model` over `examples`.
pub(crate) fn mean_loss<L: Learner>(model: &L, examples: &[&LabeledExample], exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let losses = exec.map(examples, |e| -> Result<f64> {
        let pos = model.logit_position(e.label).ok_or(Error::OutOfRange {
            index: e.label,
            len: 0,
        })?;
        Ok(softmax_ce(&model.raw_logits(e.features.data()), pos)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

pub(crate) struct FitOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Epoch loop shared by every method: SGD over the batches produced by
/// `epoch`, validation after each epoch, LR schedule, early stopping and
/// restoration of the best-validation parameters.
pub(crate) fn fit<'a, L, F>(
    model: &mut L,
    cfg: &SessionConfig,
    schedule: LrSchedule,
    val: &[&LabeledExample],
    rng: &mut Rng,
    mut epoch: F,
) -> Result<FitOutcome>
where
    L: Learner,
    F: FnMut(&mut Rng) -> Result<Vec<Vec<&'a LabeledExample>>>,
{
    let exec = Exec::default();
    let mut out = FitOutcome {
        epochs_run: 0,
        best_epoch: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        learning_rates: Vec::new(),
    };
    let mut lr = cfg.lr0;
    let mut best: Option<(f64, L)> = None;
    let mut plateau_wait = 0;

    for e in 0..cfg.max_epochs {
        let lr_epoch = match schedule {
            LrSchedule::Plateau => lr,
            LrSchedule::Exponential => cfg.lr0 * cfg.exp_decay_rate.powi(e as i32),
        };
        let batches = epoch(rng)?;
        let mut sum = 0.0;
        for batch in &batches {
            sum += model.sgd_step(batch, lr_epoch)?;
        }
        let v = mean_loss(model, val, exec)?;
        out.train_loss.push(sum / batches.len().max(1) as f64);
        out.val_loss.push(v);
        out.learning_rates.push(lr_epoch);
        out.epochs_run = e + 1;

        match &best {
            Some((b, _)) if v >= b - IMPROVEMENT_EPS => plateau_wait += 1,
            _ => {
                best = Some((v, model.clone()));
                out.best_epoch = e;
                plateau_wait = 0;
            }
        }
        if schedule == LrSchedule::Plateau && plateau_wait >= cfg.lr_patience {
            lr *= cfg.lr_decay_factor;
            plateau_wait = 0;
        }
        if should_stop(&out.val_loss, cfg.stop_patience) {
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(out)
}

/// Whether a session ends by fitting the bias-correction layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasCorrection {
    Fit,
    Skip,
}

/// Runs one session of the frozen-head method.
pub fn train_session(
    bank: &mut ClassifierBank,
    session: &Session,
    buffer: &mut ReplayBuffer,
    cfg: &SessionConfig,
    rng: &mut Rng,
) -> Result<SessionReport> {
    train_session_with(bank, session, buffer, cfg, BiasCorrection::Fit, rng)
}

pub fn train_session_with(
    bank: &mut ClassifierBank,
    session: &Session,
    buffer: &mut ReplayBuffer,
    cfg: &SessionConfig,
    bias: BiasCorrection,
    rng: &mut Rng,
) -> Result<SessionReport> {
    cfg.validate()?;
    let started = Instant::now();
    if session.train.is_empty() {
        return Err(Error::Empty("session training set"));
    }
    bank.add_classifier(&session.classes, cfg.hidden_width, cfg.use_activation, rng)?;

    let val: Vec<&LabeledExample> = session
        .val
        .examples()
        .iter()
        .chain(buffer.items(Partition::Val))
        .collect();
    let schedule = cfg.lr_schedule.unwrap_or(LrSchedule::Plateau);
    let outcome = {
        let memory: &ReplayBuffer = buffer;
        fit(bank, cfg, schedule, &val, rng, |r| replay_epoch(&session.train, memory, cfg.batch_size, r))?
    };
    if bank.freezes_previous() {
        bank.freeze_all();
    }

    buffer.update(Partition::Train, session.train.examples(), rng)?;
    buffer.update(Partition::Val, session.val.examples(), rng)?;

    let (alpha, beta) = match bias {
        BiasCorrection::Fit => fit_bic(bank, buffer, cfg)?,
        BiasCorrection::Skip => {
            bank.set_bic(None);
            (1.0, 0.0)
        }
    };
    Ok(SessionReport {
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        train_loss: outcome.train_loss,
        val_loss: outcome.val_loss,
        learning_rates: outcome.learning_rates,
        alpha,
        beta,
        buffer_train_counts: buffer.class_counts(Partition::Train),
        buffer_val_counts: buffer.class_counts(Partition::Val),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Logits and target position of one bias-correction training example.
#[derive(Clone, Debug)]
pub struct BicSample {
    pub logits: Vec<f64>,
    pub target: usize,
}

/// Mean loss of `softmax(apply_bic(o))` over `samples` and its gradient
/// with respect to `(α, β)`.
pub fn bic_loss_and_grads(samples: &[BicSample], logit_classes: &[usize], bic: &BiCLayer) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("bias-correction samples"));
    }
    let (mut loss, mut d_alpha, mut d_beta) = (0.0, 0.0, 0.0);
    for s in samples {
        let mut q = s.logits.clone();
        apply_bic_in_place(&mut q, logit_classes, bic);
        let (l, dq) = softmax_ce(&q, s.target)?;
        loss += l;
        for ((&c, &o), &g) in logit_classes.iter().zip(&s.logits).zip(&dq) {
            if bic.new_class_ids.contains(&c) {
                d_alpha += g * o;
                d_beta += g;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    Ok((loss * inv, d_alpha * inv, d_beta * inv))
}

/// Full-batch gradient descent on `(α, β)` starting from identity.
pub fn fit_bic_layer(samples: &[BicSample], logit_classes: &[usize], bic: BiCLayer, cfg: &SessionConfig) -> Result<BiCLayer> {
    let mut bic = BiCLayer { alpha: 1.0, beta: 0.0, ..bic };
    for _ in 0..cfg.bic_epochs {
        let (_, da, db) = bic_loss_and_grads(samples, logit_classes, &bic)?;
        bic.alpha -= cfg.bic_lr * da;
        bic.beta -= cfg.bic_lr * db;
        if !bic.alpha.is_finite() || !bic.beta.is_finite() {
            return Err(Error::NonFinite("bias-correction fit"));
        }
    }
    Ok(bic)
}

pub(crate) fn bic_samples<L: Learner>(model: &L, examples: &[LabeledExample]) -> Result<Vec<BicSample>> {
    let rows = Exec::default().map(examples, |e| {
        model
            .logit_position(e.label)
            .map(|target| BicSample {
                logits: model.raw_logits(e.features.data()),
                target,
            })
            .ok_or(Error::OutOfRange { index: e.label, len: 0 })
    });
    rows.into_iter().collect()
}

/// Fits the bank's bias correction for its newest head on the validation
/// memory. With a single class group the layer stays the identity.
pub fn fit_bic(bank: &mut ClassifierBank, buffer: &ReplayBuffer, cfg: &SessionConfig) -> Result<(f64, f64)> {
    let Some(newest) = bank.heads().last() else {
        return Err(Error::Empty("classifier bank"));
    };
    let identity = BiCLayer::identity(newest.class_ids().iter().copied());
    if bank.heads().len() < 2 {
        bank.set_bic(Some(identity));
        return Ok((1.0, 0.0));
    }
    if buffer.is_empty(Partition::Val) {
        return Err(Error::Empty("validation memory"));
    }
    let samples = bic_samples(bank, buffer.items(Partition::Val))?;
    let bic = fit_bic_layer(&samples, bank.logit_classes(), identity, cfg)?;
    let fitted = (bic.alpha, bic.beta);
    bank.set_bic(Some(bic));
    Ok(fitted)
}
