//! Single-head comparison methods sharing the bank's numeric kernel:
//! experience replay with bias correction (one head whose output layer
//! grows with every session) and GDumb (retrained from scratch on the
//! balanced memory only).

use std::collections::BTreeMap;
use std::time::Instant;

use crate::classifier_bank::{argmax_class, apply_bic_in_place, softmax_ce, BiCLayer, HeadGrads, PartialClassifier};
use crate::datasets::{LabeledExample, Session};
use crate::error::{Error, Result};
use crate::memory_buffer::{Partition, ReplayBuffer};
use crate::numerics::{Rng, Tensor};
use crate::trainer::{
    bic_samples, fit, fit_bic_layer, plain_epoch, replay_epoch, Learner, LrSchedule, SessionConfig, SessionReport,
};

/// One head over all classes seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleHeadModel {
    in_dim: usize,
    hidden: usize,
    use_activation: bool,
    head: Option<PartialClassifier>,
    position: BTreeMap<usize, usize>,
    bic: Option<BiCLayer>,
}

impl SingleHeadModel {
    pub fn new(in_dim: usize, hidden: usize, use_activation: bool) -> Self {
        Self {
            in_dim,
            hidden,
            use_activation,
            head: None,
            position: BTreeMap::new(),
            bic: None,
        }
    }

    pub fn head(&self) -> Option<&PartialClassifier> {
        self.head.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.position.len()
    }

    pub fn logit_classes(&self) -> &[usize] {
        self.head.as_ref().map_or(&[], |h| h.class_ids())
    }

    pub fn bic(&self) -> Option<&BiCLayer> {
        self.bic.as_ref()
    }

    pub fn set_bic(&mut self, bic: Option<BiCLayer>) {
        self.bic = bic;
    }

    pub fn param_count(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.param_count())
    }

    /// Adds output units for `new_ids`. The first call creates the head
    /// (projection first, then output weights, as a fresh bank head would).
    pub fn extend_head(&mut self, new_ids: &[usize], rng: &mut Rng) -> Result<()> {
        if new_ids.is_empty() {
            return Err(Error::InvalidArgument("extend_head needs at least one new class".into()));
        }
        match &mut self.head {
            None => {
                self.head = Some(PartialClassifier::new(
                    self.in_dim,
                    self.hidden,
                    new_ids.to_vec(),
                    self.use_activation,
                    rng,
                )?)
            }
            Some(h) => h.extend_outputs(new_ids, rng)?,
        }
        self.position = self
            .logit_classes()
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        Ok(())
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.head.as_ref().ok_or(Error::Empty("single-head model"))?.forward(features)
    }

    pub fn predict(&self, features: &Tensor, use_bic: bool) -> Result<usize> {
        let head = self.head.as_ref().ok_or(Error::Empty("single-head model"))?;
        let mut logits = head.forward(features)?.into_data();
        if let (true, Some(bic)) = (use_bic, &self.bic) {
            apply_bic_in_place(&mut logits, head.class_ids(), bic);
        }
        Ok(argmax_class(&logits, head.class_ids()))
    }
}

impl Learner for SingleHeadModel {
    fn sgd_step(&mut self, batch: &[&LabeledExample], lr: f64) -> Result<f64> {
        let head = self.head.as_ref().ok_or(Error::Empty("single-head model"))?;
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut grads = HeadGrads::zeros_like(head);
        let mut total = 0.0;
        for e in batch {
            let target = *self.position.get(&e.label).ok_or(Error::OutOfRange {
                index: e.label,
                len: self.position.len(),
            })?;
            let x = e.features.data();
            let cache = head.forward_cached(x);
            let (loss, dlogits) = softmax_ce(&cache.logits, target)?;
            total += loss;
            head.backward(x, &cache, &dlogits, &mut grads);
        }
        let inv = 1.0 / batch.len() as f64;
        for v in [&mut grads.w_proj, &mut grads.b_proj, &mut grads.w_out, &mut grads.b_out]
            .into_iter()
            .flatten()
        {
            *v *= inv;
        }
        self.head.as_mut().expect("checked above").sgd_step(&grads, lr)?;
        Ok(total * inv)
    }

    fn raw_logits(&self, x: &[f64]) -> Vec<f64> {
        self.head.as_ref().map(|h| h.forward_cached(x).logits).unwrap_or_default()
    }

    fn logit_position(&self, class: usize) -> Option<usize> {
        self.position.get(&class).copied()
    }
}

fn report(
    outcome: crate::trainer::FitOutcome,
    bic: (f64, f64),
    buffer: &ReplayBuffer,
    started: Instant,
) -> SessionReport {
    SessionReport {
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        train_loss: outcome.train_loss,
        val_loss: outcome.val_loss,
        learning_rates: outcome.learning_rates,
        alpha: bic.0,
        beta: bic.1,
        buffer_train_counts: buffer.class_counts(Partition::Train),
        buffer_val_counts: buffer.class_counts(Partition::Val),
        wall_time_secs: started.elapsed().as_secs_f64(),
    }
}

/// Bias correction for the newest classes on the validation memory; the
/// identity while only one class group has been seen.
fn fit_single_head_bic(model: &mut SingleHeadModel, new_ids: &[usize], groups: usize, buffer: &ReplayBuffer, cfg: &SessionConfig) -> Result<(f64, f64)> {
    let identity = BiCLayer::identity(new_ids.iter().copied());
    if groups < 2 {
        model.bic = Some(identity);
        return Ok((1.0, 0.0));
    }
    if buffer.is_empty(Partition::Val) {
        return Err(Error::Empty("validation memory"));
    }
    let samples = bic_samples(model, buffer.items(Partition::Val))?;
    let bic = fit_bic_layer(&samples, model.logit_classes(), identity, cfg)?;
    let fitted = (bic.alpha, bic.beta);
    model.bic = Some(bic);
    Ok(fitted)
}

/// One experience-replay session: grow the output layer, train every
/// parameter on balanced current/memory minibatches with exponential LR
/// decay, update memory, fit bias correction. `session_index` is the
/// zero-based position of `session` in the stream.
pub fn er_train_session(
    model: &mut SingleHeadModel,
    session: &Session,
    session_index: usize,
    buffer: &mut ReplayBuffer,
    cfg: &SessionConfig,
    rng: &mut Rng,
) -> Result<SessionReport> {
    cfg.validate()?;
    let started = Instant::now();
    if session.train.is_empty() {
        return Err(Error::Empty("session training set"));
    }
    model.extend_head(&session.classes, rng)?;

    let val: Vec<&LabeledExample> = session
        .val
        .examples()
        .iter()
        .chain(buffer.items(Partition::Val))
        .collect();
    let schedule = cfg.lr_schedule.unwrap_or(LrSchedule::Exponential);
    let outcome = {
        let memory: &ReplayBuffer = buffer;
        fit(model, cfg, schedule, &val, rng, |r| replay_epoch(&session.train, memory, cfg.batch_size, r))?
    };

    buffer.update(Partition::Train, session.train.examples(), rng)?;
    buffer.update(Partition::Val, session.val.examples(), rng)?;
    let bic = fit_single_head_bic(model, &session.classes, session_index + 1, buffer, cfg)?;
    Ok(report(outcome, bic, buffer, started))
}

/// One GDumb session: update memory first, rebuild the model from scratch
/// over every class seen so far, then train on the memory alone. No bias
/// correction.
pub fn gdumb_train_session(
    model: &mut SingleHeadModel,
    session: &Session,
    buffer: &mut ReplayBuffer,
    cfg: &SessionConfig,
    rng: &mut Rng,
) -> Result<SessionReport> {
    cfg.validate()?;
    let started = Instant::now();
    buffer.update(Partition::Train, session.train.examples(), rng)?;
    buffer.update(Partition::Val, session.val.examples(), rng)?;
    if buffer.is_empty(Partition::Train) {
        return Err(Error::Empty("replay memory"));
    }

    let mut classes: Vec<usize> = model.logit_classes().to_vec();
    classes.extend(session.classes.iter().filter(|c| !model.position.contains_key(c)));
    *model = SingleHeadModel::new(model.in_dim, model.hidden, model.use_activation);
    model.extend_head(&classes, rng)?;

    let val: Vec<&LabeledExample> = buffer.items(Partition::Val).iter().collect();
    let schedule = cfg.lr_schedule.unwrap_or(LrSchedule::Exponential);
    let memory = buffer.items(Partition::Train);
    let outcome = fit(model, cfg, schedule, &val, rng, |r| Ok(plain_epoch(memory, cfg.batch_size, r)))?;
    Ok(report(outcome, (1.0, 0.0), buffer, started))
}

/// Smallest hidden width whose single-head parameter count reaches `budget`.
pub fn width_for_budget(in_dim: usize, num_classes: usize, budget: usize) -> usize {
    // params(K) = D·K + K + K·C + C
    let per_unit = in_dim + 1 + num_classes;
    let needed = budget.saturating_sub(num_classes);
    needed.div_ceil(per_unit).max(1)
}
