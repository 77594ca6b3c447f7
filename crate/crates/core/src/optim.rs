//! ADADELTA and the training loop: oversampled batch consumption, per-pixel
//! cross-entropy, gradient application, loss logging, checkpoint cadence.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pipeline::Example;
use crate::tensor::{softmax_cross_entropy_per_pixel, BnMode, Parameter, Scalar, Tape, Tensor};
use crate::unet::UNetModel;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

/// Per-parameter squared-gradient and squared-update running averages.
#[derive(Debug, Clone)]
pub struct AdadeltaState<T> {
    pub grad_sq: Vec<T>,
    pub update_sq: Vec<T>,
}

/// ADADELTA with the canonical decay/stabilizer defaults. Accumulators are
/// keyed by parameter name and created lazily at zero.
pub struct Adadelta<T: Scalar> {
    rho: f64,
    epsilon: f64,
    step: u64,
    state: HashMap<String, AdadeltaState<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || !(epsilon > 0.0) {
            return Err(Error::Config(format!("bad adadelta hyperparameters rho={rho} eps={epsilon}")));
        }
        Ok(Adadelta {
            rho,
            epsilon,
            step: 0,
            state: HashMap::new(),
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(DEFAULT_RHO, DEFAULT_EPSILON).expect("canonical defaults are valid")
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state_of(&self, name: &str) -> Option<&AdadeltaState<T>> {
        self.state.get(name)
    }

    /// E[g2] <- rho E[g2] + (1-rho) g2;
    /// dx = -(sqrt(E[dx2]+eps) / sqrt(E[g2]+eps)) g;
    /// E[dx2] <- rho E[dx2] + (1-rho) dx2;
    /// x <- x + dx.
    fn apply(&mut self, param: &mut Parameter<T>) {
        let n = param.len();
        let state = self
            .state
            .entry(param.name.clone())
            .or_insert_with(|| AdadeltaState {
                grad_sq: vec![T::zero(); n],
                update_sq: vec![T::zero(); n],
            });
        let rho = T::from_f64(self.rho);
        let one_minus = T::from_f64(1.0 - self.rho);
        let eps = T::from_f64(self.epsilon);
        let grad = param.grad().to_vec();
        let values = param.values_mut();
        for i in 0..n {
            let g = grad[i];
            state.grad_sq[i] = rho * state.grad_sq[i] + one_minus * g * g;
            let dx = -((state.update_sq[i] + eps).sqrt() / (state.grad_sq[i] + eps).sqrt()) * g;
            state.update_sq[i] = rho * state.update_sq[i] + one_minus * dx * dx;
            values[i] = values[i] + dx;
        }
    }

    /// Update one standalone parameter (counts as a step).
    pub fn step_single(&mut self, param: &mut Parameter<T>) -> Result<()> {
        self.reject_non_finite(std::iter::once(&*param))?;
        self.apply(param);
        self.step += 1;
        Ok(())
    }

    /// Update every model parameter from its accumulated gradient. Rejected
    /// without touching anything if any gradient is non-finite.
    pub fn step_model(&mut self, model: &mut UNetModel<T>) -> Result<()> {
        let mut offender = None;
        model.visit_params(&mut |p| {
            if offender.is_none() && !p.grad().iter().all(|g| g.is_finite()) {
                offender = Some(p.name.clone());
            }
        });
        if let Some(param) = offender {
            return Err(Error::NonFiniteGradient {
                param,
                step: self.step + 1,
            });
        }
        model.visit_params_mut(&mut |p| self.apply(p));
        self.step += 1;
        Ok(())
    }

    fn reject_non_finite<'a>(&self, params: impl Iterator<Item = &'a Parameter<T>>) -> Result<()> {
        for p in params {
            if !p.grad().iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                    step: self.step + 1,
                });
            }
        }
        Ok(())
    }

    /// (name, state) pairs in sorted order, for checkpointing.
    pub fn sorted_state(&self) -> Vec<(&str, &AdadeltaState<T>)> {
        let mut pairs: Vec<_> = self.state.iter().map(|(k, v)| (k.as_str(), v)).collect();
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs
    }

    pub fn restore(rho: f64, epsilon: f64, step: u64, state: HashMap<String, AdadeltaState<T>>) -> Result<Self> {
        let mut opt = Adadelta::new(rho, epsilon)?;
        opt.step = step;
        opt.state = state;
        Ok(opt)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub step_count: u64,
    pub seed: u64,
    /// Checkpoint every N steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            step_count: 0,
            seed: 0,
            checkpoint_every: 0,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bad bn momentum {}", self.bn_momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub step: u64,
    pub loss: f64,
}

/// Stack a batch of examples into one input tensor and a label buffer.
pub fn batch_to_tensors<T: Scalar>(batch: &[Example]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let size = first.size;
    let per = first.channels.len();
    let mut values = Vec::with_capacity(batch.len() * per);
    let mut labels = Vec::with_capacity(batch.len() * size * size);
    for ex in batch {
        if ex.size != size || ex.channels.len() != per {
            return Err(Error::ShapeMismatch("mixed example sizes in one batch".into()));
        }
        values.extend(ex.channels.iter().map(|&v| T::from_f64(v as f64)));
        labels.extend_from_slice(&ex.label.classes);
    }
    let channels = per / (size * size);
    let input = Tensor::new(vec![batch.len(), channels, size, size], values)?;
    Ok((input, labels))
}

/// Run `config.step_count` optimizer steps, resuming from the optimizer's
/// current step counter. The stream must yield examples in a deterministic
/// order for the (seed, config, initial params) determinism contract to hold.
pub fn train<T, S, F>(
    model: &mut UNetModel<T>,
    optimizer: &mut Adadelta<T>,
    stream: &mut S,
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<Vec<LossEntry>>
where
    T: Scalar,
    S: Iterator<Item = Result<Example>>,
    F: FnMut(u64, &UNetModel<T>, &Adadelta<T>) -> Result<()>,
{
    config.validate()?;
    let mut log = Vec::new();
    let start = optimizer.step_count();
    for step in start + 1..=start + config.step_count {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            match stream.next() {
                Some(ex) => batch.push(ex?),
                None => {
                    return Err(Error::Dataset(format!(
                        "example stream exhausted before step {step}"
                    )))
                }
            }
        }
        let (input, labels) = batch_to_tensors::<T>(&batch)?;

        model.zero_grads();
        let loss_value = {
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &input, BnMode::Train, config.bn_momentum)?;
            let loss = softmax_cross_entropy_per_pixel(&mut tape, &logits, &labels)?;
            let grads = tape.backward(&loss)?;
            model.accumulate_grads(&grads);
            loss.item()?.to_f64()
        };
        optimizer.step_model(model)?;
        log.push(LossEntry { step, loss: loss_value });

        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, model, optimizer)?;
        }
    }
    Ok(log)
}

/// `step,loss` CSV with a header row.
pub fn loss_log_csv(log: &[LossEntry]) -> String {
    let mut out = String::from("step,loss\n");
    for e in log {
        out.push_str(&format!("{},{}\n", e.step, e.loss));
    }
    out
}
