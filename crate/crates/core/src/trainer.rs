//! Full-batch training with Adam and validation-based early stopping, for
//! supervised teachers and for distilled students.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amalgam::{attention_weights, fuse_soft_targets, loss_hard, loss_mta, loss_total, DistillConfig, TeacherOutputs};
use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::SplitAssignment;
use crate::models::{predict_from_logits, ForwardMode, GraphContext, Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.01, weight_decay: 5e-4, decay_mode: DecayMode::Decoupled, max_epochs: 300, patience: 50, seeds: (0..10).collect() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "need 1 <= patience ({}) <= max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("no seeds given"));
        }
        Ok(())
    }
}

/// How weight decay enters the Adam update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// `p ← p (1 − lr·wd)` before the moment step.
    #[default]
    Decoupled,
    /// `wd·p` is added to the gradient, so it passes through the moments.
    L2,
}

/// Adam moment decay rates and denominator guard.
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with weight decay applied per [`DecayMode`], decoupled by default.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    mode: DecayMode,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self::with_mode(store, lr, weight_decay, DecayMode::Decoupled)
    }

    pub fn with_mode(store: &ParamStore, lr: f64, weight_decay: f64, mode: DecayMode) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Adam { lr, weight_decay, mode, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let (decay, l2) = match self.mode {
            DecayMode::Decoupled => (1.0 - self.lr * self.weight_decay, 0.0),
            DecayMode::L2 => (1.0, self.weight_decay),
        };
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + l2 * *x;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *x *= decay;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub val_history: Vec<f64>,
}

/// Fraction of `nodes` whose prediction equals its label.
pub fn accuracy(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::invalid("accuracy over an empty node set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let hits = nodes.iter().filter(|&&v| predictions[v] == labels[v]).count();
    Ok(hits as f64 / nodes.len() as f64)
}

pub fn evaluate(model: &Model, ctx: &GraphContext, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    accuracy(&model.predict(ctx)?, labels, nodes)
}

/// What the training loss is made of.
pub enum Objective<'a> {
    /// Cross-entropy on the training nodes.
    Supervised,
    /// `λ L_MTA + (1 − λ) L_hard` against fused teacher targets. The
    /// teacher weights are recomputed every epoch from the student's
    /// current logits.
    Distill { teachers: &'a TeacherOutputs, config: DistillConfig },
}

/// Trains a fresh model built from `spec` and returns it with the
/// parameters of its best-validation epoch restored.
pub fn train(
    spec: &ModelSpec,
    ctx: &GraphContext,
    labels: &[usize],
    splits: &SplitAssignment,
    config: &TrainConfig,
    objective: &Objective<'_>,
) -> Result<(RunResult, Model)> {
    config.validate()?;
    splits.validate(ctx.n_nodes())?;
    if labels.len() != ctx.n_nodes() {
        return Err(Error::invalid(format!("{} labels for {} nodes", labels.len(), ctx.n_nodes())));
    }
    if let Objective::Distill { teachers, config: dc } = objective {
        dc.validate()?;
        if teachers.logits()[0].shape() != (ctx.n_nodes(), ctx.n_classes()) {
            return Err(Error::invalid("teacher logits do not match the graph"));
        }
    }
    let mut model = Model::build(spec, ctx.features().cols(), ctx.n_classes())?;
    let mut adam = Adam::with_mode(model.params(), config.lr, config.weight_decay, config.decay_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let train_nodes: Arc<[usize]> = splits.train.clone().into();
    let all_nodes: Arc<[usize]> = (0..ctx.n_nodes()).collect::<Vec<_>>().into();

    let mut best = model.params().clone();
    let mut result = RunResult {
        seed: spec.seed,
        best_epoch: 0,
        epochs_run: 0,
        train_accuracy: 0.0,
        val_accuracy: f64::NEG_INFINITY,
        test_accuracy: 0.0,
        loss_history: Vec::new(),
        val_history: Vec::new(),
    };

    for epoch in 0..config.max_epochs {
        let grads = {
            let mut tape = Tape::with_params(model.params());
            let logits = model.forward(&mut tape, ctx, &mut ForwardMode::Train(&mut rng))?;
            let hard = loss_hard(&mut tape, logits, labels, &train_nodes)?;
            let loss = match objective {
                Objective::Supervised => hard,
                Objective::Distill { teachers, config: dc } => {
                    let sims = teachers.similarities(tape.value(logits))?;
                    let alpha = attention_weights(&sims)?;
                    let targets = fuse_soft_targets(teachers.logits(), &alpha, dc.temperature)?;
                    let mta = loss_mta(&mut tape, logits, &targets, dc.temperature, &all_nodes)?;
                    loss_total(&mut tape, mta, hard, dc.lambda)?
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("loss is {value}") });
            }
            result.loss_history.push(value);
            tape.backward(loss).map_err(|e| diverged(epoch, e))?
        };
        let store = model.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(store).map_err(|e| diverged(epoch, e))?;

        let pred = predict_from_logits(&model.logits(ctx).map_err(|e| diverged(epoch, e))?);
        // Without validation nodes, selection falls back to training accuracy.
        let select_on = if splits.val.is_empty() { &splits.train } else { &splits.val };
        let val = accuracy(&pred, labels, select_on)?;
        result.val_history.push(val);
        result.epochs_run = epoch + 1;
        if val > result.val_accuracy {
            result.val_accuracy = val;
            result.best_epoch = epoch;
            result.train_accuracy = accuracy(&pred, labels, &splits.train)?;
            result.test_accuracy = if splits.test.is_empty() { 0.0 } else { accuracy(&pred, labels, &splits.test)? };
            best.copy_values_from(model.params())?;
        } else if epoch - result.best_epoch >= config.patience {
            break;
        }
    }
    model.params_mut().copy_values_from(&best)?;
    model.params_mut().zero_grad();
    Ok((result, model))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { epoch, reason: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Summary { n, mean, std }
    }
}

/// Runs `job` once per seed on a pool of `threads` workers (`None` uses
/// the global pool). Results come back in seed order and do not depend on
/// the worker count.
pub fn run_seeds<T, F>(seeds: &[u64], threads: Option<usize>, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let run = || seeds.par_iter().map(|&s| job(s)).collect::<Result<Vec<T>>>();
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}
