//! Adam with an inverse-square-root warmup schedule, and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{make_batches, sequential_batches, Corpus, Dataset};
use crate::error::{Error, Result};
use crate::eval::ambiguous_accuracy;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Graph, Mode, Tensor};
use crate::transformer::Fwd;

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub dropout: f64,
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub lr_factor: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Validate every this many steps (0 = at the end of each epoch only).
    pub validate_every: usize,
    /// Save `last.ckpt` every this many steps (0 = at the end of each epoch only).
    pub checkpoint_every: usize,
    /// Initialize the routing networks' `W_v` from the first batch so the
    /// multiplicative context update starts near the identity.
    pub calibrate_routing: bool,
    /// Root-mean-square of the random part of `W_v v` after that initialization.
    pub calibration_spread: f64,
    /// Skip greedy decoding during validation.
    pub skip_accuracy: bool,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            max_steps: 0,
            dropout: 0.5,
            batch_tokens: 3700,
            lr_factor: 1.0,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.998,
            epsilon: 1e-9,
            validate_every: 0,
            checkpoint_every: 0,
            calibrate_routing: true,
            calibration_spread: 0.1,
            skip_accuracy: false,
            seed: 1,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("either epochs or max_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// `factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: usize, factor: f64, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0, beta1, beta2, epsilon }
    }
}

/// One bias-corrected Adam update of every trainable parameter with a gradient.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Usage(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for id in store.ids() {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim("adam gradient", g.shape(), store.get(id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric { what: format!("gradient of {}", store.name(id)), iteration: state.step + 1 });
            }
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = &grads[id.index()] else { continue };
        if !store.is_trainable(id) {
            continue;
        }
        let k = id.index();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let w = store.get_mut(id).data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-token loss of the step's batch.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ambiguous_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub best_valid_loss: f64,
    pub best_step: usize,
    /// Parameters at the best validation loss.
    pub best: ParamStore,
    pub metrics: Vec<Metric>,
}

/// Mean per-token loss over a corpus.
pub fn corpus_loss(model: &Model, corpus: &Corpus, budget: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for idx in sequential_batches(corpus, budget) {
        let batch = model.batch(corpus, &idx)?;
        total += model.eval_loss(&batch)? * batch.target_tokens as f64;
        tokens += batch.target_tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Gradient of the summed batch loss, one entry per parameter in store order.
pub fn batch_gradients(model: &Model, corpus: &Corpus, indices: &[usize], dropout: f64, seed: u64) -> Result<(f64, Vec<Option<Tensor>>)> {
    let batch = model.batch(corpus, indices)?;
    let g = Graph::with_seed(Mode::Training, seed);
    let p = model.store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout };
    let loss = model.loss(f, &batch)?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value / batch.target_tokens as f64, p.grads()))
}

/// Where training writes its artifacts.
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

/// Trains `model` in place on `data.train`, validating on `data.valid`.
///
/// On return the model holds the final parameters; the best ones are in the
/// outcome. A non-finite loss stops training, restores the last parameters
/// that produced a finite loss, saves them as `last.ckpt` and returns a
/// numeric error.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    mut on_metric: impl FnMut(&Metric),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = out.map(|d| TrainOutput { dir: d.to_path_buf() });
    let mut log = match &out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let p = o.metrics();
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };
    let mut emit = |m: &Metric, log: &mut Option<BufWriter<File>>| -> Result<()> {
        on_metric(m);
        if let (Some(w), Some(o)) = (log.as_mut(), out.as_ref()) {
            let line = serde_json::to_string(m).expect("metric serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(o.metrics(), e))?;
        }
        Ok(())
    };

    let mut opt = OptimizerState::new(&model.store, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let mut best = model.store.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_step = 0;
    let mut last_good = model.store.clone();
    let epochs = if cfg.epochs == 0 { usize::MAX } else { cfg.epochs };
    let mut step = 0;

    let validate = |model: &Model, metric: &mut Metric| -> Result<f64> {
        let vl = corpus_loss(model, &data.valid, cfg.batch_tokens)?;
        metric.valid_loss = Some(vl);
        if !cfg.skip_accuracy {
            metric.ambiguous_accuracy = ambiguous_accuracy(model, &data.valid, cfg.batch_tokens)?;
        }
        Ok(vl)
    };

    'outer: for epoch in 0..epochs {
        let batches = make_batches(&data.train, cfg.batch_tokens, cfg.seed, epoch as u64)?;
        if epoch == 0 && cfg.calibrate_routing {
            if let Some(first) = batches.first() {
                let batch = model.batch(&data.train, first)?;
                model.calibrate_routing(&batch, cfg.calibration_spread)?;
                last_good = model.store.clone();
                best = model.store.clone();
            }
        }
        let n_batches = batches.len();
        for (k, idx) in batches.into_iter().enumerate() {
            step += 1;
            let lr = lr_schedule(step, cfg.lr_factor, model.config.d_model, cfg.warmup)?;
            let seed = rng::stream(cfg.seed ^ DROPOUT_STREAM, step as u64).random::<u64>();
            let (loss, grads) = batch_gradients(model, &data.train, &idx, cfg.dropout, seed)?;
            let finite = loss.is_finite() && adam_step(&mut model.store, &grads, lr, &mut opt).is_ok();
            if !finite {
                model.store = last_good;
                if let Some(o) = &out {
                    checkpoint::save(model, o.last())?;
                }
                return Err(Error::Numeric { what: "training loss".into(), iteration: step });
            }
            last_good = model.store.clone();
            losses.push(loss);
            let mut metric = Metric { step, epoch, lr, train_loss: loss, valid_loss: None, ambiguous_accuracy: None };
            let end_of_epoch = k + 1 == n_batches;
            let stop = cfg.max_steps != 0 && step >= cfg.max_steps;
            let due = |every: usize| if every == 0 { end_of_epoch || stop } else { step % every == 0 || stop };
            if due(cfg.validate_every) && validate(model, &mut metric)? < best_valid {
                best_valid = metric.valid_loss.unwrap();
                best_step = step;
                best = model.store.clone();
                if let Some(o) = &out {
                    checkpoint::save(model, o.best())?;
                }
            }
            if due(cfg.checkpoint_every) {
                if let Some(o) = &out {
                    checkpoint::save(model, o.last())?;
                }
            }
            emit(&metric, &mut log)?;
            metrics.push(metric);
            if stop {
                break 'outer;
            }
        }
    }
    Ok(TrainOutcome { steps: step, losses, best_valid_loss: best_valid, best_step, best, metrics })
}
