//! Adam with warmup, batched future n-gram training, checkpoints and metric logs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape};
use crate::checkpoint::Checkpoint;
use crate::denoise::{derive_seed, DataSource, Pair};
use crate::error::{Error, Result};
use crate::metrics::TokenAccuracy;
use crate::model::{decoder_input, log_softmax, stream_targets, weighted_stream_loss, LossNormalization, Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Checkpoint tensors under this prefix hold optimizer state, not parameters.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    /// Peak learning rate.
    pub lr: f64,
    pub seed: u64,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Each batch is processed in this many gradient-accumulation chunks.
    pub micro_batches: usize,
    pub task: Task,
    /// Record measured tokens/sec in the metrics log. Off by default so that
    /// logs are reproducible byte for byte.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            warmup: 100,
            lr: 3e-4,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
            micro_batches: 1,
            task: Task::Pretrain,
            log_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.micro_batches == 0 || self.micro_batches > self.batch_size {
            return fail(format!(
                "micro_batches {} must lie in 1..={}",
                self.micro_batches, self.batch_size
            ));
        }
        if self.warmup > self.steps {
            return fail(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return fail(format!("clip_norm {} must be non-negative", self.clip_norm));
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then `peak * sqrt(warmup / step)`. Steps count
/// from 1; `warmup = 0` gives a constant rate.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let step = step.max(1);
    if warmup == 0 {
        peak
    } else if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

/// Adam moments, aligned with the parameter order of a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite; the error names the offending parameter.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::Contract(format!("gradient of `{name}` has {} values, expected {}", g.len(), t.numel())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((_, t), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = t.data_mut();
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Number of scored positions per stream over a set of pairs.
pub fn stream_counts(pairs: &[Pair], n: usize) -> Vec<usize> {
    (0..n)
        .map(|j| pairs.iter().map(|p| p.target.len().saturating_sub(j)).sum())
        .collect()
}

/// Per-stream multipliers on summed token NLLs that turn a batch into the
/// configured loss. With mean normalization these use batch-wide counts, so
/// splitting a batch into micro-batches does not change the gradient.
pub fn stream_coefficients(config: &ModelConfig, counts: &[usize], batch_len: usize) -> Vec<f64> {
    let alpha = config.alpha();
    alpha
        .as_slice()
        .iter()
        .zip(counts)
        .map(|(&a, &c)| match config.loss_normalization {
            LossNormalization::Mean if c == 0 => 0.0,
            LossNormalization::Mean => a / c as f64,
            LossNormalization::Sum => a / batch_len.max(1) as f64,
        })
        .collect()
}

/// Summed gradients and loss statistics of a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    /// Summed token NLL per stream.
    pub nll_sums: Vec<f64>,
    pub tokens: usize,
}

impl BatchGrads {
    pub fn zeros(model: &Model) -> Self {
        Self {
            grads: model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            loss: 0.0,
            nll_sums: vec![0.0; model.config.ngram],
            tokens: 0,
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }
}

/// Dropout randomness for one example: a pure function of run seed, step and
/// row within the batch.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSeed {
    pub seed: u64,
    pub step: u64,
}

/// Adds the gradients of `pairs` (rows `first_row..`) into `acc`, one tape
/// per example.
pub fn accumulate_gradients(
    model: &Model,
    pairs: &[Pair],
    first_row: usize,
    coefficients: &[f64],
    dropout: Option<DropoutSeed>,
    acc: &mut BatchGrads,
) -> Result<()> {
    for (row, pair) in pairs.iter().enumerate() {
        let tape = Tape::new();
        let bound = model.bind(&tape)?;
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(derive_seed(d.seed, &[d.step, (first_row + row) as u64])));
        let encoded = model.encode(&bound, &pair.source, rng.as_mut())?;
        let out = model.decode_train(&bound, &decoder_input(&pair.target), encoded, true, rng.as_mut())?;
        let loss = weighted_stream_loss(&out.logits, &pair.target, coefficients, Reduction::Sum)?;
        let total = loss.total.value().item()?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss on batch row {}", first_row + row)));
        }
        acc.loss += total;
        for (sum, nll) in acc.nll_sums.iter_mut().zip(&loss.per_stream) {
            *sum += nll.unwrap_or(0.0);
        }
        acc.tokens += pair.source.len() + pair.target.len();
        tape.backward(loss.total)?;
        for ((_, var), g) in bound.named().iter().zip(acc.grads.iter_mut()) {
            if let Some(grad) = var.grad() {
                g.iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(())
}

/// Gradients of the batch loss, computed in `micro_batches` chunks.
pub fn batch_gradients(model: &Model, pairs: &[Pair], micro_batches: usize, dropout: Option<DropoutSeed>) -> Result<BatchGrads> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let counts = stream_counts(pairs, model.config.ngram);
    let coefficients = stream_coefficients(&model.config, &counts, pairs.len());
    let mut acc = BatchGrads::zeros(model);
    let chunk = pairs.len().div_ceil(micro_batches.max(1));
    for (k, part) in pairs.chunks(chunk).enumerate() {
        accumulate_gradients(model, part, k * chunk, &coefficients, dropout, &mut acc)?;
    }
    Ok(acc)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean token NLL of each stream; `None` when a stream had nothing to score.
    pub nll_per_stream: Vec<Option<f64>>,
    pub lr: f64,
    pub tokens_per_sec: Option<f64>,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("step record serializes")
    }
}

/// The first metrics-log line, echoing the effective configuration.
pub fn log_header(config: &serde_json::Value) -> String {
    serde_json::json!({ "config": config }).to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Model, optimizer and schedule position of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub vocab_fingerprint: Option<u64>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
            vocab_fingerprint: None,
        })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, pairs: &[Pair]) -> Result<StepRecord> {
        let start = Instant::now();
        let step = self.step + 1;
        let dropout = (self.model.config.dropout > 0.0).then_some(DropoutSeed {
            seed: self.config.seed,
            step,
        });
        let mut g = batch_gradients(&self.model, pairs, self.config.micro_batches, dropout)?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}")));
        }
        let norm = g.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm diverged at step {step}")));
        }
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            g.scale(self.config.clip_norm / norm);
        }
        let lr = lr_at(step, self.config.lr, self.config.warmup);
        adam_step(&mut self.model.params, &g.grads, &mut self.adam, lr)?;
        self.step = step;

        let counts = stream_counts(pairs, self.model.config.ngram);
        let nll_per_stream = g
            .nll_sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let tokens_per_sec = self
            .config
            .log_wall_clock
            .then(|| g.tokens as f64 / start.elapsed().as_secs_f64().max(1e-9));
        Ok(StepRecord {
            step,
            loss: g.loss,
            nll_per_stream,
            lr,
            tokens_per_sec,
        })
    }

    /// Trains until `config.steps`, logging every step and saving checkpoints
    /// on schedule and at the end. A failed step returns the error without
    /// writing, so the last checkpoint on disk stays intact.
    pub fn run<D, F>(
        &mut self,
        data: &D,
        mut log: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
        mut after_step: F,
    ) -> Result<Vec<StepRecord>>
    where
        D: DataSource + ?Sized,
        F: FnMut(&Trainer, &StepRecord) -> Result<Control>,
    {
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let pairs = data.batch(self.step + 1)?;
            let rec = self.train_step(&pairs)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.to_json_line())?;
            }
            if let Some(path) = checkpoint {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint()?.save(path)?;
                }
            }
            let control = after_step(self, &rec)?;
            records.push(rec);
            if control == Control::Stop {
                break;
            }
        }
        if let Some(w) = log.as_deref_mut() {
            w.flush()?;
        }
        if let Some(path) = checkpoint {
            self.checkpoint()?.save(path)?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model)?;
        ck.put_section("train", &self.config)?;
        ck.set("state.step", self.step);
        ck.set("optim.step", self.adam.step);
        if let Some(fp) = self.vocab_fingerprint {
            ck.set("vocab.fingerprint", format!("{fp:016x}"));
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((name, t), values) in self.model.params.iter().zip(moments) {
                let tensor = Tensor::new(t.shape().to_vec(), values.clone())?;
                ck.tensors.push((format!("{OPTIM_PREFIX}{kind}.{name}"), tensor));
            }
        }
        Ok(ck)
    }

    /// Restores a run. Optimizer state is taken from the checkpoint when
    /// present; `config` overrides the stored training configuration.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let model = ck.model()?;
        let config = match config {
            Some(c) => c,
            None => ck.section("train")?,
        };
        let mut trainer = Trainer::new(model, config)?;
        let parse = |key: &str| -> Result<Option<u64>> {
            ck.get(key)
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad `{key}` value `{v}`"))))
                .transpose()
        };
        trainer.step = parse("state.step")?.unwrap_or(0);
        trainer.vocab_fingerprint = ck
            .get("vocab.fingerprint")
            .map(|v| u64::from_str_radix(v, 16).map_err(|_| Error::Format(format!("bad vocab fingerprint `{v}`"))))
            .transpose()?;
        let moments = |kind: &str| -> Option<Vec<Vec<f64>>> {
            trainer
                .model
                .params
                .names()
                .map(|name| {
                    let key = format!("{OPTIM_PREFIX}{kind}.{name}");
                    ck.tensors.iter().find(|(n, _)| *n == key).map(|(_, t)| t.data().to_vec())
                })
                .collect()
        };
        if let (Some(m), Some(v)) = (moments("m"), moments("v")) {
            trainer.adam.m = m;
            trainer.adam.v = v;
            trainer.adam.step = parse("optim.step")?.unwrap_or(0);
        }
        Ok(trainer)
    }
}

/// Teacher-forced evaluation of every stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Argmax accuracy per stream.
    pub accuracy: Vec<TokenAccuracy>,
    /// Mean token NLL per stream (`None` when nothing was scored).
    pub mean_nll: Vec<Option<f64>>,
}

impl Evaluation {
    pub fn main_accuracy(&self) -> f64 {
        self.accuracy[0].fraction()
    }

    pub fn perplexity(&self) -> Option<f64> {
        self.mean_nll[0].map(f64::exp)
    }
}

pub fn evaluate(model: &Model, pairs: &[Pair]) -> Result<Evaluation> {
    let n = model.config.ngram;
    let mut accuracy = vec![TokenAccuracy::default(); n];
    let mut nll = vec![0.0; n];
    for pair in pairs {
        let logits = model.teacher_forced_logits(&pair.source, &pair.target, n > 1)?;
        let targets = stream_targets(&pair.target, n);
        for (s, (l, tg)) in logits.iter().zip(&targets).enumerate() {
            for (j, gold) in tg.iter().enumerate() {
                let Some(gold) = *gold else { continue };
                let row = l.row(j);
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, &x)| if x > b.1 { (k, x) } else { b })
                    .0;
                accuracy[s].total += 1;
                accuracy[s].correct += (best == gold) as usize;
                nll[s] -= log_softmax(row)[gold];
            }
        }
    }
    let mean_nll = nll
        .iter()
        .zip(&accuracy)
        .map(|(&s, a)| (a.total > 0).then(|| s / a.total as f64))
        .collect();
    Ok(Evaluation { accuracy, mean_nll })
}
