//! Mini-batch Adam training with a stepped learning-rate decay.

use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_class_weights, default_class_weights, Task};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{ModelParams, PreparedMeme, SampleStep};
use crate::tensor::ParamStore;

/// `lr(step) = max(initial − decay · ⌊step / every⌋, floor)` with 0-based steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub every: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.005,
            decay: 0.0001,
            every: 10_000,
            floor: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let drops = (step / self.every.max(1)) as f64;
        (self.initial - self.decay * drops).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Per-head class weights; the task defaults when absent.
    pub class_weights: Option<Vec<Vec<f64>>>,
    /// Worker threads for per-sample gradients; 0 picks the machine's parallelism.
    /// Results do not depend on this value.
    pub threads: usize,
    /// Stop once training accuracy on every head reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            class_weights: None,
            threads: 0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self, task: Task) -> Result<Vec<Vec<f64>>> {
        let w = self.class_weights.clone().unwrap_or_else(|| default_class_weights(task));
        check_class_weights(&task.spec(), &w)?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lr.initial) && ok(self.lr.decay) && ok(self.lr.floor)) {
            return Err(Error::Config("learning-rate schedule must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update with gradients `grads[id]`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let w = store.by_id_mut(id).values_mut();
            // the embedding table may have grown since the moments were sized
            self.m[id].resize(w.len(), 0.0);
            self.v[id].resize(w.len(), 0.0);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Training accuracy per head, in head order.
    pub accuracy: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    /// correct[h] counts samples predicted right on head h
    pub correct: Vec<usize>,
}

pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    adam: Adam,
    weights: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    threads: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = config.weights(params.task.task)?;
        let adam = Adam::new(&params.store, config.beta1, config.beta2, config.eps);
        // offset so shuffling does not replay the initialisation stream
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
        let threads = match config.threads {
            0 => thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        };
        Ok(Trainer {
            params,
            config,
            adam,
            weights,
            rng,
            threads,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.steps()
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr.at(self.adam.steps())
    }

    fn sample_steps(&self, batch: &[&PreparedMeme]) -> Vec<Result<SampleStep>> {
        let params = &self.params;
        let weights = &self.weights;
        if self.threads <= 1 || batch.len() <= 1 {
            return batch.iter().map(|m| params.sample_gradients(m, weights)).collect();
        }
        let per = batch.len().div_ceil(self.threads);
        thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(|m| params.sample_gradients(m, weights)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[&PreparedMeme]) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let step = self.adam.steps();
        let diverged = |source: Error| Error::Diverged {
            step,
            batch_ids: batch.iter().map(|m| m.id.clone()).collect(),
            source: Box::new(source),
        };
        let results = self.sample_steps(batch);
        let scale = 1.0 / batch.len() as f64;
        let mut dense: Vec<Vec<f64>> = self.params.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut loss = 0.0;
        let mut correct = vec![0usize; self.params.task.heads.len()];
        for (meme, r) in batch.iter().zip(results) {
            let s = match r {
                Ok(s) => s,
                Err(e) if e.is_numeric() => return Err(diverged(e)),
                Err(e) => return Err(e),
            };
            let labels = meme.labels.expect("sample_gradients checked labels");
            for (h, &p) in s.predicted.iter().enumerate() {
                if p == labels.gold(self.params.task.task, h) {
                    correct[h] += 1;
                }
            }
            loss += s.loss * scale;
            for (id, g) in s.grads.params() {
                g.add_into(&mut dense[id], scale);
            }
        }
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "loss" }));
        }
        let lr = self.current_lr();
        self.adam.update(&mut self.params.store, &dense, lr).map_err(diverged)?;
        Ok(BatchResult { loss, correct })
    }

    /// Shuffles `data` and runs one pass of mini-batches over it.
    pub fn run_epoch(&mut self, data: &[PreparedMeme], epoch: usize) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.current_lr();
        let mut loss = 0.0;
        let mut correct = vec![0usize; self.params.task.heads.len()];
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedMeme> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.step(&batch)?;
            loss += r.loss * batch.len() as f64;
            correct.iter_mut().zip(&r.correct).for_each(|(c, k)| *c += k);
        }
        Ok(EpochLog {
            epoch,
            step: self.adam.steps(),
            lr,
            loss: loss / data.len() as f64,
            accuracy: correct.iter().map(|&c| c as f64 / data.len() as f64).collect(),
            validation: None,
        })
    }
}

/// Headline validation score: the head macro-F1 for sentiment, the head average otherwise.
pub fn selection_score(r: &MetricsReport) -> f64 {
    match &r.average {
        Some(a) => a.macro_f1,
        None => r.heads.iter().map(|h| h.macro_f1).sum::<f64>() / r.heads.len() as f64,
    }
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: ModelParams,
    /// Best-validation parameters, or the last ones without a validation split.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Full training run. `on_epoch` sees every epoch log as it is produced.
pub fn train(
    params: ModelParams,
    train_set: &[PreparedMeme],
    validation: Option<&[PreparedMeme]>,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(params, config)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=trainer.config.epochs {
        let mut log = trainer.run_epoch(train_set, epoch)?;
        if let Some(val) = validation.filter(|v| !v.is_empty()) {
            let report = trainer.params.evaluate(val)?;
            let score = selection_score(&report);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, trainer.params.clone()));
            }
            log.validation = Some(report);
        }
        log::info!("epoch {epoch}: loss {:.6} lr {}", log.loss, log.lr);
        on_epoch(&log);
        let done = trainer
            .config
            .stop_at_accuracy
            .is_some_and(|target| log.accuracy.iter().all(|&a| a >= target));
        history.push(log);
        if done {
            break;
        }
    }
    let last_epoch = history.last().map_or(0, |l| l.epoch);
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (e, p),
        None => (last_epoch, trainer.params.clone()),
    };
    Ok(TrainOutcome {
        last: trainer.params,
        best,
        best_epoch,
        history,
    })
}
