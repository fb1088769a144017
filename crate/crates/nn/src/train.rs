//! Seeded mini-batch SGD with momentum.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::LayerParams;
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Scale applied to the learning rate of layers flagged as pretrained.
    pub pretrained_lr_multiplier: f32,
    /// Emit a log record every this many iterations (and after the last one).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            pretrained_lr_multiplier: 0.1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.iterations == 0 {
            return Err(NnError::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch size must be at least 1".into()));
        }
        if !(self.pretrained_lr_multiplier > 0.0 && self.pretrained_lr_multiplier <= 1.0) {
            return Err(NnError::Config(
                "pretrained learning-rate multiplier must lie in (0, 1]".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(NnError::Config("log interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// One input tensor (C, H, W order) with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    /// Mean batch loss since the previous record.
    pub loss: f32,
    /// Fraction of correctly classified batch examples since the previous record.
    pub train_accuracy: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Tab-separated `iteration loss train_accuracy` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iteration\tloss\ttrain_accuracy\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{:.6}\t{:.4}", r.iteration, r.loss, r.train_accuracy);
        }
        s
    }
}

/// Loss and accuracy of a single update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f32,
    pub correct: usize,
    pub batch: usize,
}

/// Training aborted by a numeric fault; `last_good` holds the weights before the faulting step.
#[derive(Debug)]
pub struct TrainFailure {
    pub iteration: u64,
    pub error: NnError,
    pub last_good: Box<ModelParams>,
    pub log: TrainLog,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed at iteration {}: {}", self.iteration, self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Stepwise SGD driver; [`train`] runs it to completion.
pub struct Trainer<'a> {
    params: ModelParams,
    velocity: Vec<LayerParams<f32>>,
    data: &'a [Example],
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(init: ModelParams, data: &'a [Example], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(NnError::Config("training set is empty".into()));
        }
        let classes = init.net.classes();
        let input_len = init.net.input_len();
        for (i, ex) in data.iter().enumerate() {
            if ex.label >= classes {
                return Err(NnError::Shape(format!(
                    "example {i} has label {} but the model has {classes} classes",
                    ex.label
                )));
            }
            if ex.input.len() != input_len {
                return Err(NnError::Shape(format!(
                    "example {i} has {} inputs, expected {input_len}",
                    ex.input.len()
                )));
            }
        }
        let velocity = init
            .net
            .params
            .iter()
            .map(|p| LayerParams {
                weights: vec![0.0; p.weights.len()],
                bias: vec![0.0; p.bias.len()],
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            params: init,
            velocity,
            data,
            cfg,
            rng,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.cfg.batch_size.min(self.data.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs one mini-batch update. On error the weights are left untouched.
    pub fn step(&mut self) -> Result<StepStats> {
        let idx = self.next_batch();
        let batch: Vec<(&[f32], usize)> = idx
            .iter()
            .map(|&i| (self.data[i].input.as_slice(), self.data[i].label))
            .collect();
        let bg = self.params.net.loss_and_gradients(&batch)?;
        if !bg.loss.is_finite() {
            return Err(NnError::NonFinite {
                layer: self.params.net.params.len() - 1,
                stage: "loss",
            });
        }
        let backup = self.params.net.params.clone();
        let backup_v = self.velocity.clone();
        let mu = self.cfg.momentum;
        for (i, ((p, v), g)) in self
            .params
            .net
            .params
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&bg.grads)
            .enumerate()
        {
            let lr = if self.params.pretrained[i] {
                self.cfg.learning_rate * self.cfg.pretrained_lr_multiplier
            } else {
                self.cfg.learning_rate
            };
            for ((w, vel), gr) in p
                .weights
                .iter_mut()
                .chain(p.bias.iter_mut())
                .zip(v.weights.iter_mut().chain(v.bias.iter_mut()))
                .zip(g.weights.iter().chain(&g.bias))
            {
                *vel = mu * *vel - lr * gr;
                *w += *vel;
            }
            if p.weights.iter().chain(&p.bias).any(|w| !w.is_finite()) {
                self.params.net.params = backup;
                self.velocity = backup_v;
                return Err(NnError::NonFinite {
                    layer: i,
                    stage: "update",
                });
            }
        }
        self.iteration += 1;
        self.params.meta.iterations += 1;
        Ok(StepStats {
            iteration: self.iteration,
            loss: bg.loss,
            correct: bg.correct,
            batch: idx.len(),
        })
    }
}

/// Trains `init` for `cfg.iterations` updates over `data`.
pub fn train(
    init: ModelParams,
    data: &[Example],
    cfg: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainLog), TrainFailure> {
    let fallback = init.clone();
    let mut trainer = match Trainer::new(init, data, cfg.clone()) {
        Ok(t) => t,
        Err(error) => {
            return Err(TrainFailure {
                iteration: 0,
                error,
                last_good: Box::new(fallback),
                log: TrainLog::default(),
            })
        }
    };
    drop(fallback);
    let mut log = TrainLog::default();
    let (mut loss_sum, mut correct, mut seen, mut steps) = (0f64, 0usize, 0usize, 0u64);
    while trainer.iteration() < cfg.iterations {
        match trainer.step() {
            Ok(s) => {
                loss_sum += s.loss as f64;
                correct += s.correct;
                seen += s.batch;
                steps += 1;
                if s.iteration % cfg.log_every == 0 || s.iteration == cfg.iterations {
                    log.records.push(LogRecord {
                        iteration: s.iteration,
                        loss: (loss_sum / steps as f64) as f32,
                        train_accuracy: correct as f32 / seen as f32,
                    });
                    (loss_sum, correct, seen, steps) = (0.0, 0, 0, 0);
                }
            }
            Err(error) => {
                return Err(TrainFailure {
                    iteration: trainer.iteration() + 1,
                    error,
                    last_good: Box::new(trainer.into_params()),
                    log,
                })
            }
        }
    }
    Ok((trainer.into_params(), log))
}
