//! Task losses combined by weight, and round-robin multi-task training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use titkit_tensor::optim::{clip_global_norm, collect_param_grads, inverse_sqrt_lr, Adam, AdamConfig};
use titkit_tensor::Graph;

use crate::checkpoint::save_checkpoint;
use crate::corpus::{MtExample, OcrExample, TitExample};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Task};
use crate::nn::{component_seed, Ctx};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub lambda_tit: f64,
    pub lambda_mt: f64,
    pub lambda_ocr: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            lambda_tit: 1.0,
            lambda_mt: 0.6,
            lambda_ocr: 0.4,
        }
    }
}

impl TaskWeights {
    /// `lambda_ocr` is `1 - lambda_mt`.
    pub fn with_mt(lambda_mt: f64) -> Result<Self> {
        let w = Self {
            lambda_tit: 1.0,
            lambda_mt,
            lambda_ocr: 1.0 - lambda_mt,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidTaskWeights(why.to_string()));
        if self.lambda_tit != 1.0 {
            return bad("lambda_tit must be 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_mt) {
            return bad("lambda_mt must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_ocr) {
            return bad("lambda_ocr must lie in [0, 1]");
        }
        if self.lambda_ocr > 0.0 && (self.lambda_mt + self.lambda_ocr - 1.0).abs() > WEIGHT_TOL {
            return bad("lambda_mt + lambda_ocr must equal 1 when OCR is enabled");
        }
        Ok(())
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Tit => self.lambda_tit,
            Task::Mt => self.lambda_mt,
            Task::Ocr => self.lambda_ocr,
        }
    }
}

/// Per-task loss values; absent tasks contribute nothing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses {
    pub tit: Option<f64>,
    pub mt: Option<f64>,
    pub ocr: Option<f64>,
}

pub fn combined_loss(losses: &TaskLosses, weights: &TaskWeights) -> Result<f64> {
    weights.validate()?;
    let term = |l: Option<f64>, w: f64| l.map_or(0.0, |l| w * l);
    Ok(term(losses.tit, weights.lambda_tit) + term(losses.mt, weights.lambda_mt) + term(losses.ocr, weights.lambda_ocr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: TaskWeights,
    pub batch_tit: usize,
    pub batch_mt: usize,
    pub batch_ocr: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Rounds; each round runs one update per active task.
    pub rounds: u64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many rounds; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TitMtOcr,
            weights: TaskWeights::default(),
            batch_tit: 32,
            batch_mt: 32,
            batch_ocr: 32,
            lr: 1e-3,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            rounds: 10_000,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk-scale toy task.
    pub fn toy() -> Self {
        Self {
            lr: 3e-3,
            warmup: 200,
            rounds: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.tasks().len() > 1 {
            self.weights.validate()?;
        }
        for (name, b) in [("batch_tit", self.batch_tit), ("batch_mt", self.batch_mt), ("batch_ocr", self.batch_ocr)] {
            if b == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("lr must be positive and label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn batch(&self, task: Task) -> usize {
        match task {
            Task::Tit => self.batch_tit,
            Task::Mt => self.batch_mt,
            Task::Ocr => self.batch_ocr,
        }
    }

    /// Weight of `task` in this mode. Single-task modes train at full weight.
    pub fn weight(&self, task: Task) -> f64 {
        if self.mode.tasks().len() == 1 {
            1.0
        } else {
            self.weights.get(task)
        }
    }
}

/// Encoded training sets. Tasks outside the mode may be left empty.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub tit: Vec<TitExample>,
    pub mt: Vec<MtExample>,
    pub ocr: Vec<OcrExample>,
}

impl TrainData {
    pub fn len(&self, task: Task) -> usize {
        match task {
            Task::Tit => self.tit.len(),
            Task::Mt => self.mt.len(),
            Task::Ocr => self.ocr.len(),
        }
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        for &t in mode.tasks() {
            if self.len(t) == 0 {
                return Err(Error::DatasetMode(format!("mode {mode} needs a non-empty {t} dataset")));
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub task: Task,
    /// Unsmoothed per-token negative log-likelihood of the batch.
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn log_to_csv(log: &[LogEntry]) -> String {
    let mut s = String::from("step,task,loss,lr,wall_ms\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{}", e.step, e.task, e.loss, e.lr, e.wall_ms);
    }
    s
}

pub fn write_log(log: &[LogEntry], path: &Path) -> Result<()> {
    fs::write(path, log_to_csv(log)).map_err(|e| Error::io(path, e))
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            at: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.at == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

/// Owns the optimizer state and batch schedule for one model.
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam<f32>,
    samplers: Vec<(Task, Sampler)>,
    step: u64,
    start: Instant,
    pub log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model, data: &TrainData) -> Result<Self> {
        config.validate()?;
        if config.mode != model.mode {
            let covered = config.mode.tasks().iter().all(|&t| model.mode.has(t));
            if !covered {
                return Err(Error::DatasetMode(format!(
                    "model built for {} cannot train mode {}",
                    model.mode, config.mode
                )));
            }
        }
        data.check_mode(config.mode)?;
        let samplers = config
            .mode
            .tasks()
            .iter()
            .map(|&t| (t, Sampler::new(data.len(t), component_seed(config.seed, t.name()))))
            .collect();
        let adam = Adam::new(AdamConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: 0.0,
        });
        Ok(Self {
            config,
            adam,
            samplers,
            step: 0,
            start: Instant::now(),
            log: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Runs one update per active task with a positive weight.
    pub fn round(&mut self, model: &mut Model, data: &TrainData) -> Result<()> {
        for i in 0..self.samplers.len() {
            let task = self.samplers[i].0;
            let weight = self.config.weight(task);
            if weight == 0.0 {
                continue;
            }
            let idx = self.samplers[i].1.next(self.config.batch(task));
            self.update(model, data, task, weight, &idx)?;
        }
        Ok(())
    }

    fn update(&mut self, model: &mut Model, data: &TrainData, task: Task, weight: f64, idx: &[usize]) -> Result<()> {
        self.step += 1;
        let lr = inverse_sqrt_lr(self.step, self.config.warmup, self.config.lr);
        let smoothing = self.config.label_smoothing;
        let (mut grads, nll) = {
            let g = Graph::new();
            let cx = Ctx::new(&g, &model.store, true, component_seed(self.config.seed, "dropout") ^ self.step);
            let out = match task {
                Task::Tit => {
                    let b: Vec<&TitExample> = idx.iter().map(|&i| &data.tit[i]).collect();
                    model.loss_tit(&cx, &b, smoothing)?
                }
                Task::Mt => {
                    let b: Vec<&MtExample> = idx.iter().map(|&i| &data.mt[i]).collect();
                    model.loss_mt(&cx, &b, smoothing)?
                }
                Task::Ocr => {
                    let b: Vec<&OcrExample> = idx.iter().map(|&i| &data.ocr[i]).collect();
                    model.loss_ocr(&cx, &b, smoothing)?
                }
            };
            let grads = g.backward(out.loss.scale(weight));
            (collect_param_grads(&grads, 1.0), out.nll)
        };
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.adam.step(&mut model.store, &grads, lr, |_| 1.0);
        self.log.push(LogEntry {
            step: self.step,
            task,
            loss: nll,
            lr,
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    fn checkpoint_path(&self) -> Option<PathBuf> {
        self.config.checkpoint_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }

    /// Runs all configured rounds, checkpointing along the way.
    pub fn run(&mut self, model: &mut Model, data: &TrainData) -> Result<()> {
        for r in 1..=self.config.rounds {
            self.round(model, data)?;
            if self.config.checkpoint_every > 0 && r % self.config.checkpoint_every == 0 {
                if let Some(p) = self.checkpoint_path() {
                    save_checkpoint(model, &p)?;
                }
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "model.titk";
pub const METRICS_FILE: &str = "metrics.csv";

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub log: Vec<LogEntry>,
}

/// Trains `model` in place. With a checkpoint dir, the final model is written
/// to `model.titk` and the log to `metrics.csv` there.
pub fn train(model: &mut Model, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), model, data)?;
    t.run(model, data)?;
    let (checkpoint, metrics) = match (&config.checkpoint_dir, t.checkpoint_path()) {
        (Some(dir), Some(ckpt)) => {
            save_checkpoint(model, &ckpt)?;
            let m = dir.join(METRICS_FILE);
            write_log(&t.log, &m)?;
            (Some(ckpt), Some(m))
        }
        _ => (None, None),
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        log: t.log,
    })
}
