//! Momentum gradient descent with cosine learning-rate decay.
//!
//! Step `k` evaluates the loss and gradient of parameters `θ_k` on batch
//! `k`, then updates `θ_k -> θ_{k+1}`. Per-sample gradients may be computed
//! in parallel but are summed in batch order, so a run is bit-reproducible.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::batch::Prepared;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, evaluate_with};
use crate::io::Dataset;
use crate::model::{param_specs, training_loss};
use crate::par::{map_indices, Execution};
use crate::params::ParamSet;
use crate::rdp::hash;
use crate::tensor::Tensor;

/// `lr · (1 + cos(π k / K)) / 2`.
pub fn cosine_lr(base: f64, k: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / total as f64).cos())
}

/// Velocity buffers of heavy-ball momentum, one per parameter in name
/// order.
#[derive(Clone, Debug)]
pub struct Momentum {
    velocity: Vec<Tensor<f32>>,
    mu: f32,
}

impl Momentum {
    pub fn new(params: &ParamSet<f32>, mu: f64) -> Self {
        Momentum {
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            mu: mu as f32,
        }
    }

    /// `v <- μ v + g; θ <- θ - lr v`.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), self.velocity.len())));
        }
        let lr = lr as f32;
        for (((_, p), v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("momentum", format!("{} vs {}", p.shape(), g.shape())));
            }
            for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Loss terms and name-ordered parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: f64,
    pub photometric: f64,
    pub grads: Vec<Tensor<f32>>,
}

pub fn sample_gradient(cfg: &RunConfig, params: &ParamSet<f32>, s: &Prepared, prior_seed: u64) -> Result<SampleGradient> {
    let x = s.input::<f32>(cfg, prior_seed, cfg.train.t)?;
    let y = s.targets::<f32>(cfg);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = training_loss(&mut g, &b, cfg, &x, &y)?;
    let loss = g.value(out.total).data()[0] as f64;
    let photometric = g.value(out.photometric).data()[0] as f64;
    let grads = g.backward(out.total);
    let grads = params
        .names()
        .map(|n| b.get(n).map(|v| grads.wrt(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleGradient {
        loss,
        photometric,
        grads,
    })
}

/// Batch-mean loss, photometric loss and gradient; samples are reduced in
/// slice order.
pub fn batch_gradient(
    exec: Execution,
    cfg: &RunConfig,
    params: &ParamSet<f32>,
    batch: &[(Prepared, u64)],
) -> Result<SampleGradient> {
    let parts = map_indices(exec, batch.len(), |i| sample_gradient(cfg, params, &batch[i].0, batch[i].1));
    let mut total: Option<SampleGradient> = None;
    for part in parts {
        let part = part?;
        match &mut total {
            None => total = Some(part),
            Some(t) => {
                t.loss += part.loss;
                t.photometric += part.photometric;
                for (a, b) in t.grads.iter_mut().zip(&part.grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut t = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let inv = 1.0 / batch.len() as f64;
    t.loss *= inv;
    t.photometric *= inv;
    for g in &mut t.grads {
        for v in g.data_mut() {
            *v *= inv as f32;
        }
    }
    Ok(t)
}

/// Deterministic batch schedule: an independent shuffle of the training set
/// per epoch, read in consecutive chunks.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    len: usize,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Sampler {
            seed,
            len,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(hash(&[self.seed, 0xE90C, self.epoch as u64])));
        self.epoch += 1;
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// One row of the training log, written at iteration 0, every
/// `log_every` iterations and after the last update.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Updates applied before this row's measurements.
    pub iteration: usize,
    pub lr: f64,
    /// Batch loss at this iteration.
    pub loss: f64,
    pub photometric: f64,
    pub val_psnr: f64,
    /// Training-set PSNR under the evaluation protocol; final row only.
    pub train_psnr: Option<f64>,
}

pub const LOG_HEADER: &str = "iteration,lr,loss,photometric,val_psnr,train_psnr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.lr,
            self.loss,
            self.photometric,
            self.val_psnr,
            self.train_psnr.map(|v| v.to_string()).unwrap_or_default()
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format {
            path: "train_log.csv".into(),
            detail: format!("bad row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            iteration: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: num(f[2])?,
            photometric: num(f[3])?,
            val_psnr: num(f[4])?,
            train_psnr: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        })
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format("train_log.csv", "unexpected header"));
    }
    lines.map(LogRow::parse).collect()
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ParamSet<f32>,
    pub log: Vec<LogRow>,
}

impl Trained {
    pub fn final_row(&self) -> &LogRow {
        self.log.last().expect("the log always has a final row")
    }
}

fn mean_psnr(exec: Execution, cfg: &RunConfig, params: &ParamSet<f32>, data: &Dataset) -> Result<f64> {
    Ok(aggregate(&evaluate_with(exec, cfg, params, data, None)?)?.psnr)
}

/// Trains from the initialization seeded by `train.seed`. `on_row` sees
/// every log row as soon as it is measured, including rows written before a
/// numerical abort.
pub fn train_with(
    exec: Execution,
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let tc = &cfg.train;
    let mut params = ParamSet::<f32>::init(&param_specs(cfg), tc.seed);
    let mut opt = Momentum::new(&params, tc.momentum);
    let mut sampler = Sampler::new(train_set.len(), tc.seed);
    let prepared: Vec<Prepared> = train_set.samples.iter().map(Prepared::new).collect();
    let mut log = Vec::new();
    for k in 0..=tc.iterations {
        let batch: Vec<(Prepared, u64)> = sampler
            .next_batch(tc.batch)
            .into_iter()
            .enumerate()
            .map(|(slot, i)| {
                let key = hash(&[tc.seed, k as u64, slot as u64]);
                let s = if tc.augment {
                    prepared[i].augmented(&mut ChaCha8Rng::seed_from_u64(key), tc.t)
                } else {
                    prepared[i].clone()
                };
                (s, key)
            })
            .collect();
        let step = batch_gradient(exec, cfg, &params, &batch)?;
        if !step.loss.is_finite() || step.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { iteration: k });
        }
        let lr = cosine_lr(tc.lr, k, tc.iterations);
        let last = k == tc.iterations;
        if k % tc.log_every.max(1) == 0 || last {
            let row = LogRow {
                iteration: k,
                lr,
                loss: step.loss,
                photometric: step.photometric,
                val_psnr: mean_psnr(exec, cfg, &params, val_set)?,
                train_psnr: if last { Some(mean_psnr(exec, cfg, &params, train_set)?) } else { None },
            };
            on_row(&row)?;
            log.push(row);
        }
        if !last {
            opt.step(&mut params, &step.grads, lr)?;
        }
    }
    Ok(Trained { params, log })
}

pub fn train(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<Trained> {
    train_with(Execution::default(), cfg, train_set, val_set, |_| Ok(()))
}
