//! Caption warm-up followed by multi-task training with alternating
//! per-task batches, accumulated gradients and one update per round.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Graph, Var};
use crate::caption::TokenSequence;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{MaskTarget, Model};
use crate::optim::{OptimConfig, Optimizer};
use crate::params::{Group, ParamStore};
use crate::rng::{keyed_rng, Purpose};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cap,
    Depth,
    Seg,
}

impl Task {
    /// Alternation order within a round.
    pub const ALL: [Task; 3] = [Task::Cap, Task::Depth, Task::Seg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cap => "cap",
            Task::Depth => "depth",
            Task::Seg => "seg",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Task::Cap => w.cap,
            Task::Depth => w.depth,
            Task::Seg => w.seg,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Rate for the backbone, projector and caption decoder.
    pub lr_shared: f64,
    /// Rate for the depth and segmentation heads.
    pub lr_heads: f64,
    pub batch_cap: usize,
    pub batch_depth: usize,
    pub batch_seg: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_trainable: Vec<Group>,
    pub optimizer: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_shared: 3e-4,
            lr_heads: 1e-3,
            batch_cap: 8,
            batch_depth: 32,
            batch_seg: 32,
            epochs: 3,
            warmup_epochs: 1,
            warmup_trainable: vec![Group::Projector],
            optimizer: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lr_shared", self.lr_shared), ("lr_heads", self.lr_heads)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{k}"), format!("must be > 0, got {v}")));
            }
        }
        for (k, v) in [
            ("batch_cap", self.batch_cap),
            ("batch_depth", self.batch_depth),
            ("batch_seg", self.batch_seg),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{k}"), "must be >= 1"));
            }
        }
        if self.warmup_trainable != [Group::Projector] {
            return Err(Error::config(
                "train.warmup_trainable",
                "warm-up trains the projector only; other groups must stay frozen",
            ));
        }
        self.optimizer.validate()
    }

    pub fn batch(&self, t: Task) -> usize {
        match t {
            Task::Cap => self.batch_cap,
            Task::Depth => self.batch_depth,
            Task::Seg => self.batch_seg,
        }
    }

    pub fn lr(&self, g: Group) -> f64 {
        match g {
            Group::Backbone | Group::Projector | Group::Decoder => self.lr_shared,
            Group::Depth | Group::Seg => self.lr_heads,
        }
    }
}

/// Per-task training examples at compute precision.
#[derive(Debug, Clone)]
pub struct TaskData<T> {
    pub cap: Vec<(Tensor<T>, TokenSequence)>,
    pub depth: Vec<(Tensor<T>, Tensor<T>)>,
    pub seg: Vec<(Tensor<T>, Vec<MaskTarget<T>>)>,
}

impl<T: Real> TaskData<T> {
    /// Splits the dataset into consecutive, disjoint per-task slices of
    /// the requested sizes, in `cap, depth, seg` order.
    pub fn from_dataset(data: &Dataset, sizes: [usize; 3], vocab_size: usize) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total > data.len() {
            return Err(Error::config(
                "data.train_per_task",
                format!("needs {total} samples, dataset has {}", data.len()),
            ));
        }
        let s = &data.samples;
        let (a, b) = (sizes[0], sizes[0] + sizes[1]);
        Ok(Self {
            cap: s[..a]
                .iter()
                .map(|x| Ok((x.image.cast(), TokenSequence::new(x.caption.clone(), vocab_size)?)))
                .collect::<Result<_>>()?,
            depth: s[a..b].iter().map(|x| (x.image.cast(), x.depth.cast())).collect(),
            seg: s[b..total]
                .iter()
                .map(|x| {
                    let t = x
                        .instances
                        .iter()
                        .map(|m| MaskTarget {
                            phrase: m.phrase.clone(),
                            mask: m.mask.cast(),
                        })
                        .collect();
                    (x.image.cast(), t)
                })
                .collect(),
        })
    }

    pub fn len(&self, t: Task) -> usize {
        match t {
            Task::Cap => self.cap.len(),
            Task::Depth => self.depth.len(),
            Task::Seg => self.seg.len(),
        }
    }

    /// Loss of sample `i` of task `t`.
    pub fn sample_loss(
        &self,
        model: &Model,
        g: &mut Graph<'_, T>,
        t: Task,
        i: usize,
        w: &LossWeights,
    ) -> Result<Var> {
        match t {
            Task::Cap => model.caption_loss(g, &self.cap[i].0, &self.cap[i].1),
            Task::Depth => model.depth_loss(g, &self.depth[i].0, &self.depth[i].1, w),
            Task::Seg => model.seg_loss(g, &self.seg[i].0, &self.seg[i].1, w),
        }
    }
}

/// Batches of sample indices for every task, all with the same step count.
///
/// Steps per epoch are `max_t ceil(n_t / B_t)`. The task that sets this
/// count visits each sample once, with a shorter last batch when `B_t`
/// does not divide `n_t`. Every other task fills `steps * B_t` slots from
/// consecutive fresh permutations of its samples, so samples repeat
/// evenly across repeats.
pub fn resample_equalize(sizes: [usize; 3], batches: [usize; 3], seed: u64, epoch: usize) -> Result<[Vec<Vec<usize>>; 3]> {
    for t in Task::ALL {
        if sizes[t.index()] == 0 {
            return Err(Error::config(format!("data.{}", t.name()), "task dataset is empty"));
        }
        if batches[t.index()] == 0 {
            return Err(Error::config(format!("train.batch_{}", t.name()), "must be >= 1"));
        }
    }
    let steps = (0..3).map(|i| sizes[i].div_ceil(batches[i])).max().expect("three tasks");
    Ok([0, 1, 2].map(|i| {
        let (n, b) = (sizes[i], batches[i]);
        let mut rng = keyed_rng(seed, Purpose::Resample, (epoch as u64) << 2 | i as u64);
        let mut order = Vec::new();
        let slots = if n.div_ceil(b) == steps { n } else { steps * b };
        while order.len() < slots {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            order.extend(p);
        }
        order.truncate(slots);
        order.chunks(b).map(<[usize]>::to_vec).collect()
    }))
}

/// One task's batch inside a round.
pub type RoundBatches<'a> = [Option<&'a [usize]>; 3];

/// Gradients of `weight * mean_i loss_i` over `batch`, and the mean loss.
/// Per-sample passes may run in parallel; they are summed in batch order.
fn task_gradients<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    trainable: &(dyn Fn(Group) -> bool + Sync),
    data: &TaskData<T>,
    task: Task,
    batch: &[usize],
    weights: &LossWeights,
) -> Result<(GradientMap<T>, f64)> {
    let per_sample: Vec<(GradientMap<T>, f64)> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::with_trainable(store, trainable);
            let l = data.sample_loss(model, &mut g, task, i, weights)?;
            let v = g.scalar(l)?.f64();
            if !v.is_finite() {
                return Ok((GradientMap::new(), v));
            }
            Ok((g.backward(l)?, v))
        })
        .collect::<Result<_>>()?;
    let scale = T::of(task.weight(weights) / batch.len() as f64);
    let mut acc = GradientMap::new();
    let mut sum = 0.0;
    for (gm, v) in &per_sample {
        acc.accumulate(gm, scale);
        sum += v;
    }
    Ok((acc, sum / batch.len() as f64))
}

/// Runs the enabled tasks in `cap, depth, seg` order, accumulating
/// `lambda_t * mean loss_t` gradients, then applies one optimizer update.
/// Tasks with zero weight are skipped. Returns the unweighted batch-mean
/// loss of every task that ran; a non-finite loss aborts before any
/// update with [`Error::Divergence`].
#[allow(clippy::too_many_arguments)]
pub fn multitask_step<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    data: &TaskData<T>,
    round: RoundBatches<'_>,
    weights: &LossWeights,
    cfg: &TrainConfig,
    step: usize,
) -> Result<[Option<f64>; 3]> {
    let mut total = GradientMap::new();
    let mut losses = [None; 3];
    for t in Task::ALL {
        if t.weight(weights) == 0.0 {
            continue;
        }
        let Some(batch) = round[t.index()] else {
            return Err(Error::contract(format!("round is missing a {t} batch")));
        };
        if batch.is_empty() {
            return Err(Error::contract(format!("empty {t} batch")));
        }
        let (g, l) = task_gradients(model, store, &|_| true, data, t, batch, weights)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                task: t.name().into(),
                step,
            });
        }
        total.accumulate(&g, T::one());
        losses[t.index()] = Some(l);
    }
    opt.step(store, &total, |grp| cfg.lr(grp));
    Ok(losses)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub wall_ms: f64,
}

fn log_record(out: &mut dyn Write, r: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(r).expect("serializable record");
    writeln!(out, "{line}").map_err(|e| Error::io("<metrics>", e))
}

/// Epoch-mean losses per task (`None` for tasks that did not run).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_means: Vec<[Option<f64>; 3]>,
    pub steps: usize,
}

fn epoch_means(sums: [f64; 3], counts: [usize; 3]) -> [Option<f64>; 3] {
    [0, 1, 2].map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64))
}

/// Caption-only alignment: every group but the projector is frozen.
/// `cfg.warmup_epochs` passes over the caption data in seeded order.
pub fn warmup_alignment<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &TaskData<T>,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    let trainable = |g: Group| g == Group::Projector;
    let mut opt = Optimizer::new(&cfg.optimizer);
    let weights = LossWeights::default().with_tasks([1.0, 0.0, 0.0]);
    let mut report = TrainReport::default();
    let start = Instant::now();
    for epoch in 0..cfg.warmup_epochs {
        let mut order: Vec<usize> = (0..data.cap.len()).collect();
        order.shuffle(&mut keyed_rng(seed, Purpose::Warmup, epoch as u64));
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch_cap) {
            let (g, l) = task_gradients(model, store, &trainable, data, Task::Cap, batch, &weights)?;
            log_record(
                log,
                &StepRecord {
                    stage: "warmup".into(),
                    epoch,
                    step: report.steps,
                    task: Task::Cap,
                    loss: l,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                },
            )?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    task: "cap".into(),
                    step: report.steps,
                });
            }
            opt.step(store, &g, |grp| cfg.lr(grp));
            sum += l;
            count += 1;
            report.steps += 1;
        }
        report.epoch_means.push(epoch_means([sum, 0.0, 0.0], [count, 0, 0]));
    }
    Ok(report)
}

/// Multi-task training: every epoch resamples the task datasets to a
/// common step count and runs one [`multitask_step`] per round.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &TaskData<T>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    weights.validate()?;
    let mut opt = Optimizer::new(&cfg.optimizer);
    let sizes = Task::ALL.map(|t| data.len(t));
    let batches = Task::ALL.map(|t| cfg.batch(t));
    let mut report = TrainReport::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let plan = resample_equalize(sizes, batches, seed, epoch)?;
        let mut sums = [0.0; 3];
        let mut counts = [0; 3];
        for r in 0..plan[0].len() {
            let round = [0, 1, 2].map(|i| Some(plan[i][r].as_slice()));
            let step = report.steps;
            let losses = match multitask_step(model, store, &mut opt, data, round, weights, cfg, step) {
                Err(Error::Divergence { task, step }) => {
                    writeln!(log, "{{\"stage\":\"train\",\"epoch\":{epoch},\"step\":{step},\"task\":\"{task}\",\"error\":\"non-finite loss\"}}")
                        .map_err(|e| Error::io("<metrics>", e))?;
                    return Err(Error::Divergence { task, step });
                }
                other => other?,
            };
            for t in Task::ALL {
                if let Some(l) = losses[t.index()] {
                    sums[t.index()] += l;
                    counts[t.index()] += 1;
                    log_record(
                        log,
                        &StepRecord {
                            stage: "train".into(),
                            epoch,
                            step,
                            task: t,
                            loss: l,
                            wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        },
                    )?;
                }
            }
            report.steps += 1;
        }
        report.epoch_means.push(epoch_means(sums, counts));
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
