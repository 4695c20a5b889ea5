//! SGD training loop and evaluation.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment_batch;
use super::config::{Normalize, TrainConfig};
use super::data::{normalize, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::nnkernel::ops::{argmax_rows, softmax_cross_entropy};
use crate::nnkernel::{backward, forward_eval, forward_train, init_params, ParamStore, Tensor};
use crate::stochdepth::SurvivalSchedule;

const EVAL_BATCH: usize = 250;

/// Stream ids: data order and augmentation draw from one stream, block
/// masks from another, so enabling a mask never shifts the data stream.
const DATA_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub lr: f64,
    /// Mean fraction of final-level blocks executed per step.
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1_error: f64,
    pub mean_loss: f64,
    pub count: usize,
}

/// SGD with momentum and weight decay over one [`ParamStore`].
///
/// `v <- momentum * v - lr * (g + weight_decay * theta)`, `theta <- theta + v`,
/// applied to every learned tensor.
#[derive(Debug, Clone)]
pub struct Trainer<'g> {
    graph: &'g LayerGraph,
    cfg: TrainConfig,
    params: ParamStore,
    velocity: Vec<Vec<f64>>,
    data_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    steps: usize,
}

impl<'g> Trainer<'g> {
    /// Fresh He-initialized parameters from `cfg.seed`.
    pub fn new(graph: &'g LayerGraph, cfg: TrainConfig) -> Result<Self> {
        let params = init_params(graph, cfg.seed)?;
        Trainer::with_params(graph, cfg, params)
    }

    pub fn with_params(graph: &'g LayerGraph, cfg: TrainConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        params.check_against(graph)?;
        let velocity = params.iter().filter(|(_, _, p)| p.learned).map(|(_, _, p)| vec![0.0; p.len()]).collect();
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        Ok(Trainer {
            graph,
            data_rng: stream(DATA_STREAM),
            mask_rng: stream(MASK_STREAM),
            cfg,
            params,
            velocity,
            steps: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One mask per mini-batch from the dedicated mask stream.
    pub fn sample_mask(&mut self, schedule: &SurvivalSchedule) -> Vec<bool> {
        schedule.sample_mask(&mut self.mask_rng)
    }

    /// Forward, loss, backward and one SGD update on a prepared batch.
    pub fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64, mask: Option<&[bool]>) -> Result<StepStats> {
        let (logits, cache) = forward_train(self.graph, &mut self.params, images, mask)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels);
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.steps, loss });
        }
        backward(self.graph, &mut self.params, &cache, &dlogits)?;
        self.apply_update(lr);
        self.steps += 1;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(StepStats {
            loss,
            correct,
            count: labels.len(),
            active_fraction: cache.active_fraction(),
        })
    }

    fn apply_update(&mut self, lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let learned = self.params.iter_mut().filter(|(_, _, p)| p.learned);
        for ((_, _, p), v) in learned.zip(self.velocity.iter_mut()) {
            for ((theta, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel - lr * (g + wd * *theta);
                *theta += *vel;
            }
        }
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn epoch(&mut self, data: &Dataset, lr: f64, sd: Option<&SurvivalSchedule>) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.data_rng);
        let (mut loss_sum, mut correct, mut active_sum, mut batches) = (0.0, 0, 0.0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut images = data.images.select(chunk);
            if self.cfg.augment {
                images = augment_batch(&images, &mut self.data_rng);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mask = sd.map(|s| self.sample_mask(s));
            let stats = self.step(&images, &labels, lr, mask.as_deref())?;
            loss_sum += stats.loss * chunk.len() as f64;
            correct += stats.correct;
            active_sum += stats.active_fraction;
            batches += 1;
        }
        Ok(EpochRecord {
            epoch: 0,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            test_acc: None,
            lr,
            active_fraction: active_sum / batches as f64,
        })
    }
}

/// Eval-mode top-1 error and mean cross-entropy; with `sd`, residual
/// branches are scaled by their survival probabilities.
pub fn evaluate(
    graph: &LayerGraph,
    params: &ParamStore,
    data: &Dataset,
    sd: Option<&SurvivalSchedule>,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut wrong, mut loss_sum) = (0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let images = data.images.select(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = forward_eval(graph, params, &images, sd)?;
        loss_sum += softmax_cross_entropy(&logits, &labels).0 * chunk.len() as f64;
        wrong += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(EvalMetrics {
        top1_error: wrong as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        count: data.len(),
    })
}

/// Side outputs of [`train`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub test: Option<&'a Dataset>,
    /// Receives one JSON record per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for `epoch_NNNN.ckpt` files and `final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialization.
    pub initial: Option<ParamStore>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub params: ParamStore,
    /// Statistics used to normalize inputs, if normalization was on.
    pub stats: Option<ChannelStats>,
}

impl TrainOutcome {
    pub fn best_train_acc(&self) -> f64 {
        self.log.iter().map(|r| r.train_acc).fold(0.0, f64::max)
    }
}

/// Train for `cfg.epochs` epochs. Inputs are normalized with statistics of
/// `train` when `cfg.normalize` asks for it; the same statistics are applied
/// to the test split.
pub fn train(
    graph: &LayerGraph,
    cfg: &TrainConfig,
    train: &Dataset,
    sd: Option<&SurvivalSchedule>,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.num_classes > graph.config().num_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, graph predicts {}",
            train.num_classes,
            graph.config().num_classes
        )));
    }
    if let Some(s) = sd {
        if s.len() != graph.final_blocks().len() {
            return Err(Error::InvalidConfig(format!(
                "survival schedule has {} entries for {} blocks",
                s.len(),
                graph.final_blocks().len()
            )));
        }
    }
    let (train, test, stats) = match cfg.normalize {
        Normalize::None => (train.clone(), opts.test.cloned(), None),
        Normalize::PerChannelMeanstd => {
            let stats = ChannelStats::from_train(train)?;
            let test = opts.test.map(|t| normalize(t, &stats)).transpose()?;
            (normalize(train, &stats)?, test, Some(stats))
        }
    };
    let mut trainer = match opts.initial.take() {
        Some(p) => Trainer::with_params(graph, cfg.clone(), p)?,
        None => Trainer::new(graph, cfg.clone())?,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let mut record = trainer.epoch(&train, lr, sd)?;
        record.epoch = epoch;
        let last = epoch + 1 == cfg.epochs;
        if let Some(test) = &test {
            if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
                record.test_acc = Some(1.0 - evaluate(graph, trainer.params(), test, sd)?.top1_error);
            }
        }
        if let Some(w) = opts.log.as_mut() {
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                trainer.params().save(graph.config(), dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
            if last {
                trainer.params().save(graph.config(), dir.join("final.ckpt"))?;
            }
        }
        log.push(record);
    }
    Ok(TrainOutcome {
        log,
        params: trainer.into_params(),
        stats,
    })
}
