//! Training hyperparameters and their `key = value` file form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archspec::parse_kv;
use crate::error::{Error, Result};

/// Step learning-rate schedule: `(start_epoch, lr)` pairs, first at epoch 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        match steps.first() {
            None => return Err(Error::InvalidConfig("lr schedule is empty".into())),
            Some(&(start, _)) if start != 0 => {
                return Err(Error::InvalidConfig(format!("lr schedule must start at epoch 0, not {start}")))
            }
            _ => {}
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidConfig("lr schedule start epochs must strictly increase".into()));
        }
        if let Some(&(e, lr)) = steps.iter().find(|(_, lr)| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::InvalidConfig(format!("lr {lr} at epoch {e} must be finite and non-negative")));
        }
        Ok(LrSchedule { steps })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        LrSchedule::new(vec![(0, lr)])
    }

    /// 0.1, divided by ten at epochs 250 and 375.
    pub fn cifar() -> Self {
        LrSchedule {
            steps: vec![(0, 0.1), (250, 0.01), (375, 0.001)],
        }
    }

    /// 0.1, divided by ten at epochs 30 and 35.
    pub fn svhn() -> Self {
        LrSchedule {
            steps: vec![(0, 0.1), (30, 0.01), (35, 0.001)],
        }
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }

    /// Rate in effect at `epoch`, with no upper bound check.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .rev()
            .find(|&&(start, _)| start <= epoch)
            .map(|&(_, lr)| lr)
            .expect("schedule starts at epoch 0")
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    /// `"0:0.1,250:0.01"`; a bare number is a constant rate.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("lr schedule {s:?}: expected epoch:lr[,epoch:lr...]"));
        if let Ok(lr) = s.trim().parse::<f64>() {
            return LrSchedule::constant(lr);
        }
        let mut steps = Vec::new();
        for part in s.split(',') {
            let (e, lr) = part.split_once(':').ok_or_else(bad)?;
            steps.push((e.trim().parse().map_err(|_| bad())?, lr.trim().parse().map_err(|_| bad())?));
        }
        LrSchedule::new(steps)
    }
}

/// Learning rate for `epoch` of a run lasting `epochs` epochs.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::InvalidConfig(format!("epoch {epoch} outside [0, {epochs})")));
    }
    Ok(schedule.rate(epoch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    #[default]
    PerChannelMeanstd,
    None,
}

impl fmt::Display for Normalize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalize::PerChannelMeanstd => "per_channel_meanstd",
            Normalize::None => "none",
        })
    }
}

impl FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_channel_meanstd" => Ok(Normalize::PerChannelMeanstd),
            "none" => Ok(Normalize::None),
            _ => Err(Error::InvalidConfig(format!(
                "normalize {s:?}: expected per_channel_meanstd or none"
            ))),
        }
    }
}

/// Keys accepted in a training config file.
pub const TRAIN_CONFIG_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "lr_schedule",
    "momentum",
    "weight_decay",
    "augment",
    "normalize",
    "seed",
    "eval_every",
    "checkpoint_every",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub normalize: Normalize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0 disables).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::cifar()
    }
}

impl TrainConfig {
    /// 500 epochs, batch 128, the CIFAR step schedule.
    pub fn cifar() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            lr_schedule: LrSchedule::cifar(),
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: true,
            normalize: Normalize::PerChannelMeanstd,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }

    /// 40 epochs with the SVHN step schedule. Batch size stays at 128;
    /// set it to 32 for the smaller-batch protocol.
    pub fn svhn() -> Self {
        TrainConfig {
            epochs: 40,
            lr_schedule: LrSchedule::svhn(),
            ..TrainConfig::cifar()
        }
    }

    /// Desk-scale profile used for the synthetic smoke run: 30 epochs at a
    /// constant rate with the default optimizer.
    pub fn smoke() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_schedule: LrSchedule {
                steps: vec![(0, 0.1)],
            },
            ..TrainConfig::cifar()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar" => Ok(TrainConfig::cifar()),
            "svhn" => Ok(TrainConfig::svhn()),
            "smoke" => Ok(TrainConfig::smoke()),
            _ => Err(Error::InvalidConfig(format!("unknown preset {name:?} (cifar, svhn, smoke)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(&self.lr_schedule, epoch, self.epochs)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (key, value) in parse_kv(text)? {
            if seen.contains(&key) {
                return Err(Error::InvalidConfig(format!("duplicate key {key:?}")));
            }
            self.set(&key, &value)?;
            seen.push(key);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::InvalidConfig(format!("{key} = {value:?}: {e}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "momentum" => self.momentum = value.parse().map_err(|e| bad(&e))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|e| bad(&e))?,
            "augment" => self.augment = value.parse().map_err(|e| bad(&e))?,
            "normalize" => self.normalize = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "eval_every" => self.eval_every = value.parse().map_err(|e| bad(&e))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|e| bad(&e))?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {key:?} (expected one of {})",
                    TRAIN_CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "epochs = {}\nbatch_size = {}\nlr_schedule = {}\nmomentum = {}\nweight_decay = {}\naugment = {}\nnormalize = {}\nseed = {}\neval_every = {}\ncheckpoint_every = {}\n",
            self.epochs,
            self.batch_size,
            self.lr_schedule,
            self.momentum,
            self.weight_decay,
            self.augment,
            self.normalize,
            self.seed,
            self.eval_every,
            self.checkpoint_every
        )
    }
}
