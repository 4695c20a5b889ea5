//! Desk-scale training: datasets, augmentation, SGD, evaluation.

mod augment;
mod config;
mod data;
mod run;

pub use augment::{augment_batch, augment_image, PAD};
pub use config::{lr_at, LrSchedule, Normalize, TrainConfig, TRAIN_CONFIG_KEYS};
pub use data::{
    class_color, decode_cifar_binary, load_cifar_binary, load_cifar_files, make_synthetic, normalize, ChannelStats,
    Dataset, Split, CIFAR_RECORD_LEN, SYNTHETIC_BACKGROUND,
};
pub use run::{evaluate, train, EpochRecord, EvalMetrics, RunOptions, StepStats, TrainOutcome, Trainer};
