//! Load CIFAR-10 binary batches, normalize with training statistics,
//! augment a batch and evaluate a freshly initialized network.
//!
//!     cargo run --release --example cifar -- data_batch_1.bin [test_batch.bin]
//!
//! Without arguments a small file in the CIFAR layout is written to a
//! temporary directory and used instead.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pyror::archspec::{ArchConfig, BlockVariant};
use pyror::graph::build_graph;
use pyror::nnkernel::init_params;
use pyror::trainer::{
    augment_batch, evaluate, load_cifar_binary, normalize, ChannelStats, Split, CIFAR_RECORD_LEN,
};

fn demo_file() -> std::io::Result<PathBuf> {
    let path = std::env::temp_dir().join("pyror_demo_batch.bin");
    let bytes: Vec<u8> = (0..40 * CIFAR_RECORD_LEN)
        .map(|i| if i % CIFAR_RECORD_LEN == 0 { (i / CIFAR_RECORD_LEN % 10) as u8 } else { (i * 31 % 251) as u8 })
        .collect();
    std::fs::write(&path, bytes)?;
    Ok(path)
}

fn main() -> pyror::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let train_path = match args.first() {
        Some(p) => p.clone(),
        None => demo_file()?,
    };
    let train = load_cifar_binary(&train_path, Split::Train)?;
    println!("{}: {} images, classes {:?}", train_path.display(), train.len(), train.histogram());

    let stats = ChannelStats::from_train(&train)?;
    println!("channel mean {:.4?} std {:.4?}", stats.mean, stats.std);
    let train = normalize(&train, &stats)?;
    let test = match args.get(1) {
        Some(p) => normalize(&load_cifar_binary(p, Split::Test)?, &stats)?,
        None => train.select(&(0..train.len().min(100)).collect::<Vec<_>>()),
    };

    let batch = train.images.select(&(0..train.len().min(8)).collect::<Vec<_>>());
    let augmented = augment_batch(&batch, &mut ChaCha8Rng::seed_from_u64(0));
    println!("augmented batch {:?}", augmented.dims());

    let graph = build_graph(&ArchConfig::new(8, 3, BlockVariant::PyramidBn))?;
    let params = init_params(&graph, 0)?;
    let m = evaluate(&graph, &params, &test, None)?;
    println!("untrained top-1 error {:.3}, mean loss {:.3}", m.top1_error, m.mean_loss);
    Ok(())
}
