//! The `pyror` command line.
//!
//! Architecture flags mirror the config-file keys (`--depth`, `--alpha`,
//! `--block-variant`, `--p-terminal`, `--num-classes`) and override values
//! read with `--config`. Training flags do the same for the training keys
//! and `--train-config`. Machine output is JSON on stdout, diagnostics go
//! to stderr; the process exits with 0 on success, 1 on invalid input and 2
//! on runtime or numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::analyzer::{analyze, AnalysisReport};
use crate::archspec::{ArchConfig, BlockVariant};
use crate::error::{Error, Result};
use crate::graph::{build_graph, validate_graph, Level, LayerGraph};
use crate::nnkernel::{gradcheck_with, GradcheckOptions, ParamStore};
use crate::stochdepth::{linear_decay, SurvivalSchedule};
use crate::trainer::{
    evaluate, load_cifar_files, make_synthetic, normalize, train, ChannelStats, Dataset, RunOptions, Split,
    TrainConfig, TRAIN_CONFIG_KEYS,
};

#[derive(Debug, Parser)]
#[command(name = "pyror", version, about = "Pyramidal RoR graph compiler, analyzer and trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Print the group table, parameter and MAC counts, expected SD compute.
    Describe {
        #[command(flatten)]
        arch: ArchArgs,
        /// Also write the JSON report here (`-` for stdout).
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Check a built or imported graph against the structural rules.
    Validate {
        #[command(flatten)]
        arch: ArchArgs,
        /// Validate this exported graph instead of building one.
        #[arg(long, value_name = "PATH")]
        graph: Option<PathBuf>,
    },
    /// Write the graph as JSON.
    Export {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(short, long, value_name = "PATH", default_value = "-")]
        output: PathBuf,
    },
    /// Draw stochastic-depth block masks from the linear-decay schedule.
    SampleSd {
        #[arg(long)]
        blocks: usize,
        #[arg(long, default_value_t = 0.5)]
        p_terminal: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        draws: usize,
    },
    /// Compare backward-pass gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = crate::nnkernel::gradcheck::DEFAULT_SAMPLES)]
        samples: usize,
        /// Keep flags per final-level block, e.g. `101`.
        #[arg(long, value_name = "BITS")]
        sd_mask: Option<String>,
        /// Spatial side of the random input.
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Train with SGD; one JSON record per epoch on stdout.
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for run.ndjson, checkpoints and stats.json.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: top-1 error and mean loss as JSON.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Normalization statistics written by `train`.
        #[arg(long, value_name = "PATH")]
        stats: Option<PathBuf>,
        /// Skip scaling residual branches by their survival probabilities.
        #[arg(long)]
        no_sd_scaling: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    /// Architecture `key = value` file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long, visible_alias = "variant")]
    pub block_variant: Option<BlockVariant>,
    #[arg(long)]
    pub p_terminal: Option<f64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

impl ArchArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<ArchConfig> {
        let mut cfg = ArchConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_kv_str(&read_text(path)?)?;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.block_variant {
            cfg.block_variant = v;
        }
        if let Some(v) = self.p_terminal {
            cfg.p_terminal = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keys of the training config file beyond the [`TrainConfig`] fields.
pub const DATA_CONFIG_KEYS: [&str; 5] = ["dataset", "train_files", "test_files", "synthetic_per_class", "synthetic_seed"];

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Training `key = value` file.
    #[arg(long, value_name = "PATH")]
    pub train_config: Option<PathBuf>,
    /// Starting point before the file and flags: cifar, svhn or smoke.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `epoch:lr,...`, e.g. `0:0.1,250:0.01,375:0.001`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// per_channel_meanstd or none.
    #[arg(long)]
    pub normalize: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// synthetic or cifar.
    #[arg(long)]
    pub dataset: Option<String>,
    /// CIFAR binary training files (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    pub train_files: Vec<PathBuf>,
    /// CIFAR binary test files.
    #[arg(long, value_delimiter = ',')]
    pub test_files: Vec<PathBuf>,
    #[arg(long)]
    pub synthetic_per_class: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
}

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { per_class: usize, seed: u64 },
    Cifar { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

impl DataSource {
    fn resolve(args: &DataArgs, file: &[(String, String)]) -> Result<Self> {
        let mut kind = "synthetic".to_string();
        let mut train_files = Vec::new();
        let mut test_files = Vec::new();
        let mut per_class = 500;
        let mut seed = 0;
        let bad = |k: &str, v: &str| Error::InvalidConfig(format!("{k} = {v:?}"));
        let paths = |v: &str| v.split(',').map(|s| PathBuf::from(s.trim())).collect::<Vec<_>>();
        for (k, v) in file {
            match k.as_str() {
                "dataset" => kind = v.clone(),
                "train_files" => train_files = paths(v),
                "test_files" => test_files = paths(v),
                "synthetic_per_class" => per_class = v.parse().map_err(|_| bad(k, v))?,
                "synthetic_seed" => seed = v.parse().map_err(|_| bad(k, v))?,
                _ => unreachable!("caller filters data keys"),
            }
        }
        if let Some(v) = &args.dataset {
            kind = v.clone();
        }
        if !args.train_files.is_empty() {
            train_files = args.train_files.clone();
        }
        if !args.test_files.is_empty() {
            test_files = args.test_files.clone();
        }
        per_class = args.synthetic_per_class.unwrap_or(per_class);
        seed = args.synthetic_seed.unwrap_or(seed);
        match kind.as_str() {
            "synthetic" => Ok(DataSource::Synthetic { per_class, seed }),
            "cifar" => Ok(DataSource::Cifar {
                train: train_files,
                test: test_files,
            }),
            other => Err(Error::InvalidConfig(format!("dataset {other:?}: expected synthetic or cifar"))),
        }
    }

    /// `(train, test)`; the synthetic test split uses the next seed.
    fn load(&self, classes: usize) -> Result<(Option<Dataset>, Option<Dataset>)> {
        match self {
            DataSource::Synthetic { per_class, seed } => {
                let train = make_synthetic(classes, *per_class, *seed)?;
                let mut test = make_synthetic(classes, (per_class / 5).max(1), seed.wrapping_add(1))?;
                test.split = Split::Test;
                Ok((Some(train), Some(test)))
            }
            DataSource::Cifar { train, test } => {
                let load = |files: &[PathBuf], split| {
                    (!files.is_empty()).then(|| load_cifar_files(files, split)).transpose()
                };
                Ok((load(train, Split::Train)?, load(test, Split::Test)?))
            }
        }
    }
}

impl TrainArgs {
    fn resolve(&self) -> Result<(TrainConfig, Vec<(String, String)>)> {
        let mut cfg = match &self.preset {
            Some(name) => TrainConfig::preset(name)?,
            None => TrainConfig::default(),
        };
        let mut data_keys = Vec::new();
        if let Some(path) = &self.train_config {
            let mut seen = Vec::new();
            for (k, v) in crate::archspec::parse_kv(&read_text(path)?)? {
                if seen.contains(&k) {
                    return Err(Error::InvalidConfig(format!("duplicate key {k:?}")));
                }
                seen.push(k.clone());
                if DATA_CONFIG_KEYS.contains(&k.as_str()) {
                    data_keys.push((k, v));
                } else if TRAIN_CONFIG_KEYS.contains(&k.as_str()) {
                    cfg.set(&k, &v)?;
                } else {
                    return Err(Error::InvalidConfig(format!(
                        "unknown key {k:?} (expected one of {}, {})",
                        TRAIN_CONFIG_KEYS.join(", "),
                        DATA_CONFIG_KEYS.join(", ")
                    )));
                }
            }
        }
        let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("lr_schedule", self.lr_schedule.clone())?;
        set("momentum", self.momentum.map(|v| v.to_string()))?;
        set("weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        set("augment", self.augment.map(|v| v.to_string()))?;
        set("normalize", self.normalize.clone())?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("eval_every", self.eval_every.map(|v| v.to_string()))?;
        set("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()))?;
        cfg.validate()?;
        Ok((cfg, data_keys))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Write to stdout; a reader that went away (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit_line(text: &str) -> Result<()> {
    emit(&format!("{text}\n"))
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if path.as_os_str() == "-" {
        emit_line(text)
    } else {
        Ok(fs::write(path, format!("{text}\n"))?)
    }
}

fn survival_for(graph: &LayerGraph) -> Result<SurvivalSchedule> {
    linear_decay(graph.final_blocks().len(), graph.config().p_terminal)
}

/// Human-readable summary printed by `describe`.
pub fn describe_table(report: &AnalysisReport) -> String {
    let mut s = String::new();
    let line = |s: &mut String, t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(
        &mut s,
        format!(
            "Pyramidal RoR  depth {}  alpha {}  variant {}",
            report.depth, report.alpha, report.variant
        ),
    );
    line(
        &mut s,
        format!(
            "final-level blocks {}  final width {}",
            report.final_blocks, report.final_width
        ),
    );
    line(&mut s, String::new());
    line(&mut s, format!("{:<6}{:>7}{:>10}  widths", "group", "blocks", "spatial"));
    for g in &report.groups {
        let widths = match (g.widths.first(), g.widths.last()) {
            (Some(a), Some(b)) => format!("{a} .. {b}"),
            _ => "-".into(),
        };
        line(
            &mut s,
            format!(
                "{:<6}{:>7}{:>10}  {widths}",
                g.group,
                g.blocks,
                format!("{}x{}", g.spatial.0, g.spatial.1)
            ),
        );
    }
    line(&mut s, String::new());
    let p = &report.params_by_level;
    line(&mut s, format!("parameters        {:>14}", report.total_params));
    line(&mut s, format!("  trunk           {:>14}", p.trunk));
    line(&mut s, format!("  final shortcut  {:>14}", p.final_shortcut));
    line(&mut s, format!("  middle shortcut {:>14}", p.middle_shortcut));
    line(&mut s, format!("  root shortcut   {:>14}", p.root_shortcut));
    line(&mut s, format!("  classifier      {:>14}", p.classifier));
    line(&mut s, format!("forward MACs      {:>14}", report.flops_forward));
    line(
        &mut s,
        format!(
            "expected MACs, SD {:>14.0}  ({:.4} of full, p_L = {}, mean survival {:.4})",
            report.expected_flops_sd,
            report.expected_compute_fraction,
            report.survival.p_terminal,
            report.survival.expected_active
        ),
    );
    s
}

fn cmd_describe(arch: &ArchArgs, json_path: Option<&Path>) -> Result<i32> {
    let graph = build_graph(&arch.resolve()?)?;
    let report = analyze(&graph, &survival_for(&graph)?)?;
    match json_path {
        Some(p) if p.as_os_str() == "-" => write_output(p, &serde_json::to_string_pretty(&report)?)?,
        Some(p) => {
            emit(&describe_table(&report))?;
            write_output(p, &serde_json::to_string_pretty(&report)?)?;
        }
        None => emit(&describe_table(&report))?,
    }
    Ok(0)
}

fn cmd_validate(arch: &ArchArgs, graph_path: Option<&Path>) -> Result<i32> {
    let graph = match graph_path {
        Some(p) => LayerGraph::from_json(&read_text(p)?)?,
        None => build_graph(&arch.resolve()?)?,
    };
    let violations = validate_graph(&graph);
    let report = json!({
        "valid": violations.is_empty(),
        "violations": violations,
        "nodes": graph.len(),
        "final_adds": graph.count_adds(Level::Final),
        "middle_adds": graph.count_adds(Level::Middle),
        "root_adds": graph.count_adds(Level::Root),
        "projections": graph.projection_count(),
        "weighted_layers": graph.weighted_layers(),
    });
    emit_line(&serde_json::to_string_pretty(&report)?)?;
    for v in &violations {
        eprintln!("violation: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 1 })
}

fn cmd_export(arch: &ArchArgs, output: &Path) -> Result<i32> {
    let graph = build_graph(&arch.resolve()?)?;
    write_output(output, &graph.to_json()?)?;
    if output.as_os_str() != "-" {
        eprintln!("wrote {} nodes to {}", graph.len(), output.display());
    }
    Ok(0)
}

fn cmd_sample_sd(blocks: usize, p_terminal: f64, seed: u64, draws: usize) -> Result<i32> {
    let schedule = linear_decay(blocks, p_terminal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..draws).map(|_| schedule.sample_mask(&mut rng)).collect();
    let report = json!({
        "blocks": blocks,
        "p_terminal": p_terminal,
        "seed": seed,
        "probs": schedule.probs(),
        "expected_active": schedule.expected_active(),
        "masks": masks,
    });
    emit_line(&serde_json::to_string(&report)?)?;
    Ok(0)
}

fn parse_mask(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::InvalidConfig(format!("sd mask {bits:?}: expected 0/1 characters"))),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    arch: &ArchArgs,
    tolerance: f64,
    seed: u64,
    samples: usize,
    sd_mask: Option<&str>,
    side: usize,
    json_path: Option<&Path>,
) -> Result<i32> {
    let cfg = arch.resolve()?.with_input_shape((3, side, side));
    let graph = build_graph(&cfg)?;
    let mask = sd_mask.map(parse_mask).transpose()?;
    if let Some(m) = &mask {
        if m.len() != graph.final_blocks().len() {
            return Err(Error::InvalidConfig(format!(
                "sd mask has {} flags for {} blocks",
                m.len(),
                graph.final_blocks().len()
            )));
        }
    }
    let opts = GradcheckOptions {
        samples,
        sd_mask: mask,
        ..GradcheckOptions::new(tolerance, seed)
    };
    let report = gradcheck_with(&graph, &opts)?;
    emit_line(&format!(
        "max rel err < {tolerance:e}: {}",
        if report.passed { "PASS" } else { "FAIL" }
    ))?;
    eprintln!(
        "max rel err {:.3e} at {} over {} coordinates ({} kinks skipped, {} below resolution)",
        report.max_rel_error, report.worst_param, report.checked, report.kinks_skipped, report.below_resolution
    );
    if let Some(p) = json_path {
        write_output(p, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.passed { 0 } else { 2 })
}

fn apply_stats(data: Option<Dataset>, stats: Option<&ChannelStats>) -> Result<Option<Dataset>> {
    match (data, stats) {
        (Some(d), Some(s)) => Ok(Some(normalize(&d, s)?)),
        (d, _) => Ok(d),
    }
}

fn cmd_train(arch: &ArchArgs, train_args: &TrainArgs, data_args: &DataArgs, out: Option<&Path>) -> Result<i32> {
    let arch = arch.resolve()?;
    let (cfg, data_keys) = train_args.resolve()?;
    let source = DataSource::resolve(data_args, &data_keys)?;
    let graph = build_graph(&arch)?;
    let (train_set, test_set) = source.load(arch.num_classes)?;
    let train_set = train_set.ok_or_else(|| Error::InvalidConfig("no training files given".into()))?;
    let sd = survival_for(&graph)?;
    let sd = (!sd.is_noop()).then_some(sd);

    let mut stdout = io::stdout().lock();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("arch.cfg"), arch.to_kv_string())?;
            fs::write(dir.join("train.cfg"), cfg.to_kv_string())?;
            Some(fs::File::create(dir.join("run.ndjson"))?)
        }
        None => None,
    };
    let mut tee = Tee {
        a: &mut stdout,
        b: log_file.as_mut(),
    };
    let outcome = train(
        &graph,
        &cfg,
        &train_set,
        sd.as_ref(),
        RunOptions {
            test: test_set.as_ref(),
            log: Some(&mut tee),
            checkpoint_dir: out.map(Path::to_path_buf),
            initial: None,
        },
    )?;
    if let (Some(dir), Some(stats)) = (out, &outcome.stats) {
        fs::write(dir.join("stats.json"), serde_json::to_string_pretty(stats)?)?;
    }
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "finished {} epochs: train acc {:.4}, test acc {}",
            outcome.log.len(),
            last.train_acc,
            last.test_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(0)
}

struct Tee<'a> {
    a: &'a mut dyn Write,
    b: Option<&'a mut fs::File>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.a.write_all(buf)?;
        if let Some(b) = self.b.as_mut() {
            b.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.a.flush()?;
        if let Some(b) = self.b.as_mut() {
            b.flush()?;
        }
        Ok(())
    }
}

fn cmd_eval(checkpoint: &Path, data_args: &DataArgs, stats: Option<&Path>, no_sd_scaling: bool) -> Result<i32> {
    let (arch, params) = ParamStore::load(checkpoint)?;
    let graph = build_graph(&arch)?;
    params.check_against(&graph)?;
    let source = DataSource::resolve(data_args, &[])?;
    let (train_set, test_set) = source.load(arch.num_classes)?;
    let stats: Option<ChannelStats> = match stats {
        Some(p) => Some(serde_json::from_str(&read_text(p)?)?),
        None => None,
    };
    let data = apply_stats(test_set.or(train_set), stats.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("no evaluation files given".into()))?;
    let sd = survival_for(&graph)?;
    let scaling = (!no_sd_scaling && !sd.is_noop()).then_some(&sd);
    let m = evaluate(&graph, &params, &data, scaling)?;
    emit_line(&serde_json::to_string(&m)?)?;
    Ok(0)
}

/// Run one parsed command, returning the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Describe { arch, json } => cmd_describe(arch, json.as_deref()),
        Command::Validate { arch, graph } => cmd_validate(arch, graph.as_deref()),
        Command::Export { arch, output } => cmd_export(arch, output),
        Command::SampleSd {
            blocks,
            p_terminal,
            seed,
            draws,
        } => cmd_sample_sd(*blocks, *p_terminal, *seed, *draws),
        Command::Gradcheck {
            arch,
            tolerance,
            seed,
            samples,
            sd_mask,
            side,
            json,
        } => cmd_gradcheck(arch, *tolerance, *seed, *samples, sd_mask.as_deref(), *side, json.as_deref()),
        Command::Train { arch, train, data, out } => cmd_train(arch, train, data, out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            stats,
            no_sd_scaling,
        } => cmd_eval(checkpoint, data, stats.as_deref(), *no_sd_scaling),
    }
}

/// Parse `args`, run, and map errors to exit codes (1 invalid input,
/// 2 runtime failure).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
