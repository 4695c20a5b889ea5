//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyror::analyzer::count_params;
use pyror::archspec::{derive_block_counts, pyramidal_widths, ArchConfig, BlockVariant, STEM_WIDTH};
use pyror::graph::{build_graph, validate_graph, LayerGraph, Level};
use pyror::nnkernel::ops::{conv2d_forward, conv2d_reference, ConvGeom};
use pyror::nnkernel::{gradcheck_with, init_params, GradcheckOptions, ParamStore, Tensor};
use pyror::stochdepth::{linear_decay, SurvivalSchedule};
use pyror::trainer::{load_cifar_binary, make_synthetic, train, RunOptions, Split, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Parameter count from the layer plan alone: stem conv + BN, two 3x3 convs
/// and the block's BNs per final-level block, tail BN, classifier, and 1x1
/// projections for the three groups and the root.
fn closed_form_params(depth: usize, alpha: usize, classes: usize) -> u64 {
    let n = (depth - 2) / 2;
    let w = |k: usize| (16 + k * alpha / n) as u64;
    let mut total = 3 * 16 * 9 + 2 * 16;
    for k in 1..=n {
        let (i, o) = (w(k - 1), w(k));
        total += 2 * i + 9 * i * o + 2 * o + 9 * o * o + 2 * o;
    }
    let out = w(n);
    total += 2 * out + out * classes as u64 + classes as u64;
    let per = n / 3;
    for g in 0..3 {
        total += w(g * per) * w((g + 1) * per);
    }
    total + 16 * out
}

fn criterion_1() -> Outcome {
    let cases = [(110, 48, 1.7e6), (110, 84, 3.8e6), (110, 270, 28.3e6), (146, 270, 38e6)];
    let mut parts = Vec::new();
    for (depth, alpha, budget) in cases {
        let started = Instant::now();
        let g = build_graph(&ArchConfig::new(depth, alpha, BlockVariant::PyramidBn)).map_err(|e| e.to_string())?;
        let count = count_params(&g).map_err(|e| e.to_string())?.total_params;
        let elapsed = started.elapsed();
        let oracle = closed_form_params(depth, alpha, 10);
        check(count == oracle, format!("({depth},{alpha}): counted {count}, closed form {oracle}"))?;
        let rel = count as f64 / budget - 1.0;
        check(rel.abs() <= 0.05, format!("({depth},{alpha}): {count} is {:+.2}% off {budget}", rel * 100.0))?;
        check(elapsed < Duration::from_secs(1), format!("({depth},{alpha}) took {elapsed:?}"))?;
        parts.push(format!("({depth},{alpha}) {count} {:+.2}%", rel * 100.0));
    }
    Ok(parts.join("; "))
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    for alpha in 0..=512usize {
        for n in 3..=216usize {
            let s = pyramidal_widths(alpha, n, STEM_WIDTH).map_err(|e| e.to_string())?;
            let last = s.final_width();
            check(last == 16 + alpha, format!("alpha {alpha}, N {n}: final {last}"))?;
            check(s.widths.len() == n, format!("alpha {alpha}, N {n}: {} widths", s.widths.len()))?;
            checked += 1;
        }
    }
    let s = pyramidal_widths(48, 54, STEM_WIDTH).map_err(|e| e.to_string())?;
    check(s.final_width() == 64, format!("alpha 48, N 54 ends at {}", s.final_width()))?;
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("{checked} schedules end at 16 + alpha; (48, 54) -> 64; {elapsed:.0?}"))
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut built = 0;
    for depth in [8, 14, 110, 146] {
        let n = derive_block_counts(depth).map_err(|e| e.to_string())?.total;
        for variant in [BlockVariant::PreAct, BlockVariant::PyramidBn] {
            for _ in 0..4 {
                let alpha = rng.random_range(0..=300);
                let g = build_graph(&ArchConfig::new(depth, alpha, variant)).map_err(|e| e.to_string())?;
                let counts = (
                    g.count_adds(Level::Final),
                    g.count_adds(Level::Middle),
                    g.count_adds(Level::Root),
                    g.projection_count(),
                );
                check(
                    counts == (n, 3, 1, 4),
                    format!("depth {depth}, alpha {alpha}, {variant}: {counts:?}, want ({n}, 3, 1, 4)"),
                )?;
                let violations = validate_graph(&g);
                check(violations.is_empty(), format!("depth {depth}: {violations:?}"))?;
                built += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("{built} graphs have N/3/1 Adds and 4 projections; {elapsed:.1?}"))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    for variant in [BlockVariant::PreAct, BlockVariant::PyramidBn] {
        let g = build_graph(&ArchConfig::new(8, 3, variant)).map_err(|e| e.to_string())?;
        for mask in [None, Some(vec![true, false, true])] {
            let opts = GradcheckOptions {
                sd_mask: mask.clone(),
                ..GradcheckOptions::new(1e-4, 0)
            };
            let r = gradcheck_with(&g, &opts).map_err(|e| e.to_string())?;
            let label = format!("{variant}{}", if mask.is_some() { "+mask" } else { "" });
            check(
                r.passed,
                format!("{label}: max rel err {:.3e} at {} (analytic {:e}, numeric {:e})",
                    r.max_rel_error, r.worst_param, r.worst_analytic, r.worst_numeric),
            )?;
            parts.push(format!(
                "{label} {:.1e} ({} coords, {} below resolution, raw {:.1e})",
                r.max_rel_error, r.checked, r.below_resolution, r.max_rel_error_raw
            ));
        }
    }
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(parts.join("; "))
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let padding = rng.random_range(0..=kernel / 2);
        let stride = rng.random_range(1..=2);
        let (b, c, o) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
        let h = rng.random_range(kernel..=14);
        let w = rng.random_range(kernel..=14);
        let x = Tensor::from_fn([b, c, h, w], |_| rng.random_range(-1.0..1.0));
        let weight: Vec<f64> = (0..o * c * kernel * kernel).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv2d_forward(&x, &weight, &ConvGeom::new((c, h, w), o, kernel, stride, padding));
        let slow = conv2d_reference(&x, &weight, o, kernel, stride, padding);
        check(fast.dims() == slow.dims(), format!("dims {:?} vs {:?}", fast.dims(), slow.dims()))?;
        let scale = slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let rel = fast.data().iter().zip(slow.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(rel);
    }
    check(worst <= 1e-5, format!("max relative difference {worst:e}"))?;
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("50 shapes, max relative difference {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let s = linear_decay(54, 0.5).map_err(|e| e.to_string())?;
    for (i, &p) in s.probs().iter().enumerate() {
        let l = (i + 1) as f64;
        let want = 1.0 - l / 54.0 * (1.0 - 0.5);
        check((p - want).abs() <= 1e-15, format!("p_{} = {p}, want {want}", i + 1))?;
    }
    check(s.probs()[53] == 0.5 && s.probs()[26] == 0.75, "p_54 / p_27 endpoints")?;

    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kept = vec![0usize; 54];
    for _ in 0..draws {
        for (k, keep) in s.sample_mask(&mut rng).into_iter().enumerate() {
            kept[k] += keep as usize;
        }
    }
    let mut worst_sigma = 0.0f64;
    for (k, &p) in s.probs().iter().enumerate() {
        let freq = kept[k] as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        worst_sigma = worst_sigma.max((freq - p).abs() / sigma);
    }
    check(worst_sigma <= 4.0, format!("keep rate off by {worst_sigma:.2} sigma"))?;

    let mean = (s.probs()[0] + s.probs()[53]) / 2.0;
    check((s.expected_active() - mean).abs() <= 1e-12, format!("expected_active {} vs {mean}", s.expected_active()))?;
    check((mean - 0.75).abs() < 0.01, format!("mean survival {mean} not near 0.75"))?;
    Ok(format!(
        "linear decay exact pointwise; worst keep-rate deviation {worst_sigma:.2} sigma; expected_active {:.6}",
        s.expected_active()
    ))
}

fn criterion_7() -> Outcome {
    let g = build_graph(&ArchConfig::new(8, 3, BlockVariant::PyramidBn).with_num_classes(2)).map_err(|e| e.to_string())?;
    let data = make_synthetic(2, 20, 7).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::smoke()
    };
    let ones = SurvivalSchedule::uniform(3, 1.0).map_err(|e| e.to_string())?;
    let mut with_sd = Trainer::new(&g, cfg.clone()).map_err(|e| e.to_string())?;
    let mut without = Trainer::new(&g, cfg).map_err(|e| e.to_string())?;
    with_sd.epoch(&data, 0.1, Some(&ones)).map_err(|e| e.to_string())?;
    without.epoch(&data, 0.1, None).map_err(|e| e.to_string())?;
    check(with_sd.steps() == 5, format!("{} steps", with_sd.steps()))?;
    check(with_sd.params().values_bitwise_eq(without.params()), "parameters differ")?;
    let moved = with_sd.params() != &init_params(&g, 0).map_err(|e| e.to_string())?;
    check(moved, "parameters did not move")?;
    Ok("5 steps, parameters bitwise identical".into())
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let arch = ArchConfig::new(8, 3, BlockVariant::PyramidBn).with_num_classes(2);
    let g = build_graph(&arch).map_err(|e| e.to_string())?;
    let sd = linear_decay(3, arch.p_terminal).map_err(|e| e.to_string())?;
    let data = make_synthetic(2, 500, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::smoke();
    let out = train(&g, &cfg, &data, Some(&sd), RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let reached = out.log.iter().find(|r| r.train_acc >= 0.95).map(|r| r.epoch + 1);
    let last = out.log.last().map_or(0.0, |r| r.train_acc);
    check(out.log.len() == 30, format!("{} epochs logged", out.log.len()))?;
    check(reached.is_some(), format!("best train accuracy {:.3}", out.best_train_acc()))?;
    check(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "95% reached at epoch {}, final train accuracy {last:.3}; {:.0?}",
        reached.unwrap_or(0),
        elapsed
    ))
}

fn graph_round_trip(g: &LayerGraph) -> Result<(), String> {
    let back = LayerGraph::from_json(&g.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check(&back == g, format!("depth {} graph changed on round trip", g.config().depth))
}

fn criterion_9() -> Outcome {
    for (depth, alpha, variant) in [(8, 0, BlockVariant::PyramidBn), (14, 7, BlockVariant::PreAct), (110, 48, BlockVariant::PyramidBn)] {
        graph_round_trip(&build_graph(&ArchConfig::new(depth, alpha, variant)).map_err(|e| e.to_string())?)?;
    }

    let arch = ArchConfig::new(8, 3, BlockVariant::PreAct).with_num_classes(2);
    let g = build_graph(&arch).map_err(|e| e.to_string())?;
    let data = make_synthetic(2, 8, 9).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(&g, TrainConfig::smoke()).map_err(|e| e.to_string())?;
    t.step(&data.images, &data.labels, 0.1, None).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    t.params().write_to(&arch, &mut bytes).map_err(|e| e.to_string())?;
    let (arch_back, loaded) = ParamStore::read_from(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
    check(arch_back == arch, "config echo differs")?;
    check(loaded.values_bitwise_eq(t.params()), "checkpoint values differ")?;

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cifar_two_records.bin");
    let d = load_cifar_binary(&fixture, Split::Test).map_err(|e| e.to_string())?;
    check(d.labels == [3, 8], format!("labels {:?}", d.labels))?;
    // (record, channel, row, column) -> byte, from an independent decoder.
    for ((r, c, y, x), byte) in [
        ((0, 0, 0, 0), 0u8),
        ((0, 1, 5, 7), 176),
        ((0, 2, 31, 31), 55),
        ((1, 0, 10, 3), 226),
        ((1, 2, 16, 30), 29),
    ] {
        let got = d.images.at(r, c, y, x);
        check(got == f64::from(byte) / 255.0, format!("pixel {:?}: {got}", (r, c, y, x)))?;
    }
    Ok("graph JSON, checkpoint bytes and CIFAR fixture all round-trip".into())
}

fn main() {
    // The smoke run dominates; start it first and check the rest meanwhile.
    let smoke = thread::spawn(criterion_8);
    let quick: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (9, criterion_9),
    ];
    let mut results: Vec<(usize, Outcome)> = quick.iter().map(|&(n, f)| (n, f())).collect();
    results.push((8, smoke.join().unwrap_or_else(|_| Err("panicked".into()))));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
