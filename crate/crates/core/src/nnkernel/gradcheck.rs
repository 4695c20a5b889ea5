//! Central-difference verification of [`backward`](super::backward).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::exec::{backward, forward, ForwardOptions};
use super::ops::softmax_cross_entropy;
use super::params::{init_params, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::graph::{LayerGraph, LayerKind, NodeId};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_SAMPLES: usize = 200;

/// Loss rounding, in ulps, assumed when deciding that a central difference
/// cannot distinguish a gradient from zero.
const ROUNDING_ULPS: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub seed: u64,
    pub step: f64,
    /// Minimum number of parameter coordinates to probe.
    pub samples: usize,
    pub batch: usize,
    pub sd_mask: Option<Vec<bool>>,
}

impl GradcheckOptions {
    pub fn new(tolerance: f64, seed: u64) -> Self {
        GradcheckOptions {
            tolerance,
            seed,
            step: DEFAULT_STEP,
            samples: DEFAULT_SAMPLES,
            batch: 2,
            sd_mask: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `node/name[index]` of the coordinate with the largest error.
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Kink-free coordinates compared.
    pub checked: usize,
    /// Probes discarded because a ReLU input changed sign within the step.
    pub kinks_skipped: usize,
    /// Probes where analytic and numeric values both sit below the rounding
    /// resolution of the central difference; excluded from `max_rel_error`.
    pub below_resolution: usize,
    /// Maximum relative error including the below-resolution probes.
    pub max_rel_error_raw: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss plus the sign pattern of every executed ReLU input.
fn probe(
    graph: &LayerGraph,
    params: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<bool>)> {
    let opts = ForwardOptions {
        sd_mask: mask,
        ..ForwardOptions::train()
    };
    let (logits, cache) = forward(graph, params, x, &opts)?;
    let mut signs = Vec::new();
    for node in graph.nodes() {
        if node.kind != LayerKind::Relu {
            continue;
        }
        if let Some(pre) = cache.output(node.inputs[0]).filter(|_| cache.output(node.id).is_some()) {
            signs.extend(pre.data().iter().map(|&v| v > 0.0));
        }
    }
    Ok((softmax_cross_entropy(&logits, labels).0, signs))
}

pub fn gradcheck(graph: &LayerGraph, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(graph, &GradcheckOptions::new(tolerance, seed))
}

/// Compare analytic gradients of the mean cross-entropy (train-mode batch
/// norm) with central differences on a random subset of coordinates.
///
/// At least one coordinate of every parameter tensor is probed. A probe
/// whose `+step` or `-step` pass flips the sign of any ReLU input straddles a
/// kink, where the central difference is not a derivative estimate; such
/// probes are counted in `kinks_skipped` and replaced by fresh coordinates
/// until `samples` kink-free comparisons have been made.
///
/// Some coordinates have an exactly zero gradient, for instance the shift
/// of a batch norm whose output only reaches the loss through other
/// train-mode batch norms. Their central difference is pure rounding noise
/// of order `eps * |loss| / step`, which the `1e-8` floor of
/// [`relative_error`] turns into errors around `1e-4`. Probes where both
/// values are below that resolution are counted in `below_resolution` and
/// left out of `max_rel_error`; `max_rel_error_raw` keeps them.
pub fn gradcheck_with(graph: &LayerGraph, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut params = init_params(graph, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (c, h, w) = graph.config().input_shape;
    let x = Tensor::from_fn([opts.batch, c, h, w], |_| rng.random_range(-1.0..1.0));
    let classes = graph.config().num_classes;
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..classes)).collect();
    let mask = opts.sd_mask.as_deref();

    let fwd = ForwardOptions {
        sd_mask: mask,
        ..ForwardOptions::train()
    };
    let (logits, cache) = forward(graph, &params, &x, &fwd)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels);
    backward(graph, &mut params, &cache, &dlogits)?;
    let (_, base_signs) = probe(graph, &params, &x, &labels, mask)?;

    let tensors: Vec<(NodeId, String, usize)> = params
        .iter()
        .filter(|(_, _, p)| p.learned)
        .map(|(id, name, p)| (id, name.to_string(), p.len()))
        .collect();
    let total: usize = tensors.iter().map(|t| t.2).sum();
    let locate = |flat: usize| {
        let mut rem = flat;
        for (t, &(_, _, len)) in tensors.iter().enumerate() {
            if rem < len {
                return (t, rem);
            }
            rem -= len;
        }
        unreachable!("flat index within total")
    };

    // One coordinate per tensor first, then a random permutation of the rest.
    let mut queue: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .map(|(t, &(_, _, len))| (t, rng.random_range(0..len)))
        .collect();
    queue.extend(index::sample(&mut rng, total, total).into_iter().map(locate));
    let mut seen = std::collections::HashSet::new();

    let mut worst = (0.0f64, String::new(), 0.0f64, 0.0f64);
    let mut worst_raw = 0.0f64;
    let mut below_resolution = 0;
    let mut checked = 0;
    let mut kinks = 0;
    let mut probed_tensors = vec![false; tensors.len()];
    for (t, i) in queue {
        let done = checked >= opts.samples && probed_tensors.iter().all(|&b| b);
        if done {
            break;
        }
        if !seen.insert((t, i)) {
            continue;
        }
        probed_tensors[t] = true;
        let (id, ref name, _) = tensors[t];
        let analytic = params.get(id, name).expect("listed tensor exists").grad[i];
        let orig = params.get(id, name).expect("listed tensor exists").value[i];
        params.get_mut(id, name).expect("listed tensor exists").value[i] = orig + opts.step;
        let (plus, plus_signs) = probe(graph, &params, &x, &labels, mask)?;
        params.get_mut(id, name).expect("listed tensor exists").value[i] = orig - opts.step;
        let (minus, minus_signs) = probe(graph, &params, &x, &labels, mask)?;
        params.get_mut(id, name).expect("listed tensor exists").value[i] = orig;
        if plus_signs != base_signs || minus_signs != base_signs {
            kinks += 1;
            continue;
        }
        checked += 1;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric);
        worst_raw = worst_raw.max(err);
        let resolution = ROUNDING_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * opts.step);
        if analytic.abs() < resolution && numeric.abs() < resolution {
            below_resolution += 1;
            continue;
        }
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{id}/{name}[{i}]"), analytic, numeric);
        }
    }

    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        checked,
        kinks_skipped: kinks,
        below_resolution,
        max_rel_error_raw: worst_raw,
        tolerance: opts.tolerance,
        passed: worst.0 < opts.tolerance && checked >= opts.samples.min(total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{ArchConfig, BlockVariant};
    use crate::graph::build_graph;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn small_graph_passes() {
        let cfg = ArchConfig::new(8, 3, BlockVariant::PreAct).with_input_shape((3, 8, 8));
        let g = build_graph(&cfg).unwrap();
        let r = gradcheck(&g, 1e-4, 3).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.checked >= DEFAULT_SAMPLES);
    }
}
