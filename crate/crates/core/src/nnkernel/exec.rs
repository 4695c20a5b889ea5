//! Graph execution: forward in train or eval mode, reverse-mode backward.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::ops::{self, BnBatch, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, LayerKind, NodeId};
use crate::stochdepth::SurvivalSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Per final-level block keep flags (train mode only).
    pub sd_mask: Option<&'a [bool]>,
    /// Survival probabilities used to scale residual branches (eval mode only).
    pub sd_probs: Option<&'a SurvivalSchedule>,
    /// Fail with [`Error::NonFinite`] as soon as a node produces NaN or Inf.
    pub check_finite: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            ..Default::default()
        }
    }

    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn with_mask(mut self, mask: &'a [bool]) -> Self {
        self.sd_mask = Some(mask);
        self
    }

    pub fn with_probs(mut self, probs: &'a SurvivalSchedule) -> Self {
        self.sd_probs = Some(probs);
        self
    }

    pub fn checked(mut self) -> Self {
        self.check_finite = true;
        self
    }
}

/// Activations and batch statistics recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Option<Tensor>>,
    bn: Vec<Option<BnBatch>>,
    /// Residual-branch multiplier per final-level block; 0 means dropped.
    branch_scale: Vec<f64>,
    mode: Mode,
    fingerprint: u64,
    generation: u64,
}

impl ForwardCache {
    /// Output of node `id`, `None` when the node was skipped.
    pub fn output(&self, id: NodeId) -> Option<&Tensor> {
        self.outputs.get(id)?.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Fraction of final-level blocks whose branch was executed.
    pub fn active_fraction(&self) -> f64 {
        if self.branch_scale.is_empty() {
            return 1.0;
        }
        self.branch_scale.iter().filter(|&&s| s != 0.0).count() as f64 / self.branch_scale.len() as f64
    }
}

pub(crate) fn graph_fingerprint(graph: &LayerGraph) -> u64 {
    let mut h = DefaultHasher::new();
    for n in graph.nodes() {
        n.kind.hash(&mut h);
        n.inputs.hash(&mut h);
    }
    graph.config().input_shape.hash(&mut h);
    h.finish()
}

struct BlockLookup {
    /// Final-block index owning each node's residual branch.
    branch_of: Vec<Option<usize>>,
    /// Final-block index whose merge is this node.
    exit_of: Vec<Option<usize>>,
}

impl BlockLookup {
    fn new(graph: &LayerGraph) -> Self {
        let n = graph.len();
        let mut exit_of = vec![None; n];
        for (i, b) in graph.final_blocks().iter().enumerate() {
            exit_of[b.exit] = Some(i);
        }
        BlockLookup {
            branch_of: (0..n).map(|id| graph.branch_block_of(id)).collect(),
            exit_of,
        }
    }
}

fn branch_scales(graph: &LayerGraph, opts: &ForwardOptions<'_>) -> Result<Vec<f64>> {
    let blocks = graph.final_blocks().len();
    let mut scale = vec![1.0; blocks];
    if let Some(mask) = opts.sd_mask {
        if opts.mode != Mode::Train {
            return Err(Error::InvalidConfig("a block mask is only valid in train mode".into()));
        }
        if mask.len() != blocks {
            return Err(Error::InvalidConfig(format!(
                "block mask has {} entries for {blocks} blocks",
                mask.len()
            )));
        }
        for (s, &keep) in scale.iter_mut().zip(mask) {
            if !keep {
                *s = 0.0;
            }
        }
    }
    if let Some(probs) = opts.sd_probs {
        if opts.mode != Mode::Eval {
            return Err(Error::InvalidConfig("branch scaling is only valid in eval mode".into()));
        }
        if probs.len() != blocks {
            return Err(Error::InvalidConfig(format!(
                "survival schedule has {} entries for {blocks} blocks",
                probs.len()
            )));
        }
        scale.copy_from_slice(probs.probs());
    }
    Ok(scale)
}

fn shape_err(node: NodeId, reason: String) -> Error {
    Error::Shape { node, reason }
}

/// Evaluate the graph. Train mode normalizes with batch statistics but does
/// not touch the running statistics; see [`forward_train`].
pub fn forward(
    graph: &LayerGraph,
    params: &ParamStore,
    input: &Tensor,
    opts: &ForwardOptions<'_>,
) -> Result<(Tensor, ForwardCache)> {
    let (c, h, w) = graph.config().input_shape;
    if input.sample_shape() != (c, h, w) || input.batch() == 0 {
        return Err(Error::TensorShape {
            expected: vec![input.batch().max(1), c, h, w],
            found: input.dims().to_vec(),
        });
    }
    let scale = branch_scales(graph, opts)?;
    let lookup = BlockLookup::new(graph);
    let n = graph.len();
    let mut outputs: Vec<Option<Tensor>> = vec![None; n];
    let mut bn: Vec<Option<BnBatch>> = vec![None; n];

    for node in graph.nodes() {
        let id = node.id;
        if lookup.branch_of[id].is_some_and(|b| scale[b] == 0.0) {
            continue;
        }
        let arg = |k: usize| -> Result<&Tensor> {
            let src = *node
                .inputs
                .get(k)
                .ok_or_else(|| shape_err(id, "missing input".into()))?;
            outputs[src]
                .as_ref()
                .ok_or_else(|| shape_err(id, format!("input {src} was not computed")))
        };
        let out = match node.kind {
            LayerKind::Input => input.clone(),
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let x = arg(0)?;
                let g = ConvGeom::new(x.sample_shape(), out_channels, kernel, stride, padding);
                ops::conv2d_forward(x, params.value(id, "weight")?, &g)
            }
            LayerKind::ChannelProject { out_channels, stride } => {
                let x = arg(0)?;
                let g = ConvGeom::new(x.sample_shape(), out_channels, 1, stride, 0);
                ops::conv2d_forward(x, params.value(id, "weight")?, &g)
            }
            LayerKind::BatchNorm { .. } => {
                let x = arg(0)?;
                let gamma = params.value(id, "gamma")?;
                let beta = params.value(id, "beta")?;
                match opts.mode {
                    Mode::Train => {
                        let (y, stats) = ops::batchnorm_train(x, gamma, beta);
                        bn[id] = Some(stats);
                        y
                    }
                    Mode::Eval => ops::batchnorm_eval(
                        x,
                        gamma,
                        beta,
                        params.value(id, "running_mean")?,
                        params.value(id, "running_var")?,
                    ),
                }
            }
            LayerKind::Relu => ops::relu(arg(0)?),
            LayerKind::Identity => arg(0)?.clone(),
            LayerKind::Add => match lookup.exit_of[id].map(|b| scale[b]) {
                Some(0.0) => arg(1)?.clone(),
                Some(s) if s != 1.0 => {
                    let mut y = arg(0)?.clone();
                    y.scale(s);
                    y.add_assign(arg(1)?);
                    y
                }
                _ => {
                    let mut y = arg(0)?.clone();
                    for k in 1..node.inputs.len() {
                        let other = arg(k)?;
                        if other.dims() != y.dims() {
                            return Err(shape_err(
                                id,
                                format!("operand dims {:?} vs {:?}", y.dims(), other.dims()),
                            ));
                        }
                        y.add_assign(other);
                    }
                    y
                }
            },
            LayerKind::AvgPool { kernel } => ops::avg_pool(arg(0)?, kernel),
            LayerKind::GlobalAvgPool => ops::global_avg_pool(arg(0)?),
            LayerKind::Linear { out_features, .. } => {
                ops::linear(arg(0)?, params.value(id, "weight")?, params.value(id, "bias")?, out_features)
            }
            LayerKind::ZeroPadChannels { extra } => ops::zero_pad_channels(arg(0)?, extra),
        };
        if opts.check_finite && !out.is_finite() {
            return Err(Error::NonFinite { node: id });
        }
        outputs[id] = Some(out);
    }

    let logits = outputs[graph.output_id()]
        .clone()
        .ok_or_else(|| shape_err(graph.output_id(), "output was not computed".into()))?;
    Ok((
        logits,
        ForwardCache {
            outputs,
            bn,
            branch_scale: scale,
            mode: opts.mode,
            fingerprint: graph_fingerprint(graph),
            generation: params.generation(),
        },
    ))
}

/// Train-mode forward that also folds the batch statistics of every
/// executed batch-norm node into its running statistics.
pub fn forward_train(
    graph: &LayerGraph,
    params: &mut ParamStore,
    input: &Tensor,
    sd_mask: Option<&[bool]>,
) -> Result<(Tensor, ForwardCache)> {
    let opts = ForwardOptions {
        mode: Mode::Train,
        sd_mask,
        ..Default::default()
    };
    let (logits, cache) = forward(graph, params, input, &opts)?;
    for (id, stats) in cache.bn.iter().enumerate() {
        if let Some(stats) = stats {
            let x = cache.outputs[id].as_ref().expect("computed node has an output");
            let count = x.batch() * x.height() * x.width();
            if let Some((mean, var)) = params.running_stats_mut(id) {
                ops::update_running_stats(stats, count, mean, var);
            }
        }
    }
    Ok((logits, cache))
}

/// Eval-mode forward; `sd_probs` scales each residual branch by its
/// survival probability.
pub fn forward_eval(
    graph: &LayerGraph,
    params: &ParamStore,
    input: &Tensor,
    sd_probs: Option<&SurvivalSchedule>,
) -> Result<Tensor> {
    let opts = ForwardOptions {
        mode: Mode::Eval,
        sd_probs,
        ..Default::default()
    };
    Ok(forward(graph, params, input, &opts)?.0)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Reverse-mode pass. Overwrites every gradient buffer in `params` and
/// returns the gradient with respect to the graph input.
pub fn backward(graph: &LayerGraph, params: &mut ParamStore, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Tensor> {
    if cache.fingerprint != graph_fingerprint(graph) || cache.outputs.len() != graph.len() {
        return Err(Error::StaleCache("cache was produced by a different graph".into()));
    }
    if cache.generation != params.generation() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    let out_id = graph.output_id();
    let logits = cache.outputs[out_id]
        .as_ref()
        .ok_or_else(|| Error::StaleCache("cache has no output".into()))?;
    if logits.dims() != grad_logits.dims() {
        return Err(Error::TensorShape {
            expected: logits.dims().to_vec(),
            found: grad_logits.dims().to_vec(),
        });
    }

    params.zero_grad();
    let lookup = BlockLookup::new(graph);
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[out_id] = Some(grad_logits.clone());

    for node in graph.nodes().iter().rev() {
        let id = node.id;
        let Some(dy) = grads[id].take() else {
            continue;
        };
        let output = match cache.outputs[id].as_ref() {
            Some(o) => o,
            None => continue,
        };
        let input_of = |k: usize| -> Result<&Tensor> {
            cache.outputs[node.inputs[k]]
                .as_ref()
                .ok_or_else(|| Error::StaleCache(format!("input of node {id} missing from cache")))
        };
        match node.kind {
            LayerKind::Input => {
                grads[id] = Some(dy);
            }
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let x = input_of(0)?;
                let g = ConvGeom::new(x.sample_shape(), out_channels, kernel, stride, padding);
                let (w, dw) = params.value_and_grad(id, "weight")?;
                if let Some(dx) = ops::conv2d_backward(x, w, &g, &dy, dw, true) {
                    accumulate(&mut grads, node.inputs[0], dx);
                }
            }
            LayerKind::ChannelProject { out_channels, stride } => {
                let x = input_of(0)?;
                let g = ConvGeom::new(x.sample_shape(), out_channels, 1, stride, 0);
                let (w, dw) = params.value_and_grad(id, "weight")?;
                if let Some(dx) = ops::conv2d_backward(x, w, &g, &dy, dw, true) {
                    accumulate(&mut grads, node.inputs[0], dx);
                }
            }
            LayerKind::BatchNorm { channels } => {
                let gamma = params.value(id, "gamma")?.to_vec();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let dx = match cache.mode {
                    Mode::Train => {
                        let saved = cache.bn[id]
                            .as_ref()
                            .ok_or_else(|| Error::StaleCache(format!("no batch statistics for node {id}")))?;
                        ops::batchnorm_backward_train(&dy, saved, &gamma, &mut dgamma, &mut dbeta)
                    }
                    Mode::Eval => ops::batchnorm_backward_eval(
                        input_of(0)?,
                        &dy,
                        &gamma,
                        params.value(id, "running_mean")?,
                        params.value(id, "running_var")?,
                        &mut dgamma,
                        &mut dbeta,
                    ),
                };
                params.value_and_grad(id, "gamma")?.1.copy_from_slice(&dgamma);
                params.value_and_grad(id, "beta")?.1.copy_from_slice(&dbeta);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::Relu => {
                accumulate(&mut grads, node.inputs[0], ops::relu_backward(output, &dy));
            }
            LayerKind::Identity => accumulate(&mut grads, node.inputs[0], dy),
            LayerKind::Add => match lookup.exit_of[id].map(|b| cache.branch_scale[b]) {
                Some(0.0) => accumulate(&mut grads, node.inputs[1], dy),
                Some(s) if s != 1.0 => {
                    let mut branch = dy.clone();
                    branch.scale(s);
                    accumulate(&mut grads, node.inputs[0], branch);
                    accumulate(&mut grads, node.inputs[1], dy);
                }
                _ => {
                    let (last, rest) = node.inputs.split_last().expect("add has inputs");
                    for &src in rest {
                        accumulate(&mut grads, src, dy.clone());
                    }
                    accumulate(&mut grads, *last, dy);
                }
            },
            LayerKind::AvgPool { kernel } => {
                let dims = input_of(0)?.dims();
                accumulate(&mut grads, node.inputs[0], ops::avg_pool_backward(&dy, kernel, dims));
            }
            LayerKind::GlobalAvgPool => {
                let dims = input_of(0)?.dims();
                accumulate(&mut grads, node.inputs[0], ops::global_avg_pool_backward(&dy, dims));
            }
            LayerKind::Linear { out_features, .. } => {
                let x = input_of(0)?;
                let mut dbias = vec![0.0; out_features];
                let (w, dw) = params.value_and_grad(id, "weight")?;
                let dx = ops::linear_backward(x, w, &dy, dw, &mut dbias);
                params.value_and_grad(id, "bias")?.1.copy_from_slice(&dbias);
                accumulate(&mut grads, node.inputs[0], dx);
            }
            LayerKind::ZeroPadChannels { .. } => {
                let in_ch = input_of(0)?.channels();
                accumulate(&mut grads, node.inputs[0], ops::zero_pad_channels_backward(&dy, in_ch));
            }
        }
    }

    Ok(grads[graph.input_id()]
        .take()
        .unwrap_or_else(|| Tensor::zeros(cache.outputs[graph.input_id()].as_ref().map_or([0; 4], Tensor::dims))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer;
    use crate::archspec::{ArchConfig, BlockVariant};
    use crate::graph::{build_graph, Role};
    use crate::nnkernel::params::init_params;
    use crate::stochdepth::linear_decay;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(depth: usize, alpha: usize, v: BlockVariant) -> (LayerGraph, ParamStore, Tensor) {
        let cfg = ArchConfig::new(depth, alpha, v).with_input_shape((3, 8, 8));
        let g = build_graph(&cfg).unwrap();
        let p = init_params(&g, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor::from_fn([3, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        (g, p, x)
    }

    #[test]
    fn shapes_agree_with_analyzer() {
        let (g, p, x) = setup(14, 9, BlockVariant::PyramidBn);
        let (_, cache) = forward(&g, &p, &x, &ForwardOptions::train()).unwrap();
        let shapes = analyzer::infer_shapes(&g, (3, 8, 8)).unwrap();
        for n in g.nodes() {
            assert_eq!(cache.output(n.id).unwrap().sample_shape(), shapes[n.id], "node {}", n.id);
        }
    }

    #[test]
    fn all_ones_mask_is_bitwise_noop() {
        let (g, p, x) = setup(8, 3, BlockVariant::PyramidBn);
        let ones = vec![true; 3];
        let (a, _) = forward(&g, &p, &x, &ForwardOptions::train()).unwrap();
        let (b, _) = forward(&g, &p, &x, &ForwardOptions::train().with_mask(&ones)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn unit_probabilities_are_bitwise_noop() {
        let (g, p, x) = setup(8, 3, BlockVariant::PreAct);
        let ones = SurvivalSchedule::uniform(3, 1.0).unwrap();
        let a = forward_eval(&g, &p, &x, None).unwrap();
        let b = forward_eval(&g, &p, &x, Some(&ones)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn eval_does_not_mutate_and_is_deterministic() {
        let (g, p, x) = setup(8, 3, BlockVariant::PyramidBn);
        let before = p.clone();
        let s = linear_decay(3, 0.5).unwrap();
        let a = forward_eval(&g, &p, &x, Some(&s)).unwrap();
        let b = forward_eval(&g, &p, &x, Some(&s)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(p.values_bitwise_eq(&before));
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let (g, mut p, x) = setup(8, 3, BlockVariant::PyramidBn);
        let before = p.clone();
        forward_train(&g, &mut p, &x, None).unwrap();
        assert!(!p.values_bitwise_eq(&before));
        // Learned values are untouched.
        assert_eq!(p.learned_values(), before.learned_values());
    }

    #[test]
    fn dropped_block_gets_zero_gradient() {
        let (g, mut p, x) = setup(8, 3, BlockVariant::PyramidBn);
        let mask = [true, false, true];
        let (logits, cache) = forward(&g, &p, &x, &ForwardOptions::train().with_mask(&mask)).unwrap();
        let (_, dl) = ops::softmax_cross_entropy(&logits, &[0, 1, 2]);
        backward(&g, &mut p, &cache, &dl).unwrap();
        for n in g.nodes() {
            let Some(params) = p.node(n.id) else { continue };
            let dropped = n.tag.role == Role::Branch && n.tag.group == 2;
            let norm: f64 = params.values().flat_map(|q| q.grad.iter()).map(|v| v.abs()).sum();
            if dropped {
                assert_eq!(norm, 0.0, "node {}", n.id);
            } else if matches!(n.kind, LayerKind::Conv { .. }) {
                assert!(norm > 0.0, "node {}", n.id);
            }
        }
        assert!((cache.active_fraction() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let (g, mut p, x) = setup(8, 3, BlockVariant::PreAct);
        let (logits, cache) = forward(&g, &p, &x, &ForwardOptions::train()).unwrap();
        let dx = backward(&g, &mut p, &cache, &Tensor::zeros(logits.dims())).unwrap();
        assert!(p.iter().all(|(_, _, q)| q.grad.iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (g, mut p, x) = setup(8, 3, BlockVariant::PreAct);
        let (logits, cache) = forward(&g, &p, &x, &ForwardOptions::train()).unwrap();
        let dl = Tensor::zeros(logits.dims());
        p.get_mut(1, "weight").unwrap().value[0] += 1.0;
        assert!(matches!(backward(&g, &mut p, &cache, &dl), Err(Error::StaleCache(_))));

        let (g2, mut p2, _) = setup(8, 5, BlockVariant::PreAct);
        assert!(matches!(backward(&g2, &mut p2, &cache, &dl), Err(Error::StaleCache(_))));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (g, p, _) = setup(8, 3, BlockVariant::PreAct);
        let wrong = Tensor::zeros([1, 3, 9, 9]);
        assert!(forward(&g, &p, &wrong, &ForwardOptions::train()).is_err());
        let x = Tensor::zeros([1, 3, 8, 8]);
        let mask = [true; 2];
        assert!(forward(&g, &p, &x, &ForwardOptions::train().with_mask(&mask)).is_err());
        let mask = [true; 3];
        assert!(forward(&g, &p, &x, &ForwardOptions::eval().with_mask(&mask)).is_err());
    }

    #[test]
    fn non_finite_is_caught_when_checked() {
        let (g, mut p, x) = setup(8, 3, BlockVariant::PreAct);
        p.get_mut(1, "weight").unwrap().value[0] = f64::NAN;
        match forward(&g, &p, &x, &ForwardOptions::train().checked()) {
            Err(Error::NonFinite { node }) => assert_eq!(node, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
