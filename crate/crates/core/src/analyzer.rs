//! Static analysis: shape inference, parameter counts, MAC counts and the
//! expected compute of a graph under stochastic depth.

use serde::{Deserialize, Serialize};

use crate::archspec::{BlockVariant, GROUPS};
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, LayerKind, LayerNode, Level, NodeId, Role};
use crate::stochdepth::SurvivalSchedule;

/// `(channels, height, width)` of one sample.
pub type Shape = (usize, usize, usize);

/// Per-node output shapes, indexed by node id.
pub type ShapeMap = Vec<Shape>;

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output shape of a node given the shapes of its inputs.
pub fn node_output_shape(node: &LayerNode, inputs: &[Shape], graph_input: Shape) -> Result<Shape> {
    let err = |reason: String| Error::Shape {
        node: node.id,
        reason,
    };
    let first = || inputs.first().copied().ok_or_else(|| err("missing input".into()));
    match node.kind {
        LayerKind::Input => Ok(graph_input),
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = first()?;
            let ho = conv_out(h, kernel, stride, padding);
            let wo = conv_out(w, kernel, stride, padding);
            match (ho, wo) {
                (Some(ho), Some(wo)) => Ok((out_channels, ho, wo)),
                _ => Err(err(format!("{h}x{w} input too small for kernel {kernel}"))),
            }
        }
        LayerKind::ChannelProject { out_channels, stride } => {
            let (_, h, w) = first()?;
            let ho = conv_out(h, 1, stride, 0).ok_or_else(|| err("empty input".into()))?;
            let wo = conv_out(w, 1, stride, 0).ok_or_else(|| err("empty input".into()))?;
            Ok((out_channels, ho, wo))
        }
        LayerKind::BatchNorm { channels } => {
            let s = first()?;
            if s.0 != channels {
                return Err(err(format!("batch norm over {channels} channels fed {} channels", s.0)));
            }
            Ok(s)
        }
        LayerKind::Relu | LayerKind::Identity => first(),
        LayerKind::Add => {
            let s = first()?;
            for &other in &inputs[1..] {
                if other != s {
                    return Err(Error::ShapeMismatch {
                        node: node.id,
                        left: s,
                        right: other,
                    });
                }
            }
            Ok(s)
        }
        LayerKind::AvgPool { kernel } => {
            let (c, h, w) = first()?;
            if kernel == 0 || h < kernel || w < kernel {
                return Err(err(format!("{h}x{w} input too small for pool {kernel}")));
            }
            Ok((c, h / kernel, w / kernel))
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = first()?;
            Ok((c, 1, 1))
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let (c, h, w) = first()?;
            if c * h * w != in_features {
                return Err(err(format!(
                    "linear expects {in_features} features, got {c}x{h}x{w}"
                )));
            }
            Ok((out_features, 1, 1))
        }
        LayerKind::ZeroPadChannels { extra } => {
            let (c, h, w) = first()?;
            Ok((c + extra, h, w))
        }
    }
}

/// Shapes for a topologically ordered node list whose ids are positions.
pub fn infer_node_shapes(nodes: &[LayerNode], input: Shape) -> Result<ShapeMap> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let ins: Vec<Shape> = node
            .inputs
            .iter()
            .map(|&i| {
                shapes.get(i).copied().ok_or_else(|| Error::Shape {
                    node: node.id,
                    reason: format!("input {i} is not computed before this node"),
                })
            })
            .collect::<Result<_>>()?;
        shapes.push(node_output_shape(node, &ins, input)?);
    }
    Ok(shapes)
}

pub fn infer_shapes(graph: &LayerGraph, input: Shape) -> Result<ShapeMap> {
    infer_node_shapes(graph.nodes(), input)
}

/// Like [`infer_node_shapes`] but keeps going past failures, reporting one
/// message per failing node.
pub(crate) fn shape_violations(nodes: &[LayerNode], input: Shape) -> Vec<String> {
    let mut out = Vec::new();
    let mut shapes: Vec<Shape> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let ins: Vec<Shape> = node.inputs.iter().filter_map(|&i| shapes.get(i).copied()).collect();
        let s = match node_output_shape(node, &ins, input) {
            Ok(s) => s,
            Err(e) => {
                out.push(e.to_string());
                ins.first().copied().unwrap_or((0, 0, 0))
            }
        };
        shapes.push(s);
    }
    out
}

/// Learned parameter count of one node, given its input shape.
pub fn node_params(kind: &LayerKind, input: Shape) -> u64 {
    let in_ch = input.0 as u64;
    match *kind {
        LayerKind::Conv {
            out_channels, kernel, ..
        } => out_channels as u64 * in_ch * (kernel * kernel) as u64,
        LayerKind::ChannelProject { out_channels, .. } => out_channels as u64 * in_ch,
        LayerKind::BatchNorm { channels } => 2 * channels as u64,
        LayerKind::Linear {
            in_features,
            out_features,
        } => (in_features * out_features + out_features) as u64,
        _ => 0,
    }
}

/// Multiply-accumulate count of one node for a single sample.
pub fn node_flops(kind: &LayerKind, input: Shape, output: Shape) -> u64 {
    let in_ch = input.0 as u64;
    let spatial = (output.1 * output.2) as u64;
    match *kind {
        LayerKind::Conv {
            out_channels, kernel, ..
        } => out_channels as u64 * in_ch * (kernel * kernel) as u64 * spatial,
        LayerKind::ChannelProject { out_channels, .. } => out_channels as u64 * in_ch * spatial,
        LayerKind::Linear {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        _ => 0,
    }
}

/// Parameter totals split by where they live in the shortcut hierarchy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsByLevel {
    pub trunk: u64,
    pub final_shortcut: u64,
    pub middle_shortcut: u64,
    pub root_shortcut: u64,
    pub classifier: u64,
}

impl ParamsByLevel {
    pub fn total(&self) -> u64 {
        self.trunk + self.final_shortcut + self.middle_shortcut + self.root_shortcut + self.classifier
    }

    fn slot(&mut self, node: &LayerNode) -> &mut u64 {
        match (node.tag.level, node.tag.role) {
            (_, Role::Classifier) => &mut self.classifier,
            (Level::Final, Role::Shortcut) => &mut self.final_shortcut,
            (Level::Middle, _) => &mut self.middle_shortcut,
            (Level::Root, _) => &mut self.root_shortcut,
            _ => &mut self.trunk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total_params: u64,
    pub params_by_level: ParamsByLevel,
}

/// Parameter count over an arbitrary node list.
pub fn count_node_params(nodes: &[LayerNode], input: Shape) -> Result<ParamCount> {
    let shapes = infer_node_shapes(nodes, input)?;
    let mut by_level = ParamsByLevel::default();
    for node in nodes {
        let in_shape = node.inputs.first().map(|&i| shapes[i]).unwrap_or(input);
        *by_level.slot(node) += node_params(&node.kind, in_shape);
    }
    Ok(ParamCount {
        total_params: by_level.total(),
        params_by_level: by_level,
    })
}

pub fn count_params(graph: &LayerGraph) -> Result<ParamCount> {
    count_node_params(graph.nodes(), graph.config().input_shape)
}

/// Per-node MAC counts for the given input shape.
pub fn node_flop_table(nodes: &[LayerNode], input: Shape) -> Result<Vec<u64>> {
    let shapes = infer_node_shapes(nodes, input)?;
    Ok(nodes
        .iter()
        .map(|n| {
            let in_shape = n.inputs.first().map(|&i| shapes[i]).unwrap_or(input);
            node_flops(&n.kind, in_shape, shapes[n.id])
        })
        .collect())
}

pub fn count_node_flops(nodes: &[LayerNode], input: Shape) -> Result<u64> {
    Ok(node_flop_table(nodes, input)?.iter().sum())
}

/// Forward MACs of the whole graph for one sample.
pub fn count_flops(graph: &LayerGraph, input: Shape) -> Result<u64> {
    count_node_flops(graph.nodes(), input)
}

/// MACs of each final-level residual branch, in network order.
pub fn branch_flops(graph: &LayerGraph, input: Shape) -> Result<Vec<u64>> {
    let table = node_flop_table(graph.nodes(), input)?;
    let mut per_block = vec![0u64; graph.final_blocks().len()];
    for node in graph.nodes() {
        if let Some(b) = graph.branch_block_of(node.id) {
            per_block[b] += table[node.id];
        }
    }
    Ok(per_block)
}

/// `(sum_l p_l * block_l + fixed) / (sum_l block_l + fixed)`.
pub fn expected_fraction(block_costs: &[f64], fixed_cost: f64, probs: &[f64]) -> Result<f64> {
    if block_costs.len() != probs.len() {
        return Err(Error::InvalidConfig(format!(
            "survival schedule has {} entries for {} blocks",
            probs.len(),
            block_costs.len()
        )));
    }
    let total: f64 = block_costs.iter().sum::<f64>() + fixed_cost;
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected: f64 = block_costs.iter().zip(probs).map(|(c, p)| c * p).sum::<f64>() + fixed_cost;
    Ok(expected / total)
}

/// Expected fraction of forward MACs executed when each final-level block
/// survives with its scheduled probability.
pub fn expected_compute(graph: &LayerGraph, survival: &SurvivalSchedule) -> Result<f64> {
    let input = graph.config().input_shape;
    let blocks = branch_flops(graph, input)?;
    let total = count_flops(graph, input)?;
    let droppable: u64 = blocks.iter().sum();
    let costs: Vec<f64> = blocks.iter().map(|&c| c as f64).collect();
    expected_fraction(&costs, (total - droppable) as f64, survival.probs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: usize,
    pub blocks: usize,
    pub spatial: (usize, usize),
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSummary {
    pub p_terminal: f64,
    pub expected_active: f64,
    pub probs: Vec<f64>,
}

/// Everything the `describe` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub depth: usize,
    pub alpha: usize,
    pub variant: BlockVariant,
    pub final_blocks: usize,
    pub final_width: usize,
    pub total_params: u64,
    pub params_by_level: ParamsByLevel,
    pub flops_forward: u64,
    pub expected_flops_sd: f64,
    pub expected_compute_fraction: f64,
    pub per_group_widths: Vec<Vec<usize>>,
    pub groups: Vec<GroupSummary>,
    pub survival: SurvivalSummary,
}

pub fn analyze(graph: &LayerGraph, survival: &SurvivalSchedule) -> Result<AnalysisReport> {
    let cfg = graph.config();
    let input = cfg.input_shape;
    let shapes = infer_shapes(graph, input)?;
    let params = count_params(graph)?;
    let flops = count_flops(graph, input)?;
    let fraction = expected_compute(graph, survival)?;
    let per_group_widths = graph.schedule().per_group(GROUPS);
    let groups = per_group_widths
        .iter()
        .enumerate()
        .map(|(g, widths)| {
            let exit: NodeId = graph
                .final_blocks()
                .iter()
                .filter(|b| b.group == g + 1)
                .map(|b| b.exit)
                .next_back()
                .unwrap_or(graph.output_id());
            let (_, h, w) = shapes[exit];
            GroupSummary {
                group: g + 1,
                blocks: widths.len(),
                spatial: (h, w),
                widths: widths.clone(),
            }
        })
        .collect();
    Ok(AnalysisReport {
        depth: cfg.depth,
        alpha: cfg.alpha,
        variant: cfg.block_variant,
        final_blocks: graph.final_blocks().len(),
        final_width: graph.schedule().final_width(),
        total_params: params.total_params,
        params_by_level: params.params_by_level,
        flops_forward: flops,
        expected_flops_sd: fraction * flops as f64,
        expected_compute_fraction: fraction,
        per_group_widths,
        groups,
        survival: SurvivalSummary {
            p_terminal: survival.p_terminal(),
            expected_active: survival.expected_active(),
            probs: survival.probs().to_vec(),
        },
    })
}
