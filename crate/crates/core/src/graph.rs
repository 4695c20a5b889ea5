//! Explicit layer graphs with final-, middle- and root-level shortcuts.
//!
//! Node ids are positions in [`LayerGraph::nodes`], and every node's inputs
//! precede it, so the node sequence is already a topological order.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::analyzer::{self, Shape};
use crate::archspec::{ArchConfig, BlockVariant, ChannelSchedule, GROUPS, STEM_WIDTH};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Add,
    /// Average pooling with stride equal to the kernel size.
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Append `extra` all-zero channels.
    ZeroPadChannels {
        extra: usize,
    },
    Identity,
    /// Learned 1x1 projection without bias.
    ChannelProject {
        out_channels: usize,
        stride: usize,
    },
}

impl LayerKind {
    /// Trunk weighted layers that count towards the nominal depth.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. }
                | LayerKind::BatchNorm { .. }
                | LayerKind::Linear { .. }
                | LayerKind::ChannelProject { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
            LayerKind::ZeroPadChannels { .. } => "zero_pad_channels",
            LayerKind::Identity => "identity",
            LayerKind::ChannelProject { .. } => "channel_project",
        }
    }
}

/// Shortcut level a node belongs to. `Trunk` covers the stem, the tail and
/// the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Trunk,
    Final,
    Middle,
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Stem,
    /// Residual branch of a final-level block.
    Branch,
    Shortcut,
    /// The Add that closes a shortcut.
    Merge,
    Tail,
    Classifier,
}

/// Provenance of a node: group (1-based, 0 outside groups), block within
/// the group (1-based, 0 when not inside a final-level block), level, role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeTag {
    pub level: Level,
    pub group: usize,
    pub block: usize,
    pub role: Role,
}

impl NodeTag {
    pub const fn trunk(role: Role) -> Self {
        NodeTag {
            level: Level::Trunk,
            group: 0,
            block: 0,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    #[serde(flatten)]
    pub tag: NodeTag,
}

/// A final-level block in network order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalBlock {
    pub group: usize,
    pub block: usize,
    /// Node feeding both the branch and the shortcut.
    pub entry: NodeId,
    pub branch_out: NodeId,
    pub shortcut_out: NodeId,
    /// The merging Add.
    pub exit: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    config: ArchConfig,
    schedule: ChannelSchedule,
    nodes: Vec<LayerNode>,
    input_id: NodeId,
    output_id: NodeId,
    final_blocks: Vec<FinalBlock>,
}

impl LayerGraph {
    /// Assemble a graph from raw parts without checking any invariant.
    /// Use [`validate_graph`] on the result when the parts are untrusted.
    pub fn from_parts(
        config: ArchConfig,
        schedule: ChannelSchedule,
        nodes: Vec<LayerNode>,
        input_id: NodeId,
        output_id: NodeId,
        final_blocks: Vec<FinalBlock>,
    ) -> Self {
        LayerGraph {
            config,
            schedule,
            nodes,
            input_id,
            output_id,
            final_blocks,
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ChannelSchedule {
        &self.schedule
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_id(&self) -> NodeId {
        self.input_id
    }

    pub fn output_id(&self) -> NodeId {
        self.output_id
    }

    pub fn final_blocks(&self) -> &[FinalBlock] {
        &self.final_blocks
    }

    /// `(entry, exit)` node pairs for every final-level block.
    pub fn final_block_spans(&self) -> Vec<(NodeId, NodeId)> {
        self.final_blocks.iter().map(|b| (b.entry, b.exit)).collect()
    }

    pub fn block_index(&self) -> BTreeMap<NodeId, NodeTag> {
        self.nodes.iter().map(|n| (n.id, n.tag)).collect()
    }

    /// Index of the final-level block (network order) whose residual branch
    /// contains `id`.
    pub fn branch_block_of(&self, id: NodeId) -> Option<usize> {
        let tag = self.nodes.get(id)?.tag;
        if tag.level != Level::Final || tag.role != Role::Branch {
            return None;
        }
        Some((tag.group - 1) * self.blocks_per_group() + tag.block - 1)
    }

    pub fn blocks_per_group(&self) -> usize {
        self.final_blocks.len() / GROUPS
    }

    /// Number of Conv and Linear nodes (shortcut projections excluded).
    pub fn weighted_layers(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_weighted()).count()
    }

    pub fn count_adds(&self, level: Level) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == LayerKind::Add && n.tag.level == level)
            .count()
    }

    pub fn projection_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::ChannelProject { .. }))
            .count()
    }

    /// Export to the JSON graph document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphDocument::from(self))?)
    }

    /// Import a JSON graph document. The structure is checked with
    /// [`validate_graph`] and rejected on any violation.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.format != GRAPH_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "not a graph document (format {:?})",
                doc.format
            )));
        }
        if doc.version != GRAPH_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported graph document version {}",
                doc.version
            )));
        }
        for (pos, node) in doc.nodes.iter().enumerate() {
            if node.id != pos {
                return Err(Error::InvalidConfig(format!(
                    "node at position {pos} has id {}",
                    node.id
                )));
            }
        }
        let config = ArchConfig {
            depth: doc.metadata.depth,
            alpha: doc.metadata.alpha,
            block_variant: doc.metadata.variant,
            p_terminal: doc.metadata.p_terminal,
            num_classes: doc.metadata.num_classes,
            input_shape: doc.metadata.input_shape,
            ..ArchConfig::default()
        };
        config.validate()?;
        let graph = LayerGraph {
            config,
            schedule: ChannelSchedule {
                stem_width: STEM_WIDTH,
                widths: doc.widths,
            },
            nodes: doc.nodes,
            input_id: doc.input_id,
            output_id: doc.output_id,
            final_blocks: doc.final_blocks,
        };
        let violations = validate_graph(&graph);
        if !violations.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "imported graph is malformed: {}",
                violations.join("; ")
            )));
        }
        Ok(graph)
    }
}

const GRAPH_FORMAT: &str = "pyror-graph";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GraphMetadata {
    depth: usize,
    alpha: usize,
    variant: BlockVariant,
    p_terminal: f64,
    num_classes: usize,
    input_shape: (usize, usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphDocument {
    format: String,
    version: u32,
    metadata: GraphMetadata,
    widths: Vec<usize>,
    input_id: NodeId,
    output_id: NodeId,
    final_blocks: Vec<FinalBlock>,
    nodes: Vec<LayerNode>,
}

impl From<&LayerGraph> for GraphDocument {
    fn from(g: &LayerGraph) -> Self {
        GraphDocument {
            format: GRAPH_FORMAT.to_string(),
            version: GRAPH_VERSION,
            metadata: GraphMetadata {
                depth: g.config.depth,
                alpha: g.config.alpha,
                variant: g.config.block_variant,
                p_terminal: g.config.p_terminal,
                num_classes: g.config.num_classes,
                input_shape: g.config.input_shape,
            },
            widths: g.schedule.widths.clone(),
            input_id: g.input_id,
            output_id: g.output_id,
            final_blocks: g.final_blocks.clone(),
            nodes: g.nodes.clone(),
        }
    }
}

#[derive(Debug, Default)]
struct Builder {
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>, tag: NodeTag) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(LayerNode {
            id,
            kind,
            inputs,
            tag,
        });
        id
    }

    fn conv3(&mut self, input: NodeId, out_channels: usize, stride: usize, tag: NodeTag) -> NodeId {
        self.push(
            LayerKind::Conv {
                out_channels,
                kernel: 3,
                stride,
                padding: 1,
            },
            vec![input],
            tag,
        )
    }

    fn bn(&mut self, input: NodeId, channels: usize, tag: NodeTag) -> NodeId {
        self.push(LayerKind::BatchNorm { channels }, vec![input], tag)
    }

    fn relu(&mut self, input: NodeId, tag: NodeTag) -> NodeId {
        self.push(LayerKind::Relu, vec![input], tag)
    }

    /// Residual branch, type-A shortcut and merging Add of one block.
    fn block(
        &mut self,
        variant: BlockVariant,
        input: NodeId,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        group: usize,
        block: usize,
    ) -> (NodeId, NodeId, NodeId) {
        let tag = |role| NodeTag {
            level: Level::Final,
            group,
            block,
            role,
        };
        let branch = tag(Role::Branch);
        let branch_out = match variant {
            BlockVariant::PreAct => {
                let x = self.bn(input, in_ch, branch);
                let x = self.relu(x, branch);
                let x = self.conv3(x, out_ch, stride, branch);
                let x = self.bn(x, out_ch, branch);
                let x = self.relu(x, branch);
                self.conv3(x, out_ch, 1, branch)
            }
            BlockVariant::PyramidBn => {
                let x = self.bn(input, in_ch, branch);
                let x = self.conv3(x, out_ch, stride, branch);
                let x = self.bn(x, out_ch, branch);
                let x = self.relu(x, branch);
                let x = self.conv3(x, out_ch, 1, branch);
                self.bn(x, out_ch, branch)
            }
        };

        let short = tag(Role::Shortcut);
        let mut s = input;
        let mut touched = false;
        if stride > 1 {
            s = self.push(LayerKind::AvgPool { kernel: stride }, vec![s], short);
            touched = true;
        }
        if out_ch > in_ch {
            s = self.push(LayerKind::ZeroPadChannels { extra: out_ch - in_ch }, vec![s], short);
            touched = true;
        }
        if !touched {
            s = self.push(LayerKind::Identity, vec![s], short);
        }

        let add = self.push(LayerKind::Add, vec![branch_out, s], tag(Role::Merge));
        (branch_out, s, add)
    }
}

/// A standalone block fragment: an `Input` node at id 0 followed by the
/// block's branch, shortcut and Add.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub nodes: Vec<LayerNode>,
    pub input: NodeId,
    pub branch_out: NodeId,
    pub shortcut_out: NodeId,
    pub output: NodeId,
}

/// Build one final-level block in isolation.
pub fn block_subgraph(variant: BlockVariant, in_ch: usize, out_ch: usize, stride: usize) -> Result<Fragment> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::InvalidConfig("block widths must be positive".into()));
    }
    if out_ch < in_ch {
        return Err(Error::InvalidConfig(format!(
            "type-A shortcut cannot shrink width ({in_ch} -> {out_ch})"
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidConfig(format!("block stride must be 1 or 2, got {stride}")));
    }
    let mut b = Builder::default();
    let input = b.push(LayerKind::Input, vec![], NodeTag::trunk(Role::Input));
    let (branch_out, shortcut_out, output) = b.block(variant, input, in_ch, out_ch, stride, 1, 1);
    Ok(Fragment {
        nodes: b.nodes,
        input,
        branch_out,
        shortcut_out,
        output,
    })
}

/// Elaborate a configuration into its full layer graph.
pub fn build_graph(config: &ArchConfig) -> Result<LayerGraph> {
    config.validate()?;
    let counts = config.block_counts()?;
    let schedule = config.schedule()?;
    let per_group = counts.per_group;

    let mut b = Builder::default();
    let input = b.push(LayerKind::Input, vec![], NodeTag::trunk(Role::Input));
    let stem = NodeTag::trunk(Role::Stem);
    let x = b.conv3(input, STEM_WIDTH, 1, stem);
    let stem_out = b.bn(x, STEM_WIDTH, stem);

    let mut final_blocks = Vec::with_capacity(counts.total);
    let mut group_in = stem_out;
    let mut group_in_ch = STEM_WIDTH;
    for g in 1..=GROUPS {
        let group_stride = if g == 1 { 1 } else { 2 };
        let mut x = group_in;
        for k in 1..=per_group {
            let idx = (g - 1) * per_group + k - 1;
            let in_ch = schedule.input_width(idx);
            let out_ch = schedule.widths[idx];
            let stride = if k == 1 { group_stride } else { 1 };
            let (branch_out, shortcut_out, add) =
                b.block(config.block_variant, x, in_ch, out_ch, stride, g, k);
            final_blocks.push(FinalBlock {
                group: g,
                block: k,
                entry: x,
                branch_out,
                shortcut_out,
                exit: add,
            });
            x = add;
        }
        let group_out_ch = schedule.widths[g * per_group - 1];
        let mid = |role| NodeTag {
            level: Level::Middle,
            group: g,
            block: 0,
            role,
        };
        let proj = b.push(
            LayerKind::ChannelProject {
                out_channels: group_out_ch,
                stride: group_stride,
            },
            vec![group_in],
            mid(Role::Shortcut),
        );
        group_in = b.push(LayerKind::Add, vec![x, proj], mid(Role::Merge));
        group_in_ch = group_out_ch;
    }

    let root = |role| NodeTag {
        level: Level::Root,
        group: 0,
        block: 0,
        role,
    };
    let root_proj = b.push(
        LayerKind::ChannelProject {
            out_channels: group_in_ch,
            stride: 4,
        },
        vec![stem_out],
        root(Role::Shortcut),
    );
    let root_add = b.push(LayerKind::Add, vec![group_in, root_proj], root(Role::Merge));

    let tail = NodeTag::trunk(Role::Tail);
    let final_width = schedule.final_width();
    let x = b.bn(root_add, final_width, tail);
    let x = b.relu(x, tail);
    let x = b.push(LayerKind::GlobalAvgPool, vec![x], tail);
    let output = b.push(
        LayerKind::Linear {
            in_features: final_width,
            out_features: config.num_classes,
        },
        vec![x],
        NodeTag::trunk(Role::Classifier),
    );

    let graph = LayerGraph {
        config: config.clone(),
        schedule,
        nodes: b.nodes,
        input_id: input,
        output_id: output,
        final_blocks,
    };
    analyzer::infer_shapes(&graph, graph.config.input_shape)?;
    Ok(graph)
}

/// Structural checks; returns one message per violation, empty when the
/// graph is well formed.
pub fn validate_graph(graph: &LayerGraph) -> Vec<String> {
    let mut out = Vec::new();
    let nodes = graph.nodes();
    let n = nodes.len();
    if n == 0 {
        out.push("graph has no nodes".to_string());
        return out;
    }

    let mut ids = HashSet::new();
    for (pos, node) in nodes.iter().enumerate() {
        if node.id != pos {
            out.push(format!("node at position {pos} carries id {}", node.id));
        }
        if !ids.insert(node.id) {
            out.push(format!("duplicate node id {}", node.id));
        }
    }

    let mut order_ok = true;
    for (pos, node) in nodes.iter().enumerate() {
        for &i in &node.inputs {
            if i >= n {
                out.push(format!("node {} reads missing node {i}", node.id));
                order_ok = false;
            } else if i >= pos {
                out.push(format!("node {} reads node {i} which does not precede it", node.id));
                order_ok = false;
            }
        }
        let arity_ok = match node.kind {
            LayerKind::Input => node.inputs.is_empty(),
            LayerKind::Add => node.inputs.len() >= 2,
            _ => node.inputs.len() == 1,
        };
        if !arity_ok {
            out.push(format!(
                "node {} ({}) has {} inputs",
                node.id,
                node.kind.name(),
                node.inputs.len()
            ));
        }
        match node.kind {
            LayerKind::Conv { kernel, stride, .. } => {
                if kernel != 1 && kernel != 3 {
                    out.push(format!("conv node {} has kernel {kernel}", node.id));
                }
                if ![1, 2, 4].contains(&stride) {
                    out.push(format!("conv node {} has stride {stride}", node.id));
                }
            }
            LayerKind::ChannelProject { stride, .. } if ![1, 2, 4].contains(&stride) => {
                out.push(format!("projection node {} has stride {stride}", node.id));
            }
            _ => {}
        }
    }
    if !order_ok && has_cycle(nodes) {
        out.push("graph contains a cycle".to_string());
    }

    let sources: Vec<_> = nodes.iter().filter(|nd| nd.inputs.is_empty()).map(|nd| nd.id).collect();
    if sources.len() != 1 || sources.first() != Some(&graph.input_id()) {
        out.push(format!("expected a single source {}, found {sources:?}", graph.input_id()));
    }
    let mut consumed = vec![false; n];
    for node in nodes {
        for &i in &node.inputs {
            if i < n {
                consumed[i] = true;
            }
        }
    }
    let sinks: Vec<_> = (0..n).filter(|&i| !consumed[i]).collect();
    if sinks.len() != 1 || sinks.first() != Some(&graph.output_id()) {
        out.push(format!("expected a single sink {}, found {sinks:?}", graph.output_id()));
    }

    let expected_final = derive_total(graph);
    let counts = [
        (Level::Final, "final", expected_final),
        (Level::Middle, "middle", GROUPS),
        (Level::Root, "root", 1),
    ];
    for (level, name, want) in counts {
        let got = graph.count_adds(level);
        if got != want {
            out.push(format!("{name}-level Add count {got} \u{2260} {want}"));
        }
    }
    if graph.final_blocks().len() != expected_final {
        out.push(format!(
            "final block list has {} entries \u{2260} {expected_final}",
            graph.final_blocks().len()
        ));
    }
    let projections = graph.projection_count();
    if projections != GROUPS + 1 {
        out.push(format!("learned projection count {projections} \u{2260} {}", GROUPS + 1));
    }
    let weighted = graph.weighted_layers();
    if weighted != graph.config().depth {
        out.push(format!(
            "weighted-layer count {weighted} \u{2260} depth {}",
            graph.config().depth
        ));
    }

    if order_ok {
        out.extend(analyzer::shape_violations(nodes, graph.config().input_shape));
    }
    out
}

fn derive_total(graph: &LayerGraph) -> usize {
    graph
        .config()
        .block_counts()
        .map(|c| c.total)
        .unwrap_or(graph.schedule().widths.len())
}

fn has_cycle(nodes: &[LayerNode]) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    let n = nodes.len();
    let mut state = vec![0u8; n];
    for start in 0..n {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            let inputs = &nodes[v].inputs;
            if *next < inputs.len() {
                let u = inputs[*next];
                *next += 1;
                if u >= n {
                    continue;
                }
                match state[u] {
                    0 => {
                        state[u] = 1;
                        stack.push((u, 0));
                    }
                    1 => return true,
                    _ => {}
                }
            } else {
                state[v] = 2;
                stack.pop();
            }
        }
    }
    false
}

/// Output shape of the last pre-pooling activation, a convenience for reports.
pub fn pre_pool_shape(graph: &LayerGraph) -> Result<Shape> {
    let shapes = analyzer::infer_shapes(graph, graph.config().input_shape)?;
    let gap = graph
        .nodes()
        .iter()
        .find(|n| n.kind == LayerKind::GlobalAvgPool)
        .ok_or_else(|| Error::InvalidConfig("graph has no global pooling".into()))?;
    Ok(shapes[gap.inputs[0]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(f: &Fragment, pred: impl Fn(&LayerKind) -> bool) -> usize {
        f.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    #[test]
    fn pyramid_bn_fragment_layout() {
        let f = block_subgraph(BlockVariant::PyramidBn, 16, 21, 1).unwrap();
        assert_eq!(kinds(&f, |k| matches!(k, LayerKind::BatchNorm { .. })), 3);
        assert_eq!(kinds(&f, |k| *k == LayerKind::Relu), 1);
        assert_eq!(kinds(&f, |k| matches!(k, LayerKind::Conv { .. })), 2);
        let order: Vec<_> = f.nodes[1..7].iter().map(|n| n.kind.name()).collect();
        assert_eq!(order, ["batch_norm", "conv", "batch_norm", "relu", "conv", "batch_norm"]);
        assert_eq!(f.nodes[f.shortcut_out].kind, LayerKind::ZeroPadChannels { extra: 5 });
    }

    #[test]
    fn preact_fragment_layout() {
        let f = block_subgraph(BlockVariant::PreAct, 16, 16, 1).unwrap();
        assert_eq!(kinds(&f, |k| matches!(k, LayerKind::BatchNorm { .. })), 2);
        assert_eq!(kinds(&f, |k| *k == LayerKind::Relu), 2);
        assert_eq!(kinds(&f, |k| matches!(k, LayerKind::Conv { .. })), 2);
        assert_eq!(f.nodes[f.shortcut_out].kind, LayerKind::Identity);
        // No activation after the merge.
        assert_eq!(f.nodes.last().unwrap().kind, LayerKind::Add);
    }

    #[test]
    fn downsampling_fragment_only_pools() {
        let f = block_subgraph(BlockVariant::PyramidBn, 32, 32, 2).unwrap();
        let conv = f.nodes.iter().find(|n| matches!(n.kind, LayerKind::Conv { .. })).unwrap();
        assert!(matches!(conv.kind, LayerKind::Conv { stride: 2, .. }));
        let shortcut: Vec<_> = f
            .nodes
            .iter()
            .filter(|n| n.tag.role == Role::Shortcut)
            .map(|n| n.kind)
            .collect();
        assert_eq!(shortcut, vec![LayerKind::AvgPool { kernel: 2 }]);
    }

    #[test]
    fn fragment_rejects_bad_arguments() {
        assert!(block_subgraph(BlockVariant::PreAct, 16, 16, 3).is_err());
        assert!(block_subgraph(BlockVariant::PreAct, 0, 16, 1).is_err());
        assert!(block_subgraph(BlockVariant::PreAct, 32, 16, 1).is_err());
    }

    #[test]
    fn preact_alpha0_matches_reference_unit() {
        // Hand-built pre-activation unit: BN, ReLU, conv, BN, ReLU, conv, identity, add.
        let t = |role| NodeTag {
            level: Level::Final,
            group: 1,
            block: 1,
            role,
        };
        let conv = LayerKind::Conv {
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let reference = vec![
            LayerNode { id: 0, kind: LayerKind::Input, inputs: vec![], tag: NodeTag::trunk(Role::Input) },
            LayerNode { id: 1, kind: LayerKind::BatchNorm { channels: 16 }, inputs: vec![0], tag: t(Role::Branch) },
            LayerNode { id: 2, kind: LayerKind::Relu, inputs: vec![1], tag: t(Role::Branch) },
            LayerNode { id: 3, kind: conv, inputs: vec![2], tag: t(Role::Branch) },
            LayerNode { id: 4, kind: LayerKind::BatchNorm { channels: 16 }, inputs: vec![3], tag: t(Role::Branch) },
            LayerNode { id: 5, kind: LayerKind::Relu, inputs: vec![4], tag: t(Role::Branch) },
            LayerNode { id: 6, kind: conv, inputs: vec![5], tag: t(Role::Branch) },
            LayerNode { id: 7, kind: LayerKind::Identity, inputs: vec![0], tag: t(Role::Shortcut) },
            LayerNode { id: 8, kind: LayerKind::Add, inputs: vec![6, 7], tag: t(Role::Merge) },
        ];
        let f = block_subgraph(BlockVariant::PreAct, 16, 16, 1).unwrap();
        assert_eq!(f.nodes, reference);
    }

    #[test]
    fn depth8_alpha3_widths() {
        let g = build_graph(&ArchConfig::new(8, 3, BlockVariant::PyramidBn)).unwrap();
        assert_eq!(g.schedule().widths, vec![17, 18, 19]);
        assert_eq!(
            g.node(g.output_id()).kind,
            LayerKind::Linear { in_features: 19, out_features: 10 }
        );
        assert!(validate_graph(&g).is_empty(), "{:?}", validate_graph(&g));
    }

    #[test]
    fn depth8_alpha0_group1_identity() {
        let g = build_graph(&ArchConfig::new(8, 0, BlockVariant::PreAct)).unwrap();
        assert!(g.schedule().widths.iter().all(|&w| w == 16));
        let b = g.final_blocks()[0];
        assert_eq!(g.node(b.shortcut_out).kind, LayerKind::Identity);
        assert_eq!(g.node(b.shortcut_out).inputs, vec![b.entry]);
    }

    #[test]
    fn depth110_alpha48_counts() {
        let g = build_graph(&ArchConfig::new(110, 48, BlockVariant::PyramidBn)).unwrap();
        assert_eq!(g.count_adds(Level::Final), 54);
        assert_eq!(g.count_adds(Level::Middle), 3);
        assert_eq!(g.count_adds(Level::Root), 1);
        assert_eq!(g.weighted_layers(), 110);
        assert_eq!(g.projection_count(), 4);
        assert_eq!(
            g.node(g.output_id()).kind,
            LayerKind::Linear { in_features: 64, out_features: 10 }
        );
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn downsampling_at_group_entry() {
        let g = build_graph(&ArchConfig::new(14, 6, BlockVariant::PreAct)).unwrap();
        let first_conv_stride = |b: &FinalBlock| {
            g.nodes()
                .iter()
                .filter(|n| n.tag.role == Role::Branch && n.tag.group == b.group && n.tag.block == b.block)
                .find_map(|n| match n.kind {
                    LayerKind::Conv { stride, .. } => Some(stride),
                    _ => None,
                })
                .unwrap()
        };
        let strides: Vec<_> = g.final_blocks().iter().map(first_conv_stride).collect();
        assert_eq!(strides, vec![1, 1, 2, 1, 2, 1]);
    }

    #[test]
    fn odd_input_is_rejected_at_build() {
        let cfg = ArchConfig::new(8, 3, BlockVariant::PyramidBn).with_input_shape((3, 31, 31));
        assert!(matches!(build_graph(&cfg), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn removed_final_add_is_reported() {
        let g = build_graph(&ArchConfig::new(110, 48, BlockVariant::PyramidBn)).unwrap();
        let mut nodes = g.nodes().to_vec();
        let b = g.final_blocks()[10];
        nodes[b.exit].kind = LayerKind::Identity;
        nodes[b.exit].inputs = vec![b.shortcut_out];
        let broken = LayerGraph::from_parts(
            g.config().clone(),
            g.schedule().clone(),
            nodes,
            g.input_id(),
            g.output_id(),
            g.final_blocks().to_vec(),
        );
        let v = validate_graph(&broken);
        assert!(v.iter().any(|m| m == "final-level Add count 53 \u{2260} 54"), "{v:?}");
    }

    #[test]
    fn mismatched_add_is_reported_by_node() {
        let g = build_graph(&ArchConfig::new(8, 3, BlockVariant::PyramidBn)).unwrap();
        let mut nodes = g.nodes().to_vec();
        let b = g.final_blocks()[0];
        // Drop the zero-padding so the shortcut keeps 16 channels.
        let pad_input = nodes[b.shortcut_out].inputs[0];
        nodes[b.shortcut_out].kind = LayerKind::Identity;
        nodes[b.shortcut_out].inputs = vec![pad_input];
        let broken = LayerGraph::from_parts(
            g.config().clone(),
            g.schedule().clone(),
            nodes,
            g.input_id(),
            g.output_id(),
            g.final_blocks().to_vec(),
        );
        let v = validate_graph(&broken);
        assert!(v.iter().any(|m| m.contains(&format!("node {}", b.exit))), "{v:?}");
    }

    #[test]
    fn cycle_and_order_violations() {
        let g = build_graph(&ArchConfig::new(8, 0, BlockVariant::PreAct)).unwrap();
        let mut nodes = g.nodes().to_vec();
        nodes[2].inputs = vec![5];
        let broken = LayerGraph::from_parts(
            g.config().clone(),
            g.schedule().clone(),
            nodes,
            g.input_id(),
            g.output_id(),
            g.final_blocks().to_vec(),
        );
        let v = validate_graph(&broken);
        assert!(v.iter().any(|m| m.contains("does not precede")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("cycle")), "{v:?}");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let g = build_graph(&ArchConfig::new(14, 7, BlockVariant::PreAct).with_p_terminal(0.3)).unwrap();
        let text = g.to_json().unwrap();
        let back = LayerGraph::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_import_rejects_tampering() {
        let g = build_graph(&ArchConfig::new(8, 3, BlockVariant::PreAct)).unwrap();
        let text = g.to_json().unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["nodes"][5]["inputs"] = serde_json::json!([40]);
        assert!(LayerGraph::from_json(&doc.to_string()).is_err());
        assert!(LayerGraph::from_json("{}").is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = ArchConfig::new(20, 12, BlockVariant::PyramidBn);
        assert_eq!(build_graph(&cfg).unwrap().to_json().unwrap(), build_graph(&cfg).unwrap().to_json().unwrap());
    }
}
