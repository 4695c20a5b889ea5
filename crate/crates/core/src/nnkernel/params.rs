//! Parameter storage, initialization and the binary checkpoint container.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      9 bytes  "PYRORCKPT"
//! version    u32      1
//! config     u32 length + UTF-8 `key = value` text of the architecture
//! entries    u32 number of nodes with parameters
//! per node, ascending id:
//!   node id  u32
//!   tensors  u32
//!   per tensor:
//!     name     u16 length + UTF-8
//!     learned  u8 (1 = trained by SGD, 0 = running statistic)
//!     rank     u32, then rank x u32 dims
//!     values   product(dims) x f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analyzer;
use crate::archspec::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, LayerKind, NodeId};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PYRORCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// False for running statistics, which have no gradient.
    pub learned: bool,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>, learned: bool) -> Self {
        let grad = if learned { vec![0.0; value.len()] } else { Vec::new() };
        Param {
            shape,
            value,
            grad,
            learned,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameter tensors per node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    nodes: BTreeMap<NodeId, BTreeMap<String, Param>>,
    generation: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: NodeId, name: &str, param: Param) {
        self.generation += 1;
        self.nodes.entry(node).or_default().insert(name.to_string(), param);
    }

    pub fn get(&self, node: NodeId, name: &str) -> Option<&Param> {
        self.nodes.get(&node)?.get(name)
    }

    /// Mutable access; bumps the store generation so earlier forward caches
    /// are recognized as stale.
    pub fn get_mut(&mut self, node: NodeId, name: &str) -> Option<&mut Param> {
        self.generation += 1;
        self.nodes.get_mut(&node)?.get_mut(name)
    }

    pub(crate) fn value(&self, node: NodeId, name: &str) -> Result<&[f64]> {
        self.get(node, name)
            .map(|p| p.value.as_slice())
            .ok_or_else(|| Error::StaleCache(format!("node {node} has no parameter {name:?}")))
    }

    /// Value and gradient buffer of one parameter, without touching the
    /// generation counter.
    pub(crate) fn value_and_grad(&mut self, node: NodeId, name: &str) -> Result<(&[f64], &mut [f64])> {
        let p = self
            .nodes
            .get_mut(&node)
            .and_then(|m| m.get_mut(name))
            .ok_or_else(|| Error::StaleCache(format!("node {node} has no parameter {name:?}")))?;
        Ok((&p.value, &mut p.grad))
    }

    /// Running-statistic update, which does not invalidate train-mode caches.
    pub(crate) fn running_stats_mut(&mut self, node: NodeId) -> Option<(&mut [f64], &mut [f64])> {
        let m = self.nodes.get_mut(&node)?;
        let mut mean = None;
        let mut var = None;
        for (k, p) in m.iter_mut() {
            match k.as_str() {
                "running_mean" => mean = Some(p.value.as_mut_slice()),
                "running_var" => var = Some(p.value.as_mut_slice()),
                _ => {}
            }
        }
        Some((mean?, var?))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&BTreeMap<String, Param>> {
        self.nodes.get(&id)
    }

    /// Every parameter as `(node, name, param)` in ascending node/name order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &str, &Param)> {
        self.nodes
            .iter()
            .flat_map(|(&id, m)| m.iter().map(move |(k, p)| (id, k.as_str(), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (NodeId, &str, &mut Param)> {
        self.generation += 1;
        self.nodes
            .iter_mut()
            .flat_map(|(&id, m)| m.iter_mut().map(move |(k, p)| (id, k.as_str(), p)))
    }

    pub fn zero_grad(&mut self) {
        for m in self.nodes.values_mut() {
            for p in m.values_mut() {
                p.grad.fill(0.0);
            }
        }
    }

    /// Number of learned scalars.
    pub fn learned_count(&self) -> usize {
        self.iter().filter(|(_, _, p)| p.learned).map(|(_, _, p)| p.len()).sum()
    }

    /// All learned values concatenated in node/name order.
    pub fn learned_values(&self) -> Vec<f64> {
        self.iter()
            .filter(|(_, _, p)| p.learned)
            .flat_map(|(_, _, p)| p.value.iter().copied())
            .collect()
    }

    /// Bitwise equality of every stored value (gradients ignored).
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        let a: Vec<_> = self.iter().collect();
        let b: Vec<_> = other.iter().collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((ia, na, pa), (ib, nb, pb))| {
                ia == ib
                    && na == nb
                    && pa.shape == pb.shape
                    && pa.learned == pb.learned
                    && pa.value.len() == pb.value.len()
                    && pa.value.iter().zip(&pb.value).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Check that the store holds exactly the tensors `graph` needs.
    pub fn check_against(&self, graph: &LayerGraph) -> Result<()> {
        let expected = init_params(graph, 0)?;
        for (id, name, p) in expected.iter() {
            match self.get(id, name) {
                Some(q) if q.shape == p.shape => {}
                Some(q) => {
                    return Err(Error::StaleCache(format!(
                        "node {id} {name}: shape {:?}, graph needs {:?}",
                        q.shape, p.shape
                    )))
                }
                None => return Err(Error::StaleCache(format!("node {id} is missing {name}"))),
            }
        }
        let have = self.iter().count();
        let want = expected.iter().count();
        if have != want {
            return Err(Error::StaleCache(format!("store has {have} tensors, graph needs {want}")));
        }
        Ok(())
    }

    pub fn save(&self, config: &ArchConfig, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(config, &mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, config: &ArchConfig, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let echo = config.to_kv_string();
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo.as_bytes())?;
        w.write_all(&(self.nodes.len() as u32).to_le_bytes())?;
        for (&id, tensors) in &self.nodes {
            w.write_all(&(id as u32).to_le_bytes())?;
            w.write_all(&(tensors.len() as u32).to_le_bytes())?;
            for (name, p) in tensors {
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&[p.learned as u8])?;
                w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
                for &d in &p.shape {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in &p.value {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ArchConfig, ParamStore)> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(r: &mut impl Read) -> Result<(ArchConfig, ParamStore)> {
        let mut rd = CountingReader { inner: r, offset: 0 };
        let mut magic = [0u8; 9];
        rd.exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(rd.bad("bad magic bytes"));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(rd.bad(&format!("unsupported version {version}")));
        }
        let len = rd.u32()? as usize;
        let echo = rd.string(len)?;
        let config = ArchConfig::from_kv_str(&echo)?;
        let mut store = ParamStore::new();
        let entries = rd.u32()?;
        let mut last: Option<NodeId> = None;
        for _ in 0..entries {
            let id = rd.u32()? as NodeId;
            if last.is_some_and(|l| l >= id) {
                return Err(rd.bad("node ids not strictly ascending"));
            }
            last = Some(id);
            let tensors = rd.u32()?;
            for _ in 0..tensors {
                let name_len = rd.u16()? as usize;
                let name = rd.string(name_len)?;
                let learned = match rd.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(rd.bad(&format!("bad learned flag {b}"))),
                };
                let rank = rd.u32()? as usize;
                let shape = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                let mut value = Vec::with_capacity(count);
                for _ in 0..count {
                    value.push(rd.f64()?);
                }
                store.insert(id, &name, Param::new(shape, value, learned));
            }
        }
        let mut trailing = [0u8; 1];
        if rd.inner.read(&mut trailing)? != 0 {
            return Err(rd.bad("trailing bytes"));
        }
        store.generation = 0;
        Ok((config, store))
    }
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn bad(&self, reason: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: self.offset,
            reason: reason.to_string(),
        }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.bad("unexpected end of file")
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let mut b = vec![0u8; len];
        self.exact(&mut b)?;
        String::from_utf8(b).map_err(|_| self.bad("invalid UTF-8"))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, count: usize, variance: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance is positive");
    (0..count).map(|_| normal.sample(rng)).collect()
}

/// Fresh parameters for `graph`.
///
/// Convolution and projection kernels are Gaussian with variance
/// `2 / fan_in`; classifier weights use `1 / fan_in`. Batch norm starts at
/// `gamma = 1, beta = 0` with running statistics `(0, 1)`; biases are zero.
/// Each node draws from its own ChaCha stream, so values depend only on
/// `(seed, node id)`.
pub fn init_params(graph: &LayerGraph, seed: u64) -> Result<ParamStore> {
    let shapes = analyzer::infer_shapes(graph, graph.config().input_shape)?;
    let mut store = ParamStore::new();
    for node in graph.nodes() {
        let in_ch = node.inputs.first().map(|&i| shapes[i].0).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(node.id as u64);
        match node.kind {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                let w = gaussian(&mut rng, out_channels * fan_in, 2.0 / fan_in as f64);
                store.insert(node.id, "weight", Param::new(vec![out_channels, in_ch, kernel, kernel], w, true));
            }
            LayerKind::ChannelProject { out_channels, .. } => {
                let w = gaussian(&mut rng, out_channels * in_ch, 2.0 / in_ch as f64);
                store.insert(node.id, "weight", Param::new(vec![out_channels, in_ch, 1, 1], w, true));
            }
            LayerKind::BatchNorm { channels } => {
                store.insert(node.id, "gamma", Param::new(vec![channels], vec![1.0; channels], true));
                store.insert(node.id, "beta", Param::new(vec![channels], vec![0.0; channels], true));
                store.insert(node.id, "running_mean", Param::new(vec![channels], vec![0.0; channels], false));
                store.insert(node.id, "running_var", Param::new(vec![channels], vec![1.0; channels], false));
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = gaussian(&mut rng, out_features * in_features, 1.0 / in_features as f64);
                store.insert(node.id, "weight", Param::new(vec![out_features, in_features], w, true));
                store.insert(node.id, "bias", Param::new(vec![out_features], vec![0.0; out_features], true));
            }
            _ => {}
        }
    }
    store.generation = 0;
    Ok(store)
}
