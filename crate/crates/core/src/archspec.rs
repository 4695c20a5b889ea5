//! Architecture configurations, depth algebra and channel schedules.
//!
//! A network of depth `6n + 2` has one stem convolution, `3n` two-conv
//! residual blocks split evenly across three groups, and one classifier.
//! The pyramidal schedule widens every block by `alpha / N` channels so the
//! last block ends at exactly `16 + alpha`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output width of the stem convolution.
pub const STEM_WIDTH: usize = 16;

/// Number of final-level block groups. Only three are supported.
pub const GROUPS: usize = 3;

/// Number of shortcut levels (root, middle, final).
pub const SHORTCUT_LEVELS: usize = 3;

/// Residual block layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    /// BN-ReLU-Conv-BN-ReLU-Conv.
    PreAct,
    /// BN-Conv-BN-ReLU-Conv-BN.
    PyramidBn,
}

impl BlockVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockVariant::PreAct => "pre-act",
            BlockVariant::PyramidBn => "pyramid-bn",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "pre-act" | "preact" | "a" => Ok(BlockVariant::PreAct),
            "pyramid-bn" | "pyramidbn" | "b" => Ok(BlockVariant::PyramidBn),
            other => Err(Error::InvalidConfig(format!(
                "unknown block variant {other:?} (expected pre-act or pyramid-bn)"
            ))),
        }
    }
}

/// User-facing architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub alpha: usize,
    pub groups: usize,
    pub block_variant: BlockVariant,
    pub shortcut_levels: usize,
    pub p_terminal: f64,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            depth: 110,
            alpha: 48,
            groups: GROUPS,
            block_variant: BlockVariant::PyramidBn,
            shortcut_levels: SHORTCUT_LEVELS,
            p_terminal: 0.5,
            num_classes: 10,
            input_shape: (3, 32, 32),
        }
    }
}

/// Keys accepted in an architecture config file.
pub const CONFIG_KEYS: [&str; 5] = ["depth", "alpha", "block_variant", "p_terminal", "num_classes"];

impl ArchConfig {
    pub fn new(depth: usize, alpha: usize, block_variant: BlockVariant) -> Self {
        ArchConfig {
            depth,
            alpha,
            block_variant,
            ..ArchConfig::default()
        }
    }

    pub fn with_p_terminal(mut self, p: f64) -> Self {
        self.p_terminal = p;
        self
    }

    pub fn with_num_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    pub fn with_input_shape(mut self, shape: (usize, usize, usize)) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        derive_block_counts(self.depth)?;
        if self.groups != GROUPS {
            return Err(Error::InvalidConfig(format!(
                "groups must be {GROUPS}, got {}",
                self.groups
            )));
        }
        if self.shortcut_levels != SHORTCUT_LEVELS {
            return Err(Error::InvalidConfig(format!(
                "shortcut_levels must be {SHORTCUT_LEVELS}, got {}",
                self.shortcut_levels
            )));
        }
        if !(self.p_terminal > 0.0 && self.p_terminal <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_terminal must lie in (0, 1], got {}",
                self.p_terminal
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "input shape must be positive, got {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn block_counts(&self) -> Result<BlockCounts> {
        derive_block_counts(self.depth)
    }

    /// Pyramidal channel schedule for this configuration.
    pub fn schedule(&self) -> Result<ChannelSchedule> {
        let counts = self.block_counts()?;
        pyramidal_widths(self.alpha, counts.total, STEM_WIDTH)
    }

    /// Parse a flat `key = value` file. Blank lines and `#` comments are
    /// ignored, unknown or repeated keys are rejected, and missing keys keep
    /// their default values.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` pairs on top of the current values.
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
            "depth" => self.depth = value.parse().map_err(|e| bad(&e))?,
            "alpha" => self.alpha = value.parse().map_err(|e| bad(&e))?,
            "block_variant" => self.block_variant = value.parse()?,
            "p_terminal" => self.p_terminal = value.parse().map_err(|e| bad(&e))?,
            "num_classes" => self.num_classes = value.parse().map_err(|e| bad(&e))?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {key:?} (expected one of {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Serialize the file-level keys in `key = value` form.
    pub fn to_kv_string(&self) -> String {
        format!(
            "depth = {}\nalpha = {}\nblock_variant = {}\np_terminal = {}\nnum_classes = {}\n",
            self.depth, self.alpha, self.block_variant, self.p_terminal, self.num_classes
        )
    }
}

/// Split `key = value` lines, shared by every config-file reader.
pub(crate) fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Blocks per group and total final-level blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub per_group: usize,
    pub total: usize,
}

/// Solve `depth = 6n + 2` for `n`.
pub fn derive_block_counts(depth: usize) -> Result<BlockCounts> {
    if depth < 8 || depth % 6 != 2 {
        let above = if depth < 8 { 8 } else { depth + (6 + 2 - depth % 6) % 6 };
        let below = if depth < 8 { None } else { Some(depth - (depth + 4) % 6) };
        return Err(Error::InvalidDepth { depth, below, above });
    }
    let per_group = (depth - 2) / 6;
    Ok(BlockCounts {
        per_group,
        total: GROUPS * per_group,
    })
}

/// Per-block output widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub stem_width: usize,
    pub widths: Vec<usize>,
}

impl ChannelSchedule {
    pub fn total_blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn final_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.stem_width)
    }

    /// Input width of block `k` (0-based).
    pub fn input_width(&self, k: usize) -> usize {
        if k == 0 {
            self.stem_width
        } else {
            self.widths[k - 1]
        }
    }

    /// Widths split into `groups` equal chunks.
    pub fn per_group(&self, groups: usize) -> Vec<Vec<usize>> {
        let n = self.widths.len() / groups.max(1);
        self.widths.chunks(n.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// `D_k = floor(stem + k * alpha / N)` for `k = 1..=N`.
///
/// Evaluated with exact integer arithmetic so the last width is
/// `stem + alpha` with no rounding drift.
pub fn pyramidal_widths(alpha: usize, blocks: usize, stem: usize) -> Result<ChannelSchedule> {
    if blocks == 0 || stem == 0 {
        return Err(Error::InvalidConfig(format!(
            "pyramidal schedule needs blocks >= 1 and stem >= 1, got blocks={blocks}, stem={stem}"
        )));
    }
    let widths = (1..=blocks).map(|k| stem + k * alpha / blocks).collect();
    Ok(ChannelSchedule {
        stem_width: stem,
        widths,
    })
}

/// Doubling schedule: group `g` (1-based) has width `stem * 2^(g-1)`.
pub fn classic_widths(groups: usize, per_group: usize, stem: usize) -> Result<ChannelSchedule> {
    if groups == 0 || per_group == 0 || stem == 0 {
        return Err(Error::InvalidConfig(format!(
            "classic schedule needs positive groups, blocks and stem, got ({groups}, {per_group}, {stem})"
        )));
    }
    let widths = (0..groups)
        .flat_map(|g| std::iter::repeat_n(stem << g, per_group))
        .collect();
    Ok(ChannelSchedule {
        stem_width: stem,
        widths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_counts_for_named_depths() {
        assert_eq!(derive_block_counts(110).unwrap(), BlockCounts { per_group: 18, total: 54 });
        assert_eq!(derive_block_counts(146).unwrap(), BlockCounts { per_group: 24, total: 72 });
        assert_eq!(derive_block_counts(8).unwrap(), BlockCounts { per_group: 1, total: 3 });
    }

    #[test]
    fn bad_depth_names_neighbours() {
        match derive_block_counts(9) {
            Err(Error::InvalidDepth { below, above, .. }) => {
                assert_eq!(below, Some(8));
                assert_eq!(above, 14);
            }
            other => panic!("unexpected {other:?}"),
        }
        match derive_block_counts(2) {
            Err(Error::InvalidDepth { below, above, .. }) => {
                assert_eq!(below, None);
                assert_eq!(above, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = derive_block_counts(111).unwrap_err().to_string();
        assert!(msg.contains("6n+2"), "{msg}");
        assert!(msg.contains("110") && msg.contains("116"), "{msg}");
    }

    #[test]
    fn pyramidal_constant_step() {
        let s = pyramidal_widths(270, 54, 16).unwrap();
        assert_eq!(s.widths[0], 21);
        assert_eq!(s.widths[1], 26);
        assert_eq!(s.final_width(), 286);
        assert!(s.widths.windows(2).all(|w| w[1] - w[0] == 5));
    }

    #[test]
    fn pyramidal_alpha_48_ends_at_64() {
        let s = pyramidal_widths(48, 54, 16).unwrap();
        assert_eq!(s.final_width(), 64);
        assert_eq!(s.total_blocks(), 54);
    }

    #[test]
    fn pyramidal_zero_alpha() {
        assert_eq!(pyramidal_widths(0, 9, 16).unwrap().widths, vec![16; 9]);
    }

    #[test]
    fn pyramidal_small_step_does_not_freeze() {
        // alpha / N < 1: re-flooring the previous width would stay at 16.
        let s = pyramidal_widths(3, 6, 16).unwrap();
        assert_eq!(s.widths, vec![16, 17, 17, 18, 18, 19]);
    }

    #[test]
    fn classic_doubling() {
        let s = classic_widths(3, 18, 16).unwrap();
        assert_eq!(s.widths.len(), 54);
        assert!(s.widths[..18].iter().all(|&w| w == 16));
        assert!(s.widths[18..36].iter().all(|&w| w == 32));
        assert!(s.widths[36..].iter().all(|&w| w == 64));
        assert_eq!(classic_widths(1, 2, 16).unwrap().widths, vec![16, 16]);
        assert_eq!(classic_widths(3, 1, 8).unwrap().widths, vec![8, 16, 32]);
    }

    #[test]
    fn config_file_parsing() {
        let cfg = ArchConfig::from_kv_str(
            "# comment\ndepth = 8\nalpha=3\nblock_variant = pre-act\n\np_terminal = 0.5\nnum_classes = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.depth, 8);
        assert_eq!(cfg.alpha, 3);
        assert_eq!(cfg.block_variant, BlockVariant::PreAct);
        assert_eq!(cfg.num_classes, 2);
        assert!(ArchConfig::from_kv_str("width = 3").is_err());
        assert!(ArchConfig::from_kv_str("depth = 8\ndepth = 14").is_err());
        assert!(ArchConfig::from_kv_str("depth").is_err());
        let again = ArchConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let ok = ArchConfig::new(8, 3, BlockVariant::PyramidBn);
        ok.validate().unwrap();
        assert!(ok.clone().with_p_terminal(0.0).validate().is_err());
        assert!(ok.clone().with_p_terminal(1.5).validate().is_err());
        assert!(ArchConfig { groups: 4, ..ok.clone() }.validate().is_err());
        assert!(ArchConfig { shortcut_levels: 2, ..ok.clone() }.validate().is_err());
        assert!(ok.with_num_classes(0).validate().is_err());
    }

    proptest! {
        #[test]
        fn pyramidal_endpoint_and_steps(alpha in 0usize..600, blocks in 1usize..300) {
            let s = pyramidal_widths(alpha, blocks, 16).unwrap();
            prop_assert_eq!(s.widths.len(), blocks);
            prop_assert_eq!(s.final_width(), 16 + alpha);
            let lo = alpha / blocks;
            let mut prev = 16;
            for &w in &s.widths {
                let d = w - prev;
                prop_assert!(d == lo || d == lo + 1, "step {} not in {{{}, {}}}", d, lo, lo + 1);
                prev = w;
            }
        }

        #[test]
        fn depth_algebra_inverts(n in 1usize..2000) {
            prop_assert_eq!(derive_block_counts(6 * n + 2).unwrap().per_group, n);
        }
    }

    #[test]
    fn classic_never_exceeds_twice_pyramidal() {
        for per_group in 1..=66 {
            let blocks = 3 * per_group;
            let stem = 16;
            let alpha = stem * ((1 << (GROUPS - 1)) - 1);
            let p = pyramidal_widths(alpha, blocks, stem).unwrap();
            let c = classic_widths(GROUPS, per_group, stem).unwrap();
            assert_eq!(p.final_width(), c.final_width());
            for (a, b) in p.widths.iter().zip(&c.widths) {
                assert!(*b <= 2 * *a, "classic {b} > 2 x pyramidal {a} at N={blocks}");
            }
        }
    }
}
