use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiresolution hash grid shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Entries per level table; a power of two.
    pub table_size: usize,
    /// Resolution of the coarsest level.
    pub base_resolution: usize,
    /// Per-level resolution multiplier.
    pub growth: f64,
}

impl HashGridConfig {
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).round() as usize
    }

    /// Whether a level's vertex lattice fits the table without hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        let n = self.resolution(level) as u64 + 1;
        n * n * n <= self.table_size as u64
    }

    pub fn entries(&self, level: usize) -> usize {
        let n = self.resolution(level) as u64 + 1;
        (n * n * n).min(self.table_size as u64) as usize
    }

    pub fn encoded_width(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::config("hash grid needs at least one level and one feature"));
        }
        if !self.table_size.is_power_of_two() || self.table_size > u32::MAX as usize {
            return Err(Error::config(format!("table size {} is not a 32-bit power of two", self.table_size)));
        }
        if self.base_resolution == 0 || !(self.growth.is_finite() && self.growth >= 1.0) {
            return Err(Error::config(format!(
                "need base resolution >= 1 and growth >= 1, got {} and {}",
                self.base_resolution, self.growth
            )));
        }
        if self.resolution(self.levels - 1) > u32::MAX as usize / 2 {
            return Err(Error::config("finest resolution overflows 32-bit lattice coordinates"));
        }
        Ok(())
    }
}

/// Hash grid plus MLP architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    /// Hidden layer widths; the input width is `L·F` and the output is 1.
    pub hidden: Vec<usize>,
    /// Attenuation (1/mm) produced by a freshly initialized field. Sets the
    /// output bias; not part of the architecture.
    #[serde(default = "default_init_mu")]
    pub init_mu: f64,
}

pub fn default_init_mu() -> f64 {
    0.002
}

impl FieldConfig {
    /// `[L·F, hidden..., 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.grid.encoded_width());
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.grid == other.grid && self.hidden == other.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.init_mu.is_finite() && self.init_mu > 0.0) {
            return Err(Error::config(format!("init_mu must be positive, got {}", self.init_mu)));
        }
        Ok(())
    }

    /// The published settings: 8 levels × 2 features, 2^19 entries, coarsest
    /// resolution 8 doubling per level (finest 1024), and four affine layers
    /// with 32 hidden units.
    pub fn paper() -> Self {
        FieldConfig {
            grid: HashGridConfig {
                levels: 8,
                features_per_level: 2,
                table_size: 1 << 19,
                base_resolution: 8,
                growth: 2.0,
            },
            hidden: vec![32, 32, 32],
            init_mu: default_init_mu(),
        }
    }

    /// The published layout shrunk for 64³ volumes: a 2^14-entry table and
    /// growth 1.5, so the finest level (137) is about twice the voxel grid.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.grid.table_size = 1 << 14;
        c.grid.growth = 1.5;
        c
    }

    /// Small configuration used by the gradient checks.
    pub fn tiny() -> Self {
        FieldConfig {
            grid: HashGridConfig {
                levels: 2,
                features_per_level: 2,
                table_size: 1 << 6,
                base_resolution: 2,
                growth: 2.0,
            },
            hidden: vec![8, 8],
            init_mu: default_init_mu(),
        }
    }
}

/// Offsets of every parameter block inside the flat parameter vector:
/// all level tables first (level-major, entry-major, `F` scalars per entry),
/// then each affine layer's weights (row-major `out × in`) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub levels: usize,
    pub features: usize,
    pub table_size: usize,
    pub resolutions: Vec<usize>,
    pub dense: Vec<bool>,
    /// First entry of each level, counted in entries.
    pub entry_offsets: Vec<usize>,
    pub total_entries: usize,
    pub widths: Vec<usize>,
    pub weight_offsets: Vec<usize>,
    pub bias_offsets: Vec<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(config: &FieldConfig) -> Self {
        let g = &config.grid;
        let mut entry_offsets = Vec::with_capacity(g.levels);
        let mut total_entries = 0;
        for l in 0..g.levels {
            entry_offsets.push(total_entries);
            total_entries += g.entries(l);
        }
        let widths = config.widths();
        let mut off = total_entries * g.features_per_level;
        let mut weight_offsets = Vec::new();
        let mut bias_offsets = Vec::new();
        for pair in widths.windows(2) {
            weight_offsets.push(off);
            off += pair[0] * pair[1];
            bias_offsets.push(off);
            off += pair[1];
        }
        Layout {
            levels: g.levels,
            features: g.features_per_level,
            table_size: g.table_size,
            resolutions: (0..g.levels).map(|l| g.resolution(l)).collect(),
            dense: (0..g.levels).map(|l| g.is_dense(l)).collect(),
            entry_offsets,
            total_entries,
            widths,
            weight_offsets,
            bias_offsets,
            len: off,
        }
    }

    /// Scalars occupied by the level tables; the MLP follows.
    pub fn table_len(&self) -> usize {
        self.total_entries * self.features
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn level_of_entry(&self, entry: usize) -> usize {
        self.entry_offsets.partition_point(|&o| o <= entry) - 1
    }

    /// Sum of hidden widths: the scratch needed for one point's activations.
    pub fn hidden_len(&self) -> usize {
        self.widths[1..self.widths.len() - 1].iter().sum()
    }
}
