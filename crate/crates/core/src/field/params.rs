use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FieldConfig, Layout};
use crate::error::{Error, Result};
use crate::scalar::{softplus_inv, Real};

/// Hash tables and MLP weights in one flat vector (see [`Layout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

/// Half width of the uniform table initialization.
pub const TABLE_INIT: f64 = 1e-4;

impl<T: Real> FieldParams<T> {
    pub fn zeros(config: &FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        Ok(FieldParams { config: config.clone(), data: vec![T::zero(); layout.len], layout })
    }

    /// Seeded initialization: table features uniform in `±1e-4`, He-uniform
    /// weights, zero hidden biases, and an output bias that makes an
    /// untrained field read `init_mu` everywhere.
    pub fn random(config: &FieldConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table_len = p.layout.table_len();
        for v in &mut p.data[..table_len] {
            *v = T::of(rng.random_range(-TABLE_INIT..TABLE_INIT));
        }
        let n_layers = p.layout.n_layers();
        for j in 0..n_layers {
            let (fan_in, fan_out) = (p.layout.widths[j], p.layout.widths[j + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = p.layout.weight_offsets[j];
            for v in &mut p.data[w..w + fan_in * fan_out] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        let out_bias = p.layout.bias_offsets[n_layers - 1];
        p.data[out_bias] = T::of(softplus_inv(config.init_mu));
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_compatible(&self, other: &FieldParams<T>) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::shape(
                "field parameters",
                format!("{:?}", self.layout.widths),
                format!("{:?}", other.layout.widths),
            ));
        }
        Ok(())
    }

    pub fn tables(&self) -> &[T] {
        &self.data[..self.layout.table_len()]
    }

    pub fn level_table(&self, level: usize) -> &[T] {
        let f = self.layout.features;
        let start = self.layout.entry_offsets[level] * f;
        let end = start + self.config.grid.entries(level) * f;
        &self.data[start..end]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::of(Real::to_f64(*v))).collect(),
        }
    }
}

/// Gradient buffer shaped like [`FieldParams`]. Table entries are tracked
/// sparsely: only entries listed in `touched` may hold non-zero gradient.
#[derive(Debug, Clone)]
pub struct FieldGradients<T> {
    pub data: Vec<T>,
    touched: Vec<u32>,
    flags: Vec<bool>,
    table_len: usize,
    features: usize,
}

impl<T: Real> FieldGradients<T> {
    pub fn new(layout: &Layout) -> Self {
        FieldGradients {
            data: vec![T::zero(); layout.len],
            touched: Vec::new(),
            flags: vec![false; layout.total_entries],
            table_len: layout.table_len(),
            features: layout.features,
        }
    }

    pub fn for_params(params: &FieldParams<T>) -> Self {
        Self::new(&params.layout)
    }

    /// Global entry indices that received gradient, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn is_touched(&self, entry: usize) -> bool {
        self.flags[entry]
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn table_len(&self) -> usize {
        self.table_len
    }

    pub fn mlp(&self) -> &[T] {
        &self.data[self.table_len..]
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut [T] {
        &mut self.data[self.table_len..]
    }

    #[inline]
    pub(crate) fn add_entry(&mut self, entry: usize, grad: &[T]) {
        if !self.flags[entry] {
            self.flags[entry] = true;
            self.touched.push(entry as u32);
        }
        let base = entry * self.features;
        for (g, v) in self.data[base..base + self.features].iter_mut().zip(grad) {
            *g += *v;
        }
    }

    /// Zero everything, touching only what was written.
    pub fn reset(&mut self) {
        let f = self.features;
        for &e in &self.touched {
            let e = e as usize;
            self.flags[e] = false;
            self.data[e * f..(e + 1) * f].iter_mut().for_each(|v| *v = T::zero());
        }
        self.touched.clear();
        let table_len = self.table_len;
        self.data[table_len..].iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn scale(&mut self, factor: T) {
        let f = self.features;
        for &e in &self.touched {
            let e = e as usize;
            self.data[e * f..(e + 1) * f].iter_mut().for_each(|v| *v *= factor);
        }
        let table_len = self.table_len;
        self.data[table_len..].iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }
}
