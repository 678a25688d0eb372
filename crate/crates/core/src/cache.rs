//! Per-layer key/value cache for autoregressive decoding.
//!
//! Rows are stored position-major with the head chunks contiguous inside a
//! row, i.e. row layout is `[head0 | head1 | ...]` with `head_dim` floats
//! each. Position 0 is the BOS row and never moves once written.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    max_seq: usize,
    // One flat buffer per layer, `lens[l] * d_model` floats.
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    lens: Vec<usize>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> KvCache {
        KvCache {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            head_dim: config.head_dim(),
            max_seq: config.max_seq,
            k: vec![Vec::new(); config.n_layers],
            v: vec![Vec::new(); config.n_layers],
            lens: vec![0; config.n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Cached positions at one layer. Layers fill one at a time during a
    /// forward pass, so mid-pass this varies per layer.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    /// Common length across layers. Between completed operations every layer
    /// must agree; a mismatch means a forward pass was abandoned half-way.
    pub fn len(&self) -> Result<usize> {
        let t = self.lens[0];
        for (layer, &l) in self.lens.iter().enumerate() {
            if l != t {
                return Err(Error::CacheInconsistent {
                    layer,
                    expected: t,
                    found: l,
                });
            }
        }
        Ok(t)
    }

    pub fn is_empty(&self) -> bool {
        self.lens.iter().all(|&l| l == 0)
    }

    /// Appends one position's key and value rows (d_model floats each) at
    /// `layer`. Fails when the layer is at capacity.
    pub fn append_row(&mut self, layer: usize, k_row: &[f32], v_row: &[f32]) -> Result<()> {
        let d = self.d_model();
        debug_assert_eq!(k_row.len(), d);
        debug_assert_eq!(v_row.len(), d);
        if self.lens[layer] >= self.max_seq {
            return Err(Error::CacheFull {
                max_seq: self.max_seq,
            });
        }
        self.k[layer].extend_from_slice(k_row);
        self.v[layer].extend_from_slice(v_row);
        self.lens[layer] += 1;
        Ok(())
    }

    pub fn k_row(&self, layer: usize, pos: usize) -> &[f32] {
        let d = self.d_model();
        &self.k[layer][pos * d..(pos + 1) * d]
    }

    pub fn v_row(&self, layer: usize, pos: usize) -> &[f32] {
        let d = self.d_model();
        &self.v[layer][pos * d..(pos + 1) * d]
    }

    pub(crate) fn v_row_mut(&mut self, layer: usize, pos: usize) -> &mut [f32] {
        let d = self.d_model();
        &mut self.v[layer][pos * d..(pos + 1) * d]
    }

    /// Head `h`'s chunk of a stored row.
    pub fn head_slice(row: &[f32], head: usize, head_dim: usize) -> &[f32] {
        &row[head * head_dim..(head + 1) * head_dim]
    }

    /// The cached BOS value row of every layer, heads concatenated. This is
    /// the quantity the value-norm analysis compares across runs.
    pub fn bos_value_rows(&self) -> Result<Vec<Vec<f32>>> {
        if self.len()? == 0 {
            return Err(Error::EmptyInput("bos_value_rows"));
        }
        Ok((0..self.n_layers).map(|l| self.v_row(l, 0).to_vec()).collect())
    }
}
