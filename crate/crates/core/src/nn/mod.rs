//! Minimal layer library over candle tensors.

mod layers;
mod params;

use candle_core::{DType, Device, Tensor};

pub use layers::{
    causal_bias, id_tensor, key_bias, length_mask, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, MASK_NEG,
};
pub use params::ParamStore;

use crate::Result;

/// Row indices padded to a common width, with a 0/1 mask.
///
/// Empty lists are replaced by the single row `fallback`, so every row has at
/// least one valid entry.
pub struct Ragged {
    pub index: Tensor,
    pub mask: Tensor,
    pub width: usize,
    /// Rows that used `fallback`.
    pub fallback_rows: Vec<bool>,
}

impl Ragged {
    pub fn new(lists: &[Vec<u32>], fallback: u32, dtype: DType, device: &Device) -> Result<Self> {
        let width = lists.iter().map(|l| l.len().max(1)).max().unwrap_or(1);
        let mut idx = vec![fallback; lists.len() * width];
        let mut mask = vec![0f64; lists.len() * width];
        let mut fallback_rows = Vec::with_capacity(lists.len());
        for (r, l) in lists.iter().enumerate() {
            if l.is_empty() {
                mask[r * width] = 1.0;
                fallback_rows.push(true);
            } else {
                idx[r * width..r * width + l.len()].copy_from_slice(l);
                for m in &mut mask[r * width..r * width + l.len()] {
                    *m = 1.0;
                }
                fallback_rows.push(false);
            }
        }
        Ok(Self {
            index: Tensor::from_vec(idx, (lists.len(), width), device)?,
            mask: Tensor::from_vec(mask, (lists.len(), width), device)?.to_dtype(dtype)?,
            width,
            fallback_rows,
        })
    }

    /// Gathers rows of `table: [n, d]` into `[b, width, d]`.
    pub fn gather(&self, table: &Tensor) -> Result<Tensor> {
        let (b, w) = self.index.dims2()?;
        let d = table.dim(1)?;
        Ok(table.index_select(&self.index.flatten_all()?, 0)?.reshape((b, w, d))?)
    }
}
