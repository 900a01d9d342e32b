//! Context encoders: a Transformer over the flattened dialogue, a relational
//! graph convolution over the entity graph, and a sentence-level review
//! encoder. Each view is summarized by self-attentive pooling.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Tensor, D};

use crate::corpus::{KnowledgeGraph, ReviewIndex};
use crate::nn::{
    id_tensor, key_bias, length_mask, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, Ragged, MASK_NEG,
};
use crate::{Error, Result};

/// Softmax-weighted combination of the rows of a matrix:
/// `weights = softmax(tanh(M W^T) b)` and `pooled = weights^T M`.
#[derive(Debug, Clone)]
pub struct SelfAttentivePool {
    proj: Linear,
    query: Tensor,
}

impl SelfAttentivePool {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), d, d, false)?,
            query: ps.fan_in(&format!("{name}.query"), &[d], d)?,
        })
    }

    /// `matrix: [b, m, d]`, `mask: [b, m]` (0/1). Returns `([b, d], weights [b, m])`.
    pub fn forward(&self, matrix: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let hidden = self.proj.forward(matrix)?.tanh()?;
        let scores = hidden.broadcast_mul(&self.query)?.sum(D::Minus1)?;
        let scores = (scores + ((mask - 1.0)? * -MASK_NEG)?)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let pooled = weights.unsqueeze(1)?.matmul(matrix)?.squeeze(1)?;
        Ok((pooled, weights))
    }
}

/// Free-function form of [`SelfAttentivePool::forward`].
pub fn self_attentive_pool(matrix: &Tensor, mask: &Tensor, pool: &SelfAttentivePool) -> Result<(Tensor, Tensor)> {
    pool.forward(matrix, mask)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, d, heads)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ffn)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(bias))?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm Transformer encoder with learned positions.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    tokens: Embedding,
    positions: Embedding,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    max_positions: usize,
}

impl TransformerEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        vocab: usize,
        d: usize,
        n_layers: usize,
        heads: usize,
        ffn: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let tokens = Embedding::new(ps, &format!("{name}.tokens"), vocab, d)?;
        let positions = Embedding::new(ps, &format!("{name}.positions"), max_positions, d)?;
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::new(ps, &format!("{name}.layer{l}"), d, heads, ffn))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), d)?;
        Ok(Self {
            tokens,
            positions,
            layers,
            norm,
            max_positions,
        })
    }

    /// `ids: [b, m]` (u32), `mask: [b, m]` 0/1. Returns the token matrix `[b, m, d]`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, m) = ids.dims2()?;
        if m == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        if m > self.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {m} exceeds max_positions {}",
                self.max_positions
            )));
        }
        let pos = Tensor::arange(0u32, m as u32, ids.device())?;
        let mut x = self
            .tokens
            .forward(ids)?
            .broadcast_add(&self.positions.forward(&pos)?)?;
        let bias = key_bias(mask)?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias)?;
        }
        self.norm.forward(&x)
    }
}

/// Transformer encode of a padded id matrix; convenience over [`TransformerEncoder::forward`].
pub fn transformer_encode(
    encoder: &TransformerEncoder,
    ids: &[u32],
    lengths: &[usize],
    width: usize,
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let device = candle_core::Device::Cpu;
    let rows = lengths.len();
    let ids = id_tensor(ids, rows, width, &device)?;
    let mask = length_mask(lengths, width, dtype, &device)?;
    encoder.forward(&ids, &mask)
}

#[derive(Debug, Clone)]
struct RgcnLayer {
    /// `[2R, d, d]`: one matrix per relation and per inverse relation.
    relation: Tensor,
    self_loop: Linear,
}

/// Relational graph convolution:
/// `n_e' = relu(sum_r sum_{e' in N_r(e)} W_r n_e' / Z + W n_e)`,
/// where `N_r(e)` holds the heads of triples `(e', r, e)`. Each relation also
/// gets an inverse so messages flow from tail to head.
pub struct RgcnEncoder {
    nodes: Tensor,
    layers: Vec<RgcnLayer>,
    /// `relation * n_entities + source` per directed message.
    message_source: Option<Tensor>,
    message_target: Option<Tensor>,
    n_entities: usize,
    n_triples: usize,
    norm: f64,
    triple_visits: AtomicUsize,
}

impl RgcnEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, kg: &KnowledgeGraph, d: usize, n_layers: usize, norm: f64) -> Result<Self> {
        let n = kg.n_entities();
        let n_rel = kg.n_relations().max(1);
        let nodes = Embedding::new(ps, &format!("{name}.nodes"), n, d)?.table().clone();
        let layers = (0..n_layers)
            .map(|l| {
                let scale = (3.0 / d as f64).sqrt();
                Ok(RgcnLayer {
                    relation: ps.uniform(&format!("{name}.layer{l}.relation"), &[2 * n_rel, d, d], scale)?,
                    self_loop: Linear::new(ps, &format!("{name}.layer{l}.self"), d, d, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let triples = kg.triples();
        let (message_source, message_target) = if triples.is_empty() {
            (None, None)
        } else {
            let mut src = Vec::with_capacity(2 * triples.len());
            let mut dst = Vec::with_capacity(2 * triples.len());
            for t in triples {
                src.push(t.relation * n as u32 + t.head);
                dst.push(t.tail);
                src.push((t.relation + n_rel as u32) * n as u32 + t.tail);
                dst.push(t.head);
            }
            let dev = nodes.device();
            (
                Some(Tensor::from_vec(src, 2 * triples.len(), dev)?),
                Some(Tensor::from_vec(dst, 2 * triples.len(), dev)?),
            )
        };
        Ok(Self {
            nodes,
            layers,
            message_source,
            message_target,
            n_entities: n,
            n_triples: triples.len(),
            norm,
            triple_visits: AtomicUsize::new(0),
        })
    }

    /// Node matrix `[n_entities, d]` after all layers.
    pub fn forward(&self) -> Result<Tensor> {
        self.forward_from(&self.nodes)
    }

    /// Runs the layers from arbitrary initial node features.
    pub fn forward_from(&self, initial: &Tensor) -> Result<Tensor> {
        let mut h = initial.clone();
        for layer in &self.layers {
            let mut out = layer.self_loop.forward(&h)?;
            if let (Some(src), Some(dst)) = (&self.message_source, &self.message_target) {
                let (n, d) = h.dims2()?;
                let per_relation = h
                    .unsqueeze(0)?
                    .broadcast_matmul(&layer.relation.transpose(1, 2)?)?
                    .reshape(((), d))?;
                let messages = per_relation.index_select(src, 0)?;
                let agg = Tensor::zeros((n, d), h.dtype(), h.device())?.index_add(dst, &messages, 0)?;
                out = (out + (agg / self.norm)?)?;
                self.triple_visits.fetch_add(self.n_triples, Ordering::Relaxed);
            }
            h = out.relu()?;
        }
        Ok(h)
    }

    pub fn initial_nodes(&self) -> &Tensor {
        &self.nodes
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    /// Total triples processed since construction, counted once per triple per layer.
    pub fn triple_visits(&self) -> usize {
        self.triple_visits.load(Ordering::Relaxed)
    }
}

/// Pooled view over a ragged set of rows with a learned fallback for empty sets.
#[derive(Debug, Clone)]
pub struct PooledView {
    pool: SelfAttentivePool,
    fallback: Tensor,
}

impl PooledView {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            pool: SelfAttentivePool::new(ps, &format!("{name}.pool"), d)?,
            fallback: ps.fan_in(&format!("{name}.default"), &[d], d)?,
        })
    }

    pub fn fallback(&self) -> &Tensor {
        &self.fallback
    }

    /// `table` with the fallback vector appended as its last row.
    pub fn extend_table(&self, table: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[table, &self.fallback.unsqueeze(0)?], 0)?)
    }

    /// Pools `table[list]` per row; empty lists yield the fallback vector and
    /// are flagged. Returns `(pooled [b, d], cold flags)`.
    pub fn forward(&self, table: &Tensor, lists: &[Vec<u32>]) -> Result<(Tensor, Vec<bool>)> {
        let ext = self.extend_table(table)?;
        let fallback_row = table.dim(0)? as u32;
        let ragged = Ragged::new(lists, fallback_row, table.dtype(), table.device())?;
        let rows = ragged.gather(&ext)?;
        let (pooled, _) = self.pool.forward(&rows, &ragged.mask)?;
        Ok((pooled, ragged.fallback_rows))
    }

    pub fn pool(&self) -> &SelfAttentivePool {
        &self.pool
    }
}

/// Sentence encoder for reviews with its own Transformer and pooling weights.
pub struct ReviewEncoder {
    transformer: TransformerEncoder,
    token_pool: SelfAttentivePool,
    sentence_view: PooledView,
    ids: Option<Tensor>,
    mask: Option<Tensor>,
}

impl ReviewEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        reviews: &ReviewIndex,
        vocab: usize,
        d: usize,
        n_layers: usize,
        heads: usize,
        ffn: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let transformer = TransformerEncoder::new(ps, name, vocab, d, n_layers, heads, ffn, max_positions)?;
        let token_pool = SelfAttentivePool::new(ps, &format!("{name}.token_pool"), d)?;
        let sentence_view = PooledView::new(ps, &format!("{name}.sentence"), d)?;
        let (ids, mask) = if reviews.is_empty() {
            (None, None)
        } else {
            let width = reviews
                .sentences()
                .iter()
                .map(|s| s.len().min(max_positions))
                .max()
                .unwrap_or(1)
                .max(1);
            let mut flat = vec![crate::corpus::Vocabulary::PAD_ID; reviews.len() * width];
            let mut lengths = Vec::with_capacity(reviews.len());
            for (r, s) in reviews.sentences().iter().enumerate() {
                let s = &s[..s.len().min(width)];
                flat[r * width..r * width + s.len()].copy_from_slice(s);
                lengths.push(s.len());
            }
            let dev = candle_core::Device::Cpu;
            (
                Some(id_tensor(&flat, reviews.len(), width, &dev)?),
                Some(length_mask(&lengths, width, ps.dtype(), &dev)?),
            )
        };
        Ok(Self {
            transformer,
            token_pool,
            sentence_view,
            ids,
            mask,
        })
    }

    /// One row per review sentence in [`ReviewIndex`] order: `[n_sentences, d]`.
    /// `None` when the corpus has no reviews.
    pub fn encode_sentences(&self) -> Result<Option<Tensor>> {
        match (&self.ids, &self.mask) {
            (Some(ids), Some(mask)) => self.encode_tokens(ids, mask).map(Some),
            _ => Ok(None),
        }
    }

    /// Encodes arbitrary token rows into sentence vectors.
    pub fn encode_tokens(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let tokens = self.transformer.forward(ids, mask)?;
        Ok(self.token_pool.forward(&tokens, mask)?.0)
    }

    /// Review-view user vectors: sentence pooling over each row's bundle.
    pub fn view(&self, sentences: Option<&Tensor>, bundles: &[Vec<u32>]) -> Result<(Tensor, Vec<bool>)> {
        match sentences {
            Some(table) => self.sentence_view.forward(table, bundles),
            None => {
                let empty: Vec<Vec<u32>> = vec![Vec::new(); bundles.len()];
                let table = self.sentence_view.fallback.unsqueeze(0)?;
                // single-row table; every list is empty so only the fallback is used
                self.sentence_view.forward(&table, &empty)
            }
        }
    }

    pub fn sentence_view(&self) -> &PooledView {
        &self.sentence_view
    }

    pub fn transformer(&self) -> &TransformerEncoder {
        &self.transformer
    }
}
