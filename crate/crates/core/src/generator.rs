//! Response generation: a Transformer decoder whose layers attend to the
//! dialogue tokens, then the context entities, then the review sentences;
//! a sentence-attention output head; frequency-weighted training loss;
//! greedy/beam decoding; and Distinct-n.

use std::collections::HashSet;

use candle_core::{DType, Tensor, D};

use crate::corpus::{TokenId, Vocabulary};
use crate::nn::{causal_bias, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, MASK_NEG};
use crate::{Error, Result};

/// Encoder outputs the decoder attends to. Each memory is `[b, k, d_conv]`
/// with a 0/1 mask `[b, k]`.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub context: Tensor,
    pub context_mask: Tensor,
    pub nodes: Tensor,
    pub nodes_mask: Tensor,
    pub sentences: Tensor,
    pub sentences_mask: Tensor,
}

impl DecoderMemory {
    fn check(&self, d: usize) -> Result<()> {
        for (name, t) in [("context", &self.context), ("nodes", &self.nodes), ("sentences", &self.sentences)] {
            let w = t.dim(D::Minus1)?;
            if w != d {
                return Err(Error::InvalidArgument(format!(
                    "{name} memory width {w} does not match decoder width {d}"
                )));
            }
        }
        Ok(())
    }

    /// Repeats a single-row memory `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let rep = |t: &Tensor| -> Result<Tensor> {
            let mut dims = t.dims().to_vec();
            dims[0] = n;
            Ok(t.broadcast_as(dims)?.contiguous()?)
        };
        Ok(Self {
            context: rep(&self.context)?,
            context_mask: rep(&self.context_mask)?,
            nodes: rep(&self.nodes)?,
            nodes_mask: rep(&self.nodes_mask)?,
            sentences: rep(&self.sentences)?,
            sentences_mask: rep(&self.sentences_mask)?,
        })
    }
}

fn bias4(mask: &Tensor) -> Result<Tensor> {
    crate::nn::key_bias(mask)
}

/// Pre-norm decoder layer: masked self-attention, then cross-attention to the
/// dialogue, the entities and the reviews, then a feed-forward block. Every
/// sub-layer is `x + f(norm(x))`.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_context: LayerNorm,
    context_attn: MultiHeadAttention,
    ln_nodes: LayerNorm,
    node_attn: MultiHeadAttention,
    ln_reviews: LayerNorm,
    review_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        let ln = |ps: &mut ParamStore, s: &str| LayerNorm::new(ps, &format!("{name}.{s}"), d);
        let mha = |ps: &mut ParamStore, s: &str| MultiHeadAttention::new(ps, &format!("{name}.{s}"), d, d, heads);
        Ok(Self {
            ln_self: ln(ps, "ln_self")?,
            self_attn: mha(ps, "self_attn")?,
            ln_context: ln(ps, "ln_context")?,
            context_attn: mha(ps, "context_attn")?,
            ln_nodes: ln(ps, "ln_nodes")?,
            node_attn: mha(ps, "node_attn")?,
            ln_reviews: ln(ps, "ln_reviews")?,
            review_attn: mha(ps, "review_attn")?,
            ln_ffn: ln(ps, "ln_ffn")?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ffn)?,
        })
    }

    pub fn self_block(&self, x: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        Ok((x + self.self_attn.forward(&h, &h, Some(causal))?)?)
    }

    fn cross(ln: &LayerNorm, attn: &MultiHeadAttention, x: &Tensor, mem: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = ln.forward(x)?;
        Ok((x + attn.forward(&h, mem, Some(&bias4(mask)?))?)?)
    }

    pub fn context_block(&self, x: &Tensor, m: &DecoderMemory) -> Result<Tensor> {
        Self::cross(&self.ln_context, &self.context_attn, x, &m.context, &m.context_mask)
    }

    pub fn node_block(&self, x: &Tensor, m: &DecoderMemory) -> Result<Tensor> {
        Self::cross(&self.ln_nodes, &self.node_attn, x, &m.nodes, &m.nodes_mask)
    }

    pub fn review_block(&self, x: &Tensor, m: &DecoderMemory) -> Result<Tensor> {
        Self::cross(&self.ln_reviews, &self.review_attn, x, &m.sentences, &m.sentences_mask)
    }

    pub fn ffn_block(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln_ffn.forward(x)?;
        Ok((x + self.ffn.forward(&h)?)?)
    }

    /// `x: [b, T, d]` -> `[b, T, d]`.
    pub fn forward(&self, x: &Tensor, memory: &DecoderMemory) -> Result<Tensor> {
        memory.check(x.dim(D::Minus1)?)?;
        let causal = causal_bias(x.dim(1)?, x.dtype(), x.device())?;
        let x = self.self_block(x, &causal)?;
        let x = self.context_block(&x, memory)?;
        let x = self.node_block(&x, memory)?;
        let x = self.review_block(&x, memory)?;
        self.ffn_block(&x)
    }
}

/// Output head conditioning the vocabulary distribution on attended review
/// sentences: `a = softmax(r E^T)`, `c = a E`, `logits = W [r; c] + b`.
#[derive(Debug, Clone)]
pub struct FusionHead {
    out: Linear,
}

impl FusionHead {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, vocab: usize) -> Result<Self> {
        if vocab < Vocabulary::N_SPECIAL - 1 {
            return Err(Error::Config(format!("vocabulary of {vocab} tokens is too small")));
        }
        Ok(Self {
            out: Linear::new(ps, &format!("{name}.out"), 2 * d, vocab, true)?,
        })
    }

    /// `states: [b, T, d]`, `sentences: [b, S, d]`, `mask: [b, S]`. Returns
    /// `(logits [b, T, V], attention [b, T, S])`.
    pub fn forward(&self, states: &Tensor, sentences: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let scores = states.matmul(&sentences.t()?.contiguous()?)?;
        let bias = ((mask - 1.0)? * -MASK_NEG)?.unsqueeze(1)?;
        let attn = candle_nn::ops::softmax(&scores.broadcast_add(&bias)?, D::Minus1)?;
        let attended = attn.matmul(sentences)?;
        let joint = Tensor::cat(&[states, &attended], D::Minus1)?;
        Ok((self.out.forward(&joint)?, attn))
    }
}

pub struct Decoder {
    tokens: Embedding,
    positions: Embedding,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    head: FusionHead,
    max_positions: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
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
        Ok(Self {
            tokens: Embedding::new(ps, &format!("{name}.tokens"), vocab, d)?,
            positions: Embedding::new(ps, &format!("{name}.positions"), max_positions, d)?,
            layers: (0..n_layers)
                .map(|l| DecoderLayer::new(ps, &format!("{name}.layer{l}"), d, heads, ffn))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d)?,
            head: FusionHead::new(ps, &format!("{name}.head"), d, vocab)?,
            max_positions,
        })
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn head(&self) -> &FusionHead {
        &self.head
    }

    /// Embedded prefix `[b, T, d]`.
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        if t == 0 || t > self.max_positions {
            return Err(Error::InvalidArgument(format!(
                "decoder prefix length {t} outside 1..={}",
                self.max_positions
            )));
        }
        let pos = Tensor::arange(0u32, t as u32, ids.device())?;
        Ok(self.tokens.forward(ids)?.broadcast_add(&self.positions.forward(&pos)?)?)
    }

    /// Top-layer states `[b, T, d]` for prefix ids `[b, T]`.
    pub fn states(&self, ids: &Tensor, memory: &DecoderMemory) -> Result<Tensor> {
        let mut x = self.embed(ids)?;
        for layer in &self.layers {
            x = layer.forward(&x, memory)?;
        }
        self.norm.forward(&x)
    }

    /// Next-token logits `[b, T, V]`.
    pub fn forward(&self, ids: &Tensor, memory: &DecoderMemory) -> Result<Tensor> {
        let states = self.states(ids, memory)?;
        Ok(self.head.forward(&states, &memory.sentences, &memory.sentences_mask)?.0)
    }
}

/// Loss weight for a token seen `frequency` times: 1 below `threshold`,
/// otherwise `max(floor, threshold / frequency)`.
pub fn instance_weight(frequency: u64, threshold: f64, floor: f64) -> f64 {
    let f = frequency as f64;
    if f < threshold {
        1.0
    } else {
        floor.max(threshold / f)
    }
}

/// [`instance_weight`] for every vocabulary id.
pub fn weight_table(frequencies: &[u64], threshold: f64, floor: f64) -> Vec<f64> {
    frequencies.iter().map(|&f| instance_weight(f, threshold, floor)).collect()
}

/// Weighted token NLL: `-(1/m) sum_j w(t_j) log P(t_j | t_<j)` over the `m`
/// non-padding targets. `targets` is row-major `[b, T]` with `lengths[r]`
/// valid positions per row.
pub fn gen_loss(logits: &Tensor, targets: &[TokenId], lengths: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b * t || lengths.len() != b {
        return Err(Error::InvalidArgument(format!(
            "targets {} / lengths {} do not match logits [{b}, {t}, {v}]",
            targets.len(),
            lengths.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&x| x as usize >= v) {
        return Err(Error::InvalidArgument(format!("target token {bad} outside vocabulary of {v}")));
    }
    let mut w = vec![0f64; b * t];
    let mut m = 0usize;
    for r in 0..b {
        for j in 0..lengths[r].min(t) {
            let tok = targets[r * t + j] as usize;
            w[r * t + j] = weights.get(tok).copied().unwrap_or(1.0);
            m += 1;
        }
    }
    if m == 0 {
        return Err(Error::InvalidArgument("no target tokens".into()));
    }
    let dev = logits.device();
    let idx = Tensor::from_vec(targets.to_vec(), (b, t, 1), dev)?;
    let w = Tensor::from_vec(w, (b, t), dev)?.to_dtype(logits.dtype())?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?.gather(&idx, 2)?.squeeze(2)?;
    Ok(((log_probs * w)?.sum_all()? * (-1.0 / m as f64))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Generated tokens without `<bos>` or `<eos>`.
    pub tokens: Vec<TokenId>,
    /// Probability of each chosen token, including the final `<eos>` when present.
    pub step_probabilities: Vec<f64>,
    pub termination: Termination,
}

fn blocked(tok: usize) -> bool {
    matches!(
        tok as u32,
        Vocabulary::PAD_ID | Vocabulary::UNK_ID | Vocabulary::BOS_ID | Vocabulary::SEP_ID
    )
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
    probs: Vec<f64>,
}

/// Autoregressive decoding. `next` maps a prefix (starting with `<bos>`) to a
/// probability vector over the vocabulary. Greedy takes the arg-max with ties
/// to the lowest id; beam keeps `width` prefixes by summed log-probability and
/// picks the final one by length-normalized score.
pub fn decode<F>(mut next: F, mode: DecodeMode, max_len: usize) -> Result<GenerationOutput>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    if max_len < 1 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let width = match mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam { width } if width >= 1 => width,
        DecodeMode::Beam { .. } => return Err(Error::InvalidArgument("beam width must be >= 1".into())),
    };
    let mut live = vec![Hypothesis {
        tokens: vec![Vocabulary::BOS_ID],
        log_prob: 0.0,
        probs: Vec::new(),
    }];
    let mut finished: Vec<(Hypothesis, Termination)> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let probs = next(&hyp.tokens)?;
            let mut row: Vec<(f64, usize, usize, f64)> = probs
                .iter()
                .enumerate()
                .filter(|(tok, _)| !blocked(*tok))
                .map(|(tok, &p)| (hyp.log_prob + p.ln(), h, tok, p))
                .collect();
            row.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
            row.truncate(width);
            candidates.extend(row);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);
        let mut next_live = Vec::with_capacity(width);
        for (lp, h, tok, p) in candidates {
            let mut hyp = live[h].clone();
            hyp.tokens.push(tok as TokenId);
            hyp.log_prob = lp;
            hyp.probs.push(p);
            if tok as u32 == Vocabulary::EOS_ID {
                finished.push((hyp, Termination::Eos));
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() || finished.len() >= width {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| (h, Termination::MaxLen)));
    let score = |h: &Hypothesis| h.log_prob / h.probs.len().max(1) as f64;
    let (best, termination) = finished
        .into_iter()
        .reduce(|a, b| if score(&b.0) > score(&a.0) { b } else { a })
        .ok_or_else(|| Error::InvalidArgument("decoding produced no hypothesis".into()))?;
    let mut tokens = best.tokens[1..].to_vec();
    if termination == Termination::Eos {
        tokens.pop();
    }
    Ok(GenerationOutput {
        tokens,
        step_probabilities: best.probs,
        termination,
    })
}

/// Unique n-grams over total n-grams across all responses. Responses shorter
/// than `n` contribute nothing; an empty set (or no n-grams at all) gives 0.
pub fn distinct_n(responses: &[Vec<TokenId>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if responses.is_empty() {
        tracing::warn!("distinct-{n} over an empty response set");
        return 0.0;
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in r.windows(n) {
            unique.insert(g.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Per-response distinct ratio averaged over responses that have any n-gram.
pub fn distinct_n_per_sentence(responses: &[Vec<TokenId>], n: usize) -> f64 {
    let ratios: Vec<f64> = responses
        .iter()
        .filter(|r| n > 0 && r.len() >= n)
        .map(|r| distinct_n(std::slice::from_ref(r), n))
        .collect();
    if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

/// Soft-max of `logits` in f64, for decoding.
pub fn probabilities(logits: &Tensor) -> Result<Vec<f64>> {
    let v: Vec<f64> = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}
