//! In-batch contrastive objectives over aligned views.
//!
//! Row `i` of `x` and row `i` of `y` describe the same user (or the same
//! fine-grained unit); every other row of `y` in the batch is a negative.

use candle_core::{DType, Tensor, D};

use crate::nn::MASK_NEG;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceOptions {
    pub temperature: f64,
    pub symmetric: bool,
    pub raw_log_ratio: bool,
}

impl InfoNceOptions {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            symmetric: false,
            raw_log_ratio: false,
        }
    }
}

fn row_normalize(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let values: Vec<f64> = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(i) = values.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("zero-norm row {i} in contrastive input")));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Cosine similarity matrix `[b, b]`.
pub fn cosine_matrix(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(row_normalize(x)?.matmul(&row_normalize(y)?.t()?)?)
}

/// Additive bias hiding negatives that share a group with the anchor.
fn group_bias(groups: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Option<Tensor>> {
    let b = groups.len();
    let mut m = vec![0f64; b * b];
    let mut any = false;
    for i in 0..b {
        for j in 0..b {
            if i != j && groups[i] == groups[j] {
                m[i * b + j] = MASK_NEG;
                any = true;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    Ok(Some(Tensor::from_vec(m, (b, b), device)?.to_dtype(dtype)?))
}

fn directional(logits: &Tensor, opts: &InfoNceOptions, bias: Option<&Tensor>) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let logits = match bias {
        Some(bias) => (logits + bias)?,
        None => logits.clone(),
    };
    let diag_idx = Tensor::arange(0u32, b as u32, logits.device())?.unsqueeze(1)?;
    if !opts.raw_log_ratio {
        let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let positives = log_probs.gather(&diag_idx, 1)?.squeeze(1)?;
        return Ok((positives.mean_all()? * -1.0)?);
    }
    // log(exp(s_ii) / sum_{j != i} exp(s_ij)); rows without any negative contribute 0
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    let negatives = (&logits + (&eye * MASK_NEG)?)?;
    let max = negatives.max_keepdim(D::Minus1)?.detach();
    let lse = (negatives.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &max)?.squeeze(1)?;
    let positives = logits.gather(&diag_idx, 1)?.squeeze(1)?;
    let has_negative: Vec<f64> = lse
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .map(|&v| if v > MASK_NEG / 2.0 { 1.0 } else { 0.0 })
        .collect();
    let keep = Tensor::from_vec(has_negative, b, logits.device())?.to_dtype(logits.dtype())?;
    Ok(((positives - lse)? * keep)?.mean_all()?)
}

/// InfoNCE with cosine similarity at temperature `tau`, positive included in
/// the denominator:
/// `L = -(1/b) sum_i log(exp(s_ii / tau) / sum_j exp(s_ij / tau))`.
///
/// `groups` optionally masks negatives that share the anchor's group.
pub fn info_nce(x: &Tensor, y: &Tensor, opts: &InfoNceOptions, groups: Option<&[usize]>) -> Result<Tensor> {
    let (b, d) = x.dims2()?;
    if y.dims2()? != (b, d) {
        return Err(Error::InvalidArgument(format!(
            "view shapes differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty contrastive batch".into()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", opts.temperature)));
    }
    if let Some(g) = groups {
        if g.len() != b {
            return Err(Error::InvalidArgument(format!("{} group ids for batch of {b}", g.len())));
        }
    }
    let sim = (cosine_matrix(x, y)? / opts.temperature)?;
    let bias = match groups {
        Some(g) => group_bias(g, sim.dtype(), sim.device())?,
        None => None,
    };
    let forward = directional(&sim, opts, bias.as_ref())?;
    if !opts.symmetric {
        return Ok(forward);
    }
    let backward = directional(&sim.t()?.contiguous()?, opts, bias.as_ref())?;
    Ok(((forward + backward)? * 0.5)?)
}

/// Sum of the pairwise losses over every pair of supplied views.
/// Views that are `None` (disabled) are skipped; fewer than two views gives 0.
pub fn coarse_loss(
    conversation: Option<&Tensor>,
    graph: Option<&Tensor>,
    review: Option<&Tensor>,
    opts: &InfoNceOptions,
    groups: Option<&[usize]>,
) -> Result<Option<Tensor>> {
    pairwise_sum([conversation, graph, review], opts, groups)
}

/// Fine-grained rows aligned across the word, entity and sentence views.
pub struct FinePairBatch {
    pub words: Option<Tensor>,
    pub entities: Option<Tensor>,
    pub sentences: Option<Tensor>,
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum FineLoss {
    Value(Tensor),
    /// Fewer than two aligned triples: nothing to contrast against.
    Skipped,
}

/// Word/entity, word/sentence and entity/sentence terms, with other triples
/// in the batch as negatives.
pub fn fine_loss(batch: &FinePairBatch, opts: &InfoNceOptions, exclude_same_group: bool) -> Result<FineLoss> {
    if batch.groups.len() < 2 {
        return Ok(FineLoss::Skipped);
    }
    let groups = exclude_same_group.then_some(batch.groups.as_slice());
    match pairwise_sum(
        [batch.words.as_ref(), batch.entities.as_ref(), batch.sentences.as_ref()],
        opts,
        groups,
    )? {
        Some(t) => Ok(FineLoss::Value(t)),
        None => Ok(FineLoss::Skipped),
    }
}

fn pairwise_sum(views: [Option<&Tensor>; 3], opts: &InfoNceOptions, groups: Option<&[usize]>) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if let (Some(x), Some(y)) = (views[i], views[j]) {
            let term = info_nce(x, y, opts, groups)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainStage {
    Coarse,
    Fine,
}

/// `Coarse` optimizes the coarse loss alone; `Fine` optimizes
/// `fine + weight * coarse`.
pub fn pretrain_objective(stage: PretrainStage, fine: f64, coarse: f64, coarse_weight: f64) -> f64 {
    match stage {
        PretrainStage::Coarse => coarse,
        PretrainStage::Fine => fine + coarse_weight * coarse,
    }
}

/// Tensor form of [`pretrain_objective`]; missing terms count as zero.
pub fn pretrain_objective_tensor(
    stage: PretrainStage,
    fine: Option<&Tensor>,
    coarse: Option<&Tensor>,
    coarse_weight: f64,
) -> Result<Option<Tensor>> {
    Ok(match stage {
        PretrainStage::Coarse => coarse.cloned(),
        PretrainStage::Fine => match (fine, coarse) {
            (Some(f), Some(c)) => Some((f + (c * coarse_weight)?)?),
            (Some(f), None) => Some(f.clone()),
            (None, Some(c)) => Some((c * coarse_weight)?),
            (None, None) => None,
        },
    })
}
