//! Item scoring from the pooled entity context and Recall@k evaluation.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, KnowledgeGraph};
use crate::encoders::PooledView;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// User vector from the context entities' node representations.
pub struct UserEncoder {
    view: PooledView,
}

impl UserEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            view: PooledView::new(ps, name, d)?,
        })
    }

    /// `nodes: [n_entities, d]`; returns `(e_u [b, d], cold flags)`.
    pub fn forward(&self, nodes: &Tensor, context_entities: &[Vec<EntityId>]) -> Result<(Tensor, Vec<bool>)> {
        self.view.forward(nodes, context_entities)
    }

    pub fn view(&self) -> &PooledView {
        &self.view
    }
}

/// Item node rows in ascending item-id order: `[n_items, d]`.
pub fn item_embeddings(nodes: &Tensor, kg: &KnowledgeGraph) -> Result<Tensor> {
    let idx = Tensor::from_vec(kg.items().to_vec(), kg.n_items(), nodes.device())?;
    Ok(nodes.index_select(&idx, 0)?)
}

/// Dot-product logits `[b, n_items]`.
pub fn item_logits(user: &Tensor, items: &Tensor) -> Result<Tensor> {
    Ok(user.matmul(&items.t()?)?)
}

/// Softmax over all items.
pub fn score_items(user: &Tensor, items: &Tensor) -> Result<Tensor> {
    if items.dim(0)? < 2 {
        return Err(Error::InvalidArgument("scoring needs at least two items".into()));
    }
    Ok(candle_nn::ops::softmax(&item_logits(user, items)?, D::Minus1)?)
}

/// Item positions (in [`KnowledgeGraph::items`] order) for target ids.
pub fn target_positions(kg: &KnowledgeGraph, targets: &[EntityId]) -> Result<Vec<u32>> {
    targets
        .iter()
        .map(|&t| kg.item_position(t).map(|p| p as u32).ok_or(Error::UnknownItem(t)))
        .collect()
}

/// Mean cross-entropy of the target item under the softmax of `logits`.
pub fn rec_loss(logits: &Tensor, target_positions: &[u32]) -> Result<Tensor> {
    let (b, m) = logits.dims2()?;
    if target_positions.len() != b {
        return Err(Error::InvalidArgument(format!("{} targets for {b} rows", target_positions.len())));
    }
    if let Some(&bad) = target_positions.iter().find(|&&p| p as usize >= m) {
        return Err(Error::InvalidArgument(format!("target position {bad} outside {m} items")));
    }
    let idx = Tensor::from_vec(target_positions.to_vec(), (b, 1), logits.device())?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((log_probs.gather(&idx, 1)?.mean_all()? * -1.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub ranked_items: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub user_vector: Vec<f64>,
}

/// Sorts items by descending probability; ties go to the lower item id.
pub fn rank_items(probabilities: &[f64], items: &[EntityId]) -> Vec<(EntityId, f64)> {
    let mut ranked: Vec<(EntityId, f64)> = items.iter().copied().zip(probabilities.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Full ranking for every row of a probability matrix `[b, n_items]`.
pub fn recommend(probabilities: &Tensor, user: &Tensor, kg: &KnowledgeGraph) -> Result<Vec<RecommendationResult>> {
    let probs: Vec<Vec<f64>> = probabilities.to_dtype(DType::F64)?.to_vec2()?;
    let users: Vec<Vec<f64>> = user.to_dtype(DType::F64)?.to_vec2()?;
    Ok(probs
        .iter()
        .zip(users)
        .map(|(p, u)| {
            let ranked = rank_items(p, kg.items());
            RecommendationResult {
                ranked_items: ranked.iter().map(|r| r.0).collect(),
                scores: ranked.iter().map(|r| r.1).collect(),
                user_vector: u,
            }
        })
        .collect())
}

pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct RecEvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub n_instances: usize,
}

impl RecEvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// `{"recall@1": .., "recall@10": .., "recall@50": .., "n": ..}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.recall_at {
            obj.insert(format!("recall@{k}"), serde_json::json!(v));
        }
        obj.insert("n".into(), serde_json::json!(self.n_instances));
        serde_json::Value::Object(obj)
    }
}

/// Fraction of instances whose target appears in the first `k` ranked items.
pub fn recall_at_k(ranked: &[Vec<EntityId>], targets: &[EntityId], ks: &[usize]) -> RecEvalReport {
    let n = ranked.len().min(targets.len());
    let ranks: Vec<Option<usize>> = ranked
        .iter()
        .zip(targets)
        .map(|(r, t)| r.iter().position(|x| x == t))
        .collect();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p < k)).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    RecEvalReport {
        recall_at,
        n_instances: n,
    }
}
