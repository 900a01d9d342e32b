//! Evaluation over instance sets: Recall@k for recommendation and Distinct-n
//! plus transcripts for generation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingInstance, Vocabulary};
use crate::generator::{distinct_n, distinct_n_per_sentence, DecodeMode};
use crate::model::{C2Crs, Frozen};
use crate::recommender::{recall_at_k, RecEvalReport, DEFAULT_KS};
use crate::Result;

/// Recall@{1,10,50} over every instance with a target item.
pub fn evaluate_recommendation(model: &C2Crs, frozen: &Frozen, instances: &[TrainingInstance]) -> Result<RecEvalReport> {
    let rec: Vec<&TrainingInstance> = instances.iter().filter(|i| i.target_item.is_some()).collect();
    let mut ranked = Vec::with_capacity(rec.len());
    for chunk in rec.chunks(64) {
        let entities: Vec<Vec<u32>> = chunk.iter().map(|i| i.context_entities.clone()).collect();
        ranked.extend(model.recommend(frozen, &entities)?.into_iter().map(|r| r.ranked_items));
    }
    let targets: Vec<u32> = rec.iter().map(|i| i.target_item.unwrap()).collect();
    Ok(recall_at_k(&ranked, &targets, &DEFAULT_KS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub context_id: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvEvalReport {
    pub distinct: BTreeMap<usize, f64>,
    pub n_responses: usize,
}

impl ConvEvalReport {
    /// `{"distinct-2": .., "distinct-3": .., "distinct-4": .., "n_responses": ..}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (n, v) in &self.distinct {
            obj.insert(format!("distinct-{n}"), serde_json::json!(v));
        }
        obj.insert("n_responses".into(), serde_json::json!(self.n_responses));
        serde_json::Value::Object(obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvEvalOptions {
    pub mode: DecodeMode,
    pub max_len: usize,
    /// Average per-response ratios instead of the corpus-level ratio.
    pub per_sentence: bool,
}

impl Default for ConvEvalOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len: 30,
            per_sentence: false,
        }
    }
}

/// Decodes one response per distinct context and scores Distinct-{2,3,4}.
pub fn evaluate_generation(
    model: &C2Crs,
    frozen: &Frozen,
    vocab: &Vocabulary,
    instances: &[TrainingInstance],
    opts: &ConvEvalOptions,
) -> Result<(ConvEvalReport, Vec<GenerationRecord>)> {
    let mut seen = HashSet::new();
    let mut responses = Vec::new();
    let mut records = Vec::new();
    for inst in instances {
        let id = inst.context_id();
        if !seen.insert(id.clone()) {
            continue;
        }
        let out = model.generate(frozen, &inst.context_token_ids, &inst.context_entities, opts.mode, opts.max_len)?;
        records.push(GenerationRecord {
            context_id: id,
            response: vocab.decode(&out.tokens),
        });
        responses.push(out.tokens);
    }
    let metric = if opts.per_sentence { distinct_n_per_sentence } else { distinct_n };
    let distinct = [2, 3, 4].into_iter().map(|n| (n, metric(&responses, n))).collect();
    Ok((
        ConvEvalReport {
            distinct,
            n_responses: responses.len(),
        },
        records,
    ))
}
