use std::collections::HashSet;

use super::{AlignmentTriple, ConversationRecord, EntityId, TokenId, Vocabulary};

/// An alignment triple whose word survived context truncation, together with
/// the word's index in the flattened context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPosition {
    pub triple: AlignmentTriple,
    pub context_position: usize,
}

/// One prediction point: the first `turn` utterances are the context and
/// utterance `turn` (0-based) is what the system should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub conversation_id: String,
    pub turn: usize,
    pub context_token_ids: Vec<TokenId>,
    /// Entities mentioned so far, de-duplicated in first-mention order.
    pub context_entities: Vec<EntityId>,
    pub target_item: Option<EntityId>,
    pub target_response: Option<Vec<TokenId>>,
    pub alignment: Vec<AlignedPosition>,
}

impl TrainingInstance {
    /// `"{conversation_id}:{turn}"`, unique per context.
    pub fn context_id(&self) -> String {
        format!("{}:{}", self.conversation_id, self.turn)
    }
}

/// Expands a conversation into per-turn instances without alignment data.
pub fn build_instances(record: &ConversationRecord, max_context_len: usize) -> Vec<TrainingInstance> {
    build_instances_aligned(record, max_context_len, &[])
}

pub(crate) fn build_instances_aligned(
    record: &ConversationRecord,
    max_context_len: usize,
    alignments: &[AlignmentTriple],
) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    let utts = &record.utterances;
    for turn in 1..utts.len() {
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut offsets = Vec::with_capacity(turn);
        let mut entities = Vec::new();
        let mut seen = HashSet::new();
        for (k, u) in utts[..turn].iter().enumerate() {
            if k > 0 {
                tokens.push(Vocabulary::SEP_ID);
            }
            offsets.push(tokens.len());
            tokens.extend_from_slice(&u.token_ids);
            for &(_, e) in &u.entity_mentions {
                if seen.insert(e) {
                    entities.push(e);
                }
            }
        }
        let drop = tokens.len().saturating_sub(max_context_len);
        let context: Vec<TokenId> = tokens[drop..].to_vec();
        if context.is_empty() {
            continue;
        }

        // first triple wins when several link the same word
        let mut taken = HashSet::new();
        let alignment: Vec<AlignedPosition> = alignments
            .iter()
            .filter(|a| a.conversation_id == record.conversation_id && a.utterance_index < turn)
            .filter_map(|a| {
                let flat = offsets[a.utterance_index] + a.token_position;
                if flat < drop || !taken.insert((a.utterance_index, a.token_position)) {
                    return None;
                }
                Some(AlignedPosition {
                    triple: a.clone(),
                    context_position: flat - drop,
                })
            })
            .collect();

        let next = &utts[turn];
        let base = TrainingInstance {
            conversation_id: record.conversation_id.clone(),
            turn,
            context_token_ids: context,
            context_entities: entities,
            target_item: None,
            target_response: Some(next.token_ids.clone()),
            alignment,
        };
        if next.recommended_items.is_empty() {
            out.push(base);
        } else {
            for &item in &next.recommended_items {
                out.push(TrainingInstance {
                    target_item: Some(item),
                    ..base.clone()
                });
            }
        }
    }
    out
}
