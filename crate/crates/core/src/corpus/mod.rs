//! Conversation, knowledge-graph and review data model.
//!
//! A [`Corpus`] bundles everything one training run consumes: the dialogues,
//! the entity graph, per-item review documents, the word/entity/sentence
//! alignment table and the vocabulary built over all of that text. Corpora are
//! immutable once loaded and are shared read-only by the trainer, the
//! evaluators and the conversation service.

mod batch;
mod instances;
mod io;
mod synth;
mod vocab;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, BatchMode, BatchOptions, Batches, FineTriple, ReviewIndex};
pub use instances::{build_instances, AlignedPosition, TrainingInstance};
pub use io::{load_corpus, write_corpus, CorpusPaths};
pub use synth::{generate_synthetic_corpus, SynthSpec};
pub use vocab::{tokenize, Vocabulary};

/// Entity id in the knowledge graph (dense, `0..n_entities`).
pub type EntityId = u32;
/// Relation id in the knowledge graph (dense, `0..n_relations`).
pub type RelationId = u32;
/// Token id in the [`Vocabulary`].
pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub token_ids: Vec<TokenId>,
    /// `(token_position, entity_id)` pairs, positions index into `token_ids`.
    pub entity_mentions: Vec<(usize, EntityId)>,
    pub recommended_items: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationRecord {
    pub conversation_id: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Entity graph with a distinguished item subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_relations: usize,
    triples: Vec<Triple>,
    /// Ascending item ids.
    items: Vec<EntityId>,
    item_index: HashMap<EntityId, usize>,
}

impl KnowledgeGraph {
    /// Validates endpoints, relation ids, item ids and triple uniqueness.
    pub fn new(
        n_entities: usize,
        n_relations: usize,
        triples: Vec<Triple>,
        mut items: Vec<EntityId>,
    ) -> crate::Result<Self> {
        for t in &triples {
            for e in [t.head, t.tail] {
                if e as usize >= n_entities {
                    return Err(crate::Error::UnknownEntity(e));
                }
            }
            if t.relation as usize >= n_relations {
                return Err(crate::Error::UnknownRelation(t.relation));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(triples.len());
        for t in &triples {
            if !seen.insert(*t) {
                return Err(crate::Error::InvalidCorpus(format!(
                    "duplicate triple {} {} {}",
                    t.head, t.relation, t.tail
                )));
            }
        }
        items.sort_unstable();
        items.dedup();
        if let Some(&bad) = items.iter().find(|&&i| i as usize >= n_entities) {
            return Err(crate::Error::UnknownEntity(bad));
        }
        let item_index = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        Ok(Self {
            n_entities,
            n_relations,
            triples,
            items,
            item_index,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn items(&self) -> &[EntityId] {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        self.item_index.contains_key(&id)
    }

    /// Position of `id` in [`KnowledgeGraph::items`].
    pub fn item_position(&self, id: EntityId) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    pub fn contains_entity(&self, id: EntityId) -> bool {
        (id as usize) < self.n_entities
    }
}

/// Review sentences for a single item, each already tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewDoc {
    pub item_id: EntityId,
    pub sentences: Vec<Vec<TokenId>>,
}

/// Links a word occurrence, the entity it mentions and a review sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentTriple {
    pub conversation_id: String,
    #[serde(rename = "utterance")]
    pub utterance_index: usize,
    #[serde(rename = "pos")]
    pub token_position: usize,
    #[serde(rename = "entity")]
    pub entity_id: EntityId,
    #[serde(rename = "review_item")]
    pub review_item_id: EntityId,
    #[serde(rename = "sentence")]
    pub review_sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub conversations: Vec<ConversationRecord>,
    pub kg: KnowledgeGraph,
    pub reviews: BTreeMap<EntityId, ReviewDoc>,
    pub alignments: Vec<AlignmentTriple>,
    pub vocab: Vocabulary,
    /// Surface forms used for entity linking at serve time. May be empty.
    pub entity_names: BTreeMap<EntityId, String>,
}

impl Corpus {
    /// Builds every training instance of every conversation, in corpus order.
    pub fn instances(&self, max_context_len: usize) -> Vec<TrainingInstance> {
        let by_conv = self.alignments_by_conversation();
        self.conversations
            .iter()
            .flat_map(|c| {
                let aligns = by_conv.get(c.conversation_id.as_str()).cloned().unwrap_or_default();
                instances::build_instances_aligned(c, max_context_len, &aligns)
            })
            .collect()
    }

    fn alignments_by_conversation(&self) -> HashMap<&str, Vec<AlignmentTriple>> {
        let mut map: HashMap<&str, Vec<AlignmentTriple>> = HashMap::new();
        for a in &self.alignments {
            map.entry(a.conversation_id.as_str()).or_default().push(a.clone());
        }
        map
    }

    /// Checks every cross reference between conversations, graph, reviews
    /// and alignments.
    pub fn validate(&self) -> crate::Result<()> {
        let n_vocab = self.vocab.len() as u32;
        let mut conv_index = HashMap::new();
        for (ci, c) in self.conversations.iter().enumerate() {
            if c.utterances.is_empty() {
                return Err(crate::Error::InvalidCorpus(format!(
                    "conversation {} has no utterances",
                    c.conversation_id
                )));
            }
            if conv_index.insert(c.conversation_id.as_str(), ci).is_some() {
                return Err(crate::Error::InvalidCorpus(format!(
                    "duplicate conversation id {}",
                    c.conversation_id
                )));
            }
            for u in &c.utterances {
                if let Some(&t) = u.token_ids.iter().find(|&&t| t >= n_vocab) {
                    return Err(crate::Error::InvalidCorpus(format!("token id {t} out of vocabulary")));
                }
                for &(pos, e) in &u.entity_mentions {
                    if pos >= u.token_ids.len() {
                        return Err(crate::Error::InvalidCorpus(format!(
                            "mention position {pos} outside utterance of {} tokens in conversation {}",
                            u.token_ids.len(),
                            c.conversation_id
                        )));
                    }
                    if !self.kg.contains_entity(e) {
                        return Err(crate::Error::UnknownEntity(e));
                    }
                }
                for &i in &u.recommended_items {
                    if !self.kg.is_item(i) {
                        return Err(crate::Error::UnknownItem(i));
                    }
                }
            }
        }
        for (&item, doc) in &self.reviews {
            if item != doc.item_id || !self.kg.is_item(item) {
                return Err(crate::Error::UnknownItem(doc.item_id));
            }
            if doc.sentences.is_empty() || doc.sentences.iter().any(|s| s.is_empty()) {
                return Err(crate::Error::InvalidCorpus(format!(
                    "review doc for item {item} has an empty sentence or no sentences"
                )));
            }
        }
        for a in &self.alignments {
            let ci = *conv_index.get(a.conversation_id.as_str()).ok_or_else(|| {
                crate::Error::InvalidCorpus(format!("unknown conversation {}", a.conversation_id))
            })?;
            let utt = self.conversations[ci].utterances.get(a.utterance_index).ok_or_else(|| {
                crate::Error::InvalidCorpus(format!(
                    "utterance {} out of range in conversation {}",
                    a.utterance_index, a.conversation_id
                ))
            })?;
            if !self.kg.contains_entity(a.entity_id) {
                return Err(crate::Error::UnknownEntity(a.entity_id));
            }
            if !utt
                .entity_mentions
                .iter()
                .any(|&(p, e)| p == a.token_position && e == a.entity_id)
            {
                return Err(crate::Error::InvalidCorpus(format!(
                    "alignment ({}, {}, {}) does not match an entity mention",
                    a.conversation_id, a.utterance_index, a.token_position
                )));
            }
            let doc = self
                .reviews
                .get(&a.review_item_id)
                .ok_or(crate::Error::UnknownItem(a.review_item_id))?;
            if a.review_sentence_index >= doc.sentences.len() {
                return Err(crate::Error::InvalidCorpus(format!(
                    "sentence index {} exceeds review doc of item {} ({} sentences)",
                    a.review_sentence_index,
                    a.review_item_id,
                    doc.sentences.len()
                )));
            }
        }
        for &id in self.entity_names.keys() {
            if !self.kg.contains_entity(id) {
                return Err(crate::Error::UnknownEntity(id));
            }
        }
        Ok(())
    }
}
