use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EntityId, ReviewDoc, TokenId, TrainingInstance, Vocabulary};
use crate::{Error, Result};

/// Flat table of every review sentence, ordered by item id then sentence index.
#[derive(Debug, Clone)]
pub struct ReviewIndex {
    sentences: Vec<Vec<TokenId>>,
    sentence_item: Vec<EntityId>,
    offsets: HashMap<EntityId, (usize, usize)>,
}

impl ReviewIndex {
    pub fn new(reviews: &BTreeMap<EntityId, ReviewDoc>) -> Self {
        let mut sentences = Vec::new();
        let mut sentence_item = Vec::new();
        let mut offsets = HashMap::new();
        for (&item, doc) in reviews {
            offsets.insert(item, (sentences.len(), doc.sentences.len()));
            for s in &doc.sentences {
                sentences.push(s.clone());
                sentence_item.push(item);
            }
        }
        Self {
            sentences,
            sentence_item,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }

    pub fn item_of(&self, sentence: usize) -> EntityId {
        self.sentence_item[sentence]
    }

    /// Global index of sentence `k` of `item`'s review doc.
    pub fn global(&self, item: EntityId, k: usize) -> Option<usize> {
        self.offsets
            .get(&item)
            .and_then(|&(start, n)| (k < n).then_some(start + k))
    }

    /// Global sentence indices of every review of the given entities that
    /// have a review doc, in entity order.
    pub fn bundle(&self, entities: &[EntityId]) -> Vec<usize> {
        entities
            .iter()
            .filter_map(|e| self.offsets.get(e))
            .flat_map(|&(start, n)| start..start + n)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// In-batch negatives are required, so every batch must be able to hold two instances.
    Contrastive,
    Standard,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub mode: BatchMode,
    /// Responses longer than this are cut before `<eos>` is appended.
    pub max_response_len: usize,
}

impl BatchOptions {
    pub fn new(batch_size: usize, seed: u64, shuffle: bool, mode: BatchMode) -> Self {
        Self {
            batch_size,
            seed,
            shuffle,
            mode,
            max_response_len: 64,
        }
    }
}

/// Word/entity/sentence link realized inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineTriple {
    pub row: usize,
    pub context_position: usize,
    pub entity: EntityId,
    pub sentence: usize,
    /// Conversation group id within the batch.
    pub group: usize,
}

/// Padded, index-only view of a group of instances.
///
/// Matrices are row-major `size x width` with `<pad>` fill.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub context_ids: Vec<String>,
    pub context: Vec<TokenId>,
    pub context_len: Vec<usize>,
    pub context_width: usize,
    pub entities: Vec<Vec<EntityId>>,
    pub review_sentences: Vec<Vec<usize>>,
    pub target_items: Vec<Option<EntityId>>,
    /// `<bos> w_1 .. w_m`
    pub response_input: Vec<TokenId>,
    /// `w_1 .. w_m <eos>`
    pub response_target: Vec<TokenId>,
    pub response_len: Vec<usize>,
    pub response_width: usize,
    /// Conversation group id per row; rows sharing a group came from the same dialogue.
    pub groups: Vec<usize>,
    pub fine: Vec<FineTriple>,
}

impl Batch {
    pub fn from_instances(
        instances: &[&TrainingInstance],
        reviews: &ReviewIndex,
        max_response_len: usize,
    ) -> Self {
        let size = instances.len();
        let context_width = instances.iter().map(|i| i.context_token_ids.len()).max().unwrap_or(0);
        let mut context = vec![Vocabulary::PAD_ID; size * context_width];
        let mut context_len = Vec::with_capacity(size);

        let responses: Vec<&[TokenId]> = instances
            .iter()
            .map(|i| {
                let r = i.target_response.as_deref().unwrap_or(&[]);
                &r[..r.len().min(max_response_len)]
            })
            .collect();
        let response_width = responses.iter().map(|r| r.len() + 1).max().unwrap_or(0);
        let mut response_input = vec![Vocabulary::PAD_ID; size * response_width];
        let mut response_target = vec![Vocabulary::PAD_ID; size * response_width];
        let mut response_len = Vec::with_capacity(size);

        let mut group_of: HashMap<&str, usize> = HashMap::new();
        let mut groups = Vec::with_capacity(size);
        let mut fine = Vec::new();
        let mut seen_links = HashSet::new();

        for (row, inst) in instances.iter().enumerate() {
            let ctx = &inst.context_token_ids;
            context[row * context_width..row * context_width + ctx.len()].copy_from_slice(ctx);
            context_len.push(ctx.len());

            let resp = responses[row];
            let base = row * response_width;
            response_input[base] = Vocabulary::BOS_ID;
            response_input[base + 1..base + 1 + resp.len()].copy_from_slice(resp);
            response_target[base..base + resp.len()].copy_from_slice(resp);
            response_target[base + resp.len()] = Vocabulary::EOS_ID;
            response_len.push(resp.len() + 1);

            let next = group_of.len();
            let group = *group_of.entry(inst.conversation_id.as_str()).or_insert(next);
            groups.push(group);

            for a in &inst.alignment {
                let t = &a.triple;
                if !seen_links.insert((t.conversation_id.as_str(), t.utterance_index, t.token_position)) {
                    continue;
                }
                if let Some(sentence) = reviews.global(t.review_item_id, t.review_sentence_index) {
                    fine.push(FineTriple {
                        row,
                        context_position: a.context_position,
                        entity: t.entity_id,
                        sentence,
                        group,
                    });
                }
            }
        }

        Self {
            size,
            context_ids: instances.iter().map(|i| i.context_id()).collect(),
            context,
            context_len,
            context_width,
            entities: instances.iter().map(|i| i.context_entities.clone()).collect(),
            review_sentences: instances.iter().map(|i| reviews.bundle(&i.context_entities)).collect(),
            target_items: instances.iter().map(|i| i.target_item).collect(),
            response_input,
            response_target,
            response_len,
            response_width,
            groups,
            fine,
        }
    }
}

/// Deterministic batch stream; see [`make_batches`].
pub struct Batches<'a> {
    instances: &'a [TrainingInstance],
    reviews: &'a ReviewIndex,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    max_response_len: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picked: Vec<&TrainingInstance> =
            self.order[self.cursor..end].iter().map(|&i| &self.instances[i]).collect();
        self.cursor = end;
        Some(Batch::from_instances(&picked, self.reviews, self.max_response_len))
    }
}

/// Splits `instances` into batches of `batch_size` (last one may be short),
/// shuffled with a seeded ChaCha8 permutation when `shuffle` is set.
pub fn make_batches<'a>(
    instances: &'a [TrainingInstance],
    reviews: &'a ReviewIndex,
    opts: &BatchOptions,
) -> Result<Batches<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if opts.mode == BatchMode::Contrastive && opts.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "contrastive batches need batch_size >= 2 for in-batch negatives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    }
    Ok(Batches {
        instances,
        reviews,
        order,
        cursor: 0,
        batch_size: opts.batch_size,
        max_response_len: opts.max_response_len,
    })
}
