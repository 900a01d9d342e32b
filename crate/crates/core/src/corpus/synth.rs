//! Seeded toy corpus in which every recommendation is recoverable from the
//! entities mentioned before it.
//!
//! Items are linked to two "genre" entities each (a distinct pair per item
//! when enough genres exist) and to their successor item. A dialogue about
//! target item `t` mentions a previously liked item and both of `t`'s genres
//! before the recommender names `t`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{ingest, RawConversation, RawReview, RawUtterance};
use super::{AlignmentTriple, Corpus, EntityId, KnowledgeGraph, Speaker, Triple};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_items: usize,
    pub n_entities: usize,
    pub n_conversations: usize,
    pub seed: u64,
}

const GREETINGS: &[&str] = &["hi", "hello", "hey", "good evening"];
const ADJECTIVES: &[&str] = &["great", "amazing", "fun", "moving", "clever", "thrilling", "charming"];
const CLOSINGS: &[&str] = &["thanks", "thank you", "cool thanks", "sounds good"];

const HAS_GENRE: u32 = 0;
const SIMILAR_TO: u32 = 1;

fn item_name(i: usize) -> String {
    format!("movie{i}")
}

fn genre_name(g: usize) -> String {
    format!("genre{g}")
}

/// Accumulates a whitespace-tokenized utterance while tracking mention positions.
struct UtteranceBuilder {
    words: Vec<String>,
    mentions: Vec<(usize, EntityId)>,
}

impl UtteranceBuilder {
    fn new() -> Self {
        Self {
            words: Vec::new(),
            mentions: Vec::new(),
        }
    }

    fn text(mut self, s: &str) -> Self {
        self.words.extend(s.split_whitespace().map(str::to_string));
        self
    }

    fn entity(mut self, name: &str, id: EntityId) -> Self {
        self.mentions.push((self.words.len(), id));
        self.words.push(name.to_string());
        self
    }

    fn build(self, speaker: Speaker, items: Vec<EntityId>) -> RawUtterance {
        RawUtterance {
            speaker,
            text: self.words.join(" "),
            entities: self.mentions,
            items,
        }
    }
}

pub fn generate_synthetic_corpus(spec: SynthSpec) -> Result<Corpus> {
    let SynthSpec {
        n_items,
        n_entities,
        n_conversations,
        seed,
    } = spec;
    if n_items < 2 {
        return Err(Error::InvalidArgument(format!("n_items must be >= 2, got {n_items}")));
    }
    if n_entities < n_items {
        return Err(Error::InvalidArgument(format!(
            "n_entities ({n_entities}) must be >= n_items ({n_items})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_genres = n_entities - n_items;
    let genre_id = |g: usize| (n_items + g) as EntityId;

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..n_genres {
        for b in a + 1..n_genres {
            pairs.push((a, b));
        }
    }
    if pairs.is_empty() && n_genres == 1 {
        pairs.push((0, 0));
    }
    pairs.shuffle(&mut rng);
    let signature: Vec<Option<(usize, usize)>> = (0..n_items)
        .map(|i| (!pairs.is_empty()).then(|| pairs[i % pairs.len()]))
        .collect();

    let mut triples = Vec::new();
    for (i, sig) in signature.iter().enumerate() {
        if let Some((a, b)) = *sig {
            triples.push(Triple { head: i as u32, relation: HAS_GENRE, tail: genre_id(a) });
            if b != a {
                triples.push(Triple { head: i as u32, relation: HAS_GENRE, tail: genre_id(b) });
            }
        }
        triples.push(Triple {
            head: i as u32,
            relation: SIMILAR_TO,
            tail: ((i + 1) % n_items) as u32,
        });
    }
    let items: Vec<EntityId> = (0..n_items as u32).collect();
    let kg = KnowledgeGraph::new(n_entities, 2, triples, items)?;

    let mut reviews = Vec::with_capacity(n_items);
    for (i, sig) in signature.iter().enumerate() {
        let name = item_name(i);
        let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        let mut sentences = Vec::new();
        match *sig {
            Some((a, b)) => {
                sentences.push(format!("{name} is a {adj} {} movie", genre_name(a)));
                sentences.push(format!("fans of {} will love {name}", genre_name(b)));
            }
            None => sentences.push(format!("{name} is a {adj} movie")),
        }
        let adj2 = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        sentences.push(format!("the story of {name} is {adj2}"));
        reviews.push(RawReview {
            item_id: i as u32,
            sentences,
        });
    }

    // review sentence describing a genre, preferring the dialogue's target item
    let genre_sentence = |g: usize, target: usize| -> Option<(EntityId, usize)> {
        let owns = |i: usize| signature[i].and_then(|(a, b)| if a == g { Some(0) } else if b == g { Some(1) } else { None });
        if let Some(k) = owns(target) {
            return Some((target as u32, k));
        }
        (0..n_items).find_map(|i| owns(i).map(|k| (i as u32, k)))
    };

    let mut conversations = Vec::with_capacity(n_conversations);
    let mut alignments = Vec::new();
    for c in 0..n_conversations {
        let target = c % n_items;
        let variant = c / n_items;
        let liked = (target + 1 + variant % (n_items - 1)) % n_items;
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.gen_range(0..xs.len())];

        let mut first = UtteranceBuilder::new()
            .text(pick(&mut rng, GREETINGS))
            .text("i liked")
            .entity(&item_name(liked), liked as u32);
        let mut utterances = Vec::new();
        match signature[target] {
            Some((a, b)) => {
                first = first.text("and i enjoy").entity(&genre_name(a), genre_id(a)).text("movies");
                utterances.push(first.build(Speaker::Seeker, vec![]));
                utterances.push(
                    UtteranceBuilder::new()
                        .text("do you also like")
                        .entity(&genre_name(b), genre_id(b))
                        .text("films ?")
                        .build(Speaker::Recommender, vec![]),
                );
                utterances.push(
                    UtteranceBuilder::new()
                        .text("yes")
                        .entity(&genre_name(b), genre_id(b))
                        .text("is")
                        .text(pick(&mut rng, ADJECTIVES))
                        .build(Speaker::Seeker, vec![]),
                );
            }
            None => {
                utterances.push(first.build(Speaker::Seeker, vec![]));
                utterances.push(
                    UtteranceBuilder::new()
                        .text("what else do you like ?")
                        .build(Speaker::Recommender, vec![]),
                );
                utterances.push(
                    UtteranceBuilder::new()
                        .text("something")
                        .text(pick(&mut rng, ADJECTIVES))
                        .build(Speaker::Seeker, vec![]),
                );
            }
        }
        utterances.push(
            UtteranceBuilder::new()
                .text("then you should watch")
                .entity(&item_name(target), target as u32)
                .text("it is")
                .text(pick(&mut rng, ADJECTIVES))
                .build(Speaker::Recommender, vec![target as u32]),
        );
        utterances.push(
            UtteranceBuilder::new()
                .text(pick(&mut rng, CLOSINGS))
                .text("i will watch")
                .entity(&item_name(target), target as u32)
                .build(Speaker::Seeker, vec![]),
        );

        let conversation_id = format!("synth-{c:04}");
        for (ui, u) in utterances.iter().enumerate() {
            for &(pos, entity) in &u.entities {
                let e = entity as usize;
                let link = if e < n_items {
                    Some((entity, 0))
                } else {
                    genre_sentence(e - n_items, target)
                };
                if let Some((review_item, sentence)) = link {
                    alignments.push(AlignmentTriple {
                        conversation_id: conversation_id.clone(),
                        utterance_index: ui,
                        token_position: pos,
                        entity_id: entity,
                        review_item_id: review_item,
                        review_sentence_index: sentence,
                    });
                }
            }
        }
        conversations.push(RawConversation {
            id: conversation_id,
            utterances,
        });
    }

    let mut names = BTreeMap::new();
    for i in 0..n_items {
        names.insert(i as u32, item_name(i));
    }
    for g in 0..n_genres {
        names.insert(genre_id(g), genre_name(g));
    }
    ingest(conversations, kg, reviews, alignments, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_items: 8,
            n_entities: 24,
            n_conversations: 16,
            seed,
        }
    }

    #[test]
    fn generator_contract() {
        let c = generate_synthetic_corpus(spec(1)).unwrap();
        assert_eq!(c.conversations.len(), 16);
        assert_eq!(c.reviews.len(), 8);
        assert!(!c.alignments.is_empty());
        for &item in c.kg.items() {
            assert!(c.kg.triples().iter().any(|t| t.head == item || t.tail == item));
        }
        let mentions: usize = c
            .conversations
            .iter()
            .flat_map(|cv| &cv.utterances)
            .map(|u| u.entity_mentions.len())
            .sum();
        assert_eq!(mentions, c.alignments.len());
    }

    #[test]
    fn serialization_is_byte_identical_per_seed() {
        let dump = |seed| {
            let dir = tempfile::tempdir().unwrap();
            write_corpus(dir.path(), &generate_synthetic_corpus(spec(seed)).unwrap()).unwrap();
            let mut files: Vec<_> = std::fs::read_dir(dir.path())
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(dump(1), dump(1));
        assert_ne!(dump(1), dump(2));
    }

    #[test]
    fn rejects_single_item() {
        assert!(generate_synthetic_corpus(SynthSpec { n_items: 1, ..spec(1) }).is_err());
        assert!(generate_synthetic_corpus(SynthSpec { n_entities: 4, ..spec(1) }).is_err());
    }

    #[test]
    fn recommendation_contexts_determine_their_target() {
        let c = generate_synthetic_corpus(spec(3)).unwrap();
        let mut seen: std::collections::HashMap<Vec<u32>, u32> = Default::default();
        for inst in c.instances(256).into_iter().filter(|i| i.target_item.is_some()) {
            let mut key: Vec<u32> = inst.context_entities.iter().copied().filter(|&e| e >= 8).collect();
            key.sort();
            let prev = seen.insert(key, inst.target_item.unwrap());
            assert!(prev.is_none() || prev == inst.target_item);
        }
    }

    #[test]
    fn tiny_graphs_without_genres_still_generate() {
        let c = generate_synthetic_corpus(SynthSpec { n_items: 3, n_entities: 3, n_conversations: 4, seed: 0 }).unwrap();
        assert_eq!(c.reviews.len(), 3);
        assert!(!c.alignments.is_empty());
    }
}
