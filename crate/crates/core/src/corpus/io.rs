//! Line-oriented corpus files.
//!
//! | file                 | one line per                                        |
//! |----------------------|-----------------------------------------------------|
//! | `conversations.jsonl`| conversation `{"id","utterances":[...]}`            |
//! | `kg.tsv`             | triple `head\trelation\ttail` after a `#entities=` header |
//! | `reviews.jsonl`      | item `{"item_id","sentences":[...]}`                |
//! | `alignment.jsonl`    | word/entity/sentence link                           |
//! | `entity_names.tsv`   | `id\tname` (optional)                               |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    tokenize, AlignmentTriple, ConversationRecord, Corpus, EntityId, KnowledgeGraph, ReviewDoc,
    Speaker, Triple, Utterance, Vocabulary,
};
use crate::{Error, Result};

pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";
pub const KG_FILE: &str = "kg.tsv";
pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const ENTITY_NAMES_FILE: &str = "entity_names.tsv";

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub conversations: PathBuf,
    pub kg: PathBuf,
    pub reviews: PathBuf,
    pub alignment: PathBuf,
    pub entity_names: Option<PathBuf>,
}

impl CorpusPaths {
    /// Standard file names inside `dir`; `entity_names.tsv` is used when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let names = dir.join(ENTITY_NAMES_FILE);
        Self {
            conversations: dir.join(CONVERSATIONS_FILE),
            kg: dir.join(KG_FILE),
            reviews: dir.join(REVIEWS_FILE),
            alignment: dir.join(ALIGNMENT_FILE),
            entity_names: names.exists().then_some(names),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RawUtterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<(usize, EntityId)>,
    #[serde(default)]
    pub items: Vec<EntityId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RawConversation {
    pub id: String,
    pub utterances: Vec<RawUtterance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RawReview {
    pub item_id: EntityId,
    pub sentences: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read(path)?;
    let label = file_label(path);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::parse(&label, i + 1, e.to_string()))?;
        out.push(value);
    }
    Ok(out)
}

fn parse_kg(path: &Path) -> Result<KnowledgeGraph> {
    let text = read(path)?;
    let label = file_label(path);
    let mut header: Option<(usize, usize, Vec<EntityId>)> = None;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if header.is_some() {
                return Err(Error::parse(&label, lineno, "duplicate header"));
            }
            header = Some(parse_kg_header(rest).map_err(|m| Error::parse(&label, lineno, m))?);
            continue;
        }
        if header.is_none() {
            return Err(Error::parse(&label, lineno, "missing `#entities=` header"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                &label,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::parse(&label, lineno, format!("not an integer id: {s:?}")))
        };
        triples.push(Triple {
            head: num(fields[0])?,
            relation: num(fields[1])?,
            tail: num(fields[2])?,
        });
    }
    let (n_entities, n_relations, items) =
        header.ok_or_else(|| Error::parse(&label, 1, "missing `#entities=` header"))?;
    KnowledgeGraph::new(n_entities, n_relations, triples, items)
}

fn parse_kg_header(rest: &str) -> std::result::Result<(usize, usize, Vec<EntityId>), String> {
    let mut entities = None;
    let mut relations = None;
    let mut items = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {field:?}"))?;
        match key {
            "entities" => entities = Some(value.parse::<usize>().map_err(|e| e.to_string())?),
            "relations" => relations = Some(value.parse::<usize>().map_err(|e| e.to_string())?),
            "items" => {
                items = Some(
                    value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<u32>().map_err(|e| format!("item id {s:?}: {e}")))
                        .collect::<std::result::Result<Vec<_>, _>>()?,
                )
            }
            other => return Err(format!("unknown header key {other:?}")),
        }
    }
    Ok((
        entities.ok_or("header missing entities=")?,
        relations.ok_or("header missing relations=")?,
        items.unwrap_or_default(),
    ))
}

fn parse_entity_names(path: &Path) -> Result<BTreeMap<EntityId, String>> {
    let text = read(path)?;
    let label = file_label(path);
    let mut names = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&label, i + 1, "expected `id<TAB>name`"))?;
        let id = id
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::parse(&label, i + 1, format!("not an integer id: {id:?}")))?;
        names.insert(id, name.trim().to_string());
    }
    Ok(names)
}

/// Reads and cross-validates the four corpus files (plus optional entity names).
pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let kg = parse_kg(&paths.kg)?;
    let conversations: Vec<RawConversation> = parse_jsonl(&paths.conversations)?;
    let reviews: Vec<RawReview> = parse_jsonl(&paths.reviews)?;
    let alignments: Vec<AlignmentTriple> = parse_jsonl(&paths.alignment)?;
    let entity_names = match &paths.entity_names {
        Some(p) => parse_entity_names(p)?,
        None => BTreeMap::new(),
    };
    ingest(conversations, kg, reviews, alignments, entity_names)
}

/// Tokenizes raw records, builds the vocabulary and validates the result.
pub(crate) fn ingest(
    raw_conversations: Vec<RawConversation>,
    kg: KnowledgeGraph,
    raw_reviews: Vec<RawReview>,
    alignments: Vec<AlignmentTriple>,
    entity_names: BTreeMap<EntityId, String>,
) -> Result<Corpus> {
    let mut vocab = Vocabulary::new();
    let mut conversations = Vec::with_capacity(raw_conversations.len());
    for rc in raw_conversations {
        let utterances = rc
            .utterances
            .into_iter()
            .map(|ru| Utterance {
                speaker: ru.speaker,
                token_ids: tokenize(&ru.text).iter().map(|t| vocab.observe(t)).collect(),
                entity_mentions: ru.entities,
                recommended_items: ru.items,
            })
            .collect();
        conversations.push(ConversationRecord {
            conversation_id: rc.id,
            utterances,
        });
    }
    let mut reviews = BTreeMap::new();
    for rr in raw_reviews {
        if !kg.is_item(rr.item_id) {
            return Err(Error::UnknownItem(rr.item_id));
        }
        let sentences: Vec<Vec<u32>> = rr
            .sentences
            .iter()
            .map(|s| tokenize(s).iter().map(|t| vocab.observe(t)).collect())
            .collect();
        if reviews
            .insert(
                rr.item_id,
                ReviewDoc {
                    item_id: rr.item_id,
                    sentences,
                },
            )
            .is_some()
        {
            return Err(Error::InvalidCorpus(format!("duplicate review doc for item {}", rr.item_id)));
        }
    }
    let corpus = Corpus {
        conversations,
        kg,
        reviews,
        alignments,
        vocab,
        entity_names,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub(crate) fn to_raw_conversations(corpus: &Corpus) -> Vec<RawConversation> {
    corpus
        .conversations
        .iter()
        .map(|c: &ConversationRecord| RawConversation {
            id: c.conversation_id.clone(),
            utterances: c
                .utterances
                .iter()
                .map(|u| RawUtterance {
                    speaker: u.speaker,
                    text: corpus.vocab.decode(&u.token_ids),
                    entities: u.entity_mentions.clone(),
                    items: u.recommended_items.clone(),
                })
                .collect(),
        })
        .collect()
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the corpus in the same formats [`load_corpus`] reads.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write(dir.join(CONVERSATIONS_FILE), &jsonl(&to_raw_conversations(corpus))?)?;

    let mut kg = String::new();
    let items: Vec<String> = corpus.kg.items().iter().map(u32::to_string).collect();
    let _ = writeln!(
        kg,
        "#entities={} relations={} items={}",
        corpus.kg.n_entities(),
        corpus.kg.n_relations(),
        items.join(",")
    );
    for t in corpus.kg.triples() {
        let _ = writeln!(kg, "{}\t{}\t{}", t.head, t.relation, t.tail);
    }
    write(dir.join(KG_FILE), &kg)?;

    let reviews: Vec<RawReview> = corpus
        .reviews
        .values()
        .map(|d| RawReview {
            item_id: d.item_id,
            sentences: d.sentences.iter().map(|s| corpus.vocab.decode(s)).collect(),
        })
        .collect();
    write(dir.join(REVIEWS_FILE), &jsonl(&reviews)?)?;
    write(dir.join(ALIGNMENT_FILE), &jsonl(&corpus.alignments)?)?;

    if !corpus.entity_names.is_empty() {
        let mut names = String::new();
        for (id, name) in &corpus.entity_names {
            let _ = writeln!(names, "{id}\t{name}");
        }
        write(dir.join(ENTITY_NAMES_FILE), &names)?;
    }
    Ok(())
}
