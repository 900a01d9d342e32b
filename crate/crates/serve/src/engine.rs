use std::path::{Path, PathBuf};
use std::time::Instant;

use c2crs_core::corpus::{load_corpus, tokenize, Corpus, CorpusPaths, EntityId, TokenId, Vocabulary};
use c2crs_core::generator::DecodeMode;
use c2crs_core::model::Frozen;
use c2crs_core::trainer::{model_from_checkpoint, read_manifest};
use c2crs_core::C2Crs;
use serde::Serialize;

use crate::link::EntityLinker;
use crate::session::Session;
use crate::ServeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub max_context_len: usize,
    pub max_response_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub item_id: EntityId,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnReply {
    pub response: String,
    pub recommendations: Vec<Recommendation>,
    pub turn: usize,
}

/// Frozen model plus everything needed to turn text into model inputs.
pub struct Engine {
    model: C2Crs,
    frozen: Frozen,
    vocab: Vocabulary,
    linker: EntityLinker,
    items: Vec<(EntityId, String)>,
    checkpoint: String,
    options: EngineOptions,
}

impl Engine {
    pub fn new(model: C2Crs, corpus: &Corpus, checkpoint: String, options: EngineOptions) -> Result<Self, ServeError> {
        let frozen = model.freeze()?;
        let name = |id: EntityId| corpus.entity_names.get(&id).cloned().unwrap_or_else(|| format!("item {id}"));
        Ok(Self {
            frozen,
            vocab: corpus.vocab.clone(),
            linker: EntityLinker::new(corpus.entity_names.iter().map(|(&id, n)| (id, n.as_str()))),
            items: corpus.kg.items().iter().map(|&i| (i, name(i))).collect(),
            checkpoint,
            options,
            model,
        })
    }

    /// Loads a checkpoint directory. The corpus comes from `data` when given,
    /// otherwise from the data directory recorded in the manifest.
    pub fn load(checkpoint: &Path, data: Option<&Path>) -> Result<Self, ServeError> {
        let manifest = read_manifest(checkpoint)?;
        let dir: PathBuf = data
            .map(Path::to_path_buf)
            .or_else(|| manifest.data_dir.clone())
            .or_else(|| manifest.config.data.dir.clone())
            .ok_or_else(|| {
                ServeError::BadRequest(format!(
                    "checkpoint {} records no data directory; pass one explicitly",
                    checkpoint.display()
                ))
            })?;
        let corpus = load_corpus(&CorpusPaths::in_dir(&dir))?;
        let (model, manifest) = model_from_checkpoint(checkpoint, &corpus)?;
        let id = format!(
            "{}@{}:{}",
            checkpoint.file_name().map_or_else(|| checkpoint.display().to_string(), |n| n.to_string_lossy().into()),
            manifest.stage.as_deref().unwrap_or("init"),
            manifest.step
        );
        let options = EngineOptions {
            max_context_len: manifest.config.data.max_context_len,
            max_response_len: manifest.config.data.max_response_len,
        };
        Self::new(model, &corpus, id, options)
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn items(&self) -> &[(EntityId, String)] {
        &self.items
    }

    /// Runs one user turn: links entities, ranks items, decodes a reply and
    /// appends both utterances to the session.
    pub fn respond(&self, session: &mut Session, utterance: &str, k: usize) -> Result<TurnReply, ServeError> {
        let words = tokenize(utterance);
        if words.is_empty() {
            return Err(ServeError::BadRequest("utterance is empty".into()));
        }
        if k == 0 {
            return Err(ServeError::BadRequest("k must be at least 1".into()));
        }
        session.history.push(self.vocab.encode(&words));
        session.mention(&self.linker.link(&words));

        let ranked = self
            .model
            .recommend(&self.frozen, std::slice::from_ref(&session.entities))?
            .remove(0);
        let recommendations = ranked
            .ranked_items
            .iter()
            .zip(&ranked.scores)
            .take(k.min(self.items.len()))
            .map(|(&item_id, &score)| Recommendation {
                item_id,
                name: self.item_name(item_id),
                score,
            })
            .collect();

        let context = self.context(&session.history);
        let out = self.model.generate(
            &self.frozen,
            &context,
            &session.entities,
            DecodeMode::Greedy,
            self.options.max_response_len,
        )?;
        let response = self.vocab.decode(&out.tokens);
        session.mention(&self.linker.link(&tokenize(&response)));
        session.history.push(out.tokens);
        session.turns += 1;
        session.last_active = Instant::now();
        Ok(TurnReply {
            response,
            recommendations,
            turn: session.turns,
        })
    }

    fn item_name(&self, id: EntityId) -> String {
        self.items
            .iter()
            .find(|(i, _)| *i == id)
            .map_or_else(|| format!("item {id}"), |(_, n)| n.clone())
    }

    /// Utterances joined by the separator token, truncated from the left.
    fn context(&self, history: &[Vec<TokenId>]) -> Vec<TokenId> {
        let mut tokens = Vec::new();
        for (i, u) in history.iter().enumerate() {
            if i > 0 {
                tokens.push(Vocabulary::SEP_ID);
            }
            tokens.extend_from_slice(u);
        }
        let drop = tokens.len().saturating_sub(self.options.max_context_len);
        tokens.split_off(drop)
    }
}
