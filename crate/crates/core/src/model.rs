//! The assembled model: three context encoders, view projections into a
//! shared comparison space, the recommendation head and the decoder.
//!
//! Parameter names are grouped by prefix: `encoder.conv.*`, `encoder.rgcn.*`,
//! `encoder.graph.*`, `encoder.review.*`, `proj.*`, `rec.*` and `decoder.*`.

use candle_core::{DType, Device, Tensor, D};

use crate::config::ModelConfig;
use crate::contrastive::{coarse_loss, fine_loss, FineLoss, FinePairBatch, InfoNceOptions};
use crate::corpus::{Batch, Corpus, EntityId, KnowledgeGraph, ReviewIndex, TokenId, Vocabulary};
use crate::encoders::{PooledView, ReviewEncoder, RgcnEncoder, SelfAttentivePool, TransformerEncoder};
use crate::generator::{decode, gen_loss, probabilities, weight_table, DecodeMode, Decoder, DecoderMemory, GenerationOutput};
use crate::nn::{id_tensor, length_mask, Linear, ParamStore, Ragged};
use crate::recommender::{item_embeddings, item_logits, rec_loss, recommend, target_positions, RecommendationResult, UserEncoder};
use crate::{Error, Result};

/// Which loss terms to compute for a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Objectives {
    pub coarse: bool,
    pub fine: bool,
    pub rec: bool,
    pub gen: bool,
}

/// Loss terms for one batch; `None` when not requested or not computable.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub coarse: Option<Tensor>,
    pub fine: Option<Tensor>,
    pub rec: Option<Tensor>,
    pub gen: Option<Tensor>,
    /// The fine term was requested but the batch had fewer than two aligned triples.
    pub fine_skipped: bool,
}

/// Per-view user vectors in the shared comparison space, `None` for disabled views.
#[derive(Debug, Clone)]
pub struct ProjectedViews {
    pub conversation: Option<Tensor>,
    pub graph: Option<Tensor>,
    pub review: Option<Tensor>,
}

/// Graph and review encodings that do not depend on the dialogue; computed
/// once for inference.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub nodes: Tensor,
    pub sentences: Option<Tensor>,
    pub items: Tensor,
}

pub struct C2Crs {
    config: ModelConfig,
    params: ParamStore,
    kg: KnowledgeGraph,
    reviews: ReviewIndex,
    vocab_size: usize,
    token_weights: Vec<f64>,
    conv: TransformerEncoder,
    conv_pool: SelfAttentivePool,
    rgcn: RgcnEncoder,
    graph_view: PooledView,
    review: ReviewEncoder,
    proj_conv: Linear,
    proj_graph: Linear,
    proj_review: Linear,
    user: UserEncoder,
    decoder: Decoder,
    node_proj: Linear,
    node_default: Tensor,
    sentence_default: Tensor,
}

impl C2Crs {
    pub fn new(config: &ModelConfig, corpus: &Corpus, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        if corpus.kg.n_items() < 2 {
            return Err(Error::InvalidCorpus("at least two items are required".into()));
        }
        let c = config;
        let mut ps = ParamStore::new(dtype, seed);
        let vocab_size = corpus.vocab.len();
        let reviews = ReviewIndex::new(&corpus.reviews);

        let conv = TransformerEncoder::new(
            &mut ps,
            "encoder.conv",
            vocab_size,
            c.d_conv,
            c.n_enc_layers,
            c.n_heads,
            c.ffn_width,
            c.max_positions,
        )?;
        let conv_pool = SelfAttentivePool::new(&mut ps, "encoder.conv.pool", c.d_conv)?;
        let rgcn = RgcnEncoder::new(&mut ps, "encoder.rgcn", &corpus.kg, c.d_rec, c.n_rgcn_layers, c.rgcn_norm)?;
        let graph_view = PooledView::new(&mut ps, "encoder.graph", c.d_rec)?;
        let review = ReviewEncoder::new(
            &mut ps,
            "encoder.review",
            &reviews,
            vocab_size,
            c.d_conv,
            c.n_enc_layers,
            c.n_heads,
            c.ffn_width,
            c.max_positions,
        )?;
        let proj_conv = Linear::new(&mut ps, "proj.conv", c.d_conv, c.d_contrast, true)?;
        let proj_graph = Linear::new(&mut ps, "proj.graph", c.d_rec, c.d_contrast, true)?;
        let proj_review = Linear::new(&mut ps, "proj.review", c.d_conv, c.d_contrast, true)?;
        let user = UserEncoder::new(&mut ps, "rec.user", c.d_rec)?;
        let decoder = Decoder::new(
            &mut ps,
            "decoder",
            vocab_size,
            c.d_conv,
            c.n_dec_layers,
            c.n_heads,
            c.ffn_width,
            c.max_positions,
        )?;
        let node_proj = Linear::new(&mut ps, "decoder.node_proj", c.d_rec, c.d_conv, false)?;
        let node_default = ps.fan_in("decoder.node_default", &[c.d_rec], c.d_rec)?;
        let sentence_default = ps.fan_in("decoder.sentence_default", &[c.d_conv], c.d_conv)?;

        Ok(Self {
            config: config.clone(),
            params: ps,
            kg: corpus.kg.clone(),
            reviews,
            vocab_size,
            token_weights: weight_table(corpus.vocab.frequencies(), c.weight_threshold, c.weight_floor),
            conv,
            conv_pool,
            rgcn,
            graph_view,
            review,
            proj_conv,
            proj_graph,
            proj_review,
            user,
            decoder,
            node_proj,
            node_default,
            sentence_default,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn reviews(&self) -> &ReviewIndex {
        &self.reviews
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn token_weights(&self) -> &[f64] {
        &self.token_weights
    }

    pub fn rgcn(&self) -> &RgcnEncoder {
        &self.rgcn
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn device(&self) -> Device {
        Device::Cpu
    }

    fn nce_options(&self) -> InfoNceOptions {
        InfoNceOptions {
            temperature: self.config.temperature,
            symmetric: self.config.symmetric_contrast,
            raw_log_ratio: self.config.raw_log_ratio,
        }
    }

    /// Conversation token matrix `[b, m, d_conv]` and its mask.
    pub fn encode_conversation(&self, ids: &[TokenId], lengths: &[usize], width: usize) -> Result<(Tensor, Tensor)> {
        let width = width.max(1);
        let rows = lengths.len();
        let mut padded = ids.to_vec();
        padded.resize(rows * width, Vocabulary::PAD_ID);
        let dev = self.device();
        let ids = id_tensor(&padded, rows, width, &dev)?;
        let mask = length_mask(lengths, width, self.dtype(), &dev)?;
        Ok((self.conv.forward(&ids, &mask)?, mask))
    }

    /// Graph node matrix `[n_entities, d_rec]`.
    pub fn encode_graph(&self) -> Result<Tensor> {
        self.rgcn.forward()
    }

    /// One row per review sentence, `[n_sentences, d_conv]`.
    pub fn encode_reviews(&self) -> Result<Option<Tensor>> {
        self.review.encode_sentences()
    }

    pub fn freeze(&self) -> Result<Frozen> {
        let nodes = self.encode_graph()?;
        let items = item_embeddings(&nodes, &self.kg)?;
        Ok(Frozen {
            sentences: self.encode_reviews()?,
            nodes,
            items,
        })
    }

    fn batch_conversation(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        self.encode_conversation(&batch.context, &batch.context_len, batch.context_width)
    }

    /// Coarse user vectors per enabled view, projected to the comparison space.
    pub fn project_views(
        &self,
        tokens: &Tensor,
        token_mask: &Tensor,
        nodes: &Tensor,
        sentences: Option<&Tensor>,
        entities: &[Vec<EntityId>],
        bundles: &[Vec<u32>],
    ) -> Result<ProjectedViews> {
        let v = self.config.views;
        let conversation = if v.conversation {
            let (e_c, _) = self.conv_pool.forward(tokens, token_mask)?;
            Some(self.proj_conv.forward(&e_c)?)
        } else {
            None
        };
        let graph = if v.graph {
            let (e_g, _) = self.graph_view.forward(nodes, entities)?;
            Some(self.proj_graph.forward(&e_g)?)
        } else {
            None
        };
        let review = if v.review {
            let (e_r, _) = self.review.view(sentences, bundles)?;
            Some(self.proj_review.forward(&e_r)?)
        } else {
            None
        };
        Ok(ProjectedViews {
            conversation,
            graph,
            review,
        })
    }

    /// Projected coarse views for a batch.
    pub fn batch_views(&self, batch: &Batch) -> Result<ProjectedViews> {
        let (tokens, mask) = self.batch_conversation(batch)?;
        let nodes = self.encode_graph()?;
        let sentences = self.encode_reviews()?;
        self.project_views(&tokens, &mask, &nodes, sentences.as_ref(), &batch.entities, &bundles_u32(batch))
    }

    fn groups<'a>(&self, batch: &'a Batch) -> Option<&'a [usize]> {
        self.config.exclude_same_conversation.then_some(batch.groups.as_slice())
    }

    fn fine_batch(&self, batch: &Batch, tokens: &Tensor, nodes: &Tensor, sentences: Option<&Tensor>) -> Result<FinePairBatch> {
        let v = self.config.views;
        let dev = self.device();
        let fine = &batch.fine;
        let words = if v.conversation && !fine.is_empty() {
            let (b, m, d) = tokens.dims3()?;
            let idx: Vec<u32> = fine.iter().map(|t| (t.row * m + t.context_position) as u32).collect();
            let flat = tokens.reshape((b * m, d))?;
            let sel = flat.index_select(&Tensor::from_vec(idx, fine.len(), &dev)?, 0)?;
            Some(self.proj_conv.forward(&sel)?)
        } else {
            None
        };
        let entities = if v.graph && !fine.is_empty() {
            let idx: Vec<u32> = fine.iter().map(|t| t.entity).collect();
            let sel = nodes.index_select(&Tensor::from_vec(idx, fine.len(), &dev)?, 0)?;
            Some(self.proj_graph.forward(&sel)?)
        } else {
            None
        };
        let sents = match (v.review && !fine.is_empty(), sentences) {
            (true, Some(table)) => {
                let idx: Vec<u32> = fine.iter().map(|t| t.sentence as u32).collect();
                let sel = table.index_select(&Tensor::from_vec(idx, fine.len(), &dev)?, 0)?;
                Some(self.proj_review.forward(&sel)?)
            }
            _ => None,
        };
        Ok(FinePairBatch {
            words,
            entities,
            sentences: sents,
            groups: fine.iter().map(|t| t.group).collect(),
        })
    }

    /// Decoder memories for contexts already run through the conversation encoder.
    pub fn decoder_memory(
        &self,
        tokens: &Tensor,
        token_mask: &Tensor,
        nodes: &Tensor,
        sentences: Option<&Tensor>,
        entities: &[Vec<EntityId>],
        bundles: &[Vec<u32>],
    ) -> Result<DecoderMemory> {
        let v = self.config.views;
        let dtype = self.dtype();
        let dev = self.device();
        let b = entities.len();
        let empty: Vec<Vec<u32>> = vec![Vec::new(); b];

        let node_table = Tensor::cat(&[nodes, &self.node_default.unsqueeze(0)?], 0)?;
        let node_lists = if v.graph { entities } else { &empty[..] };
        let ragged = Ragged::new(node_lists, nodes.dim(0)? as u32, dtype, &dev)?;
        let node_rows = self.node_proj.forward(&ragged.gather(&node_table)?)?;

        let default = self.sentence_default.unsqueeze(0)?;
        let (sentence_table, fallback) = match sentences {
            Some(t) => (Tensor::cat(&[t, &default], 0)?, t.dim(0)? as u32),
            None => (default, 0),
        };
        let sentence_lists = if v.review && sentences.is_some() { bundles } else { &empty[..] };
        let ragged_s = Ragged::new(sentence_lists, fallback, dtype, &dev)?;

        Ok(DecoderMemory {
            context: tokens.clone(),
            context_mask: token_mask.clone(),
            nodes: node_rows,
            nodes_mask: ragged.mask,
            sentences: ragged_s.gather(&sentence_table)?,
            sentences_mask: ragged_s.mask,
        })
    }

    /// User vectors and item logits `[b, n_items]`.
    pub fn rec_logits(&self, nodes: &Tensor, entities: &[Vec<EntityId>]) -> Result<(Tensor, Tensor)> {
        let (user, _) = self.user.forward(nodes, entities)?;
        let items = item_embeddings(nodes, &self.kg)?;
        let logits = item_logits(&user, &items)?;
        Ok((user, logits))
    }

    /// Computes the requested loss terms on one batch.
    pub fn losses(&self, batch: &Batch, which: Objectives) -> Result<LossTerms> {
        let mut out = LossTerms::default();
        let need_tokens = which.coarse || which.fine || which.gen;
        let need_sentences = which.coarse || which.fine || which.gen;
        let tokens = if need_tokens { Some(self.batch_conversation(batch)?) } else { None };
        let nodes = self.encode_graph()?;
        let sentences = if need_sentences { self.encode_reviews()? } else { None };
        let bundles = bundles_u32(batch);

        if which.coarse {
            let (t, m) = tokens.as_ref().expect("tokens encoded");
            let views = self.project_views(t, m, &nodes, sentences.as_ref(), &batch.entities, &bundles)?;
            out.coarse = coarse_loss(
                views.conversation.as_ref(),
                views.graph.as_ref(),
                views.review.as_ref(),
                &self.nce_options(),
                self.groups(batch),
            )?;
        }
        if which.fine {
            let (t, _) = tokens.as_ref().expect("tokens encoded");
            let fb = self.fine_batch(batch, t, &nodes, sentences.as_ref())?;
            match fine_loss(&fb, &self.nce_options(), self.config.exclude_same_conversation)? {
                FineLoss::Value(v) => out.fine = Some(v),
                FineLoss::Skipped => out.fine_skipped = true,
            }
        }
        if which.rec {
            let rows: Vec<usize> = (0..batch.size).filter(|&r| batch.target_items[r].is_some()).collect();
            if !rows.is_empty() {
                let entities: Vec<Vec<EntityId>> = rows.iter().map(|&r| batch.entities[r].clone()).collect();
                let targets: Vec<EntityId> = rows.iter().map(|&r| batch.target_items[r].unwrap()).collect();
                let positions = target_positions(&self.kg, &targets)?;
                let (_, logits) = self.rec_logits(&nodes, &entities)?;
                out.rec = Some(rec_loss(&logits, &positions)?);
            }
        }
        if which.gen && batch.response_width > 0 {
            let (t, m) = tokens.as_ref().expect("tokens encoded");
            let memory = self.decoder_memory(t, m, &nodes, sentences.as_ref(), &batch.entities, &bundles)?;
            let ids = id_tensor(&batch.response_input, batch.size, batch.response_width, &self.device())?;
            let logits = self.decoder.forward(&ids, &memory)?;
            out.gen = Some(gen_loss(&logits, &batch.response_target, &batch.response_len, &self.token_weights)?);
        }
        Ok(out)
    }

    /// Full item ranking for each entity context.
    pub fn recommend(&self, frozen: &Frozen, entities: &[Vec<EntityId>]) -> Result<Vec<RecommendationResult>> {
        let (user, _) = self.user.forward(&frozen.nodes, entities)?;
        let logits = item_logits(&user, &frozen.items)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        recommend(&probs, &user, &self.kg)
    }

    /// Decodes a response for one context.
    pub fn generate(
        &self,
        frozen: &Frozen,
        context: &[TokenId],
        entities: &[EntityId],
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<GenerationOutput> {
        let max_len = max_len.min(self.config.max_positions.saturating_sub(1)).max(1);
        let keep = context.len().min(self.config.max_positions);
        let context = &context[context.len() - keep..];
        let (tokens, mask) = self.encode_conversation(context, &[context.len()], context.len())?;
        let entity_lists = vec![entities.to_vec()];
        let bundles = vec![self.reviews.bundle(entities).into_iter().map(|s| s as u32).collect()];
        let memory = self.decoder_memory(
            &tokens,
            &mask,
            &frozen.nodes,
            frozen.sentences.as_ref(),
            &entity_lists,
            &bundles,
        )?;
        let dev = self.device();
        decode(
            |prefix: &[TokenId]| {
                let ids = Tensor::from_vec(prefix.to_vec(), (1, prefix.len()), &dev)?;
                let logits = self.decoder.forward(&ids, &memory)?;
                let last = logits.narrow(1, prefix.len() - 1, 1)?;
                probabilities(&last)
            },
            mode,
            max_len,
        )
    }
}

fn bundles_u32(batch: &Batch) -> Vec<Vec<u32>> {
    batch
        .review_sentences
        .iter()
        .map(|b| b.iter().map(|&s| s as u32).collect())
        .collect()
}

/// Mean cosine between row `i` of `x` and row `i` of `y`.
pub fn mean_positive_cosine(x: &Tensor, y: &Tensor) -> Result<f64> {
    let dot = (x * y)?.sum(D::Minus1)?;
    let nx = x.sqr()?.sum(D::Minus1)?.sqrt()?;
    let ny = y.sqr()?.sum(D::Minus1)?.sqrt()?;
    let cos = (dot / (nx * ny)?)?;
    Ok(cos.mean_all()?.to_dtype(DType::F64)?.to_scalar()?)
}

impl ProjectedViews {
    /// Mean positive-pair cosine averaged over every pair of enabled views.
    pub fn mean_positive_cosine(&self) -> Result<Option<f64>> {
        let views: Vec<&Tensor> = [&self.conversation, &self.graph, &self.review]
            .into_iter()
            .flatten()
            .collect();
        let mut acc = Vec::new();
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                acc.push(mean_positive_cosine(views[i], views[j])?);
            }
        }
        Ok((!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64))
    }
}
