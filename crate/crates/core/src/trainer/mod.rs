//! Stage orchestration: contrastive pre-training, recommendation and
//! generation fine-tuning, or a single joint stage.

mod ablation;
mod checkpoint;
mod config;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

pub use ablation::{ablate, Variant};
pub use checkpoint::{
    load_checkpoint, model_from_checkpoint, read_manifest, restore, save_checkpoint, Checkpoint, CheckpointMeta, Manifest, ParamEntry,
    BLOB_FILE, FORMAT as CHECKPOINT_FORMAT, MANIFEST_FILE,
};
pub use config::{DataSettings, Stage, StageBudget, StageBudgets, TrainConfig, TrainSettings};

use crate::corpus::{make_batches, BatchMode, BatchOptions, Corpus, TrainingInstance};
use crate::model::{C2Crs, LossTerms, Objectives};
use crate::{Error, Result};

/// One optimizer step as written to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    #[serde(flatten)]
    pub terms: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Sink for per-step records: kept in memory and optionally appended to a
/// JSON-lines file.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
    writer: Option<Box<dyn Write + Send>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            writer: Some(Box::new(std::io::BufWriter::new(f))),
        })
    }

    fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn stage_losses(&self, stage: Stage) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }

    /// Global step of the next record.
    pub fn next_step(&self) -> usize {
        self.records.last().map_or(0, |r| r.step + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Batches that produced no loss (e.g. too few aligned triples for the fine term).
    pub skipped_batches: usize,
    /// Fine-term evaluations skipped for having fewer than two aligned triples.
    pub fine_skipped: usize,
    /// Steps whose gradient norm exceeded the clip threshold.
    pub clipped_steps: usize,
    pub stopped_early: bool,
}

/// Called after each optimizer step with the stage-local step count;
/// returning `true` ends the stage.
pub type StopHook<'a> = dyn FnMut(&C2Crs, usize) -> Result<bool> + 'a;

pub fn objectives(stage: Stage) -> Objectives {
    match stage {
        Stage::PretrainCoarse => Objectives { coarse: true, ..Default::default() },
        Stage::PretrainFine => Objectives { coarse: true, fine: true, ..Default::default() },
        Stage::FinetuneRec => Objectives { rec: true, ..Default::default() },
        Stage::FinetuneConv => Objectives { gen: true, ..Default::default() },
        Stage::MultiTask => Objectives { coarse: true, fine: true, rec: true, gen: true },
    }
}

/// Whether the named parameter is updated during `stage`.
///
/// Generation fine-tuning leaves `encoder.rgcn.*` untouched because graph
/// node vectors double as the recommender's item embeddings.
pub fn is_trainable(stage: Stage, freeze_encoders: bool, name: &str) -> bool {
    let encoder = name.starts_with("encoder.");
    match stage {
        Stage::PretrainCoarse | Stage::PretrainFine => encoder || name.starts_with("proj."),
        Stage::FinetuneRec => name.starts_with("rec.") || (!freeze_encoders && name.starts_with("encoder.rgcn.")),
        Stage::FinetuneConv => {
            name.starts_with("decoder.")
                || (!freeze_encoders && (name.starts_with("encoder.conv.") || name.starts_with("encoder.review.")))
        }
        Stage::MultiTask => !(freeze_encoders && encoder),
    }
}

/// Instances each stage trains on. Pre-training and generation see every
/// context once; recommendation sees every (context, target item) pair.
pub fn stage_instances(stage: Stage, instances: &[TrainingInstance]) -> Vec<TrainingInstance> {
    match stage {
        Stage::FinetuneRec => instances.iter().filter(|i| i.target_item.is_some()).cloned().collect(),
        Stage::MultiTask => instances.to_vec(),
        _ => {
            let mut seen = HashSet::new();
            instances
                .iter()
                .filter(|i| seen.insert((i.conversation_id.clone(), i.turn)))
                .cloned()
                .collect()
        }
    }
}

/// Stage objective: coarse alone, fine plus weighted coarse, or the sum of
/// every available term.
pub fn combine(stage: Stage, terms: &LossTerms, coarse_weight: f64) -> Result<Option<Tensor>> {
    let add = |acc: Option<Tensor>, t: Option<Tensor>| -> Result<Option<Tensor>> {
        Ok(match (acc, t) {
            (Some(a), Some(b)) => Some((a + b)?),
            (a, b) => a.or(b),
        })
    };
    match stage {
        Stage::PretrainCoarse => Ok(terms.coarse.clone()),
        Stage::PretrainFine => crate::contrastive::pretrain_objective_tensor(
            crate::contrastive::PretrainStage::Fine,
            terms.fine.as_ref(),
            terms.coarse.as_ref(),
            coarse_weight,
        ),
        Stage::FinetuneRec => Ok(terms.rec.clone()),
        Stage::FinetuneConv => Ok(terms.gen.clone()),
        Stage::MultiTask => {
            let mut acc = None;
            for t in [&terms.coarse, &terms.fine, &terms.rec, &terms.gen] {
                acc = add(acc, t.clone())?;
            }
            Ok(acc)
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Global L2 norm of the gradients of `vars`.
pub fn global_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads, vars)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn term_values(terms: &LossTerms, step: usize) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, t) in [("coarse", &terms.coarse), ("fine", &terms.fine), ("rec", &terms.rec), ("gen", &terms.gen)] {
        if let Some(t) = t {
            let value = scalar(t)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: name.to_string(),
                    step,
                    value,
                });
            }
            out.insert(name.to_string(), value);
        }
    }
    Ok(out)
}

/// Trains `model` on one stage. Batches are drawn epoch by epoch from a
/// permutation seeded by the config seed, the stage and the epoch index.
pub fn run_stage(
    model: &C2Crs,
    instances: &[TrainingInstance],
    stage: Stage,
    config: &TrainConfig,
    log: &mut MetricsLog,
    mut stop: Option<&mut StopHook<'_>>,
) -> Result<StageReport> {
    config.validate()?;
    let t = &config.train;
    let data = stage_instances(stage, instances);
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{stage}: no training instances")));
    }
    let vars: Vec<Var> = model
        .params()
        .select(|n| is_trainable(stage, t.freeze_encoders, n))
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: t.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let which = objectives(stage);
    let mode = if stage.is_pretraining() { BatchMode::Contrastive } else { BatchMode::Standard };
    let budget = t.budgets.get(stage);
    let stage_seed = t.seed.wrapping_mul(1_000_003).wrapping_add(stage as u64 * 7919);

    let mut report = StageReport {
        stage,
        steps: 0,
        initial_loss: None,
        final_loss: None,
        skipped_batches: 0,
        fine_skipped: 0,
        clipped_steps: 0,
        stopped_early: false,
    };
    let mut epoch = 0u64;
    'epochs: loop {
        if let Some(e) = budget.epochs {
            if epoch as usize >= e {
                break;
            }
        }
        let opts = BatchOptions {
            max_response_len: config.data.max_response_len,
            ..BatchOptions::new(t.batch_size.min(data.len().max(2)), stage_seed.wrapping_add(epoch), t.shuffle, mode)
        };
        let mut progressed = false;
        for batch in make_batches(&data, model.reviews(), &opts)? {
            if let Some(s) = budget.steps {
                if report.steps >= s {
                    break 'epochs;
                }
            }
            let step = log.next_step();
            let terms = model.losses(&batch, which)?;
            if terms.fine_skipped {
                report.fine_skipped += 1;
            }
            let values = term_values(&terms, step)?;
            let Some(total) = combine(stage, &terms, config.model.coarse_weight)? else {
                report.skipped_batches += 1;
                continue;
            };
            let loss = scalar(&total)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "total".into(),
                    step,
                    value: loss,
                });
            }
            let mut grads = total.backward()?;
            let grad_norm = clip_global_norm(&mut grads, &vars, t.grad_clip_max_norm)?;
            let clipped_norm = if grad_norm > t.grad_clip_max_norm {
                report.clipped_steps += 1;
                global_norm(&grads, &vars)?
            } else {
                grad_norm
            };
            opt.step(&grads)?;

            report.initial_loss.get_or_insert(loss);
            report.final_loss = Some(loss);
            report.steps += 1;
            progressed = true;
            log.push(StepRecord {
                step,
                stage,
                loss,
                terms: values,
                grad_norm,
                clipped_norm,
            })?;
            tracing::debug!(%stage, step, loss, grad_norm, "step");
            if let Some(hook) = stop.as_deref_mut() {
                if hook(model, report.steps)? {
                    report.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if !progressed {
            if budget.steps.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "{stage}: no batch produced a loss; cannot reach the step budget"
                )));
            }
            tracing::warn!(%stage, epoch, "epoch produced no loss");
        }
        epoch += 1;
    }
    tracing::info!(
        %stage,
        steps = report.steps,
        initial = report.initial_loss,
        last = report.final_loss,
        "stage finished"
    );
    Ok(report)
}

/// Runs every stage of the configured schedule in order.
pub fn run_schedule(
    model: &C2Crs,
    corpus: &Corpus,
    config: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<Vec<StageReport>> {
    let instances = corpus.instances(config.data.max_context_len);
    config
        .train
        .schedule
        .iter()
        .map(|&stage| run_stage(model, &instances, stage, config, log, None))
        .collect()
}

/// Builds a model for `corpus` with the config's seed in training precision.
pub fn build_model(config: &TrainConfig, corpus: &Corpus) -> Result<C2Crs> {
    config.validate()?;
    C2Crs::new(&config.model, corpus, DType::F32, config.train.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_sets_are_disjoint_where_required() {
        for name in ["decoder.layer0.ffn.up.weight", "decoder.node_proj.weight"] {
            assert!(!is_trainable(Stage::FinetuneRec, false, name));
            assert!(is_trainable(Stage::FinetuneConv, false, name));
        }
        for name in ["rec.user.pool.query", "encoder.rgcn.nodes"] {
            assert!(is_trainable(Stage::FinetuneRec, false, name));
            assert!(!is_trainable(Stage::FinetuneConv, false, name));
        }
        assert!(!is_trainable(Stage::FinetuneRec, true, "encoder.rgcn.nodes"));
        assert!(!is_trainable(Stage::FinetuneConv, true, "encoder.conv.tokens"));
        assert!(is_trainable(Stage::PretrainCoarse, false, "proj.conv.weight"));
        assert!(!is_trainable(Stage::PretrainFine, false, "decoder.norm.gain"));
        assert!(is_trainable(Stage::MultiTask, false, "encoder.conv.tokens"));
    }

    #[test]
    fn stage_objectives_compose() {
        let dev = candle_core::Device::Cpu;
        let v = |x: f64| Some(Tensor::new(x, &dev).unwrap());
        let terms = LossTerms {
            coarse: v(1.0),
            fine: v(2.0),
            rec: v(0.5),
            gen: v(0.25),
            fine_skipped: false,
        };
        let get = |s| scalar(&combine(s, &terms, 0.2).unwrap().unwrap()).unwrap();
        assert_eq!(get(Stage::PretrainCoarse), 1.0);
        assert!((get(Stage::PretrainFine) - 2.2).abs() < 1e-12);
        assert_eq!(get(Stage::FinetuneRec), 0.5);
        assert_eq!(get(Stage::FinetuneConv), 0.25);
        assert!((get(Stage::MultiTask) - 3.75).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let a = Var::new(&[1.0f64, 2.0], &candle_core::Device::Cpu).unwrap();
        let b = Var::new(&[3.0f64], &candle_core::Device::Cpu).unwrap();
        let loss = ((a.as_tensor().sqr().unwrap().sum_all().unwrap() * 10.0).unwrap()
            + b.as_tensor().sum_all().unwrap())
        .unwrap();
        let mut grads = loss.backward().unwrap();
        let vars = vec![a, b];
        let before = clip_global_norm(&mut grads, &vars, 0.1).unwrap();
        assert!((before - (400.0f64 + 1600.0 + 1.0).sqrt()).abs() < 1e-9);
        assert!((global_norm(&grads, &vars).unwrap() - 0.1).abs() < 1e-12);
    }
}
