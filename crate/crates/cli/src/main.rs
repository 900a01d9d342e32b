use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use c2crs_core::corpus::{generate_synthetic_corpus, load_corpus, write_corpus, Corpus, CorpusPaths, SynthSpec};
use c2crs_core::eval::{evaluate_generation, evaluate_recommendation, ConvEvalOptions};
use c2crs_core::generator::DecodeMode;
use c2crs_core::trainer::{
    ablate, build_model, load_checkpoint, model_from_checkpoint, read_manifest, restore, run_stage, save_checkpoint,
    CheckpointMeta, MetricsLog, Stage, StageBudget, Variant,
};
use c2crs_core::{C2Crs, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "c2crs", version, about = "Coarse-to-fine contrastive conversational recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus directory.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        items: usize,
        #[arg(long, default_value_t = 16)]
        entities: usize,
        #[arg(long, default_value_t = 16)]
        conversations: usize,
    },
    /// Train one stage (or the configured schedule) and write a checkpoint.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Recall@{1,10,50} of a checkpoint.
    EvalRec {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Distinct-{2,3,4} of generated responses plus a transcript.
    EvalConv {
        #[command(flatten)]
        eval: EvalArgs,
        /// Transcript path; defaults to generations.jsonl next to the report.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        /// Average distinct ratios per response instead of over the corpus.
        #[arg(long)]
        per_sentence: bool,
    },
    /// Train an ablated variant from scratch and report both metrics.
    Ablate {
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print a full configuration as YAML.
    Config {
        /// Small widths and step budgets for CPU runs.
        #[arg(long)]
        desk: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the step budget of every stage that runs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
    Rec,
    Conv,
    MultiTask,
    All,
}

impl StageArg {
    fn stages(self, config: &TrainConfig) -> Vec<Stage> {
        match self {
            StageArg::Coarse => vec![Stage::PretrainCoarse],
            StageArg::Fine => vec![Stage::PretrainFine],
            StageArg::Rec => vec![Stage::FinetuneRec],
            StageArg::Conv => vec![Stage::FinetuneConv],
            StageArg::MultiTask => vec![Stage::MultiTask],
            StageArg::All => config.train.schedule.clone(),
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenSynth {
            out,
            seed,
            items,
            entities,
            conversations,
        } => {
            let corpus = generate_synthetic_corpus(SynthSpec {
                n_items: items,
                n_entities: entities,
                n_conversations: conversations,
                seed,
            })?;
            write_corpus(&out, &corpus)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "conversations": corpus.conversations.len(),
                    "items": corpus.kg.n_items(),
                    "vocab": corpus.vocab.len(),
                })
            );
        }
        Command::Train { stage, run, init } => train(stage, &run, init.as_deref())?,
        Command::EvalRec { eval } => {
            let (model, corpus, _) = open(&eval.ckpt, eval.data.as_deref())?;
            let frozen = model.freeze()?;
            let report = evaluate_recommendation(&model, &frozen, &corpus.instances(max_context(&eval.ckpt)?))?;
            emit(&report.to_json(), eval.report.as_deref())?;
        }
        Command::EvalConv {
            eval,
            generations,
            beam,
            max_len,
            per_sentence,
        } => {
            let (model, corpus, _) = open(&eval.ckpt, eval.data.as_deref())?;
            let frozen = model.freeze()?;
            let opts = ConvEvalOptions {
                mode: beam.map_or(DecodeMode::Greedy, |width| DecodeMode::Beam { width }),
                max_len,
                per_sentence,
            };
            let instances = corpus.instances(max_context(&eval.ckpt)?);
            let (report, records) = evaluate_generation(&model, &frozen, &corpus.vocab, &instances, &opts)?;
            emit(&report.to_json(), eval.report.as_deref())?;
            let transcript = generations.unwrap_or_else(|| {
                eval.report
                    .as_deref()
                    .and_then(Path::parent)
                    .unwrap_or(Path::new("."))
                    .join("generations.jsonl")
            });
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            std::fs::write(&transcript, text).with_context(|| format!("writing {}", transcript.display()))?;
        }
        Command::Ablate { variant, run } => {
            let variant: Variant = variant.parse()?;
            let base = load_config(&run)?;
            let config = ablate(&base, variant);
            let (corpus, data_dir) = corpus_for(&run, &config, None)?;
            let model = build_model(&config, &corpus)?;
            let (stage, step) = train_stages(&model, &corpus, &config, &config.train.schedule, &run.out, 0)?;
            save_checkpoint(&model, &config, &CheckpointMeta { stage, step, data_dir }, &run.out)?;
            let frozen = model.freeze()?;
            let instances = corpus.instances(config.data.max_context_len);
            let rec = evaluate_recommendation(&model, &frozen, &instances)?;
            let (conv, _) = evaluate_generation(&model, &frozen, &corpus.vocab, &instances, &ConvEvalOptions::default())?;
            let report = serde_json::json!({
                "variant": variant.name(),
                "recommendation": rec.to_json(),
                "conversation": conv.to_json(),
            });
            emit(&report, Some(&run.out.join("report.json")))?;
        }
        Command::Serve { ckpt, port, host, data } => {
            let engine = c2crs_serve::Engine::load(&ckpt, data.as_deref())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host/port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(c2crs_serve::serve(addr, c2crs_serve::AppState::new(engine)))?;
        }
        Command::Config { desk } => {
            let cfg = if desk { TrainConfig::desk() } else { TrainConfig::default() };
            print!("{}", cfg.to_yaml()?);
        }
    }
    Ok(())
}

fn load_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut config = match &run.config {
        Some(p) => TrainConfig::from_yaml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = run.seed {
        config.train.seed = seed;
    }
    if let Some(steps) = run.steps {
        for s in Stage::ALL {
            config.train.budgets.set(s, StageBudget::steps(steps));
        }
    }
    config.validate()?;
    Ok(config)
}

/// Corpus from `--data`, then the config, then the init checkpoint.
fn corpus_for(run: &RunArgs, config: &TrainConfig, init: Option<&Path>) -> Result<(Corpus, Option<PathBuf>)> {
    let from_init = match init {
        Some(p) => read_manifest(p)?.data_dir,
        None => None,
    };
    let Some(dir) = run.data.clone().or_else(|| config.data.dir.clone()).or(from_init) else {
        bail!("no corpus directory: pass --data or set data.dir in the config");
    };
    let corpus = load_corpus(&CorpusPaths::in_dir(&dir)).with_context(|| format!("loading corpus from {}", dir.display()))?;
    let abs = std::fs::canonicalize(&dir).unwrap_or(dir);
    Ok((corpus, Some(abs)))
}

fn train(stage: StageArg, run: &RunArgs, init: Option<&Path>) -> Result<()> {
    let config = load_config(run)?;
    let (corpus, data_dir) = corpus_for(run, &config, init)?;
    let model = build_model(&config, &corpus)?;
    let mut first_step = 0;
    if let Some(p) = init {
        let ck = load_checkpoint(p)?;
        first_step = ck.manifest.step;
        restore(&model, &ck)?;
    }
    let stages = stage.stages(&config);
    let (last, step) = train_stages(&model, &corpus, &config, &stages, &run.out, first_step)?;
    save_checkpoint(&model, &config, &CheckpointMeta { stage: last, step, data_dir }, &run.out)?;
    println!("{}", serde_json::json!({ "checkpoint": run.out, "step": step }));
    Ok(())
}

/// Runs `stages` in order, logging to `out/metrics.jsonl`. Returns the last
/// stage name and the global step count.
fn train_stages(
    model: &C2Crs,
    corpus: &Corpus,
    config: &TrainConfig,
    stages: &[Stage],
    out: &Path,
    first_step: usize,
) -> Result<(Option<String>, usize)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = MetricsLog::to_file(&out.join("metrics.jsonl"))?;
    let instances = corpus.instances(config.data.max_context_len);
    for &s in stages {
        let report = run_stage(model, &instances, s, config, &mut log, None)?;
        tracing::info!(stage = %s, steps = report.steps, loss = report.final_loss, "stage done");
    }
    Ok((stages.last().map(|s| s.as_str().to_string()), first_step + log.next_step()))
}

fn open(ckpt: &Path, data: Option<&Path>) -> Result<(C2Crs, Corpus, PathBuf)> {
    let manifest = read_manifest(ckpt)?;
    let Some(dir) = data.map(Path::to_path_buf).or(manifest.data_dir).or(manifest.config.data.dir) else {
        bail!("checkpoint {} records no corpus directory; pass --data", ckpt.display());
    };
    let corpus = load_corpus(&CorpusPaths::in_dir(&dir))?;
    let (model, _) = model_from_checkpoint(ckpt, &corpus)?;
    Ok((model, corpus, dir))
}

fn max_context(ckpt: &Path) -> Result<usize> {
    Ok(read_manifest(ckpt)?.config.data.max_context_len)
}

fn emit(value: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
