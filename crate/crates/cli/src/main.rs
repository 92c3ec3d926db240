use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clicker_core::checkpoint::Checkpoint;
use clicker_core::data::synth::{SOURCE_LANG, TARGET_LANG};
use clicker_core::data::{generate_synthetic_world, load_jsonl, pair_by_id, Example, InputFormat, ParallelPair, Schema, Vocab};
use clicker_core::eval::{evaluate, export_heatmap, AblationRow, AblationTable, EvalReport};
use clicker_core::head::{EmbeddingMode, LossWeights, Stage};
use clicker_core::model::Model;
use clicker_core::pipeline::{evaluate_split, run_pipeline, PipelineConfig, PipelineOptions};
use clicker_core::trainer::{run_stage, RunOptions};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "clicker", version, about = "Cross-lingual commonsense transfer with gated embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Clone)]
struct Losses {
    /// Loss preset for stages 2 and 3: base, align, align+diff, nc,
    /// align+nc, or custom to keep the weights from the config.
    #[arg(long, value_parser = parse_losses)]
    losses: Option<LossChoice>,
}

#[derive(Clone, Copy)]
enum LossChoice {
    Preset(LossWeights),
    Custom,
}

fn parse_losses(s: &str) -> std::result::Result<LossChoice, String> {
    if s == "custom" {
        return Ok(LossChoice::Custom);
    }
    LossWeights::preset(s).map(LossChoice::Preset).ok_or_else(|| {
        format!(
            "unknown loss preset {s:?} (expected {} or custom)",
            LossWeights::PRESETS.join(", ")
        )
    })
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic bilingual corpus as JSONL files plus vocab.txt.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage on a corpus directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: u8,
        /// Directory written by gen-corpus (or with the same file layout).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from; a fresh model is built when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Append per-step CSV log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = SOURCE_LANG)]
        src_lang: String,
        #[arg(long, default_value = TARGET_LANG)]
        tgt_lang: String,
        #[command(flatten)]
        losses: Losses,
    },
    /// Accuracy of a checkpoint on a JSONL file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// commonsense, non-commonsense or both; all three when omitted.
        #[arg(long)]
        mode: Option<EmbeddingMode>,
        #[arg(long, value_parser = parse_format, default_value = "qa")]
        format: InputFormat,
    },
    /// Export per-token gate values for one example, one CSV per choice.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_format, default_value = "qa")]
        format: InputFormat,
    },
    /// Ablation table over several checkpoints.
    Report {
        #[command(flatten)]
        common: Common,
        /// `label=path` pairs, in table order.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Label of the baseline row; the first model when omitted.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_format, default_value = "qa")]
        format: InputFormat,
    },
    /// Generate a synthetic world, run all three stages and report accuracy.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        losses: Losses,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_format(s: &str) -> std::result::Result<InputFormat, String> {
    match s {
        "qa" => Ok(InputFormat::Qa),
        "statement" => Ok(InputFormat::Statement),
        _ => Err(format!("unknown format {s:?} (expected qa or statement)")),
    }
}

fn load_config(common: &Common, losses: Option<&Losses>) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        config = config.with_seed(s);
    }
    if let Some(LossChoice::Preset(w)) = losses.and_then(|l| l.losses) {
        config = config.with_losses(w);
    }
    Ok(config)
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(load_jsonl(path, Schema::default())?)
}

fn load_pairs(dir: &Path, split: &str, src: &str, tgt: &str) -> Result<Vec<ParallelPair>> {
    let s = load_examples(&dir.join(format!("{split}.{src}.jsonl")))?;
    let t = load_examples(&dir.join(format!("{split}.{tgt}.jsonl")))?;
    Ok(pair_by_id(&s, &t)?)
}

/// Version of the `--json` output envelope.
const SUMMARY_SCHEMA: u32 = 1;

fn print<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        let doc = serde_json::json!({ "schema_version": SUMMARY_SCHEMA, "result": value });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    dataset: &'a str,
    lang: &'a str,
    mode: EmbeddingMode,
    accuracy: f64,
    count: usize,
}

fn summaries(reports: &[EvalReport]) -> Vec<ReportSummary<'_>> {
    reports
        .iter()
        .map(|r| ReportSummary {
            dataset: &r.dataset,
            lang: &r.lang,
            mode: r.mode,
            accuracy: r.accuracy,
            count: r.count,
        })
        .collect()
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let config = load_config(&common, None)?;
            let corpus = generate_synthetic_world(&config.world)?;
            corpus.write_dir(&out)?;
            let counts: Vec<(&str, usize)> = corpus.splits().iter().map(|(n, s)| (*n, s.len())).collect();
            print(common.json, &counts, || {
                let parts: Vec<String> = counts.iter().map(|(n, c)| format!("{n} {c}")).collect();
                format!("wrote {} ({})", out.display(), parts.join(", "))
            })
        }
        Command::Train {
            common,
            stage,
            data,
            init,
            out,
            log,
            src_lang,
            tgt_lang,
            losses,
        } => {
            let config = load_config(&common, Some(&losses))?;
            let stage = Stage::try_from(stage).map_err(|e| anyhow!(e))?;
            let cfg = config.stages()[stage.number() as usize - 1].clone();
            let cp = match &init {
                Some(p) => Checkpoint::load(p)?,
                None => {
                    let vocab_path = data.join("vocab.txt");
                    let vocab = Vocab::load(&vocab_path)?;
                    Checkpoint::fresh(Model::new(config.encoder.clone(), config.head.clone(), vocab)?)
                }
            };
            let split = if stage == Stage::Differentiate { "parallel" } else { "train" };
            let pairs = load_pairs(&data, split, &src_lang, &tgt_lang)?;
            let dev = load_pairs(&data, "dev", &src_lang, &tgt_lang)?;
            let opts = RunOptions {
                stop_after: None,
                log_path: log,
                verbose: !common.json,
            };
            let outcome = run_stage(cp, &cfg, &pairs, &dev, &opts)?;
            outcome.checkpoint.save(&out)?;
            let dev_acc = outcome.last_dev();
            let summary = serde_json::json!({
                "stage": stage.number(),
                "step": outcome.checkpoint.step,
                "checkpoint": out.display().to_string(),
                "dev_acc_src": dev_acc.map(|d| d.0),
                "dev_acc_tgt": dev_acc.map(|d| d.1),
            });
            print(common.json, &summary, || match dev_acc {
                Some((s, t)) => format!(
                    "stage {stage} done at step {}: dev {src_lang} {s:.1}, {tgt_lang} {t:.1}; saved {}",
                    outcome.checkpoint.step,
                    out.display()
                ),
                None => format!("stage {stage} done at step {}; saved {}", outcome.checkpoint.step, out.display()),
            })
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            mode,
            format,
        } => {
            let cp = Checkpoint::load(&checkpoint)?;
            let examples = load_examples(&data)?;
            let name = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
            let modes = match mode {
                Some(m) => vec![m],
                None => EmbeddingMode::ALL.to_vec(),
            };
            let reports = modes
                .into_iter()
                .map(|m| evaluate(&cp.model, name, &examples, format, m))
                .collect::<clicker_core::Result<Vec<_>>>()?;
            print(common.json, &reports, || {
                reports.iter().map(EvalReport::summary).collect::<Vec<_>>().join("\n")
            })
        }
        Command::Heatmap {
            common,
            checkpoint,
            data,
            id,
            out,
            format,
        } => {
            let cp = Checkpoint::load(&checkpoint)?;
            let examples = load_examples(&data)?;
            let Some(ex) = examples.iter().find(|e| e.id == id) else {
                bail!("{}: no example with id {id:?}", data.display());
            };
            let paths = export_heatmap(&cp.model, ex, format, &out)?;
            let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            print(common.json, &names, || names.join("\n"))
        }
        Command::Report {
            common,
            models,
            baseline,
            data,
            format,
        } => {
            let examples = load_examples(&data)?;
            let name = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
            let mut rows = Vec::new();
            for spec in &models {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| anyhow!("--model expects label=path, got {spec:?}"))?;
                let cp = Checkpoint::load(Path::new(path))?;
                let r = evaluate(&cp.model, name, &examples, format, EmbeddingMode::Commonsense)
                    .with_context(|| format!("evaluating {path}"))?;
                rows.push(AblationRow {
                    label: label.to_string(),
                    accuracy: r.accuracy,
                });
            }
            let baseline = baseline.unwrap_or_else(|| rows[0].label.clone());
            let table = AblationTable::new("Model", &baseline, rows)?;
            print(common.json, &table, || table.to_markdown())
        }
        Command::Pipeline { common, losses, out } => {
            let config = load_config(&common, Some(&losses))?;
            let corpus = generate_synthetic_world(&config.world)?;
            corpus.write_dir(&out.join("data"))?;
            std::fs::write(out.join("config.toml"), config.to_toml())
                .with_context(|| format!("{}", out.join("config.toml").display()))?;
            let opts = PipelineOptions {
                out_dir: Some(out.clone()),
                verbose: !common.json,
            };
            let outcome = run_pipeline(&config, &corpus, &opts)?;
            let model = &outcome.final_checkpoint().model;
            let mut reports = evaluate_split(model, "dev", &corpus.dev, InputFormat::Qa)?;
            reports.extend(evaluate_split(model, "test", &corpus.test, InputFormat::Qa)?);
            let s = summaries(&reports);
            print(common.json, &s, || {
                reports.iter().map(EvalReport::summary).collect::<Vec<_>>().join("\n")
            })
        }
    }
}
