//! The three training stages over a shared [`Checkpoint`].
//!
//! Batches are drawn from a per-epoch permutation seeded by `(seed, epoch)`,
//! so the batch for any update index can be recomputed. That is what makes a
//! resumed run replay an uninterrupted one exactly.

use crate::checkpoint::Checkpoint;
use crate::data::{Example, InputFormat, ParallelPair, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::head::{ChoiceEmbeddings, EmbeddingMode, ItemOutputs, LossWeights, Stage};
use crate::model::Model;
use crate::optim::{AdamState, OptimConfig};
use crate::tensor::{Graph, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Dev evaluation period in updates; 0 evaluates only after the last one.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: 3e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            weight_decay: 0.01,
            loss: LossWeights::default(),
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        self.optim().validate()?;
        self.loss.validate()
    }

    /// Input encoding used by the stage.
    pub fn format(&self) -> InputFormat {
        match self.stage {
            Stage::Pretrain | Stage::Differentiate => InputFormat::Statement,
            Stage::Transfer => InputFormat::Qa,
        }
    }
}

/// One logged update. Dev accuracies are present only on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub align: f64,
    pub diff: f64,
    pub nc: f64,
    pub total: f64,
    pub dev_acc_src: Option<f64>,
    pub dev_acc_tgt: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many updates in this call, leaving the stage unfinished.
    pub stop_after: Option<u64>,
    /// CSV log to append to.
    pub log_path: Option<PathBuf>,
    /// Print evaluation lines to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

impl StageOutcome {
    /// Most recent `(source, target)` dev accuracy in the log.
    pub fn last_dev(&self) -> Option<(f64, f64)> {
        self.log
            .iter()
            .rev()
            .find_map(|r| Some((r.dev_acc_src?, r.dev_acc_tgt?)))
    }
}

struct Item {
    source: Vec<TokenSequence>,
    target: Option<Vec<TokenSequence>>,
    gold: usize,
}

pub fn run_stage1(
    cp: Checkpoint,
    config: &TrainConfig,
    train: &[Example],
    dev: &[ParallelPair],
    opts: &RunOptions,
) -> Result<StageOutcome> {
    expect_stage(config, Stage::Pretrain)?;
    let format = config.format();
    let items = train
        .iter()
        .map(|ex| {
            Ok(Item {
                source: cp.model.sequences(ex, format)?,
                target: None,
                gold: ex.gold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run(cp, config, items, dev, opts)
}

pub fn run_stage2(
    cp: Checkpoint,
    config: &TrainConfig,
    pairs: &[ParallelPair],
    dev: &[ParallelPair],
    opts: &RunOptions,
) -> Result<StageOutcome> {
    expect_stage(config, Stage::Differentiate)?;
    run_paired(cp, config, pairs, dev, opts)
}

pub fn run_stage3(
    cp: Checkpoint,
    config: &TrainConfig,
    pairs: &[ParallelPair],
    dev: &[ParallelPair],
    opts: &RunOptions,
) -> Result<StageOutcome> {
    expect_stage(config, Stage::Transfer)?;
    run_paired(cp, config, pairs, dev, opts)
}

/// Dispatches on `config.stage`. Stage 1 trains on both sides of `pairs`
/// as independent examples.
pub fn run_stage(
    cp: Checkpoint,
    config: &TrainConfig,
    pairs: &[ParallelPair],
    dev: &[ParallelPair],
    opts: &RunOptions,
) -> Result<StageOutcome> {
    match config.stage {
        Stage::Pretrain => {
            let mixed: Vec<Example> = pairs
                .iter()
                .flat_map(|p| [p.source.clone(), p.target.clone()])
                .collect();
            run_stage1(cp, config, &mixed, dev, opts)
        }
        Stage::Differentiate => run_stage2(cp, config, pairs, dev, opts),
        Stage::Transfer => run_stage3(cp, config, pairs, dev, opts),
    }
}

fn expect_stage(config: &TrainConfig, stage: Stage) -> Result<()> {
    if config.stage != stage {
        return Err(Error::Config(format!(
            "stage {stage} runner called with a stage {} config",
            config.stage
        )));
    }
    Ok(())
}

fn run_paired(
    cp: Checkpoint,
    config: &TrainConfig,
    pairs: &[ParallelPair],
    dev: &[ParallelPair],
    opts: &RunOptions,
) -> Result<StageOutcome> {
    let format = config.format();
    let items = pairs
        .iter()
        .map(|p| {
            if p.source.num_choices() != p.target.num_choices() || p.source.gold != p.target.gold {
                return Err(Error::Data(crate::data::DataError::Pairing(format!(
                    "{} and {} are not aligned",
                    p.source.id, p.target.id
                ))));
            }
            Ok(Item {
                source: cp.model.sequences(&p.source, format)?,
                target: Some(cp.model.sequences(&p.target, format)?),
                gold: p.gold(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run(cp, config, items, dev, opts)
}

/// Item indices for update `t` (0-based within the stage).
pub fn batch_indices(t: u64, n: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = t / per_epoch;
    let b = (t % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    perm[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
}

/// Source and target dev accuracy (commonsense embeddings).
pub fn dev_accuracy(model: &Model, dev: &[ParallelPair], format: InputFormat) -> Result<(f64, f64)> {
    let src: Vec<Example> = dev.iter().map(|p| p.source.clone()).collect();
    let tgt: Vec<Example> = dev.iter().map(|p| p.target.clone()).collect();
    let a = evaluate(model, "dev", &src, format, EmbeddingMode::Commonsense)?;
    let b = evaluate(model, "dev", &tgt, format, EmbeddingMode::Commonsense)?;
    Ok((a.accuracy, b.accuracy))
}

fn run(mut cp: Checkpoint, config: &TrainConfig, items: Vec<Item>, dev: &[ParallelPair], opts: &RunOptions) -> Result<StageOutcome> {
    config.validate().map_err(Error::Config)?;
    if items.is_empty() {
        return Err(Error::Config(format!("stage {} training data is empty", config.stage)));
    }
    let resuming = cp.stage == Some(config.stage) && !cp.optimizer.is_fresh();
    if !resuming {
        cp.optimizer = AdamState::new(&cp.model.store);
    }
    if cp.optimizer.t > config.total_steps {
        return Err(Error::Config(format!(
            "checkpoint is at stage step {} but total_steps is {}",
            cp.optimizer.t, config.total_steps
        )));
    }
    cp.train = Some(serde_json::to_value(config).expect("config serializes"));
    let optim = config.optim();
    let format = config.format();
    let mut log = Vec::new();
    let mut writer = match &opts.log_path {
        Some(p) => Some(LogWriter::open(p)?),
        None => None,
    };
    let mut done = 0u64;
    while cp.optimizer.t < config.total_steps && opts.stop_after.is_none_or(|s| done < s) {
        let t = cp.optimizer.t;
        let batch: Vec<&Item> = batch_indices(t, items.len(), config.batch_size, config.seed)
            .into_iter()
            .map(|i| &items[i])
            .collect();
        let global = cp.step + 1;
        let (ce, align, diff, nc, total) = train_step(&mut cp.model, batch, config).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
                step: global,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let lr = match cp.optimizer.step(&mut cp.model.store, &optim) {
            Ok(lr) => lr,
            Err(Error::Diverged { detail, .. }) => return Err(Error::Diverged { step: global, detail }),
            Err(e) => return Err(e),
        };
        cp.step = global;
        cp.stage = Some(config.stage);
        done += 1;
        let t = cp.optimizer.t;
        let eval_now = !dev.is_empty()
            && ((config.eval_every > 0 && t % config.eval_every == 0) || t == config.total_steps);
        let (dev_acc_src, dev_acc_tgt) = if eval_now {
            let (s, g) = dev_accuracy(&cp.model, dev, format)?;
            if opts.verbose {
                eprintln!(
                    "stage {} step {t}/{}: loss {total:.4} dev src {s:.1} tgt {g:.1}",
                    config.stage, config.total_steps
                );
            }
            (Some(s), Some(g))
        } else {
            (None, None)
        };
        let row = LogRow {
            step: global,
            lr,
            ce,
            align,
            diff,
            nc,
            total,
            dev_acc_src,
            dev_acc_tgt,
        };
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        log.push(row);
    }
    if cp.optimizer.t == config.total_steps {
        cp.stage = Some(config.stage);
    }
    Ok(StageOutcome { checkpoint: cp, log })
}

/// Forward and backward for one batch; gradients are left in the store.
fn train_step(model: &mut Model, batch: Vec<&Item>, config: &TrainConfig) -> Result<(f64, f64, f64, f64, f64)> {
    let mut seqs = Vec::new();
    for item in &batch {
        seqs.extend(item.source.iter().cloned());
        if let Some(t) = &item.target {
            seqs.extend(t.iter().cloned());
        }
    }
    let mut g = Graph::new();
    let (_, out) = model.forward(&mut g, &seqs)?;
    let mut outputs = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for item in &batch {
        let n = item.source.len();
        let source = ChoiceEmbeddings::slice(&mut g, &out, offset, n)?;
        offset += n;
        let target = match &item.target {
            Some(t) => {
                let e = ChoiceEmbeddings::slice(&mut g, &out, offset, t.len())?;
                offset += t.len();
                Some(e)
            }
            None => None,
        };
        outputs.push(ItemOutputs {
            source,
            target,
            gold: item.gold,
        });
    }
    let loss = model
        .head
        .joint_loss(&mut g, &model.store, &outputs, &config.loss, config.stage)?;
    let total = g.scalar_value(loss.total);
    model.store.zero_grad();
    g.backward_into(loss.total, &mut model.store)?;
    Ok((loss.ce, loss.align, loss.diff, loss.nc, total))
}

struct LogWriter {
    path: PathBuf,
    inner: csv::Writer<std::fs::File>,
}

impl LogWriter {
    fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        self.inner.serialize(row).map_err(|e| Error::csv(&self.path, e))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a training log written by a run.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| Error::csv(path, e))
}
