//! Whole-run configuration and the three-stage pipeline on a synthetic world.

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic_world, InputFormat, SynthWorldConfig, SyntheticCorpus};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::head::{EmbeddingMode, HeadConfig, LossWeights, Stage};
use crate::model::Model;
use crate::trainer::{run_stage, LogRow, RunOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub world: SynthWorldConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let stage = |stage, total_steps| TrainConfig {
            stage,
            total_steps,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        Self {
            world: SynthWorldConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            stage1: stage(Stage::Pretrain, 1500),
            stage2: stage(Stage::Differentiate, 600),
            stage3: stage(Stage::Transfer, 800),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stages(&self) -> [&TrainConfig; 3] {
        [&self.stage1, &self.stage2, &self.stage3]
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let probe = EncoderConfig {
            vocab_size: 1,
            ..self.encoder.clone()
        };
        probe.validate().map_err(Error::Config)?;
        for (expected, cfg) in [Stage::Pretrain, Stage::Differentiate, Stage::Transfer]
            .into_iter()
            .zip(self.stages())
        {
            if cfg.stage != expected {
                return Err(Error::Config(format!(
                    "stage{} section declares stage {}",
                    expected.number(),
                    cfg.stage
                )));
            }
            cfg.validate()
                .map_err(|e| Error::Config(format!("stage{}: {e}", expected.number())))?;
        }
        Ok(())
    }

    /// Applies one seed to the world, the initialization and every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.encoder.seed = seed;
        self.head.seed = seed.wrapping_add(1);
        for (k, s) in [&mut self.stage1, &mut self.stage2, &mut self.stage3].into_iter().enumerate() {
            s.seed = seed.wrapping_add(10 + k as u64);
        }
        self
    }

    /// Same config with the given loss weights in stages 2 and 3.
    pub fn with_losses(mut self, loss: LossWeights) -> Self {
        self.stage2.loss = loss;
        self.stage3.loss = loss;
        self
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// Checkpoint after each stage.
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<Vec<LogRow>>,
}

impl PipelineOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("three stages")
    }
}

/// Where a pipeline run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Directory for `stage{n}.ckpt` files and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Stage 1 on mixed-language `train`, stage 2 on `parallel` pairs, stage 3
/// on `train` pairs in QA form; dev accuracy is tracked on `dev` pairs.
pub fn run_pipeline(config: &PipelineConfig, corpus: &SyntheticCorpus, opts: &PipelineOptions) -> Result<PipelineOutcome> {
    config.validate()?;
    let model = Model::new(config.encoder.clone(), config.head.clone(), corpus.vocab())?;
    let mut cp = Checkpoint::fresh(model);
    let dev = corpus.dev.pairs();
    let data = [corpus.train.pairs(), corpus.parallel.pairs(), corpus.train.pairs()];
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let run_opts = RunOptions {
        stop_after: None,
        log_path: opts.out_dir.as_ref().map(|d| d.join("train_log.csv")),
        verbose: opts.verbose,
    };
    let mut checkpoints = Vec::new();
    let mut logs = Vec::new();
    for (cfg, pairs) in config.stages().into_iter().zip(&data) {
        let out = run_stage(cp, cfg, pairs, &dev, &run_opts)?;
        if let Some(dir) = &opts.out_dir {
            out.checkpoint
                .save(&dir.join(format!("stage{}.ckpt", cfg.stage.number())))?;
        }
        cp = out.checkpoint.clone();
        checkpoints.push(out.checkpoint);
        logs.push(out.log);
    }
    Ok(PipelineOutcome { checkpoints, logs })
}

/// Generates the world and runs the pipeline.
pub fn run_synthetic(config: &PipelineConfig, opts: &PipelineOptions) -> Result<(SyntheticCorpus, PipelineOutcome)> {
    let corpus = generate_synthetic_world(&config.world)?;
    let out = run_pipeline(config, &corpus, opts)?;
    Ok((corpus, out))
}

/// Source and target reports for every classifier-input mode on a split.
pub fn evaluate_split(
    model: &Model,
    name: &str,
    split: &crate::data::BilingualSplit,
    format: InputFormat,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for mode in EmbeddingMode::ALL {
        for examples in [&split.source, &split.target] {
            out.push(evaluate(model, name, examples, format, mode)?);
        }
    }
    Ok(out)
}
