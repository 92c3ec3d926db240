//! Vocabulary, sequence encoding, dataset files and the synthetic corpus.

mod example;
mod sequence;
pub mod synth;
pub mod vocab;

pub use example::{load_jsonl, pair_by_id, parse_jsonl, write_jsonl, Example, ParallelPair, Schema};
pub use sequence::{encode_qa, encode_statement, Segment, TokenSequence};
pub use synth::{generate_synthetic_world, BilingualSplit, SynthWorldConfig, SyntheticCorpus, World};
pub use vocab::Vocab;

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("{path}, line {line}: {reason}")]
    File {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("encoding: {0}")]
    Encode(String),
    #[error("vocab: {0}")]
    Vocab(String),
    #[error("config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// How an example is turned into one sequence per choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// Question and choice concatenated into one utterance.
    Statement,
    /// Question and answer separated by `[SEP] [CLS_Q]`.
    Qa,
}

impl Example {
    /// Encodes every choice of this example.
    pub fn encode(
        &self,
        format: InputFormat,
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Vec<TokenSequence>, DataError> {
        (0..self.num_choices())
            .map(|j| match format {
                InputFormat::Statement => encode_statement(&self.statement(j), vocab, max_len),
                InputFormat::Qa => encode_qa(&self.question, &self.choices[j], vocab, max_len),
            })
            .collect()
    }
}
