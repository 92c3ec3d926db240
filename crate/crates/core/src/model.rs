//! Encoder, head and vocabulary bundled over one parameter store.

use crate::data::{Example, InputFormat, TokenSequence, Vocab};
use crate::encoder::{EncodedBatch, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::head::{EmbeddingMode, HeadConfig, HeadOutputs, HeadWeights};
use crate::tensor::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub head: HeadWeights,
}

impl Model {
    /// Fresh model; `encoder.vocab_size` is taken from `vocab`.
    pub fn new(encoder: EncoderConfig, head: HeadConfig, vocab: Vocab) -> Result<Self> {
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder
        };
        let mut store = ParamStore::new();
        let enc = EncoderWeights::init(&encoder, &mut store).map_err(Error::Config)?;
        let hw = HeadWeights::init(&head, encoder.d_model, &mut store);
        Ok(Self {
            config: ModelConfig { encoder, head },
            vocab,
            store,
            encoder: enc,
            head: hw,
        })
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    /// One trimmed sequence per choice.
    pub fn sequences(&self, ex: &Example, format: InputFormat) -> Result<Vec<TokenSequence>> {
        let seqs = ex.encode(format, &self.vocab, self.max_len())?;
        Ok(seqs.iter().map(TokenSequence::trimmed).collect())
    }

    pub fn forward(&self, g: &mut Graph, seqs: &[TokenSequence]) -> Result<(EncodedBatch, HeadOutputs)> {
        let batch = self.encoder.encode(g, &self.store, seqs)?;
        let out = self.head.forward(g, &self.store, &batch)?;
        Ok((batch, out))
    }

    /// Choice logits for every sequence of a forward pass, `sequences × 1`.
    pub fn logits(&self, g: &mut Graph, out: &HeadOutputs, mode: EmbeddingMode) -> Result<Var> {
        let e = out.embeddings(mode, g)?;
        Ok(self.head.choice_logits(g, &self.store, e)?)
    }
}
