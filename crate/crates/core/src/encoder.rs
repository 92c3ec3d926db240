//! Pre-norm transformer encoder over stacked token sequences.

use crate::data::TokenSequence;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer-norm epsilon. Small enough that normalized rows have unit variance
/// to within 1e-6 at the activation scales seen here.
pub const LN_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Kept for config compatibility; only 0 is supported.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(format!("encoder.{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "encoder.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.dropout_rate != 0.0 {
            return Err("encoder.dropout_rate must be 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Handles to the encoder's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Uniform in `(-bound, bound)`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("finite")
}

/// Stacked encoder output for a batch of sequences.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// All positions of all sequences, one row each.
    pub states: Var,
    /// `(first row, full length)` of each sequence.
    pub segments: Vec<(usize, usize)>,
    /// `(first row, non-pad length)` of each sequence.
    pub active: Vec<(usize, usize)>,
    /// Per-row flag: `false` for padding.
    pub key_valid: Vec<bool>,
}

impl EncoderWeights {
    /// Registers freshly initialized encoder parameters in `store`.
    ///
    /// Matrices and embeddings are uniform in ±1/sqrt(d_model); biases are
    /// zero; layer-norm gains are one.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let tok_emb = store.add("enc.tok_emb", uniform(&mut rng, vec![config.vocab_size, d], bound), true);
        let pos_emb = store.add("enc.pos_emb", uniform(&mut rng, vec![config.max_len, d], bound), true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut mat = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
                store.add(format!("enc.l{l}.{name}"), uniform(&mut rng, vec![r, c], bound), true)
            };
            let wq = mat(store, "wq", d, d);
            let wk = mat(store, "wk", d, d);
            let wv = mat(store, "wv", d, d);
            let wo = mat(store, "wo", d, d);
            let w1 = mat(store, "w1", d, config.d_ff);
            let w2 = mat(store, "w2", config.d_ff, d);
            let zeros = |store: &mut ParamStore, name: &str, n: usize| {
                store.add(format!("enc.l{l}.{name}"), Tensor::zeros(vec![n]), false)
            };
            let bq = zeros(store, "bq", d);
            let bk = zeros(store, "bk", d);
            let bv = zeros(store, "bv", d);
            let bo = zeros(store, "bo", d);
            let b1 = zeros(store, "b1", config.d_ff);
            let b2 = zeros(store, "b2", d);
            let ln1_b = zeros(store, "ln1_b", d);
            let ln2_b = zeros(store, "ln2_b", d);
            let ln1_g = store.add(format!("enc.l{l}.ln1_g"), Tensor::filled(vec![d], 1.0), false);
            let ln2_g = store.add(format!("enc.l{l}.ln2_g"), Tensor::filled(vec![d], 1.0), false);
            layers.push(LayerParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = store.add("enc.lnf_g", Tensor::filled(vec![d], 1.0), false);
        let lnf_b = store.add("enc.lnf_b", Tensor::zeros(vec![d]), false);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    /// Token-embedding parameter, for diagnostics.
    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Final layer-norm `(gain, bias)` parameters.
    pub fn final_norm(&self) -> (ParamId, ParamId) {
        (self.lnf_g, self.lnf_b)
    }

    /// Encodes every sequence in one stacked pass. Each sequence attends
    /// only within itself and only to its non-pad positions.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seqs: &[TokenSequence]) -> Result<EncodedBatch> {
        let (x, batch) = self.embed(g, store, seqs)?;
        let h = self.encode_layers(g, store, x, &batch)?;
        let (gain, bias) = (g.param(store, self.lnf_g), g.param(store, self.lnf_b));
        let states = g.layer_norm(h, gain, bias, LN_EPS)?;
        Ok(EncodedBatch { states, ..batch })
    }

    /// Same as [`encode`](Self::encode) but stops before the final layer
    /// norm's gain and bias: rows are the normalized pre-affine values.
    pub fn encode_normalized(&self, g: &mut Graph, store: &ParamStore, seqs: &[TokenSequence]) -> Result<EncodedBatch> {
        let (x, batch) = self.embed(g, store, seqs)?;
        let h = self.encode_layers(g, store, x, &batch)?;
        let d = self.config.d_model;
        let one = g.constant(Tensor::filled(vec![d], 1.0));
        let zero = g.constant(Tensor::zeros(vec![d]));
        let states = g.layer_norm(h, one, zero, LN_EPS)?;
        Ok(EncodedBatch { states, ..batch })
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, seqs: &[TokenSequence]) -> Result<(Var, EncodedBatch)> {
        if seqs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "encode",
                detail: "empty batch".into(),
            });
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut active = Vec::with_capacity(seqs.len());
        let mut key_valid = Vec::new();
        for seq in seqs {
            if seq.is_empty() || seq.len() > self.config.max_len {
                return Err(TensorError::InvalidArgument {
                    op: "encode",
                    detail: format!("sequence length {} outside 1..={}", seq.len(), self.config.max_len),
                });
            }
            if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(TensorError::InvalidArgument {
                    op: "encode",
                    detail: format!("token id {bad} out of range for vocab of {}", self.config.vocab_size),
                });
            }
            segments.push((ids.len(), seq.len()));
            active.push((ids.len(), seq.active_len()));
            ids.extend(seq.ids.iter().map(|&i| i as usize));
            positions.extend(0..seq.len());
            key_valid.extend_from_slice(&seq.mask);
        }
        let tok_table = g.param(store, self.tok_emb);
        let pos_table = g.param(store, self.pos_emb);
        let tok = g.gather_rows(tok_table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let batch = EncodedBatch {
            states: x,
            segments,
            active,
            key_valid,
        };
        Ok((x, batch))
    }

    fn encode_layers(&self, g: &mut Graph, store: &ParamStore, mut h: Var, batch: &EncodedBatch) -> Result<Var> {
        for layer in &self.layers {
            let p = |g: &mut Graph, id: ParamId| g.param(store, id);
            let (g1, b1) = (p(g, layer.ln1_g), p(g, layer.ln1_b));
            let a = g.layer_norm(h, g1, b1, LN_EPS)?;
            let proj = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var> {
                let (w, b) = (g.param(store, w), g.param(store, b));
                let y = g.matmul(a, w)?;
                g.add_row(y, b)
            };
            let q = proj(g, layer.wq, layer.bq)?;
            let k = proj(g, layer.wk, layer.bk)?;
            let v = proj(g, layer.wv, layer.bv)?;
            let att = g.attention(q, k, v, self.config.n_heads, &batch.segments, &batch.key_valid)?;
            let (wo, bo) = (p(g, layer.wo), p(g, layer.bo));
            let o = g.matmul(att, wo)?;
            let o = g.add_row(o, bo)?;
            h = g.add(h, o)?;

            let (g2, b2) = (p(g, layer.ln2_g), p(g, layer.ln2_b));
            let b = g.layer_norm(h, g2, b2, LN_EPS)?;
            let (w1, bb1, w2, bb2) = (p(g, layer.w1), p(g, layer.b1), p(g, layer.w2), p(g, layer.b2));
            let f = g.matmul(b, w1)?;
            let f = g.add_row(f, bb1)?;
            let f = g.relu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, bb2)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}
