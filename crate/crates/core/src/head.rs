//! Attention-gated head: splits encoder states into a commonsense embedding
//! and a complementary non-commonsense embedding, scores choices, and
//! defines the cross-lingual similarity objectives.
//!
//! For a sequence with states `o_t` and gates `α_t`:
//!
//! ```text
//! p_c  = Σ α_t o_t / Σ α_t            X  = FFN_c(p_c)
//! p_nc = Σ (1-α_t) o_t / Σ (1-α_t)    X̃ = FFN_nc(p_nc)
//! ```

use crate::encoder::{uniform, EncodedBatch};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How token scores become gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    /// Independent per-token sigmoid; the complement is `1 - α_t`.
    #[default]
    Sigmoid,
    /// Softmax over the tokens of a sequence; the complement pool is
    /// renormalized, which makes it weight `(1 - α_t) / (k - 1)`.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Embedding width; 0 means "same as d_model".
    pub d_embed: usize,
    pub gate: GateKind,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_embed: 0,
            gate: GateKind::Sigmoid,
            seed: 1,
        }
    }
}

/// Which embedding feeds the choice classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    Commonsense,
    NonCommonsense,
    /// Elementwise sum `X + X̃`.
    Both,
}

impl EmbeddingMode {
    pub const ALL: [EmbeddingMode; 3] = [Self::Commonsense, Self::NonCommonsense, Self::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Commonsense => "commonsense",
            Self::NonCommonsense => "non-commonsense",
            Self::Both => "both",
        }
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected commonsense, non-commonsense or both)"))
    }
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            w1: store.add(format!("{prefix}.w1"), uniform(rng, vec![d_in, d_in], bound), true),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d_in]), false),
            w2: store.add(format!("{prefix}.w2"), uniform(rng, vec![d_in, d_out], bound), true),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![d_out]), false),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Handles to the head's parameters inside a [`ParamStore`]. The two
/// projections never share parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub gate: GateKind,
    pub d_embed: usize,
    gate_w: ParamId,
    gate_b: ParamId,
    ffn_c: Ffn,
    ffn_nc: Ffn,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Head results for a batch of sequences, one row per sequence.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// Gate per stacked row (`rows × 1`); only rows inside `active` are meaningful.
    pub gates: Var,
    /// Commonsense embeddings, `sequences × d_embed`.
    pub x: Var,
    /// Non-commonsense embeddings, `sequences × d_embed`.
    pub x_nc: Var,
    pub active: Vec<(usize, usize)>,
}

impl HeadOutputs {
    pub fn embeddings(&self, mode: EmbeddingMode, g: &mut Graph) -> Result<Var> {
        match mode {
            EmbeddingMode::Commonsense => Ok(self.x),
            EmbeddingMode::NonCommonsense => Ok(self.x_nc),
            EmbeddingMode::Both => g.add(self.x, self.x_nc),
        }
    }

    /// Gate values on the non-pad tokens of sequence `s`.
    pub fn gate_values(&self, g: &Graph, s: usize) -> Vec<f64> {
        let (start, len) = self.active[s];
        g.value(self.gates).data()[start..start + len].to_vec()
    }
}

impl HeadWeights {
    pub fn init(config: &HeadConfig, d_model: usize, store: &mut ParamStore) -> Self {
        let d_embed = if config.d_embed == 0 { d_model } else { config.d_embed };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let gate_w = store.add("head.gate_w", uniform(&mut rng, vec![d_model, 1], bound), true);
        let gate_b = store.add("head.gate_b", Tensor::zeros(vec![1]), false);
        let ffn_c = Ffn::init(store, &mut rng, "head.ffn_c", d_model, d_embed);
        let ffn_nc = Ffn::init(store, &mut rng, "head.ffn_nc", d_model, d_embed);
        let cls_w = store.add(
            "head.cls_w",
            uniform(&mut rng, vec![d_embed, 1], 1.0 / (d_embed as f64).sqrt()),
            true,
        );
        let cls_b = store.add("head.cls_b", Tensor::zeros(vec![1]), false);
        Self {
            gate: config.gate,
            d_embed,
            gate_w,
            gate_b,
            ffn_c,
            ffn_nc,
            cls_w,
            cls_b,
        }
    }

    pub fn gate_params(&self) -> (ParamId, ParamId) {
        (self.gate_w, self.gate_b)
    }

    pub fn classifier_params(&self) -> (ParamId, ParamId) {
        (self.cls_w, self.cls_b)
    }

    /// Token gates over every stacked row, normalized within `active`
    /// ranges in softmax mode. Errors if some sequence has no real token.
    pub fn attention_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        active: &[(usize, usize)],
    ) -> Result<Var> {
        if let Some(i) = active.iter().position(|&(_, len)| len == 0) {
            return Err(TensorError::InvalidArgument {
                op: "attention_gates",
                detail: format!("sequence {i} has no non-pad tokens"),
            });
        }
        let (w, b) = (g.param(store, self.gate_w), g.param(store, self.gate_b));
        let scores = g.matmul(states, w)?;
        let scores = g.add_row(scores, b)?;
        match self.gate {
            GateKind::Sigmoid => g.sigmoid(scores),
            GateKind::Softmax => g.segment_softmax(scores, active),
        }
    }

    /// Complementary pooling followed by the two projections.
    pub fn extract(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        active: &[(usize, usize)],
    ) -> Result<HeadOutputs> {
        let gates = self.attention_gates(g, store, states, active)?;
        let comp = g.complement(gates)?;
        let p_c = g.segment_weighted_mean(states, gates, active)?;
        let p_nc = g.segment_weighted_mean(states, comp, active)?;
        let x = self.ffn_c.forward(g, store, p_c)?;
        let x_nc = self.ffn_nc.forward(g, store, p_nc)?;
        Ok(HeadOutputs {
            gates,
            x,
            x_nc,
            active: active.to_vec(),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &EncodedBatch) -> Result<HeadOutputs> {
        self.extract(g, store, batch.states, &batch.active)
    }

    /// `logit[j] = w_cls · X[j] + b` for every row of `embeddings`; result is `rows × 1`.
    pub fn choice_logits(&self, g: &mut Graph, store: &ParamStore, embeddings: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.cls_w), g.param(store, self.cls_b));
        let l = g.matmul(embeddings, w)?;
        g.add_row(l, b)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

fn check_gold(op: &'static str, n: usize, m: usize, gold: usize) -> Result<()> {
    if n != m || n < 2 {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("choice lists of length {n} and {m}; need equal lengths of at least 2"),
        });
    }
    if gold >= n {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("gold {gold} out of range for {n} choices"),
        });
    }
    Ok(())
}

/// `1 - cos(X_src[j*], X_tgt[j*])`, in `[0, 2]`.
pub fn loss_align(g: &mut Graph, src_gold: Var, tgt_gold: Var) -> Result<Var> {
    let c = g.cosine(src_gold, tgt_gold)?;
    g.complement(c)
}

/// `Σ_{j≠j*} max(0, cos(X_src[j*], X_src[j])) + max(0, cos(X_tgt[j*], X_tgt[j]))`,
/// in `[0, 2(|C|-1)]`.
pub fn loss_diff(g: &mut Graph, src: &[Var], tgt: &[Var], gold: usize) -> Result<Var> {
    check_gold("loss_diff", src.len(), tgt.len(), gold)?;
    let mut terms = Vec::with_capacity(2 * (src.len() - 1));
    for list in [src, tgt] {
        for (j, &x) in list.iter().enumerate() {
            if j != gold {
                let c = g.cosine(list[gold], x)?;
                terms.push(g.relu(c)?);
            }
        }
    }
    g.add_all(&terms)
}

/// `Σ_{j≠j*} (1 - cos(X̃_src[j*], X̃_src[j])) + Σ_{j≠j*} (1 - cos(X̃_tgt[j*], X̃_tgt[j]))
///  + (1 - cos(X̃_src[j*], X̃_tgt[j*]))`, in `[0, 2(2|C|-1)]`.
pub fn loss_nc(g: &mut Graph, src: &[Var], tgt: &[Var], gold: usize) -> Result<Var> {
    check_gold("loss_nc", src.len(), tgt.len(), gold)?;
    let mut terms = Vec::with_capacity(2 * src.len() - 1);
    for list in [src, tgt] {
        for (j, &x) in list.iter().enumerate() {
            if j != gold {
                let c = g.cosine(list[gold], x)?;
                terms.push(g.complement(c)?);
            }
        }
    }
    let c = g.cosine(src[gold], tgt[gold])?;
    terms.push(g.complement(c)?);
    g.add_all(&terms)
}

/// Training stage. Stage 1 uses CE only; stages 2 and 3 add the similarity
/// losses, with CE on the target language (2) or on both languages (3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Pretrain,
    Differentiate,
    Transfer,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Self::Pretrain => 1,
            Self::Differentiate => 2,
            Self::Transfer => 3,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            1 => Ok(Self::Pretrain),
            2 => Ok(Self::Differentiate),
            3 => Ok(Self::Transfer),
            _ => Err(format!("unknown stage {n} (expected 1, 2 or 3)")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub align: f64,
    pub diff: f64,
    pub nc: f64,
}

impl Default for LossWeights {
    /// Every term enabled with weight 1.
    fn default() -> Self {
        Self {
            ce: 1.0,
            align: 1.0,
            diff: 1.0,
            nc: 1.0,
        }
    }
}

impl LossWeights {
    pub const PRESETS: [&'static str; 5] = ["base", "align", "align+diff", "nc", "align+nc"];

    /// Ablation rows: every enabled term has weight 1.
    pub fn preset(name: &str) -> Option<Self> {
        let (align, diff, nc) = match name {
            "base" => (0.0, 0.0, 0.0),
            "align" => (1.0, 0.0, 0.0),
            "align+diff" => (1.0, 1.0, 0.0),
            "nc" => (0.0, 0.0, 1.0),
            "align+nc" => (1.0, 0.0, 1.0),
            _ => return None,
        };
        Some(Self {
            ce: 1.0,
            align,
            diff,
            nc,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.ce, self.align, self.diff, self.nc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(format!("loss weights must be finite and non-negative: {self:?}"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

/// Embeddings of every choice of one item in one language (`|C| × d_embed`).
#[derive(Clone, Copy, Debug)]
pub struct ChoiceEmbeddings {
    pub x: Var,
    pub x_nc: Var,
}

impl ChoiceEmbeddings {
    /// Rows `start .. start + n` of a head output.
    pub fn slice(g: &mut Graph, out: &HeadOutputs, start: usize, n: usize) -> Result<Self> {
        Ok(Self {
            x: g.slice_rows(out.x, start, n)?,
            x_nc: g.slice_rows(out.x_nc, start, n)?,
        })
    }

    fn rows(self, g: &mut Graph, v: Var) -> Result<Vec<Var>> {
        (0..g.value(v).rows()).map(|j| g.row(v, j)).collect()
    }
}

/// One training item: the source-language choices, and the target-language
/// twin for stages 2 and 3.
#[derive(Clone, Copy, Debug)]
pub struct ItemOutputs {
    pub source: ChoiceEmbeddings,
    pub target: Option<ChoiceEmbeddings>,
    pub gold: usize,
}

/// Batch-averaged loss components and the weighted total to differentiate.
/// Disabled components are not computed and report 0.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub ce: f64,
    pub align: f64,
    pub diff: f64,
    pub nc: f64,
}

impl HeadWeights {
    fn ce(&self, g: &mut Graph, store: &ParamStore, x: Var, gold: usize) -> Result<Var> {
        let logits = self.choice_logits(g, store, x)?;
        g.cross_entropy(logits, gold)
    }

    /// Weighted objective for a batch; each term is averaged over items.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[ItemOutputs],
        weights: &LossWeights,
        stage: Stage,
    ) -> Result<LossBreakdown> {
        if items.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "joint_loss",
                detail: "empty batch".into(),
            });
        }
        let paired = stage != Stage::Pretrain;
        let mut ce = Vec::new();
        let mut align = Vec::new();
        let mut diff = Vec::new();
        let mut nc = Vec::new();
        for item in items {
            let target = match (paired, item.target) {
                (false, _) => None,
                (true, Some(t)) => Some(t),
                (true, None) => {
                    return Err(TensorError::InvalidArgument {
                        op: "joint_loss",
                        detail: format!("stage {stage} needs a target-language twin for every item"),
                    })
                }
            };
            let Some(tgt) = target else {
                if weights.ce != 0.0 {
                    ce.push(self.ce(g, store, item.source.x, item.gold)?);
                }
                continue;
            };
            let src = item.source;
            if weights.ce != 0.0 {
                let t = self.ce(g, store, tgt.x, item.gold)?;
                if stage == Stage::Transfer {
                    let s = self.ce(g, store, src.x, item.gold)?;
                    ce.push(g.add(s, t)?);
                } else {
                    ce.push(t);
                }
            }
            if weights.align != 0.0 || weights.diff != 0.0 {
                let xs = src.rows(g, src.x)?;
                let xt = tgt.rows(g, tgt.x)?;
                if weights.align != 0.0 {
                    align.push(loss_align(g, xs[item.gold], xt[item.gold])?);
                }
                if weights.diff != 0.0 {
                    diff.push(loss_diff(g, &xs, &xt, item.gold)?);
                }
            }
            if weights.nc != 0.0 {
                let xs = src.rows(g, src.x_nc)?;
                let xt = tgt.rows(g, tgt.x_nc)?;
                nc.push(loss_nc(g, &xs, &xt, item.gold)?);
            }
        }
        let n = items.len() as f64;
        let mut total = Vec::new();
        let mut mean = |g: &mut Graph, terms: &[Var], w: f64| -> Result<f64> {
            if terms.is_empty() {
                return Ok(0.0);
            }
            let s = g.add_all(terms)?;
            let m = g.scale(s, 1.0 / n)?;
            total.push(g.scale(m, w)?);
            Ok(g.scalar_value(m))
        };
        let ce = mean(g, &ce, weights.ce)?;
        let align = mean(g, &align, weights.align)?;
        let diff = mean(g, &diff, weights.diff)?;
        let nc = mean(g, &nc, weights.nc)?;
        let total = if total.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.add_all(&total)?
        };
        Ok(LossBreakdown {
            total,
            ce,
            align,
            diff,
            nc,
        })
    }
}
