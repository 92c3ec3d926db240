use super::vocab::{Vocab, CLS, CLS_Q, PAD, SEP};
use super::DataError;
use serde::{Deserialize, Serialize};

/// Role of each position in an encoded sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Special,
    /// Question words, or every word of a statement-form input.
    Question,
    Answer,
    Pad,
}

/// Encoded input: `[CLS] … [SEP]`, padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions; padding is always a trailing block.
    pub fn active_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    /// Copy with the padding tail removed.
    pub fn trimmed(&self) -> Self {
        let n = self.active_len();
        Self {
            ids: self.ids[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
        }
    }

    /// Positions of the answer span, between `[CLS_Q]` and the final `[SEP]`.
    pub fn answer_span(&self) -> std::ops::Range<usize> {
        let first = self.segments.iter().position(|s| *s == Segment::Answer);
        match first {
            Some(start) => {
                let len = self.segments[start..]
                    .iter()
                    .take_while(|s| **s == Segment::Answer)
                    .count();
                start..start + len
            }
            None => 0..0,
        }
    }

    /// Token strings of the non-pad positions.
    pub fn decode(&self, vocab: &Vocab) -> Vec<String> {
        self.ids[..self.active_len()]
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
            .collect()
    }

    fn pad_to(mut self, max_len: usize) -> Self {
        while self.ids.len() < max_len {
            self.ids.push(PAD);
            self.segments.push(Segment::Pad);
            self.mask.push(false);
        }
        self
    }

    fn push(&mut self, id: u32, seg: Segment) {
        self.ids.push(id);
        self.segments.push(seg);
        self.mask.push(true);
    }
}

/// `[CLS] w1 … wk [SEP]`, truncated to fit `max_len`, then padded.
pub fn encode_statement(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence, DataError> {
    if max_len < 3 {
        return Err(DataError::Encode(format!(
            "max_len {max_len} cannot hold a statement"
        )));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(DataError::Encode("statement is empty".into()));
    }
    let mut seq = TokenSequence {
        ids: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        mask: Vec::with_capacity(max_len),
    };
    seq.push(CLS, Segment::Special);
    for w in words.iter().take(max_len - 2) {
        seq.push(vocab.id(w), Segment::Question);
    }
    seq.push(SEP, Segment::Special);
    Ok(seq.pad_to(max_len))
}

/// `[CLS] q1 … qm [SEP] [CLS_Q] a1 … an [SEP]`, then padded.
///
/// When too long, the question is truncated first, then the answer. At
/// least one answer token must fit.
pub fn encode_qa(
    question: &str,
    answer: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence, DataError> {
    let q: Vec<&str> = question.split_whitespace().collect();
    let a: Vec<&str> = answer.split_whitespace().collect();
    if a.is_empty() {
        return Err(DataError::Encode("answer is empty".into()));
    }
    if max_len < 5 {
        return Err(DataError::Encode(format!(
            "max_len {max_len} cannot fit one answer token"
        )));
    }
    let budget = max_len - 4;
    let n_answer = a.len().min(budget);
    let n_question = q.len().min(budget - n_answer);
    let mut seq = TokenSequence {
        ids: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        mask: Vec::with_capacity(max_len),
    };
    seq.push(CLS, Segment::Special);
    for w in &q[..n_question] {
        seq.push(vocab.id(w), Segment::Question);
    }
    seq.push(SEP, Segment::Special);
    seq.push(CLS_Q, Segment::Special);
    for w in &a[..n_answer] {
        seq.push(vocab.id(w), Segment::Answer);
    }
    seq.push(SEP, Segment::Special);
    Ok(seq.pad_to(max_len))
}
