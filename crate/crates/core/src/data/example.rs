use super::DataError;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// One multiple-choice item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub lang: String,
    /// May be empty for statement-completion items.
    pub question: String,
    pub choices: Vec<String>,
    #[serde(rename = "label")]
    pub gold: usize,
}

impl Example {
    pub fn validate(&self) -> Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("needs at least 2 choices, got {}", self.choices.len()));
        }
        if self.gold >= self.choices.len() {
            return Err(format!(
                "label {} out of range for {} choices",
                self.gold,
                self.choices.len()
            ));
        }
        if let Some(i) = self.choices.iter().position(|c| c.trim().is_empty()) {
            return Err(format!("choice {i} is empty"));
        }
        Ok(())
    }

    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    /// Statement-form text for choice `j`: question followed by the choice.
    pub fn statement(&self, j: usize) -> String {
        if self.question.trim().is_empty() {
            self.choices[j].clone()
        } else {
            format!("{} {}", self.question, self.choices[j])
        }
    }
}

/// The same item in the source and target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Example,
    pub target: Example,
}

impl ParallelPair {
    pub fn new(source: Example, target: Example) -> Result<Self, DataError> {
        if source.num_choices() != target.num_choices() {
            return Err(DataError::Pairing(format!(
                "{}: {} vs {} choices",
                source.id,
                source.num_choices(),
                target.num_choices()
            )));
        }
        if source.gold != target.gold {
            return Err(DataError::Pairing(format!(
                "{}: gold {} vs {}",
                source.id, source.gold, target.gold
            )));
        }
        Ok(Self { source, target })
    }

    pub fn gold(&self) -> usize {
        self.source.gold
    }

    pub fn num_choices(&self) -> usize {
        self.source.num_choices()
    }
}

/// Constraints applied while loading a file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Schema {
    /// When set, every line must carry exactly this many choices.
    pub num_choices: Option<usize>,
}

/// Parses JSON Lines text. Blank lines are not allowed; every line is
/// validated and errors carry the 1-based line number.
pub fn parse_jsonl(text: &str, schema: Schema) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |reason: String| DataError::Line {
            line: line_no,
            reason,
        };
        if line.trim().is_empty() {
            // A trailing newline yields no extra line from `lines()`; an
            // interior blank line is malformed input.
            return Err(bad("blank line".into()));
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        ex.validate().map_err(bad)?;
        if let Some(n) = schema.num_choices {
            if ex.num_choices() != n {
                return Err(bad(format!(
                    "expected {n} choices, got {}",
                    ex.num_choices()
                )));
            }
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, schema: Schema) -> Result<Vec<Example>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_jsonl(&text, schema).map_err(|e| match e {
        DataError::Line { line, reason } => DataError::File {
            path: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Joins two single-language lists by id, in `source` order. Every id must
/// have a counterpart.
pub fn pair_by_id(source: &[Example], target: &[Example]) -> Result<Vec<ParallelPair>, DataError> {
    let by_id: HashMap<&str, &Example> = target.iter().map(|e| (e.id.as_str(), e)).collect();
    if by_id.len() != target.len() {
        return Err(DataError::Pairing("duplicate id in target file".into()));
    }
    if source.len() != target.len() {
        return Err(DataError::Pairing(format!(
            "{} source items vs {} target items",
            source.len(),
            target.len()
        )));
    }
    source
        .iter()
        .map(|s| {
            let t = by_id
                .get(s.id.as_str())
                .ok_or_else(|| DataError::Pairing(format!("no counterpart for id {}", s.id)))?;
            ParallelPair::new(s.clone(), (*t).clone())
        })
        .collect()
}
