//! Cloze dataset schema, validation and JSON I/O.
//!
//! A dataset file looks like
//!
//! ```json
//! {
//!   "split": "train",
//!   "vocab_size": 50,
//!   "feature_dim": null,
//!   "examples": [{
//!     "id": "ex0",
//!     "steps": [{"tokens": [1, 2], "image_features": null}, ...],
//!     "question_items": [{"tokens": [1], "position": 0}, ...],
//!     "placeholder_position": 3,
//!     "candidates": [[4], [9], [2], [7]],
//!     "answer": 0
//!   }]
//! }
//! ```
//!
//! An optional top-level `token_vectors` array (one row per token id)
//! supplies fixed input embeddings in place of the trainable table.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::NUM_CANDIDATES;
use crate::encoders::MAX_POSITIONS;
use crate::error::{Error, Result};

/// Fewest steps a recipe can have and still be aligned disjointly.
pub const MIN_STEPS: usize = NUM_CANDIDATES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub tokens: Vec<usize>,
    pub image_features: Option<Vec<Vec<f64>>>,
}

impl Step {
    pub fn text(tokens: Vec<usize>) -> Self {
        Step {
            tokens,
            image_features: None,
        }
    }

    pub fn images(&self) -> &[Vec<f64>] {
        self.image_features.as_deref().unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionItem {
    pub tokens: Vec<usize>,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClozeExample {
    pub id: String,
    pub steps: Vec<Step>,
    pub question_items: Vec<QuestionItem>,
    pub placeholder_position: usize,
    pub candidates: Vec<Vec<usize>>,
    pub answer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub split: Split,
    pub vocab_size: usize,
    pub feature_dim: Option<usize>,
    pub examples: Vec<ClozeExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_vectors: Option<Vec<Vec<f64>>>,
}

fn check_tokens(field: &str, tokens: &[usize], vocab_size: usize, out: &mut Vec<String>) {
    if tokens.is_empty() {
        out.push(format!("{field}: expected at least 1 token, got 0"));
    }
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab_size {
            out.push(format!(
                "{field}[{i}]: token id {t} out of range (vocab_size {vocab_size})"
            ));
        }
    }
}

/// Every invariant violation of `ex`, one message per violation. Empty
/// means the example is valid.
pub fn validate_example(ex: &ClozeExample, vocab_size: usize) -> Vec<String> {
    let mut out = Vec::new();
    if ex.steps.len() < MIN_STEPS {
        out.push(format!("steps: expected at least {MIN_STEPS}, got {}", ex.steps.len()));
    }
    for (i, step) in ex.steps.iter().enumerate() {
        check_tokens(&format!("steps[{i}].tokens"), &step.tokens, vocab_size, &mut out);
        for (k, f) in step.images().iter().enumerate() {
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                out.push(format!("steps[{i}].image_features[{k}][{j}]: non-finite value"));
            }
        }
    }

    if ex.question_items.len() != MAX_POSITIONS - 1 {
        out.push(format!(
            "question_items: expected {}, got {}",
            MAX_POSITIONS - 1,
            ex.question_items.len()
        ));
    }
    if ex.placeholder_position >= MAX_POSITIONS {
        out.push(format!(
            "placeholder_position: {} out of range [0, {MAX_POSITIONS})",
            ex.placeholder_position
        ));
    }
    let mut seen = vec![ex.placeholder_position];
    for (i, item) in ex.question_items.iter().enumerate() {
        let field = format!("question_items[{i}]");
        check_tokens(&format!("{field}.tokens"), &item.tokens, vocab_size, &mut out);
        if item.position >= MAX_POSITIONS {
            out.push(format!(
                "{field}.position: {} out of range [0, {MAX_POSITIONS})",
                item.position
            ));
        } else if seen.contains(&item.position) {
            out.push(format!("{field}.position: duplicate position {}", item.position));
        }
        seen.push(item.position);
    }

    if ex.candidates.len() != NUM_CANDIDATES {
        out.push(format!(
            "candidates: expected {NUM_CANDIDATES}, got {}",
            ex.candidates.len()
        ));
    }
    for (i, c) in ex.candidates.iter().enumerate() {
        check_tokens(&format!("candidates[{i}]"), c, vocab_size, &mut out);
    }
    if ex.answer >= ex.candidates.len().min(NUM_CANDIDATES) {
        out.push(format!(
            "answer: {} does not index the {} candidates",
            ex.answer,
            ex.candidates.len()
        ));
    }
    out
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_images(&self) -> bool {
        self.examples
            .iter()
            .any(|ex| ex.steps.iter().any(|s| !s.images().is_empty()))
    }

    pub fn find(&self, id: &str) -> Option<&ClozeExample> {
        self.examples.iter().find(|ex| ex.id == id)
    }

    /// Checks every example plus the dataset-wide invariants. The error
    /// lists the violations of the first offending example.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Dataset("vocab_size: must be positive".into()));
        }
        if let Some(rows) = &self.token_vectors {
            if rows.len() != self.vocab_size {
                return Err(Error::Dataset(format!(
                    "token_vectors: expected {} rows, got {}",
                    self.vocab_size,
                    rows.len()
                )));
            }
            let dim = rows.first().map_or(0, Vec::len);
            if dim == 0 || rows.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::Dataset(
                    "token_vectors: rows must be non-empty, finite and of equal length".into(),
                ));
            }
        }
        for (n, ex) in self.examples.iter().enumerate() {
            let mut violations = validate_example(ex, self.vocab_size);
            for (i, step) in ex.steps.iter().enumerate() {
                for (k, f) in step.images().iter().enumerate() {
                    match self.feature_dim {
                        None => violations.push(format!(
                            "steps[{i}].image_features[{k}]: dataset declares no feature_dim"
                        )),
                        Some(d) if f.len() != d => violations.push(format!(
                            "steps[{i}].image_features[{k}]: expected length {d}, got {}",
                            f.len()
                        )),
                        Some(_) => {}
                    }
                }
            }
            if !violations.is_empty() {
                return Err(Error::Dataset(format!(
                    "examples[{n}] (id `{}`): {}",
                    ex.id,
                    violations.join("; ")
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and fully validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds: Dataset = serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    ds.validate()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(ds)
}
