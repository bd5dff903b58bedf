//! Multiple-choice QA records: loading, validation, writing and prompt rendering.
//!
//! Dataset files are line-delimited JSON, one record per line:
//!
//! ```text
//! {"id":"q1","question":"2+2?","choices":{"A":"3","B":"4"},"answer":"B","source":"toy"}
//! ```

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Verbatim reasoning instruction appended to every prompt.
pub const DEFAULT_INSTRUCTION: &str =
    "Please reason step by step, and put the final answer in \\boxed{}";

pub const DEFAULT_TEMPLATE: &str = "{question}\n{choices}\n{instruction}";

const MAX_CHOICES: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: record {id:?}: {message}")]
    Invalid {
        line: usize,
        id: String,
        message: String,
    },
    #[error("duplicate item id {id:?} (line {line})")]
    DuplicateId { line: usize, id: String },
    #[error("invalid item {id:?}: {message}")]
    Item { id: String, message: String },
    #[error("invalid prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    /// Ordered by label, `A` first.
    pub choices: Vec<Choice>,
    pub answer: String,
    pub source: String,
}

impl QaItem {
    /// Checks the label and content invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question text is empty".into());
        }
        if self.choices.len() < 2 || self.choices.len() > MAX_CHOICES {
            return Err(format!(
                "expected 2..={MAX_CHOICES} choices, found {}",
                self.choices.len()
            ));
        }
        for (i, c) in self.choices.iter().enumerate() {
            let expected = label_for(i);
            if c.label != expected {
                return Err(format!(
                    "choice labels must be contiguous from A; position {i} has {:?}",
                    c.label
                ));
            }
        }
        if !self.choices.iter().any(|c| c.label == self.answer) {
            return Err(format!(
                "answer {:?} is not among choice labels {}",
                self.answer,
                self.labels().join(",")
            ));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.choices.iter().map(|c| c.label.clone()).collect()
    }

    pub fn choice_text(&self, label: &str) -> Option<&str> {
        self.choices
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.text.as_str())
    }
}

/// Label of the `i`-th choice (`0 -> "A"`).
pub fn label_for(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    question: String,
    choices: BTreeMap<String, String>,
    answer: String,
    source: String,
}

impl From<&QaItem> for Record {
    fn from(item: &QaItem) -> Self {
        Record {
            id: item.id.clone(),
            question: item.question.clone(),
            choices: item
                .choices
                .iter()
                .map(|c| (c.label.clone(), c.text.clone()))
                .collect(),
            answer: item.answer.clone(),
            source: item.source.clone(),
        }
    }
}

impl From<Record> for QaItem {
    fn from(r: Record) -> Self {
        QaItem {
            id: r.id,
            question: r.question,
            choices: r
                .choices
                .into_iter()
                .map(|(label, text)| Choice { label, text })
                .collect(),
            answer: r.answer,
            source: r.source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<QaItem>,
}

impl Dataset {
    /// Builds a dataset, validating every item and id uniqueness.
    pub fn new(name: impl Into<String>, items: Vec<QaItem>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (i, item) in items.iter().enumerate() {
            item.validate().map_err(|message| DataError::Item {
                id: item.id.clone(),
                message,
            })?;
            if !seen.insert(item.id.as_str()) {
                return Err(DataError::DuplicateId {
                    line: i + 1,
                    id: item.id.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QaItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

pub fn load_dataset(path: impl AsRef<Path>, name: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let item = QaItem::from(record);
        item.validate().map_err(|message| DataError::Invalid {
            line: line_no,
            id: item.id.clone(),
            message,
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: item.id,
            });
        }
        items.push(item);
    }
    Ok(Dataset {
        name: name.to_string(),
        items,
    })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in &ds.items {
        let line = serde_json::to_string(&Record::from(item)).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Prompt layout with `{question}`, `{choices}` and `{instruction}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
    instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE, DEFAULT_INSTRUCTION).expect("default template is valid")
    }
}

impl PromptTemplate {
    pub fn new(template: &str, instruction: &str) -> Result<Self, DataError> {
        for slot in ["{question}", "{choices}", "{instruction}"] {
            let n = template.matches(slot).count();
            if n != 1 {
                return Err(DataError::Template(format!(
                    "placeholder {slot} must appear exactly once, found {n}"
                )));
            }
        }
        if instruction.trim().is_empty() {
            return Err(DataError::Template("instruction suffix is empty".into()));
        }
        Ok(Self {
            template: template.to_string(),
            instruction: instruction.to_string(),
        })
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    /// Renders the question, one `"<label>. <text>"` line per choice, and the
    /// instruction suffix.
    pub fn render(&self, item: &QaItem) -> String {
        let choices = item
            .choices
            .iter()
            .map(|c| format!("{}. {}", c.label, c.text))
            .collect::<Vec<_>>()
            .join("\n");
        // Substitute slots in template order so inserted text is never rescanned.
        let mut out = String::with_capacity(self.template.len() + item.question.len() + 64);
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            let tail = &rest[open..];
            let (value, width) = if tail.starts_with("{question}") {
                (item.question.as_str(), "{question}".len())
            } else if tail.starts_with("{choices}") {
                (choices.as_str(), "{choices}".len())
            } else if tail.starts_with("{instruction}") {
                (self.instruction.as_str(), "{instruction}".len())
            } else {
                out.push_str(&rest[..=open]);
                rest = &rest[open + 1..];
                continue;
            };
            out.push_str(&rest[..open]);
            out.push_str(value);
            rest = &rest[open + width..];
        }
        out.push_str(rest);
        out
    }
}

pub fn render_prompt(item: &QaItem, template: &PromptTemplate) -> String {
    template.render(item)
}

#[cfg(test)]
pub(crate) fn toy_item(id: &str, answer: &str) -> QaItem {
    QaItem {
        id: id.to_string(),
        question: "2+2?".to_string(),
        choices: vec![
            Choice {
                label: "A".into(),
                text: "3".into(),
            },
            Choice {
                label: "B".into(),
                text: "4".into(),
            },
        ],
        answer: answer.to_string(),
        source: "toy".to_string(),
    }
}
