use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PairingError;
use crate::features::{ItemKey, Source};

/// The unified `(image, caption, question, answer)` record. Fields that the
/// originating split does not provide are empty until augmented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruple {
    pub id: String,
    #[serde(rename = "source")]
    pub origin: Source,
    pub image: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
}

impl Quadruple {
    pub fn key(&self) -> ItemKey {
        ItemKey::new(self.origin, self.id.clone())
    }

    pub fn is_complete(&self) -> bool {
        !(self.image.is_empty()
            || self.caption.is_empty()
            || self.question.is_empty()
            || self.answer.is_empty())
    }

    /// Fields required by the originating split: question and answer for
    /// understanding data, caption for generation data.
    fn missing_native_field(&self) -> Option<&'static str> {
        if self.image.is_empty() {
            return Some("image");
        }
        match self.origin {
            Source::Understanding if self.question.is_empty() => Some("question"),
            Source::Understanding if self.answer.is_empty() => Some("answer"),
            Source::Generation if self.caption.is_empty() => Some("caption"),
            _ => None,
        }
    }
}

/// Quadruples keyed by `(source, id)`.
#[derive(Debug, Clone, Default)]
pub struct QuadrupleIndex {
    map: BTreeMap<ItemKey, Quadruple>,
}

impl QuadrupleIndex {
    pub fn new(quads: impl IntoIterator<Item = Quadruple>) -> Self {
        Self {
            map: quads.into_iter().map(|q| (q.key(), q)).collect(),
        }
    }

    pub fn get(&self, key: &ItemKey) -> Option<&Quadruple> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ItemKey> {
        self.map.keys()
    }
}

pub fn read_quadruples<R: BufRead>(reader: R) -> Result<QuadrupleIndex, PairingError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Quadruple = serde_json::from_str(&line).map_err(|e| PairingError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        if q.id.is_empty() {
            return Err(PairingError::Schema {
                line: lineno,
                message: "empty id".into(),
            });
        }
        if let Some(field) = q.missing_native_field() {
            return Err(PairingError::Schema {
                line: lineno,
                message: format!("{} record `{}` is missing `{field}`", q.origin, q.id),
            });
        }
        if !seen.insert(q.key()) {
            return Err(PairingError::Schema {
                line: lineno,
                message: format!("duplicate quadruple {}", q.key()),
            });
        }
        out.push(q);
    }
    Ok(QuadrupleIndex::new(out))
}

pub fn load_quadruples(path: impl AsRef<Path>) -> Result<QuadrupleIndex, PairingError> {
    let file = std::fs::File::open(path)?;
    read_quadruples(std::io::BufReader::new(file))
}
