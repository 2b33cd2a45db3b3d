//! Image embeddings for the understanding and generation splits.
//!
//! Vectors are stored at double precision and are unit-norm once they leave
//! this module. Feature files are JSON Lines:
//!
//! ```text
//! {"id": "u-0001", "source": "und", "vector": [0.1, ...], "normalized": false}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as a degenerate embedding.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("zero-norm vector cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}` in {split} split")]
    DuplicateId {
        line: usize,
        id: String,
        split: Source,
    },
    #[error("mixed sources in one feature set")]
    MixedSource,
    #[error("empty feature set")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which dataset split an item comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "und")]
    Understanding,
    #[serde(rename = "gen")]
    Generation,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Understanding => "und",
            Source::Generation => "gen",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Identifies one item across both splits. Ids are only unique per split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub source: Source,
    pub id: String,
}

impl ItemKey {
    pub fn new(source: Source, id: impl Into<String>) -> Self {
        Self {
            source,
            id: id.into(),
        }
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.id)
    }
}

/// A unit-norm image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub source: Source,
    values: Vec<f64>,
}

impl FeatureVector {
    /// Normalizes `raw` and wraps it.
    pub fn new(id: impl Into<String>, source: Source, raw: &[f64]) -> Result<Self, FeatureError> {
        Ok(Self {
            id: id.into(),
            source,
            values: l2_normalize(raw)?,
        })
    }

    /// Wraps values that are already unit-norm (checked to 1e-6).
    pub fn from_unit(
        id: impl Into<String>,
        source: Source,
        values: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        let norm = norm(&values);
        if (norm - 1.0).abs() > 1e-6 {
            return l2_normalize(&values).map(|values| Self {
                id: id.into(),
                source,
                values,
            });
        }
        Ok(Self {
            id: id.into(),
            source,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn key(&self) -> ItemKey {
        ItemKey::new(self.source, self.id.clone())
    }
}

/// All embeddings of one split, sharing a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    source: Source,
    dim: usize,
    vectors: Vec<FeatureVector>,
}

impl FeatureSet {
    pub fn new(source: Source, vectors: Vec<FeatureVector>) -> Result<Self, FeatureError> {
        let first = vectors.first().ok_or(FeatureError::Empty)?;
        let dim = first.dim();
        let mut seen = HashSet::new();
        for (i, v) in vectors.iter().enumerate() {
            if v.source != source {
                return Err(FeatureError::MixedSource);
            }
            if v.dim() != dim {
                return Err(FeatureError::DimMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            if !seen.insert(v.id.as_str()) {
                return Err(FeatureError::DuplicateId {
                    line: i + 1,
                    id: v.id.clone(),
                    split: source,
                });
            }
        }
        Ok(Self {
            source,
            dim,
            vectors,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn into_vectors(self) -> Vec<FeatureVector> {
        self.vectors
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, FeatureError> {
    let n = norm(v);
    if v.is_empty() || !n.is_finite() || n < ZERO_NORM {
        return Err(FeatureError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, FeatureError> {
    if a.dim() != b.dim() {
        return Err(FeatureError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    id: String,
    source: Source,
    vector: Vec<f64>,
    normalized: bool,
}

#[derive(Serialize)]
struct FeatureRecordOut<'a> {
    id: &'a str,
    source: Source,
    vector: &'a [f64],
    normalized: bool,
}

/// Parses a feature file from any reader. Every record must share the
/// source of the first one.
pub fn read_features<R: BufRead>(reader: R) -> Result<FeatureSet, FeatureError> {
    let mut vectors: Vec<FeatureVector> = Vec::new();
    let mut seen = HashSet::new();
    let mut split: Option<Source> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| FeatureError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(FeatureError::Schema {
                line: lineno,
                message: "empty id".into(),
            });
        }
        match split {
            None => split = Some(rec.source),
            Some(s) if s != rec.source => {
                return Err(FeatureError::Schema {
                    line: lineno,
                    message: format!("source `{}` differs from file source `{}`", rec.source, s),
                })
            }
            _ => {}
        }
        if let Some(first) = vectors.first() {
            if first.dim() != rec.vector.len() {
                return Err(FeatureError::DimMismatch {
                    expected: first.dim(),
                    found: rec.vector.len(),
                });
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(FeatureError::DuplicateId {
                line: lineno,
                id: rec.id,
                split: rec.source,
            });
        }
        let vector = if rec.normalized {
            FeatureVector::from_unit(rec.id, rec.source, rec.vector)
        } else {
            FeatureVector::new(rec.id, rec.source, &rec.vector)
        }
        .map_err(|e| FeatureError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        vectors.push(vector);
    }
    let source = split.ok_or(FeatureError::Empty)?;
    FeatureSet::new(source, vectors)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet, FeatureError> {
    let file = std::fs::File::open(path)?;
    read_features(std::io::BufReader::new(file))
}

/// Serializes vectors in the feature-file format (always `normalized: true`).
pub fn write_features<W: std::io::Write>(
    mut out: W,
    vectors: &[FeatureVector],
) -> std::io::Result<()> {
    for v in vectors {
        let rec = FeatureRecordOut {
            id: &v.id,
            source: v.source,
            vector: v.values(),
            normalized: true,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(id: &str, raw: &[f64]) -> FeatureVector {
        FeatureVector::new(id, Source::Understanding, raw).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(FeatureError::ZeroVector)
        ));
        assert!(matches!(l2_normalize(&[]), Err(FeatureError::ZeroVector)));
    }

    #[test]
    fn cosine_examples() {
        let a = fv("a", &[1.0, 0.0]);
        let b = fv("b", &[0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let c = fv("c", &[0.6, 0.8]);
        let d = fv("d", &[0.8, 0.6]);
        assert!((cosine_similarity(&c, &d).unwrap() - 0.96).abs() < 1e-12);
        let e = fv("e", &[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&a, &e),
            Err(FeatureError::DimMismatch { .. })
        ));
    }

    #[test]
    fn reads_and_normalizes() {
        let text = r#"{"id":"a","source":"gen","vector":[3,4],"normalized":false}
{"id":"b","source":"gen","vector":[0.6,0.8],"normalized":true}
"#;
        let set = read_features(text.as_bytes()).unwrap();
        assert_eq!(set.source(), Source::Generation);
        assert_eq!(set.dim(), 2);
        assert!((set.vectors()[0].values()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let text = "{\"id\":\"a\",\"source\":\"und\",\"vector\":[1],\"normalized\":false}\n{\"id\":\"b\"}\n";
        match read_features(text.as_bytes()) {
            Err(FeatureError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let zero = "{\"id\":\"a\",\"source\":\"und\",\"vector\":[0,0],\"normalized\":false}\n";
        assert!(matches!(
            read_features(zero.as_bytes()),
            Err(FeatureError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_dim_mismatch_and_duplicates() {
        let dims = "{\"id\":\"a\",\"source\":\"und\",\"vector\":[1,0],\"normalized\":true}\n{\"id\":\"b\",\"source\":\"und\",\"vector\":[1],\"normalized\":true}\n";
        assert!(matches!(
            read_features(dims.as_bytes()),
            Err(FeatureError::DimMismatch {
                expected: 2,
                found: 1
            })
        ));
        let dup = "{\"id\":\"a\",\"source\":\"und\",\"vector\":[1,0],\"normalized\":true}\n{\"id\":\"a\",\"source\":\"und\",\"vector\":[0,1],\"normalized\":true}\n";
        assert!(matches!(
            read_features(dup.as_bytes()),
            Err(FeatureError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn write_then_read() {
        let vs = vec![fv("x", &[1.0, 2.0, 2.0]), fv("y", &[0.0, 1.0, 0.0])];
        let mut buf = Vec::new();
        write_features(&mut buf, &vs).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back.vectors(), vs.as_slice());
    }

    fn raw_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..12).prop_filter("nonzero", |v| norm(v) > 1e-6)
    }

    proptest! {
        #[test]
        fn normalized_is_unit_and_idempotent(v in raw_vec()) {
            let once = l2_normalize(&v).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() <= 1e-6);
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn cosine_symmetric_and_reflexive((a, b) in (1usize..8).prop_flat_map(|d| (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
        )).prop_filter("nonzero", |(a, b)| norm(a) > 1e-6 && norm(b) > 1e-6)) {
            let a = fv("a", &a);
            let b = fv("b", &b);
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        }
    }
}
