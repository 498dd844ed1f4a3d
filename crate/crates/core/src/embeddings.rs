//! Word-vector tables and the cosine similarity/distance used to score
//! hallucinated terms.
//!
//! Text format: a `<count> <dim>` header, then one `<token> <v1> ... <vdim>`
//! row per entry.
//!
//! Hallucination scoring uses [`EmbeddingTable::distance`] (`1 - cos`), not
//! the raw cosine: a synonym must yield a *small* contribution.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Immutable token -> vector map.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: HashMap<String, Vec<f64>>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: "<embeddings>".into(),
        line,
        msg: msg.into(),
    }
}

impl EmbeddingTable {
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut tokens = Vec::new();
        let mut vectors = HashMap::new();
        for (i, (token, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    line: i + 2,
                    expected: dim,
                    actual: v.len(),
                });
            }
            if vectors.contains_key(&token) {
                return Err(parse_err(i + 2, format!("duplicate token {token:?}")));
            }
            tokens.push(token.clone());
            vectors.insert(token, v);
        }
        if tokens.is_empty() {
            return Err(Error::EmptyTable);
        }
        Ok(Self { dim, tokens, vectors })
    }

    /// Parse the text format, keeping at most `limit` rows.
    pub fn parse(reader: impl BufRead, limit: Option<usize>) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header"))?
            .map_err(|e| parse_err(1, e.to_string()))?;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(1, "header must be \"<count> <dim>\""))?;
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(1, "header must be \"<count> <dim>\""))?;
        if parts.next().is_some() {
            return Err(parse_err(1, "header must be \"<count> <dim>\""));
        }
        let wanted = limit.map_or(count, |l| l.min(count));

        let mut entries = Vec::with_capacity(wanted);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if entries.len() == wanted {
                if i < count {
                    // rows past the limit are not validated
                    continue;
                }
                return Err(parse_err(line_no, format!("more rows than the declared {count}")));
            }
            let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let token = fields.next().ok_or_else(|| parse_err(line_no, "empty row"))?;
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line_no, format!("non-numeric component {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    line: line_no,
                    expected: dim,
                    actual: values.len(),
                });
            }
            entries.push((token.to_string(), values));
        }
        if entries.len() < wanted {
            return Err(parse_err(
                entries.len() + 2,
                format!("expected {count} rows, found {}", entries.len()),
            ));
        }
        Self::from_entries(dim, entries)
    }

    pub fn load(path: &Path, limit: Option<usize>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), limit).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.tokens.len(), self.dim)?;
        for t in &self.tokens {
            write!(w, "{t}")?;
            for v in &self.vectors[t] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Surface form first, then stem. Returns the key that matched.
    pub fn resolve<'a>(&self, surface: Option<&'a str>, stem: &'a str) -> Option<&'a str> {
        surface
            .filter(|s| self.vectors.contains_key(*s))
            .or_else(|| self.vectors.contains_key(stem).then_some(stem))
    }

    pub fn similarity(&self, w1: &str, w2: &str) -> Result<f64> {
        let a = self.get(w1).ok_or_else(|| Error::MissingToken(w1.to_string()))?;
        let b = self.get(w2).ok_or_else(|| Error::MissingToken(w2.to_string()))?;
        cosine(a, b).map_err(|which| Error::ZeroVector(if which == 0 { w1 } else { w2 }.to_string()))
    }

    pub fn distance(&self, w1: &str, w2: &str) -> Result<f64> {
        Ok(1.0 - self.similarity(w1, w2)?)
    }
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
/// `Err(0)` / `Err(1)` names the argument that is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> std::result::Result<f64, usize> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(0);
    }
    if nb == 0.0 {
        return Err(1);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
