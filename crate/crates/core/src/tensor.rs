//! Dense vector types shared by every stage: CLIP-space embeddings and
//! vision-token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the CLIP joint image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dim("dot product", self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    /// Cosine similarity; both vectors are normalized internally.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        cosine(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A row-major `N x d` sequence of vision tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub n_tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenSeq {
    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        Self {
            n_tokens,
            dim,
            data: vec![0.0; n_tokens * dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_tokens = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("ragged token rows".into()));
        }
        Ok(Self {
            n_tokens,
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_flat(n_tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_tokens * dim {
            return Err(Error::DimensionMismatch {
                context: "token sequence",
                expected: n_tokens * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            n_tokens,
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.n_tokens)
    }

    /// Mean over token positions.
    pub fn mean_token(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.n_tokens.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tokens, self.dim)
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("cosine", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}
