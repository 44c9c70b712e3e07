//! Dense row-major containers for embeddings and prompt banks.

use serde::{Deserialize, Serialize};

use crate::error::{CapelError, Result};
use crate::numerics::norm_f64;

/// Row norms accepted as "unit" by readers and forward passes.
pub const UNIT_NORM_TOL: f64 = 1e-3;

/// `rows x dim` matrix of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(CapelError::DimMismatch("embedding dimension is zero".into()));
        }
        if data.len() != rows * dim {
            return Err(CapelError::LengthMismatch {
                left: data.len(),
                right: rows * dim,
            });
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(CapelError::LengthMismatch {
                    left: r.len(),
                    right: dim,
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Fails on the first non-finite row or row whose norm is not within
    /// [`UNIT_NORM_TOL`] of one.
    pub fn validate_unit_rows(&self) -> Result<()> {
        for (row, v) in self.iter_rows().enumerate() {
            let norm = norm_f64(v);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(CapelError::NormOutOfRange { row, norm });
            }
        }
        Ok(())
    }
}

/// Per-class prompt embeddings, `classes x prompts x dim`, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensor {
    classes: usize,
    prompts: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PromptTensor {
    pub fn new(classes: usize, prompts: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || prompts == 0 || dim == 0 {
            return Err(CapelError::DimMismatch(format!(
                "prompt tensor needs Y, K, D >= 1 (got {classes}x{prompts}x{dim})"
            )));
        }
        if data.len() != classes * prompts * dim {
            return Err(CapelError::LengthMismatch {
                left: data.len(),
                right: classes * prompts * dim,
            });
        }
        Ok(PromptTensor {
            classes,
            prompts,
            dim,
            data,
        })
    }

    /// Reinterprets a `Y*K`-row embedding matrix (class-major) as a prompt tensor.
    pub fn from_matrix(matrix: EmbeddingMatrix, classes: usize) -> Result<Self> {
        if classes == 0 || !matrix.rows().is_multiple_of(classes) {
            return Err(CapelError::DimMismatch(format!(
                "{} prompt rows do not split evenly into {classes} classes",
                matrix.rows()
            )));
        }
        let prompts = matrix.rows() / classes;
        let dim = matrix.dim();
        Self::new(classes, prompts, dim, matrix.into_vec())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt(&self, y: usize, k: usize) -> &[f32] {
        let start = (y * self.prompts + k) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> EmbeddingMatrix {
        EmbeddingMatrix {
            rows: self.classes * self.prompts,
            dim: self.dim,
            data: self.data.clone(),
        }
    }
}

/// Ordered class names with a reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassIndex {
    names: Vec<String>,
}

impl ClassIndex {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(CapelError::DuplicateClass(n.clone()));
            }
        }
        Ok(ClassIndex { names })
    }

    /// `class_0`, `class_1`, ...
    pub fn numbered(count: usize) -> Self {
        ClassIndex {
            names: (0..count).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for ClassIndex {
    type Error = CapelError;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassIndex::new(names)
    }
}

impl From<ClassIndex> for Vec<String> {
    fn from(c: ClassIndex) -> Self {
        c.names
    }
}
