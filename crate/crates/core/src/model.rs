//! The prompt-ensemble classifier: a bank of `K` cosine sub-classifiers per
//! class whose temperature-scaled logits are combined with a learned
//! per-(class, prompt) attention weight.

use serde::{Deserialize, Serialize};

use crate::error::{CapelError, Result};
use crate::numerics::{argmax, dot_f64, l2_normalize, norm_f64, softmax_f64, ZERO_NORM_EPS};
use crate::tensor::{ClassIndex, EmbeddingMatrix, PromptTensor, UNIT_NORM_TOL};

pub const DEFAULT_TAU: f32 = 100.0;

/// Starting value for the attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    /// Every entry `1/K`: class scores start as the plain logit average.
    #[default]
    Uniform,
    Ones,
}

impl AlphaInit {
    fn value(self, prompts: usize) -> f32 {
        match self {
            AlphaInit::Uniform => 1.0 / prompts as f32,
            AlphaInit::Ones => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapelModel {
    classes: ClassIndex,
    prompts: usize,
    dim: usize,
    /// `Y x K x D`, class-major then prompt-major.
    weights: Vec<f32>,
    /// `Y x K`.
    alpha: Vec<f32>,
    tau: f32,
}

/// Temperature-scaled cosines `Z[y][k]` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTensor {
    pub classes: usize,
    pub prompts: usize,
    pub values: Vec<f32>,
}

impl LogitsTensor {
    pub fn new(classes: usize, prompts: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != classes * prompts {
            return Err(CapelError::LengthMismatch {
                left: values.len(),
                right: classes * prompts,
            });
        }
        Ok(LogitsTensor {
            classes,
            prompts,
            values,
        })
    }

    pub fn class_row(&self, y: usize) -> &[f32] {
        &self.values[y * self.prompts..(y + 1) * self.prompts]
    }
}

/// `s[y] = sum_k alpha[y][k] * Z[y][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

pub(crate) fn check_unit(x: &[f32]) -> Result<()> {
    let norm = norm_f64(x);
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(CapelError::NormOutOfRange { row: 0, norm });
    }
    Ok(())
}

impl CapelModel {
    /// Builds a model from prompt embeddings, normalizing every prompt.
    pub fn init(
        prompts: &PromptTensor,
        classes: ClassIndex,
        tau: f32,
        alpha_init: AlphaInit,
    ) -> Result<Self> {
        if classes.len() != prompts.classes() {
            return Err(CapelError::DimMismatch(format!(
                "{} class names for {} prompt classes",
                classes.len(),
                prompts.classes()
            )));
        }
        let (k_count, dim) = (prompts.prompts(), prompts.dim());
        let mut weights = Vec::with_capacity(prompts.as_slice().len());
        for y in 0..prompts.classes() {
            for k in 0..k_count {
                let w = l2_normalize(prompts.prompt(y, k)).map_err(|e| match e {
                    CapelError::ZeroNorm { norm, .. } => {
                        CapelError::zero_norm(norm, format!(" at class {y}, prompt {k}"))
                    }
                    other => other,
                })?;
                weights.extend(w);
            }
        }
        let alpha = vec![alpha_init.value(k_count); prompts.classes() * k_count];
        Self::from_parts(classes, k_count, dim, weights, alpha, tau)
    }

    /// Assembles a model from raw buffers without renormalizing.
    pub fn from_parts(
        classes: ClassIndex,
        prompts: usize,
        dim: usize,
        weights: Vec<f32>,
        alpha: Vec<f32>,
        tau: f32,
    ) -> Result<Self> {
        let y = classes.len();
        if y == 0 || prompts == 0 || dim == 0 {
            return Err(CapelError::DimMismatch(format!(
                "model needs Y, K, D >= 1 (got {y}x{prompts}x{dim})"
            )));
        }
        if weights.len() != y * prompts * dim {
            return Err(CapelError::DimMismatch(format!(
                "weights hold {} values, expected {}",
                weights.len(),
                y * prompts * dim
            )));
        }
        if alpha.len() != y * prompts {
            return Err(CapelError::DimMismatch(format!(
                "alpha holds {} values, expected {}",
                alpha.len(),
                y * prompts
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CapelError::InvalidConfig(format!("temperature {tau} must be positive")));
        }
        if !weights.iter().chain(&alpha).all(|v| v.is_finite()) {
            return Err(CapelError::NonFinite("model parameters"));
        }
        Ok(CapelModel {
            classes,
            prompts,
            dim,
            weights,
            alpha,
            tau,
        })
    }

    /// A single-head model (`K = 1`, `alpha = 1`) over fixed class vectors.
    pub fn single_head(class_vectors: &EmbeddingMatrix, classes: ClassIndex, tau: f32) -> Result<Self> {
        let y = class_vectors.rows();
        Self::from_parts(
            classes,
            1,
            class_vectors.dim(),
            class_vectors.as_slice().to_vec(),
            vec![1.0; y],
            tau,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn classes(&self) -> &ClassIndex {
        &self.classes
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn alpha_row(&self, y: usize) -> &[f32] {
        &self.alpha[y * self.prompts..(y + 1) * self.prompts]
    }

    pub fn head(&self, y: usize, k: usize) -> &[f32] {
        let start = (y * self.prompts + k) * self.dim;
        &self.weights[start..start + self.dim]
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.weights, &mut self.alpha)
    }

    /// Reciprocal norm of every head, `Y*K` values.
    pub(crate) fn inverse_head_norms(&self) -> Result<Vec<f64>> {
        self.weights
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, w)| {
                let n = norm_f64(w);
                if n <= ZERO_NORM_EPS || !n.is_finite() {
                    Err(CapelError::zero_norm(
                        n,
                        format!(" at class {}, prompt {}", i / self.prompts, i % self.prompts),
                    ))
                } else {
                    Ok(1.0 / n)
                }
            })
            .collect()
    }

    /// `tau * cos(x, w)` for every head, in `f64`. `x` is assumed unit-norm.
    pub(crate) fn logits_f64(&self, x: &[f32], inv_norms: &[f64]) -> Vec<f64> {
        let tau = self.tau as f64;
        self.weights
            .chunks_exact(self.dim)
            .zip(inv_norms)
            .map(|(w, inv)| scaled_cosine(x, w, *inv, tau))
            .collect()
    }

    pub(crate) fn scores_from_logits_f64(&self, z: &[f64]) -> Vec<f64> {
        z.chunks_exact(self.prompts)
            .zip(self.alpha.chunks_exact(self.prompts))
            .map(|(zr, ar)| weighted_sum(zr.iter().copied(), ar))
            .collect()
    }

    pub fn sub_logits(&self, x: &[f32]) -> Result<LogitsTensor> {
        self.check_input(x)?;
        let inv = self.inverse_head_norms()?;
        let z = self.logits_f64(x, &inv).into_iter().map(|v| v as f32).collect();
        LogitsTensor::new(self.num_classes(), self.prompts, z)
    }

    pub fn class_scores(&self, z: &LogitsTensor) -> Result<ClassScores> {
        if z.classes != self.num_classes() || z.prompts != self.prompts {
            return Err(CapelError::DimMismatch(format!(
                "logits are {}x{}, model is {}x{}",
                z.classes,
                z.prompts,
                self.num_classes(),
                self.prompts
            )));
        }
        let wide: Vec<f64> = z.values.iter().map(|&v| v as f64).collect();
        Ok(ClassScores(self.scores_from_logits_f64(&wide)))
    }

    pub fn predict(&self, x: &[f32]) -> Result<Prediction> {
        self.check_input(x)?;
        let inv = self.inverse_head_norms()?;
        Ok(self.predict_with(x, &inv))
    }

    /// Predicts every row of `xs`, reusing one set of head norms.
    pub fn predict_batch(&self, xs: &EmbeddingMatrix) -> Result<Vec<Prediction>> {
        if xs.dim() != self.dim {
            return Err(CapelError::DimMismatch(format!(
                "inputs have dimension {}, model {}",
                xs.dim(),
                self.dim
            )));
        }
        let inv = self.inverse_head_norms()?;
        xs.iter_rows()
            .enumerate()
            .map(|(row, x)| {
                check_unit(x).map_err(|e| match e {
                    CapelError::NormOutOfRange { norm, .. } => CapelError::NormOutOfRange { row, norm },
                    other => other,
                })?;
                Ok(self.predict_with(x, &inv))
            })
            .collect()
    }

    fn predict_with(&self, x: &[f32], inv: &[f64]) -> Prediction {
        let z = self.logits_f64(x, inv);
        let s = self.scores_from_logits_f64(&z);
        Prediction {
            label: argmax(&s),
            probabilities: softmax_f64(&s),
        }
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(CapelError::LengthMismatch {
                left: x.len(),
                right: self.dim,
            });
        }
        check_unit(x)
    }

    /// Keeps, per class, the `m` heads with the largest attention weight
    /// (ties to the lower prompt index), preserving their original order.
    ///
    /// With `rescale`, retained weights of each class are multiplied by
    /// `sum(all) / sum(retained)`.
    pub fn prune(&self, m: usize, rescale: bool) -> Result<CapelModel> {
        let k = self.prompts;
        if m == 0 || m > k {
            return Err(CapelError::InvalidM { m, k });
        }
        let mut weights = Vec::with_capacity(self.num_classes() * m * self.dim);
        let mut alpha = Vec::with_capacity(self.num_classes() * m);
        for y in 0..self.num_classes() {
            let row = self.alpha_row(y);
            let mut keep: Vec<usize> = (0..k).collect();
            // Stable sort keeps lower indices first among equal weights.
            keep.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            keep.truncate(m);
            keep.sort_unstable();
            let factor = if rescale {
                let total: f64 = row.iter().map(|&a| a as f64).sum();
                let kept: f64 = keep.iter().map(|&i| row[i] as f64).sum();
                if kept != 0.0 {
                    Some(total / kept)
                } else {
                    None
                }
            } else {
                None
            };
            for &i in &keep {
                weights.extend_from_slice(self.head(y, i));
                alpha.push(match factor {
                    Some(f) => (row[i] as f64 * f) as f32,
                    None => row[i],
                });
            }
        }
        CapelModel::from_parts(self.classes.clone(), m, self.dim, weights, alpha, self.tau)
    }

    /// Mean pairwise cosine between normalized heads of class `y`, or
    /// `None` when `K < 2`.
    pub fn head_cosine_mean(&self, y: usize) -> Result<Option<f64>> {
        if self.prompts < 2 {
            return Ok(None);
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for j in 0..self.prompts {
            for k in j + 1..self.prompts {
                total += crate::numerics::cosine(self.head(y, j), self.head(y, k))?;
                pairs += 1;
            }
        }
        Ok(Some(total / pairs as f64))
    }
}

fn scaled_cosine(x: &[f32], w: &[f32], inv_norm: f64, tau: f64) -> f64 {
    tau * (dot_f64(x, w) * inv_norm)
}

/// Sum of `alpha * z` that starts from the first term, so a single head with
/// `alpha = 1` returns its logit unchanged.
fn weighted_sum(z: impl Iterator<Item = f64>, alpha: &[f32]) -> f64 {
    let mut terms = z.zip(alpha).map(|(z, &a)| a as f64 * z);
    let first = terms.next().unwrap_or(0.0);
    terms.fold(first, |acc, t| acc + t)
}

/// Classic single-vector-per-class classifier: softmax over `tau * cos(x, w_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier {
    class_vectors: EmbeddingMatrix,
    tau: f32,
}

impl ZeroShotClassifier {
    pub fn new(class_vectors: EmbeddingMatrix, tau: f32) -> Self {
        ZeroShotClassifier { class_vectors, tau }
    }

    pub fn scores(&self, x: &[f32]) -> Result<Vec<f64>> {
        let tau = self.tau as f64;
        self.class_vectors
            .iter_rows()
            .map(|w| {
                let n = norm_f64(w);
                if n <= ZERO_NORM_EPS {
                    return Err(CapelError::zero_norm(n, ""));
                }
                Ok(scaled_cosine(x, w, 1.0 / n, tau))
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> Result<Prediction> {
        check_unit(x)?;
        let s = self.scores(x)?;
        Ok(Prediction {
            label: argmax(&s),
            probabilities: softmax_f64(&s),
        })
    }
}

/// Per-class normalized mean of the prompt embeddings.
pub fn feature_average_classifier(prompts: &PromptTensor) -> Result<EmbeddingMatrix> {
    let dim = prompts.dim();
    let mut data = Vec::with_capacity(prompts.classes() * dim);
    for y in 0..prompts.classes() {
        let mut mean = vec![0f64; dim];
        for k in 0..prompts.prompts() {
            let w = l2_normalize(prompts.prompt(y, k)).map_err(|e| match e {
                CapelError::ZeroNorm { norm, .. } => {
                    CapelError::zero_norm(norm, format!(" at class {y}, prompt {k}"))
                }
                other => other,
            })?;
            for (m, v) in mean.iter_mut().zip(w) {
                *m += v as f64;
            }
        }
        let mean: Vec<f32> = mean
            .into_iter()
            .map(|v| (v / prompts.prompts() as f64) as f32)
            .collect();
        let centroid = l2_normalize(&mean).map_err(|e| match e {
            CapelError::ZeroNorm { norm, .. } => {
                CapelError::zero_norm(norm, format!(" (mean prompt of class {y})"))
            }
            other => other,
        })?;
        data.extend(centroid);
    }
    EmbeddingMatrix::new(prompts.classes(), dim, data)
}
