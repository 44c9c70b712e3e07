//! Metrics, baselines, the ablation grid, and report files.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::{encode_checkpoint, write_csv};
use crate::error::{CapelError, Result};
use crate::model::{feature_average_classifier, AlphaInit, CapelModel};
use crate::numerics::l2_normalize;
use crate::objective::{cluster_preserving_loss, PcScope};
use crate::tensor::{ClassIndex, EmbeddingMatrix, PromptTensor};
use crate::trainer::{fit, TrainConfig};

/// Hex SHA-256 of the model's checkpoint encoding.
pub fn model_digest(model: &CapelModel) -> String {
    let bytes = encode_checkpoint(model).expect("in-memory model dimensions fit the format");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    pub n_test: usize,
    pub model_digest: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Top-1 accuracy of `model` on a labeled set.
pub fn accuracy(model: &CapelModel, xs: &EmbeddingMatrix, labels: &[usize]) -> Result<EvalReport> {
    if xs.rows() == 0 {
        return Err(CapelError::EmptyTestSet);
    }
    if labels.len() != xs.rows() {
        return Err(CapelError::LengthMismatch {
            left: labels.len(),
            right: xs.rows(),
        });
    }
    let y = model.num_classes();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= y) {
        return Err(CapelError::LabelOutOfRange { row, label, classes: y });
    }
    let preds = model.predict_batch(xs)?;
    let mut hits = vec![0usize; y];
    let mut counts = vec![0usize; y];
    for (p, &l) in preds.iter().zip(labels) {
        counts[l] += 1;
        if p.label == l {
            hits[l] += 1;
        }
    }
    let total_hits: usize = hits.iter().sum();
    Ok(EvalReport {
        accuracy: total_hits as f64 / xs.rows() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        per_class_count: counts,
        n_test: xs.rows(),
        model_digest: model_digest(model),
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean pairwise cosine among each class's head directions.
    pub per_class: Vec<f64>,
    /// Mean of `per_class`; `None` when not applicable.
    pub mean: Option<f64>,
    /// False when `K < 2`, in which case `per_class` is empty.
    pub applicable: bool,
}

impl DiversityReport {
    fn from_values(per_class: Vec<f64>) -> Self {
        if per_class.is_empty() {
            return DiversityReport {
                per_class,
                mean: None,
                applicable: false,
            };
        }
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        DiversityReport {
            per_class,
            mean: Some(mean),
            applicable: true,
        }
    }
}

/// Per-class mean pairwise cosine of the model's heads. Lower is more diverse.
pub fn prototype_diversity(model: &CapelModel) -> Result<DiversityReport> {
    let mut values = Vec::with_capacity(model.num_classes());
    for y in 0..model.num_classes() {
        match model.head_cosine_mean(y)? {
            Some(v) => values.push(v),
            None => return Ok(DiversityReport::from_values(Vec::new())),
        }
    }
    Ok(DiversityReport::from_values(values))
}

/// Same metric on raw prompt embeddings, normalized exactly as model
/// initialization does.
pub fn prompt_diversity(prompts: &PromptTensor) -> Result<DiversityReport> {
    let mut data = Vec::with_capacity(prompts.as_slice().len());
    for row in prompts.as_slice().chunks_exact(prompts.dim()) {
        data.extend(l2_normalize(row)?);
    }
    let p = PromptTensor::new(prompts.classes(), prompts.prompts(), prompts.dim(), data)?;
    let model = CapelModel::init(&p, ClassIndex::numbered(p.classes()), 1.0, AlphaInit::Uniform)?;
    prototype_diversity(&model)
}

/// Scoped within-class entropy of the sub-classifier softmax, averaged over
/// the rows of `xs`. Shares its definition with the training regularizer.
pub fn empirical_conditional_entropy(
    model: &CapelModel,
    xs: &EmbeddingMatrix,
    labels: Option<&[usize]>,
    scope: PcScope,
) -> Result<f64> {
    let z: Vec<_> = xs.iter_rows().map(|x| model.sub_logits(x)).collect::<Result<_>>()?;
    cluster_preserving_loss(&z, scope, labels)
}

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub fine_tuning: bool,
    pub logits_ensemble: bool,
    pub cluster_preserving: bool,
    pub prompt_weighting: bool,
    pub accuracy: f64,
}

/// `(name, fine_tuning, logits_ensemble, cluster_preserving, prompt_weighting)`.
pub const ABLATION_ROWS: [(&str, bool, bool, bool, bool); 7] = [
    ("zero-shot feature average", false, false, false, false),
    ("zero-shot logit average", false, true, false, false),
    ("fine-tuned feature average", true, false, false, false),
    ("fine-tuned logit ensemble", true, true, false, false),
    ("+ cluster preserving", true, true, true, false),
    ("+ prompt weighting", true, true, false, true),
    ("full", true, true, true, true),
];

/// Training config realizing one ablation row on top of `base`.
fn row_config(base: &TrainConfig, fine_tuning: bool, cluster_preserving: bool, prompt_weighting: bool) -> TrainConfig {
    TrainConfig {
        epochs: if fine_tuning { base.epochs } else { 0 },
        lambda: if cluster_preserving { base.lambda } else { 0.0 },
        freeze_alpha: !prompt_weighting,
        freeze_w: false,
        alpha_init: AlphaInit::Uniform,
        ..base.clone()
    }
}

/// Trains and scores the seven ablation rows, all from `base.seed`.
pub fn ablation_run(
    train_x: &EmbeddingMatrix,
    train_y: &[usize],
    test_x: &EmbeddingMatrix,
    test_y: &[usize],
    prompts: &PromptTensor,
    classes: &ClassIndex,
    base: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let merged = {
        let fa = feature_average_classifier(prompts)?;
        PromptTensor::new(fa.rows(), 1, fa.dim(), fa.into_vec())?
    };
    ABLATION_ROWS
        .par_iter()
        .enumerate()
        .map(|(i, &(name, ft, le, cp, pw))| {
            let cfg = row_config(base, ft, cp, pw);
            let init = if le { prompts } else { &merged };
            let out = fit(init, classes.clone(), train_x, train_y, &cfg)?;
            Ok(AblationRow {
                row: i + 1,
                name: name.to_string(),
                fine_tuning: ft,
                logits_ensemble: le,
                cluster_preserving: cp,
                prompt_weighting: pw,
                accuracy: accuracy(&out.model, test_x, test_y)?.accuracy,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of one row across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub row: usize,
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn summarize_ablation(runs: &[Vec<AblationRow>]) -> Vec<AblationSummary> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let accs: Vec<f64> = runs.iter().map(|run| run[i].accuracy).collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let std = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AblationSummary {
                row: r.row,
                name: r.name.clone(),
                mean,
                std,
                runs: accs.len(),
            }
        })
        .collect()
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let header = [
        "row",
        "name",
        "fine_tuning",
        "logits_ensemble",
        "cluster_preserving",
        "prompt_weighting",
        "accuracy",
    ]
    .map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.row.to_string(),
                r.name.clone(),
                r.fine_tuning.to_string(),
                r.logits_ensemble.to_string(),
                r.cluster_preserving.to_string(),
                r.prompt_weighting.to_string(),
                r.accuracy.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &body)
}

/// `row,name,mean,std,runs`, one line per ablation row.
pub fn write_ablation_summary_csv(path: impl AsRef<Path>, summary: &[AblationSummary]) -> Result<()> {
    let header = ["row", "name", "mean", "std", "runs"].map(String::from);
    let body: Vec<Vec<String>> = summary
        .iter()
        .map(|s| vec![s.row.to_string(), s.name.clone(), s.mean.to_string(), s.std.to_string(), s.runs.to_string()])
        .collect();
    write_csv(path, &header, &body)
}

/// Attention matrix as CSV: `class,k0,...,k{K-1}`, one row per class.
pub fn attention_export(model: &CapelModel, path: impl AsRef<Path>) -> Result<()> {
    let mut header = vec!["class".to_string()];
    header.extend((0..model.num_prompts()).map(|k| format!("k{k}")));
    let rows: Vec<Vec<String>> = (0..model.num_classes())
        .map(|y| {
            std::iter::once(model.classes().name(y).to_string())
                .chain(model.alpha_row(y).iter().map(|a| a.to_string()))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassFlawStats {
    pub flawed_mean: f64,
    pub clean_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawSeparation {
    /// `None` for classes without both flawed and clean prompts.
    pub per_class: Vec<Option<ClassFlawStats>>,
    /// Share of eligible classes whose clean prompts carry more attention;
    /// `None` when no class is eligible.
    pub fraction: Option<f64>,
}

pub fn flaw_separation(model: &CapelModel, flaw_mask: &[Vec<bool>]) -> Result<FlawSeparation> {
    let (y, k) = (model.num_classes(), model.num_prompts());
    if flaw_mask.len() != y || flaw_mask.iter().any(|r| r.len() != k) {
        return Err(CapelError::DimMismatch(format!(
            "flaw mask is not {y}x{k}"
        )));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let per_class: Vec<Option<ClassFlawStats>> = flaw_mask
        .iter()
        .enumerate()
        .map(|(c, mask)| {
            let (mut flawed, mut clean) = (Vec::new(), Vec::new());
            for (&a, &f) in model.alpha_row(c).iter().zip(mask) {
                if f { &mut flawed } else { &mut clean }.push(a as f64);
            }
            Some(ClassFlawStats {
                flawed_mean: mean(&flawed)?,
                clean_mean: mean(&clean)?,
            })
        })
        .collect();
    let eligible: Vec<&ClassFlawStats> = per_class.iter().flatten().collect();
    let fraction = (!eligible.is_empty()).then(|| {
        eligible.iter().filter(|s| s.clean_mean > s.flawed_mean).count() as f64 / eligible.len() as f64
    });
    Ok(FlawSeparation { per_class, fraction })
}
