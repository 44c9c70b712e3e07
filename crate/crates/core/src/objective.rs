//! Training objective: attention-weighted cross-entropy plus the
//! within-class entropy regularizer, with analytic gradients through the
//! cosine normalization and a central-difference checker.
//!
//! For one sample `x` (unit norm) and head `w` with `n = |w|`, `c = x.w/n`:
//!
//! ```text
//! Z[y,k]   = tau * c[y,k]
//! s[y]     = sum_k alpha[y,k] * Z[y,k]
//! ce       = -log softmax(s)[label]
//! H[y]     = entropy(softmax_k Z[y,.])
//! pc       = sum_y omega[y] * H[y]        (omega set by the scope)
//! dce/dZ   = (p[y] - [y == label]) * alpha[y,k]
//! dH/dZ_j  = -q_j * (log q_j + H)
//! dZ/dw    = tau * (x - c * w/n) / n
//! ```
//!
//! Both terms are averaged over the batch. Per-sample work may run on the
//! rayon pool; every reduction walks samples in ascending order, so the
//! thread count never changes a result bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapelError, Result};
use crate::model::{CapelModel, LogitsTensor};
use crate::numerics::{entropy_from_logits_f64, log_softmax_f64};

/// Which classes contribute an entropy term per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcScope {
    /// Average of the per-class entropies.
    #[default]
    AllClassesMean,
    /// Sum over classes, unnormalized.
    AllClassesSum,
    /// Only the sample's labeled class.
    TrueClassOnly,
}

impl PcScope {
    pub const ALL: [PcScope; 3] = [
        PcScope::AllClassesMean,
        PcScope::AllClassesSum,
        PcScope::TrueClassOnly,
    ];

    fn weight(self, y: usize, label: Option<usize>, classes: usize) -> f64 {
        match self {
            PcScope::AllClassesMean => 1.0 / classes as f64,
            PcScope::AllClassesSum => 1.0,
            PcScope::TrueClassOnly => {
                if Some(y) == label {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pc: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(ce: f64, pc: f64, lambda: f64) -> Self {
        LossBreakdown {
            ce,
            pc,
            total: ce + lambda * pc,
            lambda,
        }
    }
}

/// Gradients of the overall loss, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f32>,
    pub alpha: Vec<f32>,
}

/// Full-precision gradient, used by the finite-difference checker.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients64 {
    pub weights: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Gradients64 {
    fn narrow(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|&v| v as f32).collect(),
            alpha: self.alpha.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Objective settings shared by loss and gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub scope: PcScope,
}

/// Parameters widened to `f64`.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    classes: usize,
    prompts: usize,
    dim: usize,
    tau: f64,
    weights: Vec<f64>,
    alpha: Vec<f64>,
}

impl Params {
    pub(crate) fn from_model(model: &CapelModel) -> Self {
        Params {
            classes: model.num_classes(),
            prompts: model.num_prompts(),
            dim: model.dim(),
            tau: model.tau() as f64,
            weights: model.weights().iter().map(|&v| v as f64).collect(),
            alpha: model.alpha().iter().map(|&v| v as f64).collect(),
        }
    }

    fn coordinate(&mut self, in_alpha: bool, i: usize) -> &mut f64 {
        if in_alpha {
            &mut self.alpha[i]
        } else {
            &mut self.weights[i]
        }
    }

    fn heads(&self) -> usize {
        self.classes * self.prompts
    }

    fn inverse_norms(&self) -> Result<Vec<f64>> {
        self.weights
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, w)| {
                let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= crate::numerics::ZERO_NORM_EPS || !n.is_finite() {
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
}

/// Everything one sample contributes.
struct SampleTerms {
    ce: f64,
    pc: f64,
    correct: bool,
    /// `dL/dZ`, `Y*K`.
    dz: Vec<f64>,
    /// Cosines `c`, `Y*K`.
    cos: Vec<f64>,
    /// `dL/dalpha`, `Y*K`.
    dalpha: Vec<f64>,
}

fn ce_from_scores(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax_f64(scores);
    (-logp[label], logp)
}

fn class_entropy_and_grad(z: &[f64]) -> (f64, Vec<f64>) {
    let logq = log_softmax_f64(z);
    let h = entropy_from_logits_f64(z);
    let grad = logq.iter().map(|&lq| -lq.exp() * (lq + h)).collect();
    (h, grad)
}

fn sample_terms(
    params: &Params,
    inv_norms: &[f64],
    x: &[f32],
    label: usize,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> SampleTerms {
    let (yn, kn) = (params.classes, params.prompts);
    let cos: Vec<f64> = params
        .weights
        .chunks_exact(params.dim)
        .zip(inv_norms)
        .map(|(w, inv)| w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum::<f64>() * inv)
        .collect();
    let z: Vec<f64> = cos.iter().map(|c| params.tau * c).collect();
    let scores: Vec<f64> = z
        .chunks_exact(kn)
        .zip(params.alpha.chunks_exact(kn))
        .map(|(zr, ar)| zr.iter().zip(ar).map(|(a, b)| a * b).sum())
        .collect();
    let (ce, logp) = ce_from_scores(&scores, label);
    let correct = crate::numerics::argmax(&scores) == label;

    let mut pc = 0.0;
    let mut dz = if want_grad { vec![0.0; yn * kn] } else { Vec::new() };
    let mut dalpha = if want_grad { vec![0.0; yn * kn] } else { Vec::new() };
    for y in 0..yn {
        let omega = cfg.scope.weight(y, Some(label), yn);
        let row = &z[y * kn..(y + 1) * kn];
        let dh = if omega != 0.0 {
            let (h, dh) = class_entropy_and_grad(row);
            pc += omega * h;
            Some(dh)
        } else {
            None
        };
        if want_grad {
            let resid = logp[y].exp() - if y == label { 1.0 } else { 0.0 };
            for k in 0..kn {
                let i = y * kn + k;
                let mut g = resid * params.alpha[i];
                if let Some(dh) = &dh {
                    g += cfg.lambda * omega * dh[k];
                }
                dz[i] = g;
                dalpha[i] = resid * z[i];
            }
        }
    }
    SampleTerms {
        ce,
        pc,
        correct,
        dz,
        cos,
        dalpha,
    }
}

/// Loss, gradients, and training-accuracy count for one batch.
pub(crate) struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Option<Gradients64>,
    pub correct: usize,
}

fn check_batch(params: &Params, xs: &[&[f32]], labels: &[usize]) -> Result<()> {
    if xs.is_empty() {
        return Err(CapelError::EmptyTrainingSet);
    }
    if xs.len() != labels.len() {
        return Err(CapelError::LengthMismatch {
            left: xs.len(),
            right: labels.len(),
        });
    }
    for (row, (x, &label)) in xs.iter().zip(labels).enumerate() {
        if x.len() != params.dim {
            return Err(CapelError::LengthMismatch {
                left: x.len(),
                right: params.dim,
            });
        }
        if label >= params.classes {
            return Err(CapelError::LabelOutOfRange {
                row,
                label,
                classes: params.classes,
            });
        }
    }
    Ok(())
}

pub(crate) fn evaluate(
    params: &Params,
    xs: &[&[f32]],
    labels: &[usize],
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<BatchResult> {
    check_batch(params, xs, labels)?;
    let inv = params.inverse_norms()?;
    let terms: Vec<SampleTerms> = xs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &label)| sample_terms(params, &inv, x, label, cfg, want_grad))
        .collect();

    let b = xs.len() as f64;
    let ce = terms.iter().map(|t| t.ce).sum::<f64>() / b;
    let pc = terms.iter().map(|t| t.pc).sum::<f64>() / b;
    let correct = terms.iter().filter(|t| t.correct).count();
    let loss = LossBreakdown::new(ce, pc, cfg.lambda);
    if !want_grad {
        return Ok(BatchResult {
            loss,
            grads: None,
            correct,
        });
    }

    let heads = params.heads();
    let alpha: Vec<f64> = (0..heads)
        .map(|i| terms.iter().map(|t| t.dalpha[i]).sum::<f64>() / b)
        .collect();

    let dim = params.dim;
    let mut weights = vec![0.0; heads * dim];
    weights
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, out)| {
            // dW_i = tau/(n B) * (sum_s g_s x_s - (sum_s g_s c_s) * w/n)
            let mut gc = 0.0;
            for (t, x) in terms.iter().zip(xs) {
                let g = t.dz[i];
                gc += g * t.cos[i];
                for (o, &xv) in out.iter_mut().zip(x.iter()) {
                    *o += g * xv as f64;
                }
            }
            let w = &params.weights[i * dim..(i + 1) * dim];
            let scale = params.tau * inv[i] / b;
            for (o, &wv) in out.iter_mut().zip(w) {
                *o = scale * (*o - gc * wv * inv[i]);
            }
        });

    Ok(BatchResult {
        loss,
        grads: Some(Gradients64 { weights, alpha }),
        correct,
    })
}

/// Mean attention-weighted cross-entropy over a batch of logit tensors.
pub fn cross_entropy_weighted(z_batch: &[LogitsTensor], alpha: &[f32], labels: &[usize]) -> Result<f64> {
    if z_batch.len() != labels.len() {
        return Err(CapelError::LengthMismatch {
            left: z_batch.len(),
            right: labels.len(),
        });
    }
    if z_batch.is_empty() {
        return Err(CapelError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for (row, (z, &label)) in z_batch.iter().zip(labels).enumerate() {
        if alpha.len() != z.values.len() {
            return Err(CapelError::LengthMismatch {
                left: alpha.len(),
                right: z.values.len(),
            });
        }
        if label >= z.classes {
            return Err(CapelError::LabelOutOfRange {
                row,
                label,
                classes: z.classes,
            });
        }
        let scores: Vec<f64> = z
            .values
            .chunks_exact(z.prompts)
            .zip(alpha.chunks_exact(z.prompts))
            .map(|(zr, ar)| zr.iter().zip(ar).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect();
        total += ce_from_scores(&scores, label).0;
    }
    Ok(total / z_batch.len() as f64)
}

/// Mean over the batch of the scoped within-class entropy of `softmax_k Z[y, .]`.
pub fn cluster_preserving_loss(
    z_batch: &[LogitsTensor],
    scope: PcScope,
    labels: Option<&[usize]>,
) -> Result<f64> {
    if scope == PcScope::TrueClassOnly && labels.is_none() {
        return Err(CapelError::MissingLabels);
    }
    if let Some(l) = labels {
        if l.len() != z_batch.len() {
            return Err(CapelError::LengthMismatch {
                left: z_batch.len(),
                right: l.len(),
            });
        }
    }
    if z_batch.is_empty() {
        return Err(CapelError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for (i, z) in z_batch.iter().enumerate() {
        let label = labels.map(|l| l[i]);
        if let Some(label) = label {
            if label >= z.classes {
                return Err(CapelError::LabelOutOfRange {
                    row: i,
                    label,
                    classes: z.classes,
                });
            }
        }
        let mut term = 0.0;
        for y in 0..z.classes {
            let omega = scope.weight(y, label, z.classes);
            if omega != 0.0 {
                let row: Vec<f64> = z.class_row(y).iter().map(|&v| v as f64).collect();
                term += omega * entropy_from_logits_f64(&row);
            }
        }
        total += term;
    }
    Ok(total / z_batch.len() as f64)
}

/// `ce + lambda * pc` for a batch of unit-norm inputs.
pub fn overall_loss(
    model: &CapelModel,
    xs: &[&[f32]],
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(&Params::from_model(model), xs, labels, cfg, false)?.loss)
}

pub fn gradients(
    model: &CapelModel,
    xs: &[&[f32]],
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (loss, g) = gradients_f64(model, xs, labels, cfg)?;
    Ok((loss, g.narrow()))
}

pub fn gradients_f64(
    model: &CapelModel,
    xs: &[&[f32]],
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Gradients64)> {
    let r = evaluate(&Params::from_model(model), xs, labels, cfg, true)?;
    Ok((r.loss, r.grads.expect("gradient requested")))
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1e-8, |a|, |n|)` over every coordinate.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error, e.g. `W[1,0,3]` or `alpha[0,2]`.
    pub worst: String,
    pub coordinates: usize,
}

/// Central differences of the `f64` overall loss against the analytic gradient,
/// over every weight and attention coordinate.
pub fn finite_diff_check(
    model: &CapelModel,
    xs: &[&[f32]],
    labels: &[usize],
    cfg: &ObjectiveConfig,
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(CapelError::InvalidConfig(format!("step {h} outside [1e-5, 1e-2]")));
    }
    let base = Params::from_model(model);
    let analytic = evaluate(&base, xs, labels, cfg, true)?
        .grads
        .expect("gradient requested");

    let loss_at = |p: &Params| -> Result<f64> { Ok(evaluate(p, xs, labels, cfg, false)?.loss.total) };
    let numeric = |p: &mut Params, in_alpha: bool, i: usize| -> Result<f64> {
        let orig = *p.coordinate(in_alpha, i);
        *p.coordinate(in_alpha, i) = orig + h;
        let plus = loss_at(p)?;
        *p.coordinate(in_alpha, i) = orig - h;
        let minus = loss_at(p)?;
        *p.coordinate(in_alpha, i) = orig;
        Ok((plus - minus) / (2.0 * h))
    };

    let mut probe = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    let (kn, dim) = (base.prompts, base.dim);
    let mut record = |name: String, a: f64, n: f64| {
        let abs = (a - n).abs();
        let rel = abs / 1e-8f64.max(a.abs()).max(n.abs());
        report.coordinates += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = name;
        }
    };
    for i in 0..base.weights.len() {
        let n = numeric(&mut probe, false, i)?;
        let head = i / dim;
        record(
            format!("W[{},{},{}]", head / kn, head % kn, i % dim),
            analytic.weights[i],
            n,
        );
    }
    for i in 0..base.alpha.len() {
        let n = numeric(&mut probe, true, i)?;
        record(format!("alpha[{},{}]", i / kn, i % kn), analytic.alpha[i], n);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ClassIndex;

    const LN2: f64 = std::f64::consts::LN_2;
    const H10: f64 = 0.582_203_108_888_218;

    fn logits(classes: usize, prompts: usize, v: &[f32]) -> LogitsTensor {
        LogitsTensor::new(classes, prompts, v.to_vec()).unwrap()
    }

    fn cfg(lambda: f64, scope: PcScope) -> ObjectiveConfig {
        ObjectiveConfig { lambda, scope }
    }

    #[test]
    fn cross_entropy_examples() {
        // s = (0.5, -0.5) via alpha = 0.5 and Z = [[1, 0], [0, -1]].
        let z = logits(2, 2, &[1., 0., 0., -1.]);
        let ce = cross_entropy_weighted(std::slice::from_ref(&z), &[0.5; 4], &[0]).unwrap();
        assert!((ce - 0.313_261_687_518_222_8).abs() < 1e-12);

        let flat = logits(3, 1, &[2., 2., 2.]);
        for label in 0..3 {
            let ce = cross_entropy_weighted(std::slice::from_ref(&flat), &[1.0; 3], &[label]).unwrap();
            assert!((ce - 3f64.ln()).abs() < 1e-12);
        }
        let ce = cross_entropy_weighted(std::slice::from_ref(&z), &[0.0; 4], &[1]).unwrap();
        assert!((ce - LN2).abs() < 1e-12);

        assert!(matches!(
            cross_entropy_weighted(&[z], &[0.5; 4], &[2]),
            Err(CapelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cluster_preserving_examples() {
        let single = logits(2, 1, &[5., -3.]);
        for scope in PcScope::ALL {
            assert_eq!(cluster_preserving_loss(std::slice::from_ref(&single), scope, Some(&[1])).unwrap(), 0.0);
        }
        let uniform = logits(1, 2, &[0., 0.]);
        let v = cluster_preserving_loss(&[uniform], PcScope::AllClassesMean, None).unwrap();
        assert!((v - LN2).abs() < 1e-12);
        let tilted = logits(1, 2, &[1., 0.]);
        let v = cluster_preserving_loss(std::slice::from_ref(&tilted), PcScope::AllClassesSum, None).unwrap();
        assert!((v - H10).abs() < 1e-9);
        assert!(matches!(
            cluster_preserving_loss(&[tilted], PcScope::TrueClassOnly, None),
            Err(CapelError::MissingLabels)
        ));
    }

    #[test]
    fn scopes_aggregate_as_documented() {
        // Class 0 uniform (ln 2), class 1 tilted (H10).
        let z = logits(2, 2, &[0., 0., 1., 0.]);
        let sum = cluster_preserving_loss(std::slice::from_ref(&z), PcScope::AllClassesSum, None).unwrap();
        let mean = cluster_preserving_loss(std::slice::from_ref(&z), PcScope::AllClassesMean, None).unwrap();
        let own = cluster_preserving_loss(&[z], PcScope::TrueClassOnly, Some(&[1])).unwrap();
        assert!((sum - (LN2 + H10)).abs() < 1e-9);
        assert!((mean - (LN2 + H10) / 2.0).abs() < 1e-9);
        assert!((own - H10).abs() < 1e-9);
    }

    fn one_class_two_heads() -> CapelModel {
        // Heads at angle so that Z = tau*cos = (1, 0) for x = e0 with tau = 1.
        CapelModel::from_parts(
            ClassIndex::numbered(1),
            2,
            2,
            vec![1., 0., 0., 1.],
            vec![0.5, 0.5],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn overall_loss_examples() {
        let m = one_class_two_heads();
        let x: &[f32] = &[1., 0.];
        let l0 = overall_loss(&m, &[x], &[0], &cfg(0.0, PcScope::AllClassesMean)).unwrap();
        assert_eq!(l0.total, l0.ce);
        let l3 = overall_loss(&m, &[x], &[0], &cfg(3.0, PcScope::AllClassesMean)).unwrap();
        // Y = 1 so ce is 0 and the total is 3 * H(softmax(1, 0)).
        assert!(l3.ce.abs() < 1e-15);
        assert!((l3.total - (l3.ce + 3.0 * H10)).abs() < 1e-9);

        let k1 = CapelModel::from_parts(ClassIndex::numbered(2), 1, 2, vec![1., 0., 0., 1.], vec![1.; 2], 1.0)
            .unwrap();
        let l = overall_loss(&k1, &[x], &[1], &cfg(3.0, PcScope::AllClassesSum)).unwrap();
        assert_eq!(l.pc, 0.0);
        assert_eq!(l.total, l.ce);
    }

    #[test]
    fn orthogonal_input_gradient_matches_hand_derivation() {
        // x orthogonal to every head; Z = 0, p = (1/2, 1/2), label 0.
        let k = 3;
        let mut weights = Vec::new();
        for i in 0..2 * k {
            let mut w = vec![0f32; 8];
            w[1 + (i % 7)] = 1.0;
            weights.extend(w);
        }
        let m = CapelModel::from_parts(ClassIndex::numbered(2), k, 8, weights, vec![1.0 / k as f32; 2 * k], 1.0)
            .unwrap();
        let mut x = vec![0f32; 8];
        x[0] = 1.0;
        let (_, g) = gradients_f64(&m, &[&x], &[0], &cfg(0.0, PcScope::AllClassesMean)).unwrap();
        assert!(g.alpha.iter().all(|&v| v == 0.0));
        let alpha = (1.0f32 / k as f32) as f64;
        for y in 0..2 {
            for kk in 0..k {
                let head = &g.weights[(y * k + kk) * 8..(y * k + kk + 1) * 8];
                let expected = if y == 0 { -0.5 * alpha } else { 0.5 * alpha };
                assert!((head[0] - expected).abs() < 1e-15, "{head:?}");
                assert!(head[1..].iter().all(|&v| v == 0.0));
            }
        }
        let report = finite_diff_check(&m, &[&x], &[0], &cfg(0.0, PcScope::AllClassesMean), 1e-3).unwrap();
        assert!(report.max_abs_error < 1e-7, "{report:?}");
    }

    #[test]
    fn single_prompt_pc_has_no_gradient() {
        let m = CapelModel::from_parts(ClassIndex::numbered(2), 1, 2, vec![0.6, 0.8, 1., 0.], vec![1.; 2], 2.0)
            .unwrap();
        let x: &[f32] = &[0., 1.];
        let (_, with) = gradients_f64(&m, &[x], &[0], &cfg(3.0, PcScope::AllClassesSum)).unwrap();
        let (_, without) = gradients_f64(&m, &[x], &[0], &cfg(0.0, PcScope::AllClassesSum)).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn rejects_bad_step_and_labels() {
        let m = one_class_two_heads();
        let x: &[f32] = &[1., 0.];
        assert!(finite_diff_check(&m, &[x], &[0], &cfg(0.0, PcScope::AllClassesMean), 0.1).is_err());
        assert!(matches!(
            overall_loss(&m, &[x], &[1], &cfg(0.0, PcScope::AllClassesMean)),
            Err(CapelError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            overall_loss(&m, &[], &[], &cfg(0.0, PcScope::AllClassesMean)),
            Err(CapelError::EmptyTrainingSet)
        ));
    }
}

/// A small random problem for gradient checking: heads point in uniformly
/// random directions with norms in `[0.8, 1.25)` (off the sphere, as after
/// some training), attention in `[0.2, 1.2)`, unit-norm inputs and uniform
/// labels.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub model: CapelModel,
    pub inputs: crate::tensor::EmbeddingMatrix,
    pub labels: Vec<usize>,
}

impl GradCheckInstance {
    pub fn random(seed: u64, classes: usize, prompts: usize, dim: usize, batch: usize, tau: f32) -> Result<Self> {
        if classes == 0 || prompts == 0 || dim == 0 || batch == 0 {
            return Err(CapelError::InvalidConfig("gradcheck sizes must be >= 1".into()));
        }
        let mut rng = crate::numerics::Rng::new(seed);
        let mut weights = Vec::with_capacity(classes * prompts * dim);
        for _ in 0..classes * prompts {
            let v: Vec<f32> = (0..dim).map(|_| rng.gaussian() as f32).collect();
            let scale = 0.8 + 0.45 * rng.uniform();
            weights.extend(crate::numerics::l2_normalize(&v)?.into_iter().map(|w| (w as f64 * scale) as f32));
        }
        let alpha: Vec<f32> = (0..classes * prompts)
            .map(|_| (0.2 + rng.uniform()) as f32)
            .collect();
        let model = CapelModel::from_parts(
            crate::tensor::ClassIndex::numbered(classes),
            prompts,
            dim,
            weights,
            alpha,
            tau,
        )?;
        let mut data = Vec::with_capacity(batch * dim);
        for _ in 0..batch {
            let v: Vec<f32> = (0..dim).map(|_| rng.gaussian() as f32).collect();
            data.extend(crate::numerics::l2_normalize(&v)?);
        }
        let inputs = crate::tensor::EmbeddingMatrix::new(batch, dim, data)?;
        let labels = (0..batch).map(|_| rng.below(classes)).collect();
        Ok(GradCheckInstance {
            model,
            inputs,
            labels,
        })
    }

    pub fn check(&self, cfg: &ObjectiveConfig, h: f64) -> Result<GradCheckReport> {
        let xs: Vec<&[f32]> = self.inputs.iter_rows().collect();
        finite_diff_check(&self.model, &xs, &self.labels, cfg, h)
    }
}
