//! Few-shot sampling and the mini-batch SGD loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CapelError, Result};
use crate::model::{AlphaInit, CapelModel, DEFAULT_TAU};
use crate::numerics::{derive_seed, Rng};
use crate::objective::{evaluate, Gradients64, ObjectiveConfig, Params, PcScope};
use crate::tensor::{ClassIndex, EmbeddingMatrix, PromptTensor};

/// Training samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Shots {
    #[default]
    All,
    Count(usize),
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::All => f.write_str("all"),
            Shots::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Shots {
    type Err = CapelError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(CapelError::InvalidConfig(format!(
                "shots must be a positive integer or `all`, got {s:?}"
            ))),
            Ok(n) => Ok(Shots::Count(n)),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::All => s.serialize_str("all"),
            Shots::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(0) => Err(serde::de::Error::custom("shots must be positive")),
            Repr::Count(n) => Ok(Shots::Count(n)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub momentum: f64,
    pub pc_scope: PcScope,
    pub seed: u64,
    pub alpha_init: AlphaInit,
    pub tau: f32,
    pub shots: Shots,
    pub allow_fewer: bool,
    pub freeze_alpha: bool,
    pub freeze_w: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            epochs: 100,
            batch_size: 64,
            lambda: 3.0,
            momentum: 0.0,
            pc_scope: PcScope::default(),
            seed: 0,
            alpha_init: AlphaInit::default(),
            tau: DEFAULT_TAU,
            shots: Shots::All,
            allow_fewer: false,
            freeze_alpha: false,
            freeze_w: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CapelError::InvalidConfig(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be finite and > 0, got {}", self.tau));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            scope: self.pc_scope,
        }
    }

    /// Fresh model from prompt embeddings using this config's `tau` and alpha init.
    pub fn init_model(&self, prompts: &PromptTensor, classes: ClassIndex) -> Result<CapelModel> {
        CapelModel::init(prompts, classes, self.tau, self.alpha_init)
    }
}

/// Training indices grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub per_class: Vec<Vec<usize>>,
    pub shots: usize,
    pub seed: u64,
}

impl FewShotSplit {
    /// All selected indices, class by class.
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }
}

/// Draws `shots` indices per class without replacement.
pub fn few_shot_sample(
    labels: &[usize],
    classes: usize,
    shots: usize,
    seed: u64,
    allow_fewer: bool,
) -> Result<FewShotSplit> {
    let mut by_class = vec![Vec::new(); classes];
    for (row, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CapelError::LabelOutOfRange {
                row,
                label: l,
                classes,
            });
        }
        by_class[l].push(row);
    }
    let mut rng = Rng::new(seed);
    let mut per_class = Vec::with_capacity(classes);
    for (class, pool) in by_class.iter().enumerate() {
        if pool.is_empty() {
            return Err(CapelError::MissingClass(class));
        }
        if pool.len() < shots && !allow_fewer {
            return Err(CapelError::InsufficientSamples {
                class,
                available: pool.len(),
                requested: shots,
            });
        }
        let k = shots.min(pool.len());
        let picks = rng.choose_k(pool.len(), k)?;
        per_class.push(picks.into_iter().map(|i| pool[i]).collect());
    }
    Ok(FewShotSplit {
        per_class,
        shots,
        seed,
    })
}

/// SGD momentum buffers, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub weights: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Velocity {
    pub fn zeros(model: &CapelModel) -> Self {
        Velocity {
            weights: vec![0.0; model.weights().len()],
            alpha: vec![0.0; model.alpha().len()],
        }
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v` on both `W` and alpha.
pub fn sgd_step(
    model: &mut CapelModel,
    grads: &Gradients64,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    let (w, a) = model.params_mut();
    for (len, glen) in [(w.len(), grads.weights.len()), (a.len(), grads.alpha.len())] {
        if len != glen {
            return Err(CapelError::LengthMismatch { left: glen, right: len });
        }
    }
    for (theta, (v, g)) in w
        .iter_mut()
        .chain(a.iter_mut())
        .zip(velocity.weights.iter_mut().chain(velocity.alpha.iter_mut()).zip(grads.weights.iter().chain(&grads.alpha)))
    {
        *v = momentum * *v + g;
        *theta = (*theta as f64 - lr * *v) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub pc: f64,
    pub total: f64,
    pub train_accuracy: f64,
    /// Not serialized, so that history files are reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    /// Hex SHA-256 of [`TrainHistory::to_json`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Trains a copy of `model` on all rows of `xs`.
pub fn train(
    model: &CapelModel,
    xs: &EmbeddingMatrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(CapelModel, TrainHistory)> {
    cfg.validate()?;
    if xs.rows() == 0 {
        return Err(CapelError::EmptyTrainingSet);
    }
    if labels.len() != xs.rows() {
        return Err(CapelError::LengthMismatch {
            left: labels.len(),
            right: xs.rows(),
        });
    }
    if xs.dim() != model.dim() {
        return Err(CapelError::DimMismatch(format!(
            "embeddings have D={}, model has D={}",
            xs.dim(),
            model.dim()
        )));
    }
    xs.validate_unit_rows()?;

    let objective = cfg.objective();
    let mut model = model.clone();
    let mut velocity = Velocity::zeros(&model);
    let mut rng = Rng::new(derive_seed(cfg.seed, "shuffle"));
    let n = xs.rows();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let (mut ce, mut pc, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx: Vec<&[f32]> = chunk.iter().map(|&i| xs.row(i)).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let r = evaluate(&Params::from_model(&model), &bx, &by, &objective, true)?;
            if !r.loss.ce.is_finite() || !r.loss.pc.is_finite() {
                return Err(CapelError::NonFiniteLoss {
                    epoch,
                    batch,
                    ce: r.loss.ce,
                    pc: r.loss.pc,
                });
            }
            let w = chunk.len() as f64;
            ce += r.loss.ce * w;
            pc += r.loss.pc * w;
            total += r.loss.total * w;
            correct += r.correct;

            let mut grads = r.grads.expect("gradient requested");
            if cfg.freeze_w {
                grads.weights.fill(0.0);
            }
            if cfg.freeze_alpha {
                grads.alpha.fill(0.0);
            }
            sgd_step(&mut model, &grads, cfg.lr, cfg.momentum, &mut velocity)?;
        }
        if model.weights().iter().chain(model.alpha()).any(|v| !v.is_finite()) {
            return Err(CapelError::NonFinite("parameters after SGD step"));
        }
        let nf = n as f64;
        history.epochs.push(EpochRecord {
            epoch,
            ce: ce / nf,
            pc: pc / nf,
            total: total / nf,
            train_accuracy: correct as f64 / nf,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: CapelModel,
    pub history: TrainHistory,
    /// `None` when training used every sample.
    pub split: Option<FewShotSplit>,
}

/// Samples the few-shot split, initializes from the prompts, and trains.
/// Split and shuffle seeds both derive from `cfg.seed`.
pub fn fit(
    prompts: &PromptTensor,
    classes: ClassIndex,
    xs: &EmbeddingMatrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let (train_x, train_y, split) = match cfg.shots {
        Shots::All => (None, None, None),
        Shots::Count(shots) => {
            let split = few_shot_sample(
                labels,
                prompts.classes(),
                shots,
                derive_seed(cfg.seed, "split"),
                cfg.allow_fewer,
            )?;
            let idx = split.indices();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            (Some(xs.select(&idx)), Some(y), Some(split))
        }
    };
    let model = cfg.init_model(prompts, classes)?;
    let (model, history) = train(
        &model,
        train_x.as_ref().unwrap_or(xs),
        train_y.as_deref().unwrap_or(labels),
        cfg,
    )?;
    Ok(FitOutcome { model, history, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_model(theta: f32) -> CapelModel {
        CapelModel::from_parts(ClassIndex::numbered(1), 1, 1, vec![theta], vec![theta], 1.0).unwrap()
    }

    #[test]
    fn sgd_step_examples() {
        let mut m = one_param_model(1.0);
        let mut v = Velocity::zeros(&m);
        let g = Gradients64 {
            weights: vec![0.5],
            alpha: vec![0.5],
        };
        sgd_step(&mut m, &g, 0.1, 0.0, &mut v).unwrap();
        assert_eq!(m.weights(), &[0.95]);
        assert_eq!(m.alpha(), &[0.95]);

        let mut m = one_param_model(0.0);
        let mut v = Velocity::zeros(&m);
        let g = Gradients64 {
            weights: vec![1.0],
            alpha: vec![1.0],
        };
        sgd_step(&mut m, &g, 1.0, 0.9, &mut v).unwrap();
        assert_eq!(m.alpha(), &[-1.0]);
        sgd_step(&mut m, &g, 1.0, 0.9, &mut v).unwrap();
        assert_eq!(v.alpha, vec![1.9]);
        assert_eq!(m.alpha(), &[-2.9]);
    }

    #[test]
    fn zero_lr_leaves_model_bitwise_unchanged() {
        let m0 = one_param_model(0.3);
        let mut m = m0.clone();
        let mut v = Velocity::zeros(&m);
        let g = Gradients64 {
            weights: vec![123.0],
            alpha: vec![-7.0],
        };
        sgd_step(&mut m, &g, 0.0, 0.5, &mut v).unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn few_shot_examples() {
        let labels = [0, 0, 1, 1, 1];
        let s = few_shot_sample(&labels, 2, 2, 9, false).unwrap();
        let mut c0 = s.per_class[0].clone();
        c0.sort();
        assert_eq!(c0, vec![0, 1]);
        assert_eq!(s.per_class[1].len(), 2);
        assert!(s.per_class[1].iter().all(|&i| labels[i] == 1));
        assert_eq!(s, few_shot_sample(&labels, 2, 2, 9, false).unwrap());

        assert!(matches!(
            few_shot_sample(&labels, 2, 3, 9, false),
            Err(CapelError::InsufficientSamples { class: 0, available: 2, requested: 3 })
        ));
        let s = few_shot_sample(&labels, 2, 3, 9, true).unwrap();
        assert_eq!(s.per_class[0].len(), 2);
        assert!(matches!(
            few_shot_sample(&labels, 3, 1, 9, false),
            Err(CapelError::MissingClass(2))
        ));
    }

    #[test]
    fn shots_parse_and_serialize() {
        assert_eq!("all".parse::<Shots>().unwrap(), Shots::All);
        assert_eq!("16".parse::<Shots>().unwrap(), Shots::Count(16));
        assert!("0".parse::<Shots>().is_err());
        assert!("many".parse::<Shots>().is_err());
        let cfg = TrainConfig {
            shots: Shots::Count(4),
            ..TrainConfig::default()
        };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let all: TrainConfig = serde_json::from_str(r#"{"shots":"all"}"#).unwrap();
        assert_eq!(all.shots, Shots::All);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { lr: -0.1, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(CapelError::InvalidConfig(_))));
        }
    }

    fn toy() -> (CapelModel, EmbeddingMatrix, Vec<usize>) {
        let p = PromptTensor::new(2, 2, 2, vec![1., 0.1, 1., -0.1, 0.1, 1., -0.1, 1.]).unwrap();
        let m = CapelModel::init(&p, ClassIndex::numbered(2), 10.0, AlphaInit::Uniform).unwrap();
        let xs = EmbeddingMatrix::new(3, 2, vec![1., 0., 0., 1., 0.6, 0.8]).unwrap();
        (m, xs, vec![0, 1, 1])
    }

    #[test]
    fn zero_epochs_and_zero_lr() {
        let (m, xs, y) = toy();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, h) = train(&m, &xs, &y, &cfg).unwrap();
        assert_eq!(out, m);
        assert!(h.is_empty());

        let cfg = TrainConfig { epochs: 5, lr: 0.0, batch_size: 2, ..Default::default() };
        let (out, h) = train(&m, &xs, &y, &cfg).unwrap();
        assert_eq!(out, m);
        assert_eq!(h.len(), 5);
    }

    #[test]
    fn empty_training_set() {
        let (m, _, _) = toy();
        let xs = EmbeddingMatrix::new(0, 2, vec![]).unwrap();
        assert!(matches!(
            train(&m, &xs, &[], &TrainConfig::default()),
            Err(CapelError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn freeze_flags_hold_parameters() {
        let (m, xs, y) = toy();
        let base = TrainConfig { epochs: 3, lr: 0.05, batch_size: 2, ..Default::default() };
        let (out, _) = train(&m, &xs, &y, &TrainConfig { freeze_alpha: true, ..base.clone() }).unwrap();
        assert_eq!(out.alpha(), m.alpha());
        assert_ne!(out.weights(), m.weights());
        let (out, _) = train(&m, &xs, &y, &TrainConfig { freeze_w: true, ..base }).unwrap();
        assert_eq!(out.weights(), m.weights());
        assert_ne!(out.alpha(), m.alpha());
    }

    #[test]
    fn history_digest_ignores_wall_clock() {
        let (m, xs, y) = toy();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let (a, ha) = train(&m, &xs, &y, &cfg).unwrap();
        let (b, hb) = train(&m, &xs, &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.digest(), hb.digest());
        assert!(!ha.to_json().contains("seconds"));
    }
}
