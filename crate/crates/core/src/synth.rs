//! Seeded multi-cluster benchmark instances on the unit sphere.
//!
//! Every class owns `M` cluster centers. Samples are noisy copies of a
//! center, clean prompts are noisy copies of the centers taken round-robin,
//! and flawed prompts point somewhere unrelated to their class.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::datastore::PromptBank;
use crate::error::{CapelError, Result};
use crate::numerics::{cosine, derive_seed, l2_normalize, Rng};
use crate::tensor::{ClassIndex, EmbeddingMatrix, PromptTensor};

/// Within-class center pairs must have cosine below this.
pub const MAX_CENTER_COSINE: f64 = 0.8;
/// Rejection-sampling budget per class.
pub const MAX_CENTER_DRAWS: usize = 10_000;
pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlawMode {
    /// A noisy center of some other class.
    #[default]
    WrongClass,
    /// A uniformly random direction.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub clusters: usize,
    pub prompts: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    /// Per-coordinate std of the gaussian added to a center before normalizing a sample.
    pub sigma_sample: f64,
    /// Same for prompts.
    pub sigma_prompt: f64,
    pub flawed_per_class: usize,
    pub flaw_mode: FlawMode,
    /// Centers are `normalize(anchor_y + class_spread * g / sqrt(D))` around a
    /// per-class anchor. `None` draws them uniformly on the sphere instead.
    pub class_spread: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            clusters: 4,
            prompts: 4,
            dim: 64,
            n_train_per_class: 64,
            n_test_per_class: 128,
            sigma_sample: 0.15,
            sigma_prompt: 0.10,
            flawed_per_class: 0,
            flaw_mode: FlawMode::WrongClass,
            class_spread: Some(1.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CapelError::InvalidConfig(msg));
        for (name, v) in [
            ("classes", self.classes),
            ("clusters", self.clusters),
            ("prompts", self.prompts),
            ("n_train_per_class", self.n_train_per_class),
            ("n_test_per_class", self.n_test_per_class),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.dim < MIN_DIM {
            return bad(format!("dim must be >= {MIN_DIM}, got {}", self.dim));
        }
        if self.flawed_per_class >= self.prompts {
            return bad(format!(
                "flawed_per_class ({}) must be below prompts ({})",
                self.flawed_per_class, self.prompts
            ));
        }
        if self.flawed_per_class > 0 && self.flaw_mode == FlawMode::WrongClass && self.classes < 2 {
            return bad("wrong_class flaws need at least two classes".into());
        }
        for (name, s) in [("sigma_sample", self.sigma_sample), ("sigma_prompt", self.sigma_prompt)] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {s}"));
            }
        }
        if let Some(s) = self.class_spread {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("class_spread must be finite and > 0, got {s}"));
            }
        }
        Ok(())
    }
}

/// A labeled split with the cluster each sample was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub x: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub clusters: Vec<usize>,
}

impl SynthSplit {
    pub fn labels_u32(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| l as u32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub config: SynthConfig,
    pub classes: ClassIndex,
    /// `Y*M` centers, class-major.
    pub centers: EmbeddingMatrix,
    pub train: SynthSplit,
    pub test: SynthSplit,
    pub prompts: PromptTensor,
    /// `flaw_mask[y][k]` marks flawed prompts.
    pub flaw_mask: Vec<Vec<bool>>,
    /// Cluster a clean prompt was copied from, `None` for flawed prompts.
    pub prompt_clusters: Vec<Vec<Option<usize>>>,
}

/// Serializable summary written next to a generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub classes: ClassIndex,
    pub train_clusters: Vec<usize>,
    pub test_clusters: Vec<usize>,
    pub flaw_mask: Vec<Vec<bool>>,
    pub prompt_clusters: Vec<Vec<Option<usize>>>,
}

impl SynthInstance {
    pub fn manifest(&self) -> SynthManifest {
        SynthManifest {
            config: self.config.clone(),
            classes: self.classes.clone(),
            train_clusters: self.train.clusters.clone(),
            test_clusters: self.test.clusters.clone(),
            flaw_mask: self.flaw_mask.clone(),
            prompt_clusters: self.prompt_clusters.clone(),
        }
    }

    /// Placeholder prompt strings describing where each prompt came from.
    pub fn prompt_bank(&self) -> PromptBank {
        let mut entries = IndexMap::new();
        for y in 0..self.classes.len() {
            let name = self.classes.name(y);
            let texts = self.prompt_clusters[y]
                .iter()
                .enumerate()
                .map(|(k, c)| match c {
                    Some(m) => format!("{name} prompt {k} (cluster {m})"),
                    None => format!("{name} prompt {k} (flawed)"),
                })
                .collect();
            entries.insert(name.to_string(), texts);
        }
        PromptBank::new(entries).expect("generated bank is uniform and non-empty")
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.gaussian()).collect()
}

fn normalized(v: &[f64]) -> Result<Vec<f32>> {
    let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    l2_normalize(&v32)
}

fn perturb(rng: &mut Rng, center: &[f32], sigma: f64) -> Result<Vec<f32>> {
    let v: Vec<f64> = center
        .iter()
        .map(|&c| c as f64 + sigma * rng.gaussian())
        .collect();
    normalized(&v)
}

fn draw_centers(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Vec<f32>>> {
    let (m, d) = (cfg.clusters, cfg.dim);
    let mut out = Vec::with_capacity(cfg.classes * m);
    for class in 0..cfg.classes {
        let anchor = match cfg.class_spread {
            Some(_) => Some(normalized(&gaussian_vec(rng, d, 1.0))?),
            None => None,
        };
        let mut accepted: Vec<Vec<f32>> = Vec::with_capacity(m);
        let mut draws = 0;
        while accepted.len() < m {
            if draws == MAX_CENTER_DRAWS {
                return Err(CapelError::RejectionExhausted { class, draws });
            }
            draws += 1;
            let candidate = match (&anchor, cfg.class_spread) {
                (Some(a), Some(spread)) => {
                    let scale = spread / (d as f64).sqrt();
                    let v: Vec<f64> = a.iter().map(|&x| x as f64 + scale * rng.gaussian()).collect();
                    normalized(&v)?
                }
                _ => normalized(&gaussian_vec(rng, d, 1.0))?,
            };
            let mut ok = true;
            for c in &accepted {
                if cosine(c, &candidate)? >= MAX_CENTER_COSINE {
                    ok = false;
                    break;
                }
            }
            if ok {
                accepted.push(candidate);
            }
        }
        out.extend(accepted);
    }
    Ok(out)
}

fn draw_split(cfg: &SynthConfig, centers: &[Vec<f32>], per_class: usize, rng: &mut Rng) -> Result<SynthSplit> {
    let mut data = Vec::with_capacity(cfg.classes * per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.classes * per_class);
    let mut clusters = Vec::with_capacity(cfg.classes * per_class);
    for y in 0..cfg.classes {
        for _ in 0..per_class {
            let m = rng.below(cfg.clusters);
            data.extend(perturb(rng, &centers[y * cfg.clusters + m], cfg.sigma_sample)?);
            labels.push(y);
            clusters.push(m);
        }
    }
    Ok(SynthSplit {
        x: EmbeddingMatrix::new(labels.len(), cfg.dim, data)?,
        labels,
        clusters,
    })
}

type PromptDraw = (PromptTensor, Vec<Vec<bool>>, Vec<Vec<Option<usize>>>);

fn draw_prompts(cfg: &SynthConfig, centers: &[Vec<f32>], rng: &mut Rng) -> Result<PromptDraw> {
    let (yn, kn, mn) = (cfg.classes, cfg.prompts, cfg.clusters);
    let mut data = Vec::with_capacity(yn * kn * cfg.dim);
    let mut mask = Vec::with_capacity(yn);
    let mut sources = Vec::with_capacity(yn);
    for y in 0..yn {
        let mut flawed = vec![false; kn];
        for k in rng.choose_k(kn, cfg.flawed_per_class)? {
            flawed[k] = true;
        }
        let mut clean_seen = 0;
        let mut src = Vec::with_capacity(kn);
        for &is_flawed in &flawed {
            let v = if is_flawed {
                src.push(None);
                match cfg.flaw_mode {
                    FlawMode::WrongClass => {
                        let mut other = rng.below(yn - 1);
                        if other >= y {
                            other += 1;
                        }
                        let m = rng.below(mn);
                        perturb(rng, &centers[other * mn + m], cfg.sigma_prompt)?
                    }
                    FlawMode::Random => normalized(&gaussian_vec(rng, cfg.dim, 1.0))?,
                }
            } else {
                let m = clean_seen % mn;
                clean_seen += 1;
                src.push(Some(m));
                perturb(rng, &centers[y * mn + m], cfg.sigma_prompt)?
            };
            data.extend(v);
        }
        mask.push(flawed);
        sources.push(src);
    }
    Ok((PromptTensor::new(yn, kn, cfg.dim, data)?, mask, sources))
}

/// Generates an instance. Centers, prompts, train and test samples use
/// independent streams derived from `cfg.seed`, so changing a split size
/// leaves everything else untouched.
pub fn generate(cfg: &SynthConfig) -> Result<SynthInstance> {
    cfg.validate()?;
    let stream = |tag: &str| Rng::new(derive_seed(cfg.seed, tag));
    let centers = draw_centers(cfg, &mut stream("synth/centers"))?;
    let (prompts, flaw_mask, prompt_clusters) = draw_prompts(cfg, &centers, &mut stream("synth/prompts"))?;
    let train = draw_split(cfg, &centers, cfg.n_train_per_class, &mut stream("synth/train"))?;
    let test = draw_split(cfg, &centers, cfg.n_test_per_class, &mut stream("synth/test"))?;
    let centers = EmbeddingMatrix::from_rows(&centers)?;
    Ok(SynthInstance {
        config: cfg.clone(),
        classes: ClassIndex::numbered(cfg.classes),
        centers,
        train,
        test,
        prompts,
        flaw_mask,
        prompt_clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm_f64;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            clusters: 2,
            prompts: 3,
            dim: 8,
            n_train_per_class: 5,
            n_test_per_class: 4,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_unit_rows() {
        let inst = generate(&small()).unwrap();
        assert_eq!(inst.train.x.rows(), 15);
        assert_eq!(inst.test.x.rows(), 12);
        assert_eq!((inst.prompts.classes(), inst.prompts.prompts()), (3, 3));
        for m in [&inst.train.x, &inst.test.x, &inst.prompts.to_matrix(), &inst.centers] {
            for r in m.iter_rows() {
                assert!((norm_f64(r) - 1.0).abs() < 1e-6);
            }
        }
        assert!(inst.train.clusters.iter().all(|&c| c < 2));
        assert!(inst.flaw_mask.iter().flatten().all(|&f| !f));
    }

    #[test]
    fn same_seed_same_instance() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.train.x, generate(&small()).unwrap().train.x);
    }

    #[test]
    fn test_split_size_does_not_move_train() {
        let a = generate(&small()).unwrap();
        let b = generate(&SynthConfig { n_test_per_class: 9, ..small() }).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.prompts, b.prompts);
    }

    #[test]
    fn flaw_mask_counts() {
        for mode in [FlawMode::WrongClass, FlawMode::Random] {
            let inst = generate(&SynthConfig { flawed_per_class: 2, flaw_mode: mode, ..small() }).unwrap();
            for (mask, src) in inst.flaw_mask.iter().zip(&inst.prompt_clusters) {
                assert_eq!(mask.iter().filter(|&&f| f).count(), 2);
                for (f, s) in mask.iter().zip(src) {
                    assert_eq!(*f, s.is_none());
                }
            }
        }
    }

    #[test]
    fn centers_respect_separation_cap() {
        for spread in [Some(1.0), None] {
            let cfg = SynthConfig { class_spread: spread, ..SynthConfig::default() };
            let inst = generate(&cfg).unwrap();
            for y in 0..cfg.classes {
                for i in 0..cfg.clusters {
                    for j in i + 1..cfg.clusters {
                        let a = inst.centers.row(y * cfg.clusters + i);
                        let b = inst.centers.row(y * cfg.clusters + j);
                        assert!(cosine(a, b).unwrap() < MAX_CENTER_COSINE);
                    }
                }
            }
        }
    }

    #[test]
    fn impossible_separation_is_reported() {
        // A tiny spread keeps every candidate near the anchor.
        let cfg = SynthConfig { class_spread: Some(1e-3), ..small() };
        assert!(matches!(generate(&cfg), Err(CapelError::RejectionExhausted { class: 0, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(generate(&SynthConfig { dim: 7, ..small() }).is_err());
        assert!(generate(&SynthConfig { flawed_per_class: 3, ..small() }).is_err());
        assert!(generate(&SynthConfig { sigma_sample: -0.1, ..small() }).is_err());
        assert!(generate(&SynthConfig { clusters: 0, ..small() }).is_err());
    }

    #[test]
    fn bank_and_manifest_agree() {
        let inst = generate(&SynthConfig { flawed_per_class: 1, ..small() }).unwrap();
        let bank = inst.prompt_bank();
        assert_eq!(bank.class_index(), inst.classes);
        assert_eq!(bank.prompts_per_class(), 3);
        let m = inst.manifest();
        let back: SynthManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
