use std::path::PathBuf;

use capel::synth::{FlawMode, SynthConfig};
use capel::trainer::Shots;
use capel::{AlphaInit, PcScope, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "capel", version, about = "Train and evaluate prompt-ensemble classifiers over frozen embeddings")]
pub struct Cli {
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "CAPEL_THREADS", default_value_t = 1, value_parser = clap::value_parser!(usize))]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic multi-cluster instance.
    Synth(SynthArgs),
    /// Train a model from prompt embeddings and labeled image embeddings.
    Train(TrainArgs),
    /// Score a checkpoint on labeled embeddings.
    Eval(EvalArgs),
    /// Write per-row predictions.
    Predict(PredictArgs),
    /// Keep the highest-attention prompts of each class.
    Prune(PruneArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck(GradcheckArgs),
    /// Run the seven-row component ablation.
    Ablate(AblateArgs),
    /// Print a checkpoint summary.
    Inspect(InspectArgs),
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite number >= 0, got {s}"))
    }
}

fn positive_f32(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite number > 0, got {s}"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1), got {s}"))
    }
}

fn shots(s: &str) -> Result<Shots, String> {
    s.parse().map_err(|e: capel::CapelError| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScopeArg {
    AllClassesMean,
    AllClassesSum,
    TrueClassOnly,
}

impl From<ScopeArg> for PcScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::AllClassesMean => PcScope::AllClassesMean,
            ScopeArg::AllClassesSum => PcScope::AllClassesSum,
            ScopeArg::TrueClassOnly => PcScope::TrueClassOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInitArg {
    Uniform,
    Ones,
}

impl From<AlphaInitArg> for AlphaInit {
    fn from(a: AlphaInitArg) -> Self {
        match a {
            AlphaInitArg::Uniform => AlphaInit::Uniform,
            AlphaInitArg::Ones => AlphaInit::Ones,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FlawModeArg {
    WrongClass,
    Random,
}

impl From<FlawModeArg> for FlawMode {
    fn from(f: FlawModeArg) -> Self {
        match f {
            FlawModeArg::WrongClass => FlawMode::WrongClass,
            FlawModeArg::Random => FlawMode::Random,
        }
    }
}

/// Optimizer and objective flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 2e-3, value_parser = non_negative)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 3.0, value_parser = non_negative, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval, allow_hyphen_values = true)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value = "all_classes_mean")]
    pub pc_scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "uniform")]
    pub alpha_init: AlphaInitArg,
    #[arg(long, default_value_t = 100.0, value_parser = positive_f32)]
    pub tau: f32,
    /// Training samples per class, or `all`.
    #[arg(long, default_value = "all", value_parser = shots)]
    #[serde(serialize_with = "serialize_display")]
    pub shots: Shots,
    /// Take every sample of a class that has fewer than `--shots`.
    #[arg(long)]
    pub allow_fewer: bool,
    #[arg(long)]
    pub freeze_alpha: bool,
    #[arg(long)]
    pub freeze_w: bool,
}

fn serialize_display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl TrainFlags {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size as usize,
            lambda: self.lambda,
            momentum: self.momentum,
            pc_scope: self.pc_scope.into(),
            seed: self.seed,
            alpha_init: self.alpha_init.into(),
            tau: self.tau,
            shots: self.shots,
            allow_fewer: self.allow_fewer,
            freeze_alpha: self.freeze_alpha,
            freeze_w: self.freeze_w,
        }
    }
}

/// Where the prompt side of a model comes from.
#[derive(Debug, Clone, Args, Serialize)]
pub struct PromptSource {
    /// Prompt bank JSON; its key order fixes class indices.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Prompt embedding file, `Y*K` rows, class-major. Defaults to the bank
    /// path with a `.cape` extension.
    #[arg(long)]
    pub prompt_embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 4)]
    pub prompts: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub n_train: usize,
    #[arg(long, default_value_t = 128)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.15, value_parser = non_negative)]
    pub sigma_sample: f64,
    #[arg(long, default_value_t = 0.10, value_parser = non_negative)]
    pub sigma_prompt: f64,
    #[arg(long, default_value_t = 0)]
    pub flawed: usize,
    #[arg(long, value_enum, default_value = "wrong_class")]
    pub flaw_mode: FlawModeArg,
    /// Spread of cluster centers around their class anchor.
    #[arg(long, default_value_t = 1.0, conflicts_with = "uniform_centers")]
    pub class_spread: f64,
    /// Draw cluster centers uniformly on the sphere, ignoring class anchors.
    #[arg(long)]
    pub uniform_centers: bool,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            clusters: self.clusters,
            prompts: self.prompts,
            dim: self.dim,
            n_train_per_class: self.n_train,
            n_test_per_class: self.n_test,
            sigma_sample: self.sigma_sample,
            sigma_prompt: self.sigma_prompt,
            flawed_per_class: self.flawed,
            flaw_mode: self.flaw_mode.into(),
            class_spread: (!self.uniform_centers).then_some(self.class_spread),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Labeled training embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    /// Checkpoint path; metadata goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// History JSON path. Defaults to `<out>.history.json`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled evaluation embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Attention matrix CSV path.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Synth manifest; adds clean-versus-flawed attention statistics.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all_classes_mean")]
    pub pc_scope: ScopeArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// CSV output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompts to keep per class.
    #[arg(long)]
    pub keep: usize,
    /// Rescale kept weights so each class's attention sum is unchanged.
    #[arg(long)]
    pub rescale: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "y", default_value_t = 3)]
    pub classes: usize,
    #[arg(long = "k", default_value_t = 3)]
    pub prompts: usize,
    #[arg(long = "d", default_value_t = 6)]
    pub dim: usize,
    #[arg(long = "b", default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "all_classes_mean")]
    pub pc_scope: ScopeArg,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f32)]
    pub tau: f32,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_embeddings: PathBuf,
    #[arg(long)]
    pub test_embeddings: PathBuf,
    #[command(flatten)]
    pub source: PromptSource,
    /// Number of runs; run `i` uses seed `--seed + i`.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-run CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}
