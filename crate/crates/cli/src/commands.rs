use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use capel::datastore::{
    read_checkpoint, read_embeddings, read_json, read_prompt_bank, validate_labels, write_checkpoint,
    write_embeddings, write_json, write_prompt_bank, CheckpointMetadata, PromptBank,
};
use capel::evalsuite::{
    ablation_run, accuracy, attention_export, empirical_conditional_entropy, flaw_separation,
    prototype_diversity, summarize_ablation, write_ablation_summary_csv, AblationRow, AblationSummary,
    DiversityReport, EvalReport, FlawSeparation,
};
use capel::objective::{GradCheckInstance, ObjectiveConfig};
use capel::synth::{generate, SynthManifest};
use capel::trainer::fit;
use capel::{EmbeddingMatrix, PromptTensor};
use serde::Serialize;

use crate::args::{
    AblateArgs, Command, EvalArgs, GradcheckArgs, InspectArgs, PredictArgs, PromptSource, PruneArgs,
    SynthArgs, TrainArgs,
};
use crate::Failure;

type CmdResult = Result<(), Failure>;

pub fn run(command: Command) -> CmdResult {
    let echo = serde_json::to_value(&command).map_err(anyhow::Error::from)?;
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a, echo),
        Command::Eval(a) => eval(&a, echo),
        Command::Predict(a) => predict(&a),
        Command::Prune(a) => prune(&a, echo),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Ablate(a) => ablate(&a, echo),
        Command::Inspect(a) => inspect(&a),
    }
}

fn load_labeled(path: &Path, classes: usize) -> anyhow::Result<(EmbeddingMatrix, Vec<usize>)> {
    let (x, labels) = read_embeddings(path).with_context(|| format!("reading {}", path.display()))?;
    let labels = labels.ok_or_else(|| anyhow!("{} carries no labels", path.display()))?;
    let labels = validate_labels(&labels, classes).with_context(|| format!("checking labels in {}", path.display()))?;
    Ok((x, labels))
}

fn default_prompt_embeddings(bank: &Path) -> PathBuf {
    bank.with_extension("cape")
}

fn load_prompts(source: &PromptSource) -> anyhow::Result<(PromptBank, PromptTensor)> {
    let bank = read_prompt_bank(&source.prompts).with_context(|| format!("reading {}", source.prompts.display()))?;
    let path = source
        .prompt_embeddings
        .clone()
        .unwrap_or_else(|| default_prompt_embeddings(&source.prompts));
    let (m, _) = read_embeddings(&path).with_context(|| format!("reading {}", path.display()))?;
    let expected = bank.num_classes() * bank.prompts_per_class();
    if m.rows() != expected {
        return Err(capel::CapelError::DimMismatch(format!(
            "{} has {} rows, the bank needs {} classes x {} prompts = {expected}",
            path.display(),
            m.rows(),
            bank.num_classes(),
            bank.prompts_per_class()
        ))
        .into());
    }
    let tensor = PromptTensor::from_matrix(m, bank.num_classes())?;
    Ok((bank, tensor))
}

fn synth(a: &SynthArgs) -> CmdResult {
    let cfg = a.config();
    let inst = generate(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_embeddings(a.out.join("train.cape"), &inst.train.x, Some(&inst.train.labels_u32()))?;
    write_embeddings(a.out.join("test.cape"), &inst.test.x, Some(&inst.test.labels_u32()))?;
    write_prompt_bank(a.out.join("prompts.json"), &inst.prompt_bank())?;
    write_embeddings(a.out.join("prompts.cape"), &inst.prompts.to_matrix(), None)?;
    write_json(a.out.join("manifest.json"), &inst.manifest())?;
    println!(
        "wrote {} train and {} test rows, {} classes x {} prompts, to {}",
        inst.train.x.rows(),
        inst.test.x.rows(),
        cfg.classes,
        cfg.prompts,
        a.out.display()
    );
    Ok(())
}

fn history_path(a: &TrainArgs) -> PathBuf {
    a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".history.json");
        PathBuf::from(s)
    })
}

fn train(a: &TrainArgs, echo: serde_json::Value) -> CmdResult {
    let cfg = a.train.config();
    cfg.validate()?;
    let (bank, prompts) = load_prompts(&a.source)?;
    let (x, labels) = load_labeled(&a.embeddings, bank.num_classes())?;

    let started = Instant::now();
    let out = fit(&prompts, bank.class_index(), &x, &labels, &cfg)?;
    eprintln!("trained {} epochs in {:.2}s", cfg.epochs, started.elapsed().as_secs_f64());

    let mut meta = CheckpointMetadata::for_model(&out.model);
    meta.train_config = Some(cfg);
    meta.history_digest = Some(out.history.digest());
    meta.provenance = echo;
    write_checkpoint(&a.out, &out.model, &meta)?;
    let hist = history_path(a);
    fs::write(&hist, format!("{}\n", out.history.to_json())).with_context(|| format!("writing {}", hist.display()))?;

    match out.history.epochs.last() {
        Some(last) => println!(
            "epoch {}: ce {:.6} pc {:.6} total {:.6} train accuracy {:.4}",
            last.epoch, last.ce, last.pc, last.total, last.train_accuracy
        ),
        None => println!("no epochs run; checkpoint holds the initial model"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    evaluation: EvalReport,
    diversity: DiversityReport,
    conditional_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    flaws: Option<FlawSeparation>,
}

fn eval(a: &EvalArgs, echo: serde_json::Value) -> CmdResult {
    let (model, _) = read_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (x, labels) = load_labeled(&a.embeddings, model.num_classes())?;
    let mut evaluation = accuracy(&model, &x, &labels)?;
    evaluation.config = echo;
    let diversity = prototype_diversity(&model)?;
    let conditional_entropy = empirical_conditional_entropy(&model, &x, Some(&labels), a.pc_scope.into())?;
    let flaws = match &a.manifest {
        Some(p) => {
            let manifest: SynthManifest = read_json(p)?;
            Some(flaw_separation(&model, &manifest.flaw_mask)?)
        }
        None => None,
    };
    println!("accuracy {:.4} on {} samples", evaluation.accuracy, evaluation.n_test);
    if let Some(f) = flaws.as_ref().and_then(|f| f.fraction) {
        println!("clean prompts outweigh flawed ones in {:.1}% of classes", 100.0 * f);
    }
    if let Some(path) = &a.attention {
        attention_export(&model, path)?;
    }
    if let Some(path) = &a.report {
        write_json(
            path,
            &EvalOutput {
                evaluation,
                diversity,
                conditional_entropy,
                flaws,
            },
        )?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> CmdResult {
    let (model, _) = read_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (x, _) = read_embeddings(&a.embeddings).with_context(|| format!("reading {}", a.embeddings.display()))?;
    let preds = model.predict_batch(&x)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| anyhow!("writing predictions: {e}");
    w.write_record(["row", "label", "class", "probability"]).map_err(csv_err)?;
    for (i, p) in preds.iter().enumerate() {
        w.write_record([
            i.to_string(),
            p.label.to_string(),
            model.classes().name(p.label).to_string(),
            p.probabilities[p.label].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn prune(a: &PruneArgs, echo: serde_json::Value) -> CmdResult {
    let (model, meta) = read_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let pruned = model.prune(a.keep, a.rescale)?;
    let mut out_meta = meta.clone();
    out_meta.provenance = serde_json::json!({ "command": echo, "source": meta.provenance });
    write_checkpoint(&a.out, &pruned, &out_meta)?;
    println!(
        "kept {} of {} prompts per class for {} classes",
        pruned.num_prompts(),
        model.num_prompts(),
        pruned.num_classes()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let inst = GradCheckInstance::random(a.seed, a.classes, a.prompts, a.dim, a.batch, a.tau)?;
    let cfg = ObjectiveConfig {
        lambda: a.lambda,
        scope: a.pc_scope.into(),
    };
    let r = inst.check(&cfg, a.h)?;
    println!(
        "max relative error {:.3e} at {} (max absolute error {:.3e}, {} coordinates)",
        r.max_rel_error, r.worst, r.max_abs_error, r.coordinates
    );
    if r.max_rel_error <= a.tolerance {
        Ok(())
    } else {
        Err(Failure::Internal(anyhow!(
            "gradient check failed: {:.3e} exceeds tolerance {:.1e}",
            r.max_rel_error,
            a.tolerance
        )))
    }
}

#[derive(Serialize)]
struct AblationOutput {
    runs: Vec<Vec<AblationRow>>,
    summary: Vec<AblationSummary>,
    command: serde_json::Value,
}

fn ablate(a: &AblateArgs, echo: serde_json::Value) -> CmdResult {
    let base = a.train.config();
    base.validate()?;
    let (bank, prompts) = load_prompts(&a.source)?;
    let classes = bank.class_index();
    let (train_x, train_y) = load_labeled(&a.train_embeddings, classes.len())?;
    let (test_x, test_y) = load_labeled(&a.test_embeddings, classes.len())?;
    let mut runs = Vec::new();
    for i in 0..a.runs {
        let cfg = capel::TrainConfig {
            seed: base
                .seed
                .checked_add(i)
                .ok_or_else(|| anyhow!("seed overflow"))?,
            ..base.clone()
        };
        runs.push(ablation_run(&train_x, &train_y, &test_x, &test_y, &prompts, &classes, &cfg)?);
    }
    let summary = summarize_ablation(&runs);
    for s in &summary {
        println!("{:>2} {:<28} {:.4} +/- {:.4}", s.row, s.name, s.mean, s.std);
    }
    if let Some(path) = &a.csv {
        write_ablation_summary_csv(path, &summary)?;
    }
    write_json(
        &a.out,
        &AblationOutput {
            runs,
            summary,
            command: echo,
        },
    )?;
    Ok(())
}

fn inspect(a: &InspectArgs) -> CmdResult {
    let (model, meta) = read_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let alpha = model.alpha();
    let n = alpha.len() as f64;
    let mean = alpha.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = alpha.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (min, max) = alpha
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("Y {}", model.num_classes());
    println!("K {}", model.num_prompts());
    println!("D {}", model.dim());
    println!("tau {}", model.tau());
    println!("alpha min {min} max {max} mean {mean:.6} std {:.6}", var.sqrt());
    let names = model.classes().names();
    let shown: Vec<&str> = names.iter().take(5).map(String::as_str).collect();
    let more = if names.len() > shown.len() { ", ..." } else { "" };
    println!("classes {}{more}", shown.join(", "));
    if let Some(cfg) = &meta.train_config {
        println!("train config {}", serde_json::to_string(cfg).map_err(anyhow::Error::from)?);
    }
    if let Some(d) = &meta.history_digest {
        println!("history digest {d}");
    }
    Ok(())
}
