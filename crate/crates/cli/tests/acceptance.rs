//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed. Pass substrings as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- pruning`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use capel::datastore::{
    assemble_checkpoint, decode_checkpoint, decode_embeddings, CheckpointMetadata,
};
use capel::evalsuite::{
    ablation_run, accuracy, empirical_conditional_entropy, flaw_separation, prototype_diversity,
};
use capel::model::feature_average_classifier;
use capel::numerics::Rng;
use capel::objective::{cluster_preserving_loss, cross_entropy_weighted, GradCheckInstance};
use capel::synth::{generate, SynthConfig};
use capel::trainer::fit;
use capel::{
    AlphaInit, CapelError, CapelModel, ClassIndex, EmbeddingMatrix, LogitsTensor, ObjectiveConfig, PcScope,
    TrainConfig, ZeroShotClassifier,
};

type Verdict = Result<(bool, String), Box<dyn std::error::Error>>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Verdict,
}

fn unit(rng: &mut Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gaussian() as f32).collect();
    capel::numerics::l2_normalize(&v).unwrap()
}

fn gradient_correctness() -> Verdict {
    let mut rng = Rng::new(0x9e37);
    let mut worst = (0.0f64, String::new());
    for i in 0..20 {
        let (y, k, d, b) = (2 + rng.below(4), 1 + rng.below(4), 2 + rng.below(7), 1 + rng.below(16));
        let lambda = [0.0, 3.0][i % 2];
        let scope = PcScope::ALL[i % 3];
        let inst = GradCheckInstance::random(rng.next_u64(), y, k, d, b, 1.0)?;
        let r = inst.check(&ObjectiveConfig { lambda, scope }, 1e-3)?;
        if r.max_rel_error > worst.0 {
            worst = (
                r.max_rel_error,
                format!("instance {i} (Y={y} K={k} D={d} B={b} lambda={lambda} {scope:?}) at {}, abs {:.1e}", r.worst, r.max_abs_error),
            );
        }
    }
    Ok((
        worst.0 <= 1e-5,
        format!("max relative error {:.3e} <= 1e-5 required; worst {}", worst.0, worst.1),
    ))
}

/// Explicit-loop `f64` forward pass: label and class probabilities.
#[allow(clippy::needless_range_loop)]
fn brute_force(model: &CapelModel, x: &[f32]) -> (usize, Vec<f64>) {
    let (yn, kn, d) = (model.num_classes(), model.num_prompts(), model.dim());
    let tau = model.tau() as f64;
    let mut scores = vec![0.0f64; yn];
    for y in 0..yn {
        for k in 0..kn {
            let w = model.head(y, k);
            let mut dot = 0.0f64;
            let mut nn = 0.0f64;
            for j in 0..d {
                dot += x[j] as f64 * w[j] as f64;
                nn += w[j] as f64 * w[j] as f64;
            }
            scores[y] += model.alpha()[y * kn + k] as f64 * tau * dot / nn.sqrt();
        }
    }
    let mut best = 0;
    for y in 1..yn {
        if scores[y] > scores[best] {
            best = y;
        }
    }
    let m = scores[best];
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    (best, exps.iter().map(|e| e / z).collect())
}

fn forward_oracle() -> Verdict {
    let mut rng = Rng::new(0x0f0f);
    let (mut labels_ok, mut max_dp, mut checked) = (true, 0.0f64, 0);
    for _ in 0..100 {
        let (yn, kn, d) = (2 + rng.below(5), 1 + rng.below(5), 2 + rng.below(8));
        let w: Vec<f32> = (0..yn * kn * d).map(|_| rng.gaussian() as f32).collect();
        let a: Vec<f32> = (0..yn * kn).map(|_| (rng.uniform() * 2.0 - 0.5) as f32).collect();
        let tau = (1.0 + 99.0 * rng.uniform()) as f32;
        let model = CapelModel::from_parts(ClassIndex::numbered(yn), kn, d, w, a, tau)?;
        for _ in 0..10 {
            let x = unit(&mut rng, d);
            let p = model.predict(&x)?;
            let (label, probs) = brute_force(&model, &x);
            labels_ok &= p.label == label;
            for (u, v) in p.probabilities.iter().zip(&probs) {
                max_dp = max_dp.max((u - v).abs());
            }
            checked += 1;
        }
    }
    Ok((
        labels_ok && max_dp <= 1e-5,
        format!("{checked} predictions, labels agree: {labels_ok}, max probability gap {max_dp:.2e}"),
    ))
}

fn reductions() -> Verdict {
    let mut rng = Rng::new(0xabc);
    let (yn, d) = (7, 16);
    let vectors: Vec<Vec<f32>> = (0..yn).map(|_| unit(&mut rng, d)).collect();
    let vectors = EmbeddingMatrix::from_rows(&vectors)?;
    let single = CapelModel::single_head(&vectors, ClassIndex::numbered(yn), 100.0)?;
    let zs = ZeroShotClassifier::new(vectors, 100.0);
    let mut same = true;
    for _ in 0..1000 {
        let x = unit(&mut rng, d);
        same &= single.predict(&x)? == zs.predict(&x)?;
    }

    let mut pc_zero = true;
    let z: Vec<LogitsTensor> = (0..20)
        .map(|_| LogitsTensor::new(yn, 1, (0..yn).map(|_| rng.gaussian() as f32 * 50.0).collect()))
        .collect::<Result<_, _>>()?;
    let labels: Vec<usize> = (0..20).map(|_| rng.below(yn)).collect();
    for scope in PcScope::ALL {
        pc_zero &= cluster_preserving_loss(&z, scope, Some(&labels))? == 0.0;
    }

    let flat = vec![LogitsTensor::new(yn, 3, vec![0.37; yn * 3])?];
    let ce = cross_entropy_weighted(&flat, &vec![0.25; yn * 3], &[2])?;
    let ce_gap = (ce - (yn as f64).ln()).abs();
    Ok((
        same && pc_zero && ce_gap <= 1e-6,
        format!("single head == zero-shot on 1000 inputs: {same}; pc == 0 at K=1: {pc_zero}; |ce - ln Y| = {ce_gap:.1e}"),
    ))
}

fn centroid_shift() -> Verdict {
    let mut margins = Vec::new();
    for seed in SEEDS {
        let inst = generate(&SynthConfig { seed, ..SynthConfig::default() })?;
        let logit = CapelModel::init(&inst.prompts, inst.classes.clone(), 100.0, AlphaInit::Uniform)?;
        let feature = CapelModel::single_head(&feature_average_classifier(&inst.prompts)?, inst.classes.clone(), 100.0)?;
        let a_logit = accuracy(&logit, &inst.test.x, &inst.test.labels)?.accuracy;
        let a_feat = accuracy(&feature, &inst.test.x, &inst.test.labels)?.accuracy;
        margins.push(100.0 * (a_logit - a_feat));
    }
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok((
        mean >= 2.0,
        format!("logit-average minus feature-average accuracy, mean {mean:+.2} points (>= 2 required); per seed {margins:.2?}"),
    ))
}

fn collapse_prevention() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let inst = generate(&SynthConfig { seed, ..SynthConfig::default() })?;
        let base = TrainConfig { seed, ..TrainConfig::default() };
        let run = |lambda: f64| -> Result<(f64, f64), CapelError> {
            let out = fit(&inst.prompts, inst.classes.clone(), &inst.train.x, &inst.train.labels, &TrainConfig { lambda, ..base.clone() })?;
            let div = prototype_diversity(&out.model)?.mean.unwrap_or(f64::NAN);
            let h = empirical_conditional_entropy(&out.model, &inst.test.x, None, base.pc_scope)?;
            Ok((div, h))
        };
        let (d3, h3) = run(3.0)?;
        let (d0, h0) = run(0.0)?;
        ok &= d3 < d0 && h3 < h0;
        parts.push(format!("seed {seed}: cos {d3:.4} vs {d0:.4}, H {h3:.4} vs {h0:.4}"));
    }
    Ok((ok, format!("lambda=3 vs lambda=0; {}", parts.join("; "))))
}

fn flaw_suppression() -> Verdict {
    let (mut wins, mut total) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let inst = generate(&SynthConfig { seed, flawed_per_class: 1, ..SynthConfig::default() })?;
        let out = fit(&inst.prompts, inst.classes.clone(), &inst.train.x, &inst.train.labels, &TrainConfig { seed, ..TrainConfig::default() })?;
        let sep = flaw_separation(&out.model, &inst.flaw_mask)?;
        let eligible = sep.per_class.iter().flatten().count() as f64;
        let frac = sep.fraction.unwrap_or(0.0);
        wins += frac * eligible;
        total += eligible;
        per_seed.push(frac);
    }
    let frac = wins / total;
    Ok((
        frac >= 0.9,
        format!("clean > flawed attention in {:.1}% of classes (>= 90% required); per seed {per_seed:.2?}", 100.0 * frac),
    ))
}

fn pruning_stability() -> Verdict {
    let inst = generate(&SynthConfig { prompts: 50, ..SynthConfig::default() })?;
    let out = fit(&inst.prompts, inst.classes.clone(), &inst.train.x, &inst.train.labels, &TrainConfig::default())?;
    let full = accuracy(&out.model, &inst.test.x, &inst.test.labels)?.accuracy;
    let pruned = accuracy(&out.model.prune(10, false)?, &inst.test.x, &inst.test.labels)?.accuracy;
    let delta = 100.0 * (pruned - full);
    Ok((
        delta.abs() <= 0.5,
        format!("K=50 {:.2}% -> K=10 {:.2}%, change {delta:+.2} points (|change| <= 0.5 required)", 100.0 * full, 100.0 * pruned),
    ))
}

fn ablation_ordering() -> Verdict {
    let mut sums = [0.0f64; 7];
    for seed in SEEDS {
        let inst = generate(&SynthConfig { seed, ..SynthConfig::default() })?;
        let rows = ablation_run(
            &inst.train.x,
            &inst.train.labels,
            &inst.test.x,
            &inst.test.labels,
            &inst.prompts,
            &inst.classes,
            &TrainConfig { seed, ..TrainConfig::default() },
        )?;
        for (s, r) in sums.iter_mut().zip(&rows) {
            *s += 100.0 * r.accuracy / SEEDS.len() as f64;
        }
    }
    let r = |i: usize| sums[i - 1];
    let checks = [
        ("7>=5", r(7) >= r(5)),
        ("5>=4", r(5) >= r(4)),
        ("4>=2", r(4) >= r(2)),
        ("4>=3", r(4) >= r(3)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok((
        failed.is_empty(),
        format!(
            "mean accuracy rows 1-7 {:.2?}; violated: {}",
            sums,
            if failed.is_empty() { "none".to_string() } else { failed.join(", ") }
        ),
    ))
}

fn capel(dir: &Path, args: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_capel")).current_dir(dir).args(args).output()?;
    if !out.status.success() {
        return Err(format!("capel {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    capel(d, &["synth", "--out", "data", "--seed", "11"])?;
    let train = |out: &str, threads: &str| {
        capel(
            d,
            &[
                "--threads", threads, "train", "--embeddings", "data/train.cape", "--prompts", "data/prompts.json",
                "--shots", "16", "--seed", "1", "--out", out, "--history", "history.json",
            ],
        )
    };
    let read = |name: &str| std::fs::read(d.join(name));
    let mut same_flags = true;
    let mut threads = true;
    train("m.capc", "1")?;
    let first = (read("m.capc")?, read("m.capc.json")?, read("history.json")?);
    train("m.capc", "1")?;
    let second = (read("m.capc")?, read("m.capc.json")?, read("history.json")?);
    same_flags &= first == second;
    train("m.capc", "4")?;
    let wide = (read("m.capc")?, read("m.capc.json")?, read("history.json")?);
    threads &= first == wide;
    Ok((
        same_flags && threads,
        format!("repeat run byte-identical: {same_flags}; --threads 4 matches --threads 1: {threads}"),
    ))
}

fn le32(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

fn format_golden() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |what: &str, cond: bool| {
        ok &= cond;
        if !cond {
            notes.push(what.to_string());
        }
    };

    // Two rows, three dims, labels present.
    let mut emb: Vec<u8> = vec![0x43, 0x41, 0x50, 0x45, 0x01, 0, 0, 0, 0x02, 0, 0, 0, 0x03, 0, 0, 0, 0x01];
    for v in [1.0f32, 0.0, 0.0, 0.0, 0.6, 0.8] {
        emb.extend(v.to_le_bytes());
    }
    emb.extend(le32(0));
    emb.extend(le32(1));
    let (m, labels) = decode_embeddings(&emb)?;
    check("embedding fields", m.rows() == 2 && m.dim() == 3 && labels == Some(vec![0, 1]) && m.row(1) == [0.0, 0.6, 0.8]);

    let mut bad = emb.clone();
    bad[3] = b'X';
    check("embedding magic", matches!(decode_embeddings(&bad), Err(CapelError::BadMagic { .. })));
    let mut bad = emb.clone();
    bad[4] = 2;
    check("embedding version", matches!(decode_embeddings(&bad), Err(CapelError::BadVersion { found: 2, .. })));
    check("embedding truncation", matches!(decode_embeddings(&emb[..emb.len() - 1]), Err(CapelError::SizeMismatch { .. })));
    let mut bad = emb.clone();
    bad[8] = 3;
    check("embedding row count", matches!(decode_embeddings(&bad), Err(CapelError::SizeMismatch { .. })));
    let mut bad = emb.clone();
    bad[16] = 0x81;
    check("embedding flags", matches!(decode_embeddings(&bad), Err(CapelError::BadFlags(0x81))));
    let mut bad = emb.clone();
    bad[17..21].copy_from_slice(&2.0f32.to_le_bytes());
    check("embedding norm", matches!(decode_embeddings(&bad), Err(CapelError::NormOutOfRange { row: 0, .. })));

    // Y=1, K=2, D=2, tau=100.
    let mut ck: Vec<u8> = b"CAPC".to_vec();
    for v in [1u32, 1, 2, 2] {
        ck.extend(le32(v));
    }
    ck.extend(100.0f32.to_le_bytes());
    ck.extend(le32(0));
    for v in [1.0f32, 0.0, 0.0, 1.0, 0.5, 0.5] {
        ck.extend(v.to_le_bytes());
    }
    let body = decode_checkpoint(&ck)?;
    check(
        "checkpoint fields",
        (body.num_classes, body.num_prompts, body.dim, body.tau) == (1, 2, 2, 100.0)
            && body.weights == [1.0, 0.0, 0.0, 1.0]
            && body.alpha == [0.5, 0.5],
    );
    let meta = CheckpointMetadata {
        classes: ClassIndex::new(vec!["cat".into()])?,
        num_classes: 1,
        num_prompts: 2,
        dim: 2,
        tau: 100.0,
        train_config: None,
        history_digest: None,
        provenance: serde_json::Value::Null,
    };
    check("checkpoint assembles", assemble_checkpoint(body.clone(), &meta).is_ok());
    let wrong = CheckpointMetadata { num_classes: 3, classes: ClassIndex::numbered(3), ..meta };
    check("checkpoint metadata mismatch", matches!(assemble_checkpoint(body, &wrong), Err(CapelError::DimMismatch(_))));
    let mut bad = ck.clone();
    bad[0] = b'D';
    check("checkpoint magic", matches!(decode_checkpoint(&bad), Err(CapelError::BadMagic { .. })));
    let mut bad = ck.clone();
    bad[4] = 2;
    check("checkpoint version", matches!(decode_checkpoint(&bad), Err(CapelError::BadVersion { found: 2, .. })));
    for byte in 8..20 {
        for bit in 0..8 {
            let mut bad = ck.clone();
            bad[byte] ^= 1 << bit;
            if decode_checkpoint(&bad).is_ok() {
                check(&format!("checkpoint dims bit {byte}:{bit}"), false);
            }
        }
    }
    check("checkpoint truncation", matches!(decode_checkpoint(&ck[..ck.len() - 4]), Err(CapelError::SizeMismatch { .. })));
    let failed = notes.join(", ");
    Ok((ok, if ok { "all fixtures parse and every corruption is rejected".into() } else { format!("failed: {failed}") }))
}

fn main() {
    let criteria = [
        Criterion { name: "gradient correctness", budget: Some(Duration::from_secs(10)), run: gradient_correctness },
        Criterion { name: "forward oracle equivalence", budget: Some(Duration::from_secs(10)), run: forward_oracle },
        Criterion { name: "reductions", budget: None, run: reductions },
        Criterion { name: "centroid shift", budget: Some(Duration::from_secs(60)), run: centroid_shift },
        Criterion { name: "collapse prevention", budget: Some(Duration::from_secs(300)), run: collapse_prevention },
        Criterion { name: "flawed prompt suppression", budget: None, run: flaw_suppression },
        Criterion { name: "pruning stability", budget: None, run: pruning_stability },
        Criterion { name: "ablation ordering", budget: None, run: ablation_ordering },
        Criterion { name: "determinism", budget: None, run: determinism },
        Criterion { name: "format golden tests", budget: None, run: format_golden },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let verdict = (c.run)();
        let elapsed = started.elapsed();
        let (passed, detail) = match verdict {
            Ok((p, d)) => (p, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let budget_note = match c.budget {
            Some(b) if !in_budget => format!(", over the {}s budget", b.as_secs()),
            _ => String::new(),
        };
        let passed = passed && in_budget;
        if !passed {
            failures += 1;
        }
        println!(
            "{} {}: {} [{:.1}s{}]",
            if passed { "PASS" } else { "FAIL" },
            c.name,
            detail,
            elapsed.as_secs_f64(),
            budget_note
        );
    }
    println!("acceptance: {} passed, {failures} failed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
