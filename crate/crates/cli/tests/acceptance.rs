//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use mgt_core::autograd::{AttentionLayout, Tape};
use mgt_core::data::stream_rng;
use mgt_core::linalg::{
    delta_matrix, determinant, householder_matrix, symmetric_eigenvalues, DeltaSpec,
};
use mgt_core::metrics::effective_rank;
use mgt_core::model::{block_forward, init_params, BlockVars, Model, ModelConfig, SublayerKind};
use mgt_core::train::Trainer;
use mgt_core::verify::gradient_check_config;
use mgt_core::{ExperimentConfig, Tensor, Variant};
use mgt_lab::emit::{parse_metrics_csv, summary_json};

/// Copy-task accuracy every seed must reach, pinned from pilot runs.
const COPY_ACCURACY_THRESHOLD: f64 = 0.95;
const COPY_STEP_BUDGET: usize = 5000;
const COPY_EVAL_EVERY: usize = 50;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    Tensor::randn(&[n], 1.0, rng).into_data()
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!(
            "{what} took {:.1}s, limit {limit_s}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mgt-lab")
}

struct RunOutput {
    code: i32,
    stdout: String,
}

fn mgt_lab(args: &[&str]) -> Result<RunOutput, String> {
    let out = Command::new(bin()).args(args).output().map_err(e2s)?;
    Ok(RunOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
    })
}

fn write_config(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").expect("config written");
    path
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn json(path: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_str(&read(path)?).map_err(e2s)
}

// 1 -------------------------------------------------------------------------

fn spectral_suite(verify_dir: &Path) -> Outcome {
    let started = Instant::now();
    let mut rng = stream_rng("acceptance-spectral", &[]);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for _ in 0..cases {
        let d = rng.random_range(2..=64);
        let beta: f64 = rng.random_range(-1.0..=2.5);
        let spec = DeltaSpec::new(beta, &normal(&mut rng, d)).map_err(e2s)?;
        let mut eig = symmetric_eigenvalues(&delta_matrix(&spec)).map_err(e2s)?;
        let mut expected = vec![1.0; d - 1];
        expected.push(1.0 - beta);
        eig.sort_by(f64::total_cmp);
        expected.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        let det = determinant(&delta_matrix(&spec)).map_err(e2s)?;
        worst = worst.max((det - (1.0 - beta)).abs());
    }
    let elapsed = started.elapsed();
    ensure(worst <= 1e-8, format!("max deviation {worst:e} > 1e-8"))?;
    within(elapsed, 10.0, "spectral suite")?;
    let summary = json(&verify_dir.join("summary.json"))?;
    let fam = summary["families"]
        .as_array()
        .and_then(|f| f.iter().find(|f| f["name"] == "spectral"))
        .ok_or("verify summary lacks the spectral family")?;
    ensure(
        fam["cases"].as_u64() >= Some(200) && fam["passed"] == fam["cases"],
        format!("verify spectral family: {fam}"),
    )?;
    Ok(format!(
        "{cases} specs, max deviation {worst:.2e}, {:.2}s; verify reported {}/{}",
        elapsed.as_secs_f64(),
        fam["passed"],
        fam["cases"]
    ))
}

// 2 -------------------------------------------------------------------------

fn householder_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = stream_rng("acceptance-householder", &[]);
    let (mut structure, mut det_err): (f64, f64) = (0.0, 0.0);
    let cases = 100;
    for _ in 0..cases {
        let d = rng.random_range(2..=64);
        let h = householder_matrix(&normal(&mut rng, d)).map_err(e2s)?;
        for i in 0..d {
            for j in 0..d {
                structure = structure.max((h.at(i, j) - h.at(j, i)).abs());
                let (mut hth, mut hh) = (0.0, 0.0);
                for k in 0..d {
                    hth += h.at(k, i) * h.at(k, j);
                    hh += h.at(i, k) * h.at(k, j);
                }
                let id = if i == j { 1.0 } else { 0.0 };
                structure = structure.max((hth - id).abs()).max((hh - id).abs());
            }
        }
        det_err = det_err.max((determinant(&h).map_err(e2s)? + 1.0).abs());
    }
    let elapsed = started.elapsed();
    ensure(
        structure <= 1e-12,
        format!("structure deviation {structure:e}"),
    )?;
    ensure(
        det_err <= 1e-8,
        format!("determinant deviation {det_err:e}"),
    )?;
    within(elapsed, 5.0, "householder suite")?;
    Ok(format!(
        "{cases} reflectors, structure {structure:.2e}, det {det_err:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// 3 -------------------------------------------------------------------------

fn additive_form() -> Outcome {
    let mut rng = stream_rng("acceptance-additive", &[]);
    let mut worst: f64 = 0.0;
    let cases = 100;
    for _ in 0..cases {
        let d = rng.random_range(2..=64);
        let dv = rng.random_range(1..=16);
        let beta: f64 = rng.random_range(-1.0..=2.5);
        let spec = DeltaSpec::new(beta, &normal(&mut rng, d)).map_err(e2s)?;
        let k = spec.direction().to_vec();
        let x = Tensor::new(vec![d, dv], normal(&mut rng, d * dv)).map_err(e2s)?;
        let v = normal(&mut rng, dv);
        let out = mgt_core::linalg::apply_delta_block(&x, &spec, &Tensor::vector(v.clone()))
            .map_err(e2s)?;
        for j in 0..dv {
            let ktx: f64 = (0..d).map(|i| k[i] * x.at(i, j)).sum();
            for i in 0..d {
                // A·X + β·k·vᵀ, expanded entrywise
                let ax: f64 = (0..d)
                    .map(|m| ((i == m) as u8 as f64 - beta * k[i] * k[m]) * x.at(m, j))
                    .sum();
                let matrix = ax + beta * k[i] * v[j];
                let additive = x.at(i, j) + beta * k[i] * (v[j] - ktx);
                worst = worst
                    .max((matrix - additive).abs())
                    .max((out.at(i, j) - matrix).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("{cases} instances, max deviation {worst:.2e}"))
}

// 4 -------------------------------------------------------------------------

fn tangent_complement() -> Outcome {
    let mut rng = stream_rng("acceptance-tangent", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..=64);
        let beta: f64 = rng.random_range(-1.0..=2.5);
        let spec = DeltaSpec::new(beta, &normal(&mut rng, d)).map_err(e2s)?;
        let k = spec.direction();
        let mut u = normal(&mut rng, d);
        let along: f64 = u.iter().zip(k).map(|(a, b)| a * b).sum();
        for (ui, ki) in u.iter_mut().zip(k) {
            *ui -= along * ki;
        }
        let a = delta_matrix(&spec);
        let err: f64 = (0..d)
            .map(|i| {
                let au: f64 = (0..d).map(|j| a.at(i, j) * u[j]).sum();
                (au - u[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    ensure(worst < 1e-12, format!("max ‖Au − u‖ = {worst:e}"))?;
    Ok(format!("100 vectors, max ‖Au − u‖ {worst:.2e}"))
}

// 5 -------------------------------------------------------------------------

fn layer_loss(
    config: &ModelConfig,
    params: &mgt_core::model::ParamStore,
    x: &Tensor,
    w: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut h = tape.constant(x.clone());
    let layout = AttentionLayout {
        batch: 1,
        seq: config.seq_len,
        heads: config.heads,
        causal: true,
    };
    for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
        let vars = BlockVars::resolve(
            &bound,
            &format!("block0.{}", kind.tag()),
            kind,
            config.variant,
        )
        .expect("block vars");
        h = block_forward(
            &mut tape,
            h,
            &vars,
            config.variant,
            config.lambda,
            config.epsilon,
            layout,
        )
        .expect("block forward")
        .out;
    }
    let out = tape.value(h);
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let config = gradient_check_config();
    ensure(
        (config.seq_len, config.width, config.heads, config.variant) == (3, 8, 2, Variant::MgtFull),
        "unexpected gradient-check configuration",
    )?;
    let mut params = init_params(&config).map_err(e2s)?;
    let mut rng = stream_rng("acceptance-gradient", &[]);
    for (name, t) in params.iter_mut() {
        if name.starts_with("block") {
            let fresh = Tensor::randn(t.shape(), 0.5, &mut rng);
            *t = fresh;
        }
    }
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 8], 1.0, &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut h = tape.constant(x.clone());
    let layout = AttentionLayout {
        batch: 1,
        seq: 3,
        heads: 2,
        causal: true,
    };
    for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
        let vars = BlockVars::resolve(
            &bound,
            &format!("block0.{}", kind.tag()),
            kind,
            config.variant,
        )
        .map_err(e2s)?;
        h = block_forward(
            &mut tape,
            h,
            &vars,
            config.variant,
            config.lambda,
            config.epsilon,
            layout,
        )
        .map_err(e2s)?
        .out;
    }
    let wv = tape.constant(w.clone());
    let prod = tape.mul(h, wv).map_err(e2s)?;
    let loss = tape.sum(prod).map_err(e2s)?;
    let grads = tape.backward(loss).map_err(e2s)?;

    let step = 1e-5;
    let mut worst = (0.0_f64, String::new());
    let mut entries = 0;
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("block"))
        .map(String::from)
        .collect();
    for name in names {
        let var = bound.var(&name).map_err(e2s)?;
        let analytic = grads
            .get(var)
            .ok_or(format!("no gradient for {name}"))?
            .clone();
        for i in 0..analytic.len() {
            let original = params.get(&name).map_err(e2s)?.data()[i];
            params.get_mut(&name).map_err(e2s)?.data_mut()[i] = original + step;
            let up = layer_loss(&config, &params, &x, &w);
            params.get_mut(&name).map_err(e2s)?.data_mut()[i] = original - step;
            let down = layer_loss(&config, &params, &x, &w);
            params.get_mut(&name).map_err(e2s)?.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            entries += 1;
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(
        worst.0 < 1e-4,
        format!("max relative error {:e} in {}", worst.0, worst.1),
    )?;
    within(elapsed, 30.0, "gradient check")?;
    Ok(format!(
        "{entries} parameter entries, max relative error {:.2e} ({}), {:.2}s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

// 6 -------------------------------------------------------------------------

fn identity_at_init() -> Outcome {
    let config = ModelConfig {
        depth: 16,
        width: 32,
        heads: 4,
        ffn_mult: 2,
        variant: Variant::MgtFull,
        epsilon: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(config).map_err(e2s)?;
    for name in model
        .params()
        .names()
        .filter(|n| n.contains("w_beta") || n.contains("b_beta"))
    {
        ensure(
            model.params().get(name).map_err(e2s)?.max_abs() == 0.0,
            format!("{name} is not zero-initialized"),
        )?;
    }
    let mut rng = stream_rng("acceptance-identity", &[]);
    let mut worst: f64 = 0.0;
    for scale in [1.0, 10.0, 1e-3] {
        let x = Tensor::randn(&[2 * 9, 32], scale, &mut rng);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let input = tape.constant(x.clone());
        let layout = AttentionLayout {
            batch: 2,
            seq: 9,
            heads: 4,
            causal: true,
        };
        let (out, _) = model
            .run_blocks(&mut tape, &bound, input, layout, false)
            .map_err(e2s)?;
        worst = worst.max(tape.value(out).max_abs_diff(&x).map_err(e2s)?);
    }
    ensure(
        worst <= 1e-12,
        format!("stack deviates from identity by {worst:e}"),
    )?;

    let mut cfg = ExperimentConfig::default();
    cfg.model.depth = 16;
    cfg.model.epsilon = 0.0;
    let deep = Trainer::new(&cfg, 0)
        .map_err(e2s)?
        .evaluate()
        .map_err(e2s)?;
    cfg.model.depth = 0;
    let shallow = Trainer::new(&cfg, 0)
        .map_err(e2s)?
        .evaluate()
        .map_err(e2s)?;
    let gap = (deep.loss - shallow.loss).abs();
    ensure(gap <= 1e-9, format!("step-0 val loss gap {gap:e}"))?;
    Ok(format!(
        "16 pairs, max |f(X) − X| {worst:.1e}; step-0 val loss {:.6} vs depth-0 {:.6} (gap {gap:.1e})",
        deep.loss, shallow.loss
    ))
}

// 7 -------------------------------------------------------------------------

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Result<Tensor, String> {
    let mut q = Tensor::eye(n);
    for _ in 0..n {
        let h = householder_matrix(&normal(rng, n)).map_err(e2s)?;
        q = q.matmul(&h).map_err(e2s)?;
    }
    Ok(q)
}

fn effective_rank_facts() -> Outcome {
    let r_eye = effective_rank(&Tensor::eye(5)).map_err(e2s)?;
    ensure((r_eye - 1.0).abs() <= 1e-12, format!("identity → {r_eye}"))?;

    let u = [1.0, -2.0, 0.5, 3.0, 1.5];
    let v = [2.0, 1.0, -1.0];
    let rows: Vec<Vec<f64>> = u
        .iter()
        .map(|a| v.iter().map(|b| a * b).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let r_one = effective_rank(&Tensor::from_rows(&refs)).map_err(e2s)?;
    ensure(
        (r_one - 1.0 / 3.0).abs() <= 1e-12,
        format!("rank-1 5×3 → {r_one}"),
    )?;

    let two = Tensor::from_rows(&[
        &[1.0, 0.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
    ]);
    let r_two = effective_rank(&two).map_err(e2s)?;
    ensure(
        (r_two - 0.5).abs() <= 1e-12,
        format!("two equal values → {r_two}"),
    )?;

    let mut rng = stream_rng("acceptance-rank", &[]);
    let mut worst: f64 = 0.0;
    for (s, d) in [(6, 4), (4, 6), (9, 9)] {
        let x = Tensor::randn(&[s, d], 1.0, &mut rng);
        let base = effective_rank(&x).map_err(e2s)?;
        for c in [1e-3, 7.5, -2.0] {
            let scaled = x.map(|e| c * e);
            worst = worst.max((effective_rank(&scaled).map_err(e2s)? - base).abs());
        }
        let q = random_orthogonal(s, &mut rng)?;
        let r = random_orthogonal(d, &mut rng)?;
        let rotated = q.matmul(&x).and_then(|m| m.matmul(&r)).map_err(e2s)?;
        worst = worst.max((effective_rank(&rotated).map_err(e2s)? - base).abs());
    }
    ensure(worst <= 1e-10, format!("invariance deviation {worst:e}"))?;
    Ok(format!(
        "I → {r_eye}, rank-1 → {r_one:.15}, two-equal → {r_two}, invariance deviation {worst:.1e}"
    ))
}

// 8 -------------------------------------------------------------------------

fn copy_task() -> Outcome {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.model.depth = 4;
    cfg.model.width = 64;
    cfg.model.vocab = 16;
    cfg.half_len = 8;
    cfg.model.variant = Variant::MgtFull;
    let mut reached = Vec::new();
    for seed in [0, 1, 2] {
        let mut trainer = Trainer::new(&cfg, seed).map_err(e2s)?;
        let mut hit = None;
        while trainer.step() < COPY_STEP_BUDGET {
            trainer.train_step().map_err(e2s)?;
            if trainer.step() % COPY_EVAL_EVERY == 0 {
                let eval = trainer.evaluate().map_err(e2s)?;
                if eval.accuracy >= COPY_ACCURACY_THRESHOLD {
                    hit = Some((trainer.step(), eval.accuracy));
                    break;
                }
            }
        }
        let (step, acc) = hit.ok_or(format!(
            "seed {seed} did not reach {COPY_ACCURACY_THRESHOLD} in {COPY_STEP_BUDGET} steps"
        ))?;
        reached.push(format!("seed {seed}: {acc:.3} at step {step}"));
    }
    Ok(format!(
        "threshold {COPY_ACCURACY_THRESHOLD}; {}; {:.0}s",
        reached.join(", "),
        started.elapsed().as_secs_f64()
    ))
}

// 9 -------------------------------------------------------------------------

fn rank_scan(dir: &Path) -> Outcome {
    let started = Instant::now();
    let cfg = write_config(
        dir,
        "rank.cfg",
        &[
            "model.width=32",
            "model.heads=4",
            "train.batch_size=8",
            "train.total_steps=200",
            "train.eval_every=100",
            "train.eval_batches=2",
            "train.seeds=0,1,2",
            "experiment.rank_depths=4,8,16,24",
        ],
    );
    let out = dir.join("rank-scan");
    let run = mgt_lab(&[
        "rank-scan",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let text = read(&out.join("rank.csv"))?;
    let mut lines = text.lines();
    ensure(
        lines.next() == Some("layer,variant,depth,seed,rank_eff"),
        "rank.csv header",
    )?;
    // (variant, depth, seed) → per-layer ranks
    let mut profiles: BTreeMap<(String, usize, u64), Vec<(usize, f64)>> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let key = (
            f[1].to_string(),
            f[2].parse().map_err(e2s)?,
            f[3].parse().map_err(e2s)?,
        );
        profiles
            .entry(key)
            .or_default()
            .push((f[0].parse().map_err(e2s)?, f[4].parse().map_err(e2s)?));
    }
    ensure(
        profiles.len() == 2 * 4 * 3,
        format!("{} runs in rank.csv, expected 24", profiles.len()),
    )?;
    for ((variant, depth, seed), layers) in &profiles {
        let expected: Vec<usize> = (0..=*depth).collect();
        let got: Vec<usize> = layers.iter().map(|(l, _)| *l).collect();
        ensure(
            got == expected,
            format!("{variant} depth {depth} seed {seed}: layers {got:?}"),
        )?;
    }
    let rho = |variant: &str| -> f64 {
        let ratios: Vec<f64> = (0..3u64)
            .map(|seed| {
                let p = &profiles[&(variant.to_string(), 24, seed)];
                p.last().unwrap().1 / p.first().unwrap().1
            })
            .collect();
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let (standard, mgt) = (rho("standard"), rho("mgt_full"));
    ensure(
        mgt >= standard,
        format!(
            "ρ(MGT) {mgt:.4} < ρ(Standard) {standard:.4} at depth 24 (exit {})",
            run.code
        ),
    )?;
    ensure(
        run.code == 0,
        format!("rank-scan exited {}: {}", run.code, run.stdout),
    )?;
    let summary = json(&out.join("summary.json"))?;
    ensure(
        summary["derived"]["rho_check"]["passed"] == true,
        "summary rho_check not passed",
    )?;
    Ok(format!(
        "depth 24, seed-mean ρ(MGT) {mgt:.4} ≥ ρ(Standard) {standard:.4}; {:.0}s",
        started.elapsed().as_secs_f64()
    ))
}

// 10 ------------------------------------------------------------------------

fn ablation_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "ablate.cfg",
        &[
            "model.width=32",
            "model.heads=4",
            "train.batch_size=8",
            "train.total_steps=200",
            "train.eval_every=100",
            "train.eval_batches=2",
            "train.seeds=0,1,2",
            "experiment.ablation_depth=8",
        ],
    )
}

fn ablation(dir: &Path) -> Outcome {
    let started = Instant::now();
    let out = dir.join("ablate");
    let cfg = ablation_config(dir);
    let run = mgt_lab(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    ensure(
        run.code == 0,
        format!("ablate exited {}: {}", run.code, run.stdout),
    )?;

    let runs = read(&out.join("runs.csv"))?;
    let mut digests: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut ids = std::collections::BTreeSet::new();
    for line in runs.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ids.insert(f[0].to_string());
        digests
            .entry(f[3].to_string())
            .or_default()
            .push((f[1].to_string(), f[4].to_string()));
    }
    ensure(
        ids.len() == 12,
        format!("{} distinct run ids, expected 12", ids.len()),
    )?;
    for (seed, runs) in &digests {
        let variants: std::collections::BTreeSet<&str> =
            runs.iter().map(|(v, _)| v.as_str()).collect();
        ensure(
            variants.len() == 4,
            format!("seed {seed} has variants {variants:?}"),
        )?;
        ensure(
            runs.iter().all(|(_, d)| d == &runs[0].1),
            format!("seed {seed}: batch sequences differ across variants"),
        )?;
    }
    ensure(digests.len() == 3, "expected 3 seeds")?;

    let records = parse_metrics_csv(&read(&out.join("metrics.csv"))?).map_err(e2s)?;
    let mut finals: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == "final_val_loss") {
        finals
            .entry(r.variant.as_str())
            .or_default()
            .insert(r.seed, r.value);
    }
    let mean = |v: &str| -> f64 {
        let by_seed = &finals[v];
        by_seed.values().sum::<f64>() / by_seed.len() as f64
    };
    let (b, h, d, m) = (
        mean("standard"),
        mean("mhc_only"),
        mean("ddl_only"),
        mean("mgt_full"),
    );
    let synergy = (b - m) - (b - h) - (b - d);
    let summary = json(&out.join("summary.json"))?;
    let emitted = summary["derived"]["synergy_coefficient"]
        .as_f64()
        .ok_or("summary lacks synergy_coefficient")?;
    ensure(
        emitted == synergy,
        format!("emitted synergy {emitted:e} != recomputed {synergy:e}"),
    )?;
    Ok(format!(
        "12 paired runs; mean final val loss standard {b:.4}, mhc_only {h:.4}, ddl_only {d:.4}, mgt_full {m:.4}; S = {synergy:.4} ({}); {:.0}s",
        if synergy > 0.0 { "positive" } else if synergy < 0.0 { "negative" } else { "zero" },
        started.elapsed().as_secs_f64()
    ))
}

// 11 ------------------------------------------------------------------------

/// Names of every file in `dir` except the config echo, which records the
/// output directory and so legitimately differs between reruns.
fn result_files(dir: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(e2s)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    names.retain(|n| n != "config.echo");
    names.sort();
    Ok(names)
}

fn rerun_matches(sub: &str, first: &Path, second: &Path) -> Result<(), String> {
    let echo = first.join("config.echo");
    let run = mgt_lab(&[
        sub,
        "--config",
        echo.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ])?;
    ensure(run.code == 0, format!("{sub} rerun exited {}", run.code))?;
    let files = result_files(first)?;
    ensure(
        files == result_files(second)?,
        format!("{sub}: rerun wrote a different file set"),
    )?;
    for f in &files {
        ensure(
            std::fs::read(first.join(f)).map_err(e2s)?
                == std::fs::read(second.join(f)).map_err(e2s)?,
            format!("{sub}: {f} differs after rerun from echo"),
        )?;
    }
    Ok(())
}

fn roundtrip(experiment: &str, out: &Path) -> Result<(), String> {
    let records = parse_metrics_csv(&read(&out.join("metrics.csv"))?).map_err(e2s)?;
    let rebuilt = summary_json(experiment, &records).map_err(e2s)?;
    ensure(
        rebuilt == read(&out.join("summary.json"))?,
        format!("{experiment}: summary differs after CSV round-trip"),
    )
}

const SMALL_RUN: [&str; 6] = [
    "model.width=16",
    "model.heads=2",
    "train.batch_size=4",
    "train.total_steps=40",
    "train.eval_every=20",
    "train.eval_batches=1",
];

fn fresh_run(dir: &Path, sub: &str, extra: &[&str]) -> Result<PathBuf, String> {
    let lines: Vec<&str> = SMALL_RUN.iter().chain(extra).copied().collect();
    let cfg = write_config(dir, &format!("{sub}.cfg"), &lines);
    let out = dir.join(sub);
    let run = mgt_lab(&[
        sub,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    ensure(
        run.code == 0,
        format!("{sub} exited {}: {}", run.code, run.stdout),
    )?;
    Ok(out)
}

fn determinism(dir: &Path, verify_dir: &Path) -> Outcome {
    let started = Instant::now();
    let fresh = [
        ("train", vec!["train.seeds=0,1", "model.depth=3"]),
        (
            "beta-stats",
            vec!["train.seeds=0,1", "experiment.beta_depth=16"],
        ),
        (
            "depth-scale",
            vec![
                "train.seeds=0,1",
                "experiment.scale_depths=2,4",
                "experiment.param_budget=18000",
            ],
        ),
    ];
    for (sub, extra) in &fresh {
        fresh_run(dir, sub, extra)?;
    }
    let mut checked = Vec::new();
    for sub in ["verify", "train", "beta-stats", "depth-scale", "ablate"] {
        let first = if sub == "verify" {
            verify_dir.to_path_buf()
        } else {
            dir.join(sub)
        };
        rerun_matches(sub, &first, &dir.join(format!("{sub}-rerun")))?;
        checked.push(sub);
    }
    for sub in ["train", "rank-scan", "ablate", "beta-stats", "depth-scale"] {
        roundtrip(sub, &dir.join(sub))?;
    }
    Ok(format!(
        "reruns from config.echo byte-identical for {}; CSV→JSON exact for 5 experiments; {:.0}s",
        checked.join(", "),
        started.elapsed().as_secs_f64()
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("scratch directory");
    let dir = work.path();
    let verify_dir = dir.join("verify");
    let empty = write_config(dir, "empty.cfg", &[]);
    let verify = mgt_lab(&[
        "verify",
        "--config",
        empty.to_str().unwrap(),
        "--out",
        verify_dir.to_str().unwrap(),
    ]);

    let criteria: Vec<Criterion> = vec![
        (
            "spectral suite",
            Box::new(|| {
                let v = verify.as_ref().map_err(Clone::clone)?;
                ensure(
                    v.code == 0,
                    format!("verify exited {}: {}", v.code, v.stdout),
                )?;
                spectral_suite(&verify_dir)
            }),
        ),
        ("householder suite", Box::new(householder_suite)),
        ("additive-form oracle", Box::new(additive_form)),
        (
            "tangent-complement preservation",
            Box::new(tangent_complement),
        ),
        ("gradient integrity", Box::new(gradient_integrity)),
        ("identity-at-init", Box::new(identity_at_init)),
        ("effective-rank unit facts", Box::new(effective_rank_facts)),
        ("copy-task learnability", Box::new(copy_task)),
        ("rank-scan directional check", Box::new(|| rank_scan(dir))),
        ("ablation bookkeeping", Box::new(|| ablation(dir))),
        (
            "determinism and round-trip",
            Box::new(|| determinism(dir, &verify_dir)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
