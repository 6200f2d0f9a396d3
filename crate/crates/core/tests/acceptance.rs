//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any failed.
//!
//! Built without the libtest harness so the lines are never captured.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volssl::autodiff::{Tape, Tensor};
use volssl::checkpoint::Checkpoint;
use volssl::config::{Preset, RunConfig};
use volssl::contrastive::ntxent_loss;
use volssl::eval::{dropout_config_sweep, fraction_sweep, mean_foreground, FractionSweep};
use volssl::gradcheck::suite;
use volssl::mc::{
    aggregate, aggregate_borda, aggregate_majority, aggregate_union, aggregate_weighted_majority, percentile_heatmap,
    AggregationProtocol, EnsemblePrediction,
};
use volssl::pipeline::{self, RunDir};
use volssl::segment::{dice_loss, DiceSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let results = match suite::run_all() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("suite error: {e}")),
    };
    let elapsed = t0.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = |e2e: bool| {
        results
            .iter()
            .filter(|r| (r.tolerance == suite::END_TO_END_TOLERANCE) == e2e)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    Outcome::new(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} cases, worst op {:.2e}, end-to-end {:.2e}, {:.1}s{}",
            results.len(),
            worst(false),
            worst(true),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Direct double loop over the defining sums, no stabilization.
fn naive_ntxent(rows: &[Vec<f64>], tau: f64) -> f64 {
    let n = rows.len();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..n {
        let p = i ^ 1;
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (cos(&rows[i], &rows[k]) / tau).exp();
            }
        }
        total += -((cos(&rows[i], &rows[p]) / tau).exp() / den).ln();
    }
    total / n as f64
}

fn tape_ntxent(rows: &[Vec<f64>], tau: f64) -> volssl::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let k = rows[0].len();
    let z = tape.constant(Tensor::new(vec![rows.len(), k], rows.concat())?);
    let l = ntxent_loss(&mut tape, z, tau)?;
    Ok(tape.value(l).data()[0])
}

fn ntxent_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for b in 0..200 {
        let tau = [0.05, 0.1, 0.5][b % 3];
        let n2 = 2 * r.random_range(1..=32);
        let k = r.random_range(2..=16);
        let rows: Vec<Vec<f64>> = (0..n2).map(|_| (0..k).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        match tape_ntxent(&rows, tau) {
            Ok(v) => worst = worst.max((v - naive_ntxent(&rows, tau)).abs()),
            Err(e) => return Outcome::new(false, format!("batch {b}: {e}")),
        }
    }
    let hand = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
    let got = tape_ntxent(&hand, 1.0).unwrap_or(f64::NAN);
    Outcome::new(
        worst < 1e-5 && (got - expected).abs() < 1e-4 && (expected - 0.5514).abs() < 1e-4,
        format!("200 batches max |diff| {worst:.2e}; hand case {got:.6} vs {expected:.6}"),
    )
}

// ---------------------------------------------------------------- 3

fn dice_value(probs: Vec<f64>, target: Vec<f64>, shape: Vec<usize>, spec: &DiceSpec) -> volssl::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(shape.clone(), probs)?);
    let t = tape.constant(Tensor::new(shape, target)?);
    let l = dice_loss(&mut tape, p, t, spec)?;
    Ok(tape.value(l).data()[0])
}

fn onehot(labels: &[usize], c: usize) -> Vec<f64> {
    let v = labels.len();
    let mut out = vec![0.0; c * v];
    for (j, &l) in labels.iter().enumerate() {
        out[l * v + j] = 1.0;
    }
    out
}

fn dice_exactness() -> Outcome {
    let s = 1e-5;
    let mut r = rng(3);
    // perfect overlap on a random 3-class 4³ labelling
    let labels: Vec<usize> = (0..64).map(|_| r.random_range(0..3)).collect();
    let t = onehot(&labels, 3);
    let perfect = dice_value(t.clone(), t, vec![1, 3, 4, 4, 4], &DiceSpec::new(3)).unwrap_or(f64::NAN);
    // prediction all class 0, truth all class 1 over M = 64 voxels
    let m = 64;
    let disjoint = dice_value(onehot(&vec![0; m], 2), onehot(&vec![1; m], 2), vec![1, 2, 4, 4, 4], &DiceSpec::new(2))
        .unwrap_or(f64::NAN);
    let closed = -s / (m as f64 + s);
    let mut bounds_ok = true;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let c = r.random_range(2..=4);
        let n = r.random_range(1..=2);
        let d = [r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4)];
        let v = d.iter().product::<usize>();
        let mut probs = Vec::with_capacity(n * c * v);
        let mut target = Vec::with_capacity(n * c * v);
        for _ in 0..n {
            let logits: Vec<f64> = (0..c * v).map(|_| r.random_range(-4.0..4.0)).collect();
            let mut p = vec![0.0; c * v];
            for j in 0..v {
                let z: f64 = (0..c).map(|k| logits[k * v + j].exp()).sum();
                for k in 0..c {
                    p[k * v + j] = logits[k * v + j].exp() / z;
                }
            }
            probs.extend(p);
            let labels: Vec<usize> = (0..v).map(|_| r.random_range(0..c)).collect();
            target.extend(onehot(&labels, c));
        }
        let weights = r.random_bool(0.5).then(|| (0..c).map(|_| r.random_range(0.1..3.0)).collect());
        let spec = DiceSpec { class_weights: weights, ..DiceSpec::new(c) };
        match dice_value(probs, target, vec![n, c, d[0], d[1], d[2]], &spec) {
            Ok(l) => {
                range = (range.0.min(l), range.1.max(l));
                bounds_ok &= (-1.0..0.0).contains(&l);
            }
            Err(_) => bounds_ok = false,
        }
    }
    Outcome::new(
        (perfect + 1.0).abs() < 1e-5 && (disjoint - closed).abs() < 1e-9 && bounds_ok,
        format!(
            "perfect {perfect:.9}, disjoint {disjoint:.3e} vs {closed:.3e}, 1000 random losses in [{:.4}, {:.4}]",
            range.0, range.1
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Probabilities on a coarse grid so ties between classes and between
/// vote counts are common.
fn random_ensemble(r: &mut ChaCha8Rng, c: usize, t: usize) -> EnsemblePrediction {
    let dims = [4, 4, 4];
    let v = 64;
    let samples = (0..t)
        .map(|_| {
            let mut s = vec![0.0f32; c * v];
            for j in 0..v {
                let raw: Vec<u32> = (0..c).map(|_| r.random_range(0..4)).collect();
                let total: u32 = raw.iter().sum();
                for k in 0..c {
                    s[k * v + j] = if total == 0 { 1.0 / c as f32 } else { raw[k] as f32 / total as f32 };
                }
            }
            s
        })
        .collect();
    EnsemblePrediction::new(dims, c, samples).expect("valid ensemble")
}

/// Lowest index among the maxima, found by enumerating every candidate.
fn best<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    (0..scores.len())
        .find(|&a| (0..scores.len()).all(|b| !(scores[b] > scores[a]) && (b >= a || scores[b] != scores[a])))
        .expect("some class wins")
}

fn sample_argmax(e: &EnsemblePrediction, t: usize, j: usize) -> usize {
    let p: Vec<f32> = (0..e.num_classes()).map(|c| e.prob(t, c, j)).collect();
    best(&p)
}

fn oracle_labels(e: &EnsemblePrediction, protocol: &AggregationProtocol) -> Vec<u8> {
    let c = e.num_classes();
    (0..e.num_voxels())
        .map(|j| {
            let mut votes = vec![0u32; c];
            for t in 0..e.len() {
                votes[sample_argmax(e, t, j)] += 1;
            }
            let label = match protocol {
                AggregationProtocol::Majority => best(&votes),
                AggregationProtocol::WeightedMajority { weights } => {
                    best(&votes.iter().zip(weights).map(|(&n, &w)| n as f64 * w).collect::<Vec<_>>())
                }
                AggregationProtocol::Borda => {
                    let mut points = vec![0u64; c];
                    for t in 0..e.len() {
                        let mut order: Vec<usize> = (0..c).collect();
                        order.sort_by(|&a, &b| e.prob(t, b, j).partial_cmp(&e.prob(t, a, j)).unwrap().then(a.cmp(&b)));
                        for (pos, &k) in order.iter().enumerate() {
                            points[k] += (c - 1 - pos) as u64;
                        }
                    }
                    best(&points)
                }
                AggregationProtocol::UnionPerClass { class_x, .. } => {
                    if votes[*class_x] > 0 {
                        *class_x
                    } else {
                        best(&votes)
                    }
                }
            };
            label as u8
        })
        .collect()
}

fn aggregation_oracle() -> Outcome {
    let mut r = rng(4);
    let mut mismatches = Vec::new();
    let mut reductions_ok = true;
    for case in 0..500 {
        let c = r.random_range(2..=4);
        let t = r.random_range(1..=7);
        let e = random_ensemble(&mut r, c, t);
        let weights: Vec<f64> = (0..c).map(|_| [0.0, 0.5, 1.0, 2.0, 3.0][r.random_range(0..5)]).collect();
        let class_x = r.random_range(0..c);
        let protocols = [
            AggregationProtocol::Majority,
            AggregationProtocol::WeightedMajority { weights },
            AggregationProtocol::Borda,
            AggregationProtocol::UnionPerClass { class_x, fallback: Box::new(AggregationProtocol::Majority) },
        ];
        for p in &protocols {
            match aggregate(&e, p) {
                Ok(l) if l.labels() == oracle_labels(&e, p).as_slice() => {}
                _ => mismatches.push(format!("case {case} {}", p.name())),
            }
        }
        let majority = aggregate_majority(&e).expect("majority");
        let ones = aggregate_weighted_majority(&e, &vec![1.0; c]).expect("weighted");
        reductions_ok &= ones == majority;
        let union = aggregate_union(&e, class_x, &AggregationProtocol::Majority).expect("union");
        reductions_ok &= majority
            .labels()
            .iter()
            .zip(union.labels())
            .all(|(&m, &u)| m as usize != class_x || u as usize == class_x);
        if t == 1 {
            let argmax: Vec<u8> = (0..e.num_voxels()).map(|j| e.argmax(0, j) as u8).collect();
            for l in [&majority, &ones, &union, &aggregate_borda(&e).expect("borda")] {
                reductions_ok &= l.labels() == argmax.as_slice();
            }
        }
    }
    Outcome::new(
        mismatches.is_empty() && reductions_ok,
        format!(
            "500 ensembles x 4 protocols, {} mismatches, reductions {}",
            mismatches.len(),
            if reductions_ok { "hold" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------- 5

fn percentiles() -> Outcome {
    let mut r = rng(5);
    let mut exact = true;
    let mut monotone = true;
    for _ in 0..200 {
        let c = r.random_range(2..=4);
        let t = r.random_range(1..=30);
        let e = random_ensemble(&mut r, c, t);
        let class = r.random_range(0..c);
        for p in [0u32, 1, 5, 25, 50, 75, 95, 99, 100] {
            let heat = percentile_heatmap(&e, class, p as f64).expect("heatmap");
            // smallest rank k (1-based) with k/t >= p/100
            let k = ((p as usize * t).div_ceil(100)).clamp(1, t);
            for j in 0..e.num_voxels() {
                let mut col: Vec<f32> = (0..t).map(|s| e.prob(s, class, j)).collect();
                col.sort_by(f32::total_cmp);
                exact &= heat.voxels()[j] == col[k - 1];
            }
        }
        let maps: Vec<_> = [5.0, 50.0, 95.0].iter().map(|&p| percentile_heatmap(&e, class, p).expect("heatmap")).collect();
        for j in 0..e.num_voxels() {
            monotone &= maps[0].voxels()[j] <= maps[1].voxels()[j] && maps[1].voxels()[j] <= maps[2].voxels()[j];
        }
    }
    Outcome::new(exact && monotone, format!("sort oracle {}, p5<=p50<=p95 {}", ok(exact), ok(monotone)))
}

fn ok(b: bool) -> &'static str {
    if b {
        "matches"
    } else {
        "differs"
    }
}

// ---------------------------------------------------------------- 6

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable run dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("below root").to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

/// The desk preset with the counts and epochs cut down; determinism does
/// not depend on how long training runs.
fn short_desk() -> RunConfig {
    let o = serde_json::json!({
        "data": {"splits": {"phantom": {"total": 14, "annotated": 12, "train": 8, "test": 4, "num_classes": 3}}},
        "pretrain": {"epochs": 2},
        "finetune": {"epochs": 3, "warmup_epochs": 1},
        "mc": {"samples": 6},
        "eval": {"fractions": [0.25, 1.0], "seeds": [0, 1], "dropout_rates": [0.3]}
    });
    RunConfig::resolve(Preset::Desk, Some(o)).expect("valid overrides")
}

fn full_pipeline(cfg: &RunConfig, run: &RunDir) -> volssl::Result<()> {
    pipeline::echo_config(cfg, run)?;
    pipeline::cmd_synth(cfg, run)?;
    pipeline::cmd_pretrain(cfg, run)?;
    pipeline::cmd_finetune(cfg, run)?;
    pipeline::cmd_predict(cfg, run)?;
    pipeline::cmd_mc(cfg, run)?;
    pipeline::cmd_sweep(cfg, run)?;
    Ok(())
}

fn determinism() -> Outcome {
    let cfg = short_desk();
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for d in &dirs {
        if let Err(e) = full_pipeline(&cfg, &RunDir::new(d.path())) {
            return Outcome::new(false, format!("pipeline failed: {e}"));
        }
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let kinds = |ext: &str| a.keys().filter(|k| k.ends_with(ext)).count();
    Outcome::new(
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} files ({} checkpoints, {} csv) identical across two runs{}",
            a.len(),
            kinds(".ckpt"),
            kinds(".csv"),
            if differing.is_empty() { String::new() } else { format!("; differ: {differing:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 7 and 8

struct DeskRun {
    cfg: RunConfig,
    run: RunDir,
    _dir: tempfile::TempDir,
    setup: Duration,
}

fn desk_run() -> volssl::Result<DeskRun> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| volssl::Error::Format(e.to_string()))?;
    let run = RunDir::new(dir.path());
    let cfg = RunConfig::preset(Preset::Desk);
    pipeline::echo_config(&cfg, &run)?;
    pipeline::cmd_synth(&cfg, &run)?;
    pipeline::cmd_pretrain(&cfg, &run)?;
    Ok(DeskRun { cfg, run, _dir: dir, setup: t0.elapsed() })
}

fn trend(desk: &DeskRun) -> volssl::Result<Outcome> {
    let t0 = Instant::now();
    let data = pipeline::load_run_dataset(&desk.cfg, &desk.run)?;
    let encoder = Checkpoint::load(desk.run.encoder())?;
    let sweep = FractionSweep { fractions: vec![0.05, 0.10], seeds: vec![0, 1, 2] };
    let spec = pipeline::unet_spec(&desk.cfg)?;
    let report = fraction_sweep(&sweep, &spec, &encoder, &desk.cfg.finetune.train_config(), &data.train, &data.test)?;
    let elapsed = desk.setup + t0.elapsed();
    let mut pass = elapsed < Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for &f in &sweep.fractions {
        let mean = |arm: &str| {
            let rows: Vec<f64> =
                report.rows.iter().filter(|r| r.arm == arm && r.fraction == Some(f)).map(|r| r.mean_fg()).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        let (pre, base) = (mean("pretrained"), mean("baseline"));
        pass &= pre >= base;
        parts.push(format!("{:.0}%: pretrained {pre:.3} vs baseline {base:.3}", f * 100.0));
    }
    Ok(Outcome::new(pass, format!("{}; {:.0}s", parts.join(", "), elapsed.as_secs_f64())))
}

fn mc_benefit(desk: &DeskRun) -> volssl::Result<Outcome> {
    let (net, _) = pipeline::cmd_finetune(&desk.cfg, &desk.run)?;
    let data = pipeline::load_run_dataset(&desk.cfg, &desk.run)?;
    let mc = &desk.cfg.mc;
    let report = dropout_config_sweep(&net, &data.test, mc.samples, &[mc.enc_rate], mc.seed)?;
    let fg = |arm: &str| report.rows.iter().find(|r| r.arm == arm).map(|r| mean_foreground(&r.per_class)).unwrap_or(f64::NAN);
    let det = fg("none");
    let (enc, dec) = (fg("encoder") - det, fg("decoder") - det);
    Ok(Outcome::new(
        enc >= dec,
        format!(
            "T={} rate {}: deterministic {det:.3}, enc-only delta {enc:+.3}, dec-only delta {dec:+.3}, both delta {:+.3}",
            mc.samples,
            mc.enc_rate,
            fg("both") - det
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn paper_preset() -> Outcome {
    let cfg = match RunConfig::load(None, Some(Preset::Paper)) {
        Ok(c) => c,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let split = |name: &str| cfg.data.splits.get(name).map(|s| (s.total, s.annotated, s.train, s.test, s.num_classes));
    let checks = [
        ("temperature", cfg.pretrain.temperature == 0.05),
        ("pretrain epochs", cfg.pretrain.epochs == 1000),
        ("finetune epochs", cfg.finetune.epochs == 400),
        ("warm-up", cfg.finetune.warmup_epochs == 25),
        ("smoothing", cfg.finetune.smoothing == 1e-5),
        ("resolution", cfg.data.resolution == [128, 128, 128]),
        ("pancreas split", split("pancreas") == Some((420, 281, 197, 84, 3))),
        ("brats split", split("brats") == Some((351, 285, 200, 85, 4))),
    ];
    let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "tau 0.05, 1000/400 epochs, warm-up 25, s 1e-5, 128^3, 197/84 and 200/85".to_string()
        } else {
            format!("mismatched: {bad:?}")
        },
    )
}

fn main() {
    let mut all_pass = true;
    let mut emit = |n: usize, name: &str, o: Outcome| {
        all_pass &= o.pass;
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    emit(1, "gradient correctness", gradients());
    emit(2, "nt-xent oracle", ntxent_oracle());
    emit(3, "dice exactness", dice_exactness());
    emit(4, "aggregation oracle", aggregation_oracle());
    emit(5, "percentile heatmaps", percentiles());
    emit(6, "determinism", determinism());
    match desk_run() {
        Ok(desk) => {
            emit(7, "label-fraction trend", trend(&desk).unwrap_or_else(|e| Outcome::new(false, e.to_string())));
            emit(8, "mc-dropout benefit", mc_benefit(&desk).unwrap_or_else(|e| Outcome::new(false, e.to_string())));
        }
        Err(e) => {
            emit(7, "label-fraction trend", Outcome::new(false, format!("desk run failed: {e}")));
            emit(8, "mc-dropout benefit", Outcome::new(false, format!("desk run failed: {e}")));
        }
    }
    emit(9, "paper preset", paper_preset());
    if !all_pass {
        std::process::exit(1);
    }
}
