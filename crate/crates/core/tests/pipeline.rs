//! End-to-end behaviour of training, inference and the command-line front end.

use std::fs;
use std::path::Path;
use std::process::Command;

use volssl::augment::AugmentConfig;
use volssl::config::{Preset, RunConfig};
use volssl::contrastive::{is_encoder_param, pretrain, PretrainConfig, ProjectionHeadSpec};
use volssl::eval::{mean_foreground, deterministic_dice};
use volssl::mc::{aggregate_majority, mc_sample, predict_deterministic, McConfig};
use volssl::optim::AdamConfig;
use volssl::pipeline::{self, RunDir};
use volssl::segment::{finetune, FinetuneConfig, UNet, UNetInit, UNetSpec};
use volssl::volume::{generate_phantom, minmax_normalize, PhantomSpec, Sample, Volume};

fn phantoms(n: u64, offset: u64) -> Vec<Sample> {
    (offset..offset + n)
        .map(|seed| {
            let (v, l, _) = generate_phantom(&PhantomSpec { seed, ..Default::default() }).unwrap();
            Sample { volume: minmax_normalize(&v), labels: Some(l) }
        })
        .collect()
}

fn small_pretrain(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        temperature: 0.05,
        epochs,
        scans_per_batch: 4,
        grid: [2, 2, 2],
        encoder: vec![8, 16, 32],
        head: ProjectionHeadSpec { hidden_dim: 128, output_dim: 64 },
        seed: 3,
        optimizer: AdamConfig::default(),
    }
}

#[test]
fn pretraining_loss_decreases() {
    let scans: Vec<Volume> = phantoms(20, 0).into_iter().map(|s| s.volume).collect();
    let out = pretrain(&scans, &small_pretrain(50), &AugmentConfig::default()).unwrap();
    let h = &out.loss_history;
    assert_eq!(h.len(), 50);
    let head: f64 = h[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = h[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss did not decrease: first {head:.4}, last {tail:.4}");
}

fn unet_spec() -> UNetSpec {
    UNetSpec { encoder: small_pretrain(1).encoder_spec([16; 3]).unwrap(), num_classes: 3, input_dims: [16; 3] }
}

#[test]
fn finetuning_learns_the_phantoms() {
    let train = phantoms(20, 100);
    let net = UNet::build(unet_spec(), UNetInit::Random { seed: 1 }).unwrap();
    let cfg = FinetuneConfig { epochs: 30, warmup_epochs: 0, batch_size: 1, ..Default::default() };
    let out = finetune(net, &train, 1.0, &cfg).unwrap();
    assert!(out.loss_history.last() < out.loss_history.first());
    let fg = mean_foreground(&deterministic_dice(&out.unet, &train).unwrap());
    assert!(fg > 0.5, "foreground dice {fg:.3}");
}

#[test]
fn full_warmup_leaves_the_encoder_untouched() {
    let scans: Vec<Volume> = phantoms(4, 0).into_iter().map(|s| s.volume).collect();
    let pre = pretrain(&scans, &small_pretrain(1), &AugmentConfig::default()).unwrap();
    let net = UNet::build(unet_spec(), UNetInit::Pretrained { checkpoint: &pre.checkpoint, seed: 0 }).unwrap();
    let before = net.params.clone();
    let cfg = FinetuneConfig { epochs: 2, warmup_epochs: 2, ..Default::default() };
    let out = finetune(net, &phantoms(3, 50), 1.0, &cfg).unwrap();
    let mut decoder_moved = false;
    for (name, t) in before.iter() {
        let after = out.unet.params.get(name).unwrap();
        if is_encoder_param(name) {
            let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t.data()), bits(after.data()), "{name} changed during warm-up");
            assert_eq!(bits(t.data()), bits(pre.checkpoint.params.get(name).unwrap().data()));
        } else {
            decoder_moved |= t.data() != after.data();
        }
    }
    assert!(decoder_moved, "decoder did not train");
}

#[test]
fn zero_rate_mc_equals_deterministic_prediction() {
    let net = UNet::build(unet_spec(), UNetInit::Random { seed: 4 }).unwrap();
    let vol = &phantoms(1, 7)[0].volume;
    let det = predict_deterministic(&net, vol).unwrap();
    for t in [1, 3] {
        let mc = mc_sample(&net, vol, &McConfig { samples: t, enc_rate: 0.0, dec_rate: 0.0, seed: 9 }).unwrap();
        assert!((0..t).all(|s| mc.sample(s) == det.sample(0)));
        assert_eq!(aggregate_majority(&mc).unwrap(), aggregate_majority(&det).unwrap());
    }
}

fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "data": {"splits": {"phantom": {"total": 8, "annotated": 7, "train": 4, "test": 3, "num_classes": 3}}},
        "pretrain": {"epochs": 1},
        "finetune": {"epochs": 2, "warmup_epochs": 1},
        "mc": {"samples": 3, "enc_rate": 0.0, "dec_rate": 0.0},
        "eval": {"fractions": [0.5], "seeds": [0], "dropout_rates": [0.3]}
    })
}

fn files(dir: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(ext))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_commands_chain_and_synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = RunConfig::resolve(Preset::Desk, Some(tiny_config())).unwrap();
    let entries = pipeline::cmd_synth(&cfg, &run).unwrap();
    assert_eq!(entries.len(), 8);
    assert_eq!(entries.iter().filter(|e| e.label.is_some()).count(), 7);
    let first = files(&dir.path().join("data"), "");
    pipeline::cmd_synth(&cfg, &run).unwrap();
    assert_eq!(first, files(&dir.path().join("data"), ""));

    pipeline::cmd_pretrain(&cfg, &run).unwrap();
    pipeline::cmd_finetune(&cfg, &run).unwrap();
    pipeline::cmd_predict(&cfg, &run).unwrap();
    pipeline::cmd_mc(&cfg, &run).unwrap();
    // with dropout rates at zero the MC labels are the deterministic ones
    assert_eq!(files(&dir.path().join("predict"), ".lab"), files(&dir.path().join("mc"), ".lab"));
    let ppm = files(&dir.path().join("mc"), ".ppm");
    assert_eq!(ppm.len(), 3 * 3);
    assert!(ppm.iter().all(|(_, b)| b.starts_with(b"P6\n16 16\n255\n") && b.len() == 13 + 16 * 16 * 3));
}

#[test]
fn resolved_config_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = RunConfig::resolve(Preset::Desk, Some(tiny_config())).unwrap();
    pipeline::echo_config(&cfg, &run).unwrap();
    let again = RunConfig::load(Some(&run.resolved_config()), None).unwrap();
    assert_eq!(cfg, again);
}

fn cli(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_volssl")).arg("--out").arg(out).args(args).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, v: serde_json::Value| {
        let p = dir.path().join(name);
        fs::write(&p, v.to_string()).unwrap();
        p.to_string_lossy().into_owned()
    };
    let bad = write("bad.json", serde_json::json!({"pretrain": {"epochz": 1}}));
    let (code, err) = cli(&dir.path().join("a"), &["--config", &bad, "synth"]);
    assert_eq!(code, 1, "{err}");
    assert_eq!(err.lines().count(), 1);

    let (code, err) = cli(&dir.path().join("b"), &["predict"]);
    assert_eq!(code, 2, "{err}");

    let mut diverge = tiny_config();
    diverge["finetune"]["optimizer"] = serde_json::json!({"lr": 1e30});
    let diverge = write("diverge.json", diverge);
    let run = dir.path().join("c");
    for cmd in ["synth", "pretrain"] {
        assert_eq!(cli(&run, &["--config", &diverge, cmd]).0, 0);
    }
    let (code, err) = cli(&run, &["--config", &diverge, "finetune"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.starts_with("volssl: numeric error"), "{err}");
}
