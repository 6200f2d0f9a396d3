//! Subcommand implementations over a single run directory.
//!
//! ```text
//! <out>/config.resolved.json
//! <out>/data/manifest.json, split.json, scan_NNNN.{vol,json}, scan_NNNN_seg.{lab,json}
//! <out>/pretrain/encoder.ckpt, loss.csv
//! <out>/finetune/unet.ckpt, loss.csv, metrics.csv
//! <out>/predict/test_NNN.lab, test_NNN_prob_C.vol, metrics.csv
//! <out>/mc/test_NNN.lab, test_NNN_pP.vol, test_NNN_pP.ppm, metrics.csv
//! <out>/sweep/fraction.csv, dropout.csv, aggregation.csv
//! <out>/gradcheck/report.csv
//! ```
//!
//! Every command reads its inputs from the run directory and writes only
//! below its own subdirectory, so reruns with one config are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{InitSource, RunConfig};
use crate::contrastive::{pretrain, PretrainOutcome};
use crate::error::{Error, Result};
use crate::eval::{
    aggregation_sweep, class_dice, deterministic_dice, dropout_config_sweep, fraction_sweep, standard_protocols,
    volume_seed, ExperimentReport, ExperimentRow, FractionSweep,
};
use crate::gradcheck::suite;
use crate::mc::{aggregate, aggregate_majority, mc_sample, percentile_heatmap, predict_deterministic, render_slice_ppm, McConfig};
use crate::segment::{finetune, UNet, UNetInit, UNetSpec};
use crate::volume::{
    bounding_box_crop, generate_phantom, load_dataset, minmax_normalize, resize_nearest, resize_trilinear, save_labels,
    save_manifest, save_volume, train_test_split, LabelVolume, ManifestEntry, PhantomSpec, Sample, Volume,
};

/// Fixed file layout below the run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.path("config.resolved.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.path("data/manifest.json")
    }
    pub fn split(&self) -> PathBuf {
        self.path("data/split.json")
    }
    pub fn encoder(&self) -> PathBuf {
        self.path("pretrain/encoder.ckpt")
    }
    pub fn unet(&self) -> PathBuf {
        self.path("finetune/unet.ckpt")
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Format(format!("{} is missing; run `{producer}` first", path.display())))
    }
}

/// Writes `config.resolved.json`.
pub fn echo_config(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    write(&run.resolved_config(), cfg.to_json() + "\n")
}

/// Train/test indices into the annotated scans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Generates the phantom dataset. The first `annotated` scans carry labels.
pub fn cmd_synth(cfg: &RunConfig, run: &RunDir) -> Result<Vec<ManifestEntry>> {
    let split = cfg.data.split()?;
    let dir = run.dir("data")?;
    let mut entries = Vec::with_capacity(split.total);
    for i in 0..split.total {
        let spec = PhantomSpec { seed: cfg.data.phantom.seed + i as u64, ..cfg.data.phantom.clone() };
        let (volume, labels, _) = generate_phantom(&spec)?;
        let stem = format!("scan_{i:04}");
        save_volume(&volume, dir.join(format!("{stem}.vol")), dir.join(format!("{stem}.json")))?;
        let label = if i < split.annotated {
            save_label_file(&labels, &dir, &format!("{stem}_seg"))?;
            Some(format!("{stem}_seg.lab"))
        } else {
            None
        };
        entries.push(ManifestEntry { volume: format!("{stem}.vol"), label });
    }
    save_manifest(&entries, run.manifest())?;
    let (train, test) = train_test_split(split.annotated, split.train, split.test, cfg.data.split_seed)?;
    write(&run.split(), serde_json::to_string_pretty(&Split { train, test })? + "\n")?;
    Ok(entries)
}

/// Crop, resize to the network resolution, and min-max normalize.
pub fn preprocess(sample: &Sample, cfg: &RunConfig) -> Result<Sample> {
    let (vol, labels, _) = bounding_box_crop(&sample.volume, sample.labels.as_ref(), &cfg.data.crop)?;
    let target = cfg.data.resolution;
    let volume = minmax_normalize(&resize_trilinear(&vol, target)?);
    let labels = labels.map(|l| resize_nearest(&l, target)).transpose()?;
    Ok(Sample { volume, labels })
}

/// The preprocessed dataset of a run.
pub struct Dataset {
    /// Every scan, annotated or not, used for pretraining.
    pub all: Vec<Volume>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_run_dataset(cfg: &RunConfig, run: &RunDir) -> Result<Dataset> {
    require(&run.manifest(), "synth")?;
    let raw = load_dataset(run.manifest())?;
    let prepared: Vec<Sample> = raw.iter().map(|s| preprocess(s, cfg)).collect::<Result<_>>()?;
    let text = fs::read_to_string(run.split()).map_err(|e| Error::io(run.split(), e))?;
    let split: Split = serde_json::from_str(&text).map_err(|e| Error::Format(format!("split.json: {e}")))?;
    let pick = |idx: &[usize]| -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| match prepared.get(i) {
                Some(s @ Sample { labels: Some(_), .. }) => Ok(s.clone()),
                _ => Err(Error::Format(format!("split index {i} is not an annotated scan"))),
            })
            .collect()
    };
    Ok(Dataset { train: pick(&split.train)?, test: pick(&split.test)?, all: prepared.into_iter().map(|s| s.volume).collect() })
}

fn num_classes(cfg: &RunConfig) -> Result<usize> {
    Ok(cfg.data.split()?.num_classes)
}

pub fn unet_spec(cfg: &RunConfig) -> Result<UNetSpec> {
    Ok(UNetSpec {
        encoder: cfg.pretrain.encoder_spec(cfg.data.resolution)?,
        num_classes: num_classes(cfg)?,
        input_dims: cfg.data.resolution,
    })
}

fn series_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v:.9}\n"));
    }
    s
}

pub fn cmd_pretrain(cfg: &RunConfig, run: &RunDir) -> Result<PretrainOutcome> {
    let data = load_run_dataset(cfg, run)?;
    let out = pretrain(&data.all, &cfg.pretrain, &cfg.augment)?;
    let dir = run.dir("pretrain")?;
    out.checkpoint.save(run.encoder())?;
    write(&dir.join("loss.csv"), series_csv("epoch,loss", &out.loss_history))?;
    Ok(out)
}

fn metrics_row(id: &str, arm: &str, fraction: Option<f64>, mc: &McConfig, protocol: &str, per_class: Vec<f64>, seed: u64) -> ExperimentRow {
    ExperimentRow {
        experiment_id: id.into(),
        arm: arm.into(),
        fraction,
        enc_rate: mc.enc_rate,
        dec_rate: mc.dec_rate,
        protocol: protocol.into(),
        per_class,
        seed,
    }
}

pub fn cmd_finetune(cfg: &RunConfig, run: &RunDir) -> Result<(UNet, ExperimentReport)> {
    let data = load_run_dataset(cfg, run)?;
    let spec = unet_spec(cfg)?;
    let f = &cfg.finetune;
    let (net, arm) = match f.init_source()? {
        InitSource::Random => (UNet::build(spec, UNetInit::Random { seed: f.seed })?, "baseline"),
        InitSource::Pretrained(p) => {
            let path = run.root.join(p);
            require(&path, "pretrain")?;
            let ckpt = Checkpoint::load(&path)?;
            (UNet::build(spec, UNetInit::Pretrained { checkpoint: &ckpt, seed: f.seed })?, "pretrained")
        }
    };
    let out = finetune(net, &data.train, f.fraction, &f.train_config())?;
    let dir = run.dir("finetune")?;
    let extra = serde_json::json!({ "arm": arm, "fraction": f.fraction, "subset": out.subset, "seed": f.seed });
    out.unet.to_checkpoint(extra).save(run.unet())?;
    write(&dir.join("loss.csv"), series_csv("epoch,loss", &out.loss_history))?;
    let mut report = ExperimentReport::default();
    let off = McConfig { enc_rate: 0.0, dec_rate: 0.0, ..cfg.mc.mc_config() };
    let dice = deterministic_dice(&out.unet, &data.test)?;
    report.push(metrics_row("finetune", arm, Some(f.fraction), &off, "deterministic", dice, f.seed));
    report.write_csv(&dir.join("metrics.csv"))?;
    Ok((out.unet, report))
}

fn load_unet(run: &RunDir) -> Result<UNet> {
    require(&run.unet(), "finetune")?;
    UNet::from_checkpoint(&Checkpoint::load(run.unet())?)
}

fn save_label_file(labels: &LabelVolume, dir: &Path, stem: &str) -> Result<()> {
    save_labels(labels, dir.join(format!("{stem}.lab")), dir.join(format!("{stem}.json")))
}

fn save_volume_file(volume: &Volume, dir: &Path, stem: &str) -> Result<()> {
    save_volume(volume, dir.join(format!("{stem}.vol")), dir.join(format!("{stem}.json")))
}

/// Mean per-class dice of `preds` against the test labels.
fn mean_dice(preds: &[LabelVolume], test: &[Sample], c: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; c];
    for (p, s) in preds.iter().zip(test) {
        let truth = s.labels.as_ref().expect("test scans are annotated");
        for (acc, d) in sum.iter_mut().zip(class_dice(p, truth, c)?) {
            *acc += d;
        }
    }
    Ok(sum.into_iter().map(|d| d / test.len() as f64).collect())
}

/// Deterministic (dropout off) labels and class probabilities per test scan.
pub fn cmd_predict(cfg: &RunConfig, run: &RunDir) -> Result<ExperimentReport> {
    let data = load_run_dataset(cfg, run)?;
    let net = load_unet(run)?;
    let dir = run.dir("predict")?;
    let c = net.spec.num_classes;
    let mut preds = Vec::with_capacity(data.test.len());
    for (k, s) in data.test.iter().enumerate() {
        let ens = predict_deterministic(&net, &s.volume)?;
        let labels = aggregate_majority(&ens)?;
        save_label_file(&labels, &dir, &format!("test_{k:03}"))?;
        let v = ens.num_voxels();
        for class in 0..c {
            let prob = Volume::new(ens.dims(), ens.sample(0)[class * v..(class + 1) * v].to_vec())?;
            save_volume_file(&prob, &dir, &format!("test_{k:03}_prob_{class}"))?;
        }
        preds.push(labels);
    }
    let mut report = ExperimentReport::default();
    let off = McConfig { enc_rate: 0.0, dec_rate: 0.0, ..cfg.mc.mc_config() };
    report.push(metrics_row("predict", "deterministic", None, &off, "deterministic", mean_dice(&preds, &data.test, c)?, 0));
    report.write_csv(&dir.join("metrics.csv"))?;
    Ok(report)
}

/// MC-dropout ensembles per test scan: aggregated labels, percentile
/// heatmaps of `mc.heatmap_class`, and a PPM render of one axial slice.
pub fn cmd_mc(cfg: &RunConfig, run: &RunDir) -> Result<ExperimentReport> {
    let data = load_run_dataset(cfg, run)?;
    let net = load_unet(run)?;
    let dir = run.dir("mc")?;
    let mc = cfg.mc.mc_config();
    let c = net.spec.num_classes;
    let mut preds = Vec::with_capacity(data.test.len());
    for (k, s) in data.test.iter().enumerate() {
        let ens = mc_sample(&net, &s.volume, &McConfig { seed: volume_seed(mc.seed, k), ..mc.clone() })?;
        let labels = aggregate(&ens, &cfg.mc.protocol)?;
        save_label_file(&labels, &dir, &format!("test_{k:03}"))?;
        let z = cfg.mc.render_slice.unwrap_or(ens.dims()[0] / 2);
        let truth = s.labels.as_ref().map(|l| (l, cfg.mc.heatmap_class as u8));
        for &p in &cfg.mc.percentiles {
            let heat = percentile_heatmap(&ens, cfg.mc.heatmap_class, p)?;
            let stem = format!("test_{k:03}_p{p}");
            save_volume_file(&heat, &dir, &stem)?;
            write(&dir.join(format!("{stem}.ppm")), render_slice_ppm(&heat, z, truth)?)?;
        }
        preds.push(labels);
    }
    let mut report = ExperimentReport::default();
    let dice = mean_dice(&preds, &data.test, c)?;
    report.push(metrics_row("mc", "mc", None, &mc, cfg.mc.protocol.name(), dice, mc.seed));
    report.write_csv(&dir.join("metrics.csv"))?;
    Ok(report)
}

pub struct SweepReports {
    pub fraction: ExperimentReport,
    pub dropout: ExperimentReport,
    pub aggregation: ExperimentReport,
}

/// Label-fraction sweep from the pretrained encoder, then dropout
/// configuration and aggregation sweeps on the fine-tuned network.
pub fn cmd_sweep(cfg: &RunConfig, run: &RunDir) -> Result<SweepReports> {
    let data = load_run_dataset(cfg, run)?;
    require(&run.encoder(), "pretrain")?;
    let encoder = Checkpoint::load(run.encoder())?;
    let net = load_unet(run)?;
    let dir = run.dir("sweep")?;
    let e = &cfg.eval;

    let sweep = FractionSweep { fractions: e.fractions.clone(), seeds: e.seeds.clone() };
    let fraction = fraction_sweep(&sweep, &unet_spec(cfg)?, &encoder, &cfg.finetune.train_config(), &data.train, &data.test)?;
    fraction.write_csv(&dir.join("fraction.csv"))?;

    let dropout = dropout_config_sweep(&net, &data.test, cfg.mc.samples, &e.dropout_rates, cfg.mc.seed)?;
    dropout.write_csv(&dir.join("dropout.csv"))?;

    let protocols = standard_protocols(e.majority_weights.clone(), e.union_class);
    let aggregation = aggregation_sweep(&net, &data.test, &cfg.mc.mc_config(), &protocols)?;
    aggregation.write_csv(&dir.join("aggregation.csv"))?;
    Ok(SweepReports { fraction, dropout, aggregation })
}

/// Runs the standard gradient-check suite; a failing case is a numeric
/// error after the full report has been written.
pub fn cmd_gradcheck(run: &RunDir) -> Result<Vec<suite::CaseResult>> {
    let results = suite::run_all()?;
    let dir = run.dir("gradcheck")?;
    let mut csv = String::from("case,max_rel_error,tolerance,probes,passed\n");
    for r in &results {
        csv.push_str(&format!("{},{:.3e},{:e},{},{}\n", r.name, r.max_rel_error, r.tolerance, r.probes, r.passed()));
    }
    write(&dir.join("report.csv"), csv)?;
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        return Err(Error::Numeric(format!(
            "gradient check {} failed: max rel error {:.3e} >= {:e}",
            bad.name, bad.max_rel_error, bad.tolerance
        )));
    }
    Ok(results)
}
