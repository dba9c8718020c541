use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use spikformer::attention::{binary_attention_map, AttentionVariant};
use spikformer::checkpoint::Checkpoint;
use spikformer::config::Config;
use spikformer::data::{DataSpec, Dataset, Splits};
use spikformer::error::{CheckpointError, ConfigError, DataError, TrainError};
use spikformer::io::{atomic_write, matrix_csv, parse_pnm, pgm_bytes, write_value_ranges};
use spikformer::model::Spikformer;
use spikformer::profiler::{format_pj, fj_to_uj, EnergyReport, LayerKind, Probe};
use spikformer::tensor::Tensor;
use spikformer::train::{self, RunDir, EVAL_BATCH};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Config(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    Both,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Config::parse(&text)?)
}

fn parse_spec(data: &str) -> Result<DataSpec, CliError> {
    DataSpec::parse(data).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_for_training(spec: &DataSpec, cfg: &Config) -> Result<Splits, CliError> {
    let m = &cfg.model;
    let splits = spec.load(m.in_channels, m.image_height, m.image_width)?;
    if splits.train.num_classes > m.num_classes {
        return Err(DataError::LabelRange {
            label: splits.train.num_classes - 1,
            num_classes: m.num_classes,
        }
        .into());
    }
    Ok(splits)
}

/// Data for a trained model. Geometry or class-count disagreement with the
/// checkpoint is a checkpoint error.
fn load_for_model(spec: &DataSpec, model: &Spikformer<f32>) -> Result<Splits, CliError> {
    let m = model.config();
    let mismatch = |what: String| {
        CliError::Checkpoint(CheckpointError::Format(format!("checkpoint does not fit the data: {what}")))
    };
    if let DataSpec::Synth { classes, .. } = spec {
        if *classes != m.num_classes {
            return Err(mismatch(format!(
                "data has {classes} classes, model has {}",
                m.num_classes
            )));
        }
    }
    let splits = match spec.load(m.in_channels, m.image_height, m.image_width) {
        Err(DataError::Image(msg)) => return Err(mismatch(msg)),
        Err(DataError::LabelRange { label, num_classes }) => {
            return Err(mismatch(format!("label {label} with {num_classes} classes")))
        }
        other => other?,
    };
    let classes = splits.train.num_classes.max(splits.test.num_classes);
    if classes > m.num_classes {
        return Err(mismatch(format!(
            "data has {classes} classes, model has {}",
            m.num_classes
        )));
    }
    Ok(splits)
}

fn load_model(path: &Path) -> Result<Spikformer<f32>, CliError> {
    let ck = Checkpoint::load(path)?;
    Ok(Spikformer::from_checkpoint(&ck)?)
}

pub fn train(config: &Path, data: &str, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let spec = parse_spec(data)?;
    let splits = load_for_training(&spec, &cfg)?;
    create_dir(out)?;
    write(&out.join("config.txt"), &cfg.to_kv())?;
    let mut model = Spikformer::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    info!(
        "training on {} samples, testing on {}, {} parameters",
        splits.train.len(),
        splits.test.len(),
        model.store().num_scalars()
    );
    let run = RunDir { dir: out.to_path_buf() };
    let history = train::train(&mut model, &splits, &cfg.train, Some(&run))?;
    let best = history.best_accuracy().unwrap_or(0.0);
    println!("epochs={} best_test_acc={best}", history.epochs.len());
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &str, split: Split) -> Result<(), CliError> {
    let spec = parse_spec(data)?;
    let mut model = load_model(checkpoint)?;
    let splits = load_for_model(&spec, &model)?;
    if matches!(split, Split::Train | Split::Both) {
        let e = train::evaluate(&mut model, &splits.train).map_err(runtime)?;
        let key = if split == Split::Both { "train_accuracy" } else { "accuracy" };
        println!("{key}={}", e.accuracy);
    }
    if matches!(split, Split::Test | Split::Both) {
        let e = train::evaluate(&mut model, &splits.test).map_err(runtime)?;
        println!("accuracy={}", e.accuracy);
    }
    Ok(())
}

/// First `limit` samples of `ds`.
fn head(ds: &Dataset, limit: usize) -> Dataset {
    let n = limit.min(ds.len());
    Dataset {
        images: ds.images[..n * ds.sample_len()].to_vec(),
        labels: ds.labels[..n].to_vec(),
        ..ds.clone()
    }
}

/// Two passes over `ds`: the first finds value ranges, the second fills
/// histograms over them and collects all counts.
fn run_probe(model: &mut Spikformer<f32>, ds: &Dataset) -> Result<Probe, CliError> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut first = Probe::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = ds.batch::<f32>(chunk);
        model.probe(&images, &mut first).map_err(runtime)?;
    }
    let mut second = Probe::with_histograms(&first);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = ds.batch::<f32>(chunk);
        model.probe(&images, &mut second).map_err(runtime)?;
    }
    Ok(second)
}

/// Spiking energy of the attention products alone, and their billed
/// operation count.
fn attention_totals(report: &EnergyReport) -> (u64, u128) {
    report
        .rows
        .iter()
        .filter(|r| matches!(r.kind, LayerKind::Attention | LayerKind::FloatAttention))
        .fold((0, 0), |(ops, e), r| (ops + r.sops, e + r.energy_fj))
}

fn write_profile(out: &Path, probe: &Probe, report: &EnergyReport) -> Result<(), CliError> {
    create_dir(out)?;
    write(&out.join("energy.csv"), &report.to_csv())?;
    write(&out.join("firing_rates.csv"), &probe.firing_rates_csv())?;
    let hist = out.join("value_ranges");
    write_value_ranges(&hist, probe).map_err(|e| CliError::Runtime(format!("{}: {e}", hist.display())))
}

pub fn profile(checkpoint: &Path, data: &str, out: &Path, limit: usize) -> Result<(), CliError> {
    if limit == 0 {
        return Err(CliError::Usage("--limit must be at least 1".into()));
    }
    let spec = parse_spec(data)?;
    let mut model = load_model(checkpoint)?;
    let splits = load_for_model(&spec, &model)?;
    let ds = head(&splits.test, limit);
    let probe = run_probe(&mut model, &ds)?;
    let report = EnergyReport::from_probe(&probe).map_err(runtime)?;
    write_profile(out, &probe, &report)?;
    let (snn, ann) = (report.snn_total_fj(), report.ann_total_fj());
    let per = ds.len() as u128;
    println!("samples={}", ds.len());
    println!("snn_energy_pj={}", format_pj(snn));
    println!("ann_energy_pj={}", format_pj(ann));
    println!("snn_energy_uj_per_image={}", fj_to_uj(snn / per));
    println!("ann_energy_uj_per_image={}", fj_to_uj(ann / per));
    // the attention kernels count their accumulates directly; report both
    let (mut estimated, mut counted) = (0u64, 0u64);
    for (layer, row) in probe.layers.iter().zip(&report.rows) {
        if let Some(a) = layer.accumulates {
            estimated += row.sops;
            counted += a;
        }
    }
    println!("attention_sops_estimated={estimated}");
    println!("attention_sops_counted={counted}");
    Ok(())
}

/// Hash of the configuration with the attention variant left out, so rows
/// of one ablation share it.
fn config_hash(cfg: &Config, data: &str) -> String {
    let text: String = cfg
        .to_kv()
        .lines()
        .filter(|l| !l.starts_with("attention="))
        .map(|l| format!("{l}\n"))
        .collect();
    let digest = Sha256::digest(format!("{text}data={data}\n").as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub const ABLATION_HEADER: &str = "variant,acc,ops,energy,model_ops,model_energy,config_hash,attn_min,attn_max";

pub fn ablate(variant: &str, config: &Path, data: &str, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let variant: AttentionVariant = variant.parse().map_err(CliError::Usage)?;
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let hash = config_hash(&cfg, data);
    cfg.model.attention = variant;
    cfg.model.validate()?;
    let spec = parse_spec(data)?;
    let splits = load_for_training(&spec, &cfg)?;
    let run_dir = out.join(variant.name());
    create_dir(&run_dir)?;
    write(&run_dir.join("config.txt"), &cfg.to_kv())?;
    let mut model = Spikformer::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let run = RunDir { dir: run_dir.clone() };
    let history = train::train(&mut model, &splits, &cfg.train, Some(&run))?;
    let acc = history.last().map_or(0.0, |e| e.test_acc);

    let ds = head(&splits.test, 256);
    let probe = run_probe(&mut model, &ds)?;
    let report = EnergyReport::from_probe(&probe).map_err(runtime)?;
    write_profile(&run_dir.join("profile"), &probe, &report)?;
    let per = ds.len() as u64;
    let (attn_ops, attn_fj) = attention_totals(&report);
    let (lo, hi) = probe
        .ranges
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.min), hi.max(r.max)));
    let row = format!(
        "{},{},{},{},{},{},{hash},{lo},{hi}\n",
        variant.name(),
        acc,
        attn_ops as f64 / per as f64 / 1e6,
        fj_to_uj(attn_fj / per as u128),
        report.total_ops() as f64 / per as f64 / 1e6,
        fj_to_uj(report.snn_total_fj() / per as u128),
    );
    let path = out.join("ablation.csv");
    let mut text = match fs::read_to_string(&path) {
        Ok(t) if t.starts_with(ABLATION_HEADER) => t,
        Ok(_) => {
            return Err(CliError::Runtime(format!(
                "{} exists but is not an ablation table",
                path.display()
            )))
        }
        Err(_) => format!("{ABLATION_HEADER}\n"),
    };
    text.push_str(&row);
    write(&path, &text)?;
    print!("{ABLATION_HEADER}\n{row}");
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor<f32>, CliError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: PathBuf::from(path),
        source,
    })?;
    let img = parse_pnm(&bytes).map_err(DataError::Image)?;
    Tensor::new(&[1, img.channels, img.height, img.width], img.data).map_err(runtime)
}

pub fn export_attn(
    checkpoint: &Path,
    input: &Path,
    block: usize,
    head: usize,
    step: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut model = load_model(checkpoint)?;
    let cfg = model.config().clone();
    if cfg.attention != AttentionVariant::Ssa {
        return Err(CliError::Usage(format!(
            "attention export needs a spiking-attention model, checkpoint uses {}",
            cfg.attention
        )));
    }
    let bounds = [
        ("block", block, cfg.num_blocks),
        ("head", head, cfg.num_heads),
        ("t", step, cfg.time_steps),
    ];
    for (what, v, n) in bounds {
        if v >= n {
            return Err(CliError::Usage(format!("--{what} {v} out of range: model has {n}")));
        }
    }
    let image = read_image(input)?;
    let want = [cfg.in_channels, cfg.image_height, cfg.image_width];
    if image.shape()[1..] != want {
        return Err(DataError::Image(format!(
            "image is {:?}, the model expects {want:?}",
            &image.shape()[1..]
        ))
        .into());
    }
    let mut probe = Probe::new();
    probe.capture_attention = true;
    model.probe(&image, &mut probe).map_err(runtime)?;
    let cap = probe
        .captures
        .iter()
        .find(|c| c.block == block)
        .ok_or_else(|| CliError::Runtime(format!("block {block} recorded no attention")))?;
    let (n, d) = (cap.tokens, cap.head_dim);
    // groups are laid out time, then batch (one image), then head
    let group = step * cfg.num_heads + head;
    let span = |v: &[f32]| v[group * n * d..(group + 1) * n * d].to_vec();
    let (q, k, output) = (span(&cap.q), span(&cap.k), span(&cap.output));
    let map: Vec<f64> = binary_attention_map(&q, &k, n, d)
        .map_err(runtime)?
        .into_iter()
        .map(f64::from)
        .collect();
    let output: Vec<f64> = output.into_iter().map(f64::from).collect();
    create_dir(out)?;
    write(&out.join("attn_map.csv"), &matrix_csv(&map, n))?;
    atomic_write(&out.join("attn_map.pgm"), &pgm_bytes(&map, n, n)).map_err(runtime)?;
    write(&out.join("attn_out.csv"), &matrix_csv(&output, d))?;
    atomic_write(&out.join("attn_out.pgm"), &pgm_bytes(&output, d, n)).map_err(runtime)?;
    println!("tokens={n} head_dim={d}");
    Ok(())
}
