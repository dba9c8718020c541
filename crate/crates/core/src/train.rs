//! Supervised training and evaluation loops.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::data::{Dataset, Splits};
use crate::error::{TensorError, TrainError};
use crate::io::{atomic_write, write_value_ranges};
use crate::model::{ForwardMode, Spikformer};
use crate::optim::{cosine_lr, AdamW};
use crate::profiler::Probe;
use crate::tensor::{Real, Tensor};

pub const EVAL_BATCH: usize = 128;
pub const METRICS_HEADER: &str = "epoch,train_loss,test_loss,test_acc,lr,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                e.epoch, e.train_loss, e.test_loss, e.test_acc, e.lr, e.wall_seconds
            );
        }
        s
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.test_acc).reduce(f64::max)
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let cols = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate<F: Real>(model: &mut Spikformer<F>, ds: &Dataset) -> Result<Evaluation, TensorError> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss_sum, mut correct) = (0.0, 0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, labels) = ds.batch::<F>(chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, ForwardMode::EVAL, None)?;
        let loss = g.cross_entropy(out.logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        let pred = argmax_rows(g.value(out.logits));
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let total = ds.len();
    Ok(Evaluation {
        loss: loss_sum / total.max(1) as f64,
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
    })
}

/// Training-mode loss on one batch and the gradient of every parameter,
/// in store order.
pub fn loss_and_grads<F: Real>(
    model: &mut Spikformer<F>,
    images: &Tensor<F>,
    labels: &[usize],
    mode: ForwardMode,
) -> Result<(f64, Vec<Option<Tensor<F>>>), TensorError> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images, mode, None)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, out.params.iter().map(|&p| g.grad(p)).collect()))
}

/// Where training writes its files.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn nan_dump(&self) -> PathBuf {
        self.dir.join("nan_dump")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains `model` on `splits.train` with AdamW and a per-iteration cosine
/// schedule, evaluating on `splits.test` after every epoch.
///
/// With `out`, the metrics file is rewritten after each epoch and the best
/// and latest weights are saved as checkpoints.
pub fn train<F: Real>(
    model: &mut Spikformer<F>,
    splits: &Splits,
    cfg: &TrainConfig,
    out: Option<&RunDir>,
) -> Result<History, TrainError> {
    cfg.validate()?;
    if splits.train.num_classes > model.config().num_classes {
        return Err(crate::error::DataError::LabelRange {
            label: splits.train.num_classes - 1,
            num_classes: model.config().num_classes,
        }
        .into());
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let n = splits.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut best = f64::NEG_INFINITY;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, cfg.base_lr);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(step, total, cfg.base_lr);
            let (images, labels) = splits.train.batch::<F>(chunk);
            let (loss, grads) = loss_and_grads(model, &images, &labels, ForwardMode::TRAIN)?;
            if !loss.is_finite() {
                let dump = out.map_or_else(|| std::env::temp_dir().join("spikformer_nan_dump"), RunDir::nan_dump);
                dump_value_ranges(model, &images, &dump);
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: b,
                    loss,
                    dump,
                });
            }
            opt.step(model.store_mut(), &grads, lr);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let test = evaluate(model, &splits.test)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            test_loss: test.loss,
            test_acc: test.accuracy,
            lr,
            wall_seconds: if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        info!(
            "epoch {epoch}: train_loss={:.4} test_loss={:.4} test_acc={:.4} lr={:.2e}",
            m.train_loss, m.test_loss, m.test_acc, m.lr
        );
        history.epochs.push(m);
        if let Some(o) = out {
            let path = o.metrics();
            atomic_write(&path, history.to_csv().as_bytes()).map_err(io_err(&path))?;
            let ck = model.to_checkpoint();
            if test.accuracy > best {
                ck.save(&o.best())?;
            }
            ck.save(&o.last())?;
        }
        best = best.max(test.accuracy);
        if cfg.target_accuracy.is_some_and(|t| test.accuracy >= t) {
            info!("reached target accuracy after epoch {epoch}");
            break;
        }
    }
    Ok(history)
}

/// Records attention value ranges and histograms for `images` into `dir`.
/// Failures are logged, since this only runs while reporting another error.
fn dump_value_ranges<F: Real>(model: &mut Spikformer<F>, images: &Tensor<F>, dir: &Path) {
    let result = (|| -> Result<(), String> {
        let mut first = Probe::new();
        model.probe(images, &mut first).map_err(|e| e.to_string())?;
        let mut second = Probe::with_histograms(&first);
        model.probe(images, &mut second).map_err(|e| e.to_string())?;
        write_value_ranges(dir, &second).map_err(|e| e.to_string())
    })();
    if let Err(e) = result {
        warn!("could not write value-range dump to {}: {e}", dir.display());
    }
}
