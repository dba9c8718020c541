//! Datasets: IDX image/label files and a procedurally drawn shape task.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images stored as `u8`-derived floats in `[0, 1]`, `channels × height ×
/// width` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the chosen samples into `[B × C × H × W]` plus their labels.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| F::of(v as f64)));
        }
        let shape = [indices.len(), self.channels, self.height, self.width];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("batch shape"), labels)
    }

    /// Moves the last `count` samples into a second dataset.
    pub fn split_off(&mut self, count: usize) -> Dataset {
        let keep = self.len().saturating_sub(count);
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: self.images.split_off(keep * self.sample_len()),
            labels: self.labels.split_off(keep),
        }
    }

    /// Same samples with classes counted up to `num_classes`.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self, DataError> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelRange {
                label: bad,
                num_classes,
            });
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    /// IDX files. Without a separate test pair, the last sixth of the
    /// training file is held out.
    Idx {
        train: (PathBuf, PathBuf),
        test: Option<(PathBuf, PathBuf)>,
    },
    /// `count` training and `count / 4` test images of `classes` shapes.
    Synth { classes: usize, count: usize, seed: u64 },
}

/// Number of distinct shapes the synthetic generator can draw.
pub const SYNTH_MAX_CLASSES: usize = 10;

const MNIST_NAMES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "test-images-idx3-ubyte",
    "test-labels-idx1-ubyte",
];

impl DataSpec {
    /// Parses `synth:<classes>x<count>[@seed]`, `idx:<dir>`,
    /// `idx:<images>,<labels>` or
    /// `idx:<train images>,<train labels>,<test images>,<test labels>`.
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let bad = |reason: &str| DataError::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        if let Some(rest) = spec.strip_prefix("synth:") {
            let (body, seed) = match rest.split_once('@') {
                Some((b, s)) => (b, s.parse().map_err(|_| bad("seed is not an integer"))?),
                None => (rest, 0),
            };
            let (c, n) = body.split_once('x').ok_or_else(|| bad("expected <classes>x<count>"))?;
            let classes: usize = c.parse().map_err(|_| bad("class count is not an integer"))?;
            let count: usize = n.parse().map_err(|_| bad("sample count is not an integer"))?;
            if !(2..=SYNTH_MAX_CLASSES).contains(&classes) {
                return Err(bad(&format!("class count must lie in 2..={SYNTH_MAX_CLASSES}")));
            }
            if count < classes {
                return Err(bad("need at least one sample per class"));
            }
            return Ok(DataSpec::Synth { classes, count, seed });
        }
        if let Some(rest) = spec.strip_prefix("idx:") {
            let parts: Vec<PathBuf> = rest.split(',').map(PathBuf::from).collect();
            return match parts.as_slice() {
                [dir] => {
                    let p: Vec<PathBuf> = MNIST_NAMES.iter().map(|n| dir.join(n)).collect();
                    Ok(DataSpec::Idx {
                        train: (p[0].clone(), p[1].clone()),
                        test: Some((p[2].clone(), p[3].clone())),
                    })
                }
                [i, l] => Ok(DataSpec::Idx {
                    train: (i.clone(), l.clone()),
                    test: None,
                }),
                [i, l, ti, tl] => Ok(DataSpec::Idx {
                    train: (i.clone(), l.clone()),
                    test: Some((ti.clone(), tl.clone())),
                }),
                _ => Err(bad("expected a directory or 2 or 4 comma-separated paths")),
            };
        }
        Err(bad("expected idx:... or synth:..."))
    }

    /// Loads both splits. Synthetic images are drawn at `channels × height
    /// × width`; IDX data must already have that geometry.
    pub fn load(&self, channels: usize, height: usize, width: usize) -> Result<Splits, DataError> {
        let splits = match self {
            DataSpec::Synth { classes, count, seed } => {
                let shape = SynthShapes {
                    num_classes: *classes,
                    channels,
                    height,
                    width,
                    count: *count,
                    seed: *seed,
                };
                Splits {
                    train: shape.generate(),
                    test: SynthShapes {
                        count: (*count / 4).max(*classes),
                        seed: seed.wrapping_add(0x7e57),
                        ..shape
                    }
                    .generate(),
                }
            }
            DataSpec::Idx { train, test } => {
                let mut tr = load_idx(&train.0, &train.1)?;
                let te = match test {
                    Some((i, l)) => load_idx(i, l)?,
                    None => {
                        let held = tr.len() / 6;
                        tr.split_off(held)
                    }
                };
                let classes = tr.num_classes.max(te.num_classes);
                Splits {
                    train: tr.with_num_classes(classes)?,
                    test: te.with_num_classes(classes)?,
                }
            }
        };
        if splits.train.is_empty() || splits.test.is_empty() {
            return Err(DataError::Empty);
        }
        for d in [&splits.train, &splits.test] {
            if (d.channels, d.height, d.width) != (channels, height, width) {
                return Err(DataError::Image(format!(
                    "samples are {}×{}×{}, the model expects {channels}×{height}×{width}",
                    d.channels, d.height, d.width
                )));
            }
        }
        Ok(splits)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Header dims and payload of one IDX file.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let truncated = |reason: String| DataError::Truncated {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(truncated("missing header".into()));
    }
    let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated("missing dimensions".into()));
    }
    let dims: Vec<usize> = (0..rank).map(|i| word(4 + 4 * i) as usize).collect();
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(truncated(format!("payload has {} bytes, header promises {need}", payload.len())));
    }
    Ok((dims, &payload[..need]))
}

/// Reads an IDX image file (`n × rows × cols` bytes) and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let (idims, pixels) = parse_idx(images, &ib, IDX_IMAGES_MAGIC)?;
    let (ldims, tags) = parse_idx(labels, &lb, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = tags.iter().map(|&t| t as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        channels: 1,
        height: idims[1],
        width: idims[2],
        num_classes,
        images: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels,
    })
}

/// Serializes images and labels as an IDX pair.
pub fn idx_bytes(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [ds.len(), ds.height, ds.width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lbl = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    (img, lbl)
}

/// Generator for a toy task: each class is one stroke pattern drawn at a
/// random offset, length and brightness over a faintly noisy background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthShapes {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
}

impl SynthShapes {
    pub fn generate(&self) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut images = Vec::with_capacity(self.count * self.channels * plane);
        let mut labels = Vec::with_capacity(self.count);
        // labels cycle through the classes, then get shuffled
        let mut order: Vec<usize> = (0..self.count).map(|i| i % self.num_classes).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for &class in &order {
            let mut img = vec![0f32; plane];
            for px in img.iter_mut() {
                *px = rng.random_range(0.0..0.15);
            }
            draw(&mut img, h, w, class, &mut rng);
            for _ in 0..self.channels {
                images.extend_from_slice(&img);
            }
            labels.push(class);
        }
        Dataset {
            channels: self.channels,
            height: h,
            width: w,
            num_classes: self.num_classes,
            images,
            labels,
        }
    }
}

fn draw(img: &mut [f32], h: usize, w: usize, class: usize, rng: &mut ChaCha8Rng) {
    let size = h.min(w) as f64;
    let jitter = (size / 12.0).max(1.0);
    let cy = h as f64 / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = w as f64 / 2.0 + rng.random_range(-jitter..=jitter);
    let r = size * rng.random_range(0.25..0.4);
    let ink = rng.random_range(0.7f32..=1.0);
    let mut line = |y0: f64, x0: f64, y1: f64, x1: f64| {
        let steps = (((y1 - y0).abs().max((x1 - x0).abs())) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (y, x) = ((y0 + f * (y1 - y0)).round(), (x0 + f * (x1 - x0)).round());
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                img[y as usize * w + x as usize] = ink;
            }
        }
    };
    match class {
        // horizontal bar
        0 => line(cy, cx - r, cy, cx + r),
        // vertical bar
        1 => line(cy - r, cx, cy + r, cx),
        // main diagonal
        2 => line(cy - r, cx - r, cy + r, cx + r),
        // anti-diagonal
        3 => line(cy - r, cx + r, cy + r, cx - r),
        // plus
        4 => {
            line(cy, cx - r, cy, cx + r);
            line(cy - r, cx, cy + r, cx);
        }
        // square outline
        5 => {
            line(cy - r, cx - r, cy - r, cx + r);
            line(cy + r, cx - r, cy + r, cx + r);
            line(cy - r, cx - r, cy + r, cx - r);
            line(cy - r, cx + r, cy + r, cx + r);
        }
        // L corner
        6 => {
            line(cy - r, cx - r, cy + r, cx - r);
            line(cy + r, cx - r, cy + r, cx + r);
        }
        // T
        7 => {
            line(cy - r, cx - r, cy - r, cx + r);
            line(cy - r, cx, cy + r, cx);
        }
        // two parallel horizontal bars
        8 => {
            line(cy - r * 0.6, cx - r, cy - r * 0.6, cx + r);
            line(cy + r * 0.6, cx - r, cy + r * 0.6, cx + r);
        }
        // filled disc
        _ => {
            let rr = r * 0.7;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if dy * dy + dx * dx <= rr * rr {
                        img[y * w + x] = ink;
                    }
                }
            }
        }
    }
}

/// Classifies each test image by the closest per-class mean training image.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.sample_len();
    let classes = train.num_classes.max(test.num_classes);
    let mut sums = vec![vec![0f64; n]; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..train.len() {
        let c = train.labels[i];
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(train.image(i)) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut correct = 0;
    for i in 0..test.len() {
        let img = test.image(i);
        let best = (0..classes)
            .filter(|&c| counts[c] > 0)
            .map(|c| {
                let d: f64 = sums[c].iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                (c, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c);
        if best == Some(test.labels[i]) {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}
