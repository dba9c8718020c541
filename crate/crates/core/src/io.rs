//! Atomic file output and small text/image writers.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::profiler::Probe;

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it
/// over `path`, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Writes `ranges.csv` and one `hist_<layer>.csv` per recorded value range
/// into `dir`, creating it if needed.
pub fn write_value_ranges(dir: &Path, probe: &Probe) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    atomic_write(&dir.join("ranges.csv"), probe.value_ranges_csv().as_bytes())?;
    for r in probe.ranges.iter().filter(|r| r.bounds.is_some()) {
        let file = format!("hist_{}.csv", r.name.replace(['/', '\\'], "_"));
        atomic_write(&dir.join(file), r.histogram_csv().as_bytes())?;
    }
    Ok(())
}

/// Binary 8-bit greymap (`P5`). Values are scaled linearly from
/// `min(0, lowest)` to the highest value, so zero is always black.
pub fn pgm_bytes(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm: size mismatch");
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(lo, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Row-major matrix as comma-separated lines.
pub fn matrix_csv(values: &[f64], cols: usize) -> String {
    let mut s = String::with_capacity(values.len() * 4);
    for row in values.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// A decoded `P5` (grey) or `P6` (colour) image: `channels × height × width`
/// floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported image type {other:?} (expected P5 or P6)")),
    };
    let mut num = |what: &str| -> Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what} in header"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let n = channels * width * height;
    if raster.len() < n {
        return Err(format!("raster has {} bytes, expected {n}", raster.len()));
    }
    let mut data = vec![0f32; n];
    // interleaved RGB to planar
    for (i, &b) in raster[..n].iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * width * height + pixel] = b as f32 / maxval as f32;
    }
    Ok(Pnm {
        channels,
        height,
        width,
        data,
    })
}
