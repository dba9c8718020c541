use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikformer::config::ModelConfig;
use spikformer::model::Spikformer;
use spikformer::tensor::Tensor;

// small enough to train in seconds
const TOY_MODEL: &str = "\
time_steps=2
embed_dim=32
num_blocks=1
num_heads=2
num_classes=4
";

const TOY_TRAIN: &str = "\
epochs=2
batch_size=16
base_lr=0.002
seed=3
wall_clock=false
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spikformer"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cli")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.split_whitespace()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text:?}"))
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.cfg"), format!("{TOY_MODEL}{TOY_TRAIN}")).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("toy.cfg")
    }

    /// Trains the toy model once and returns the run directory.
    fn trained(&self) -> PathBuf {
        let out = self.path("run");
        if !out.join("best.ckpt").exists() {
            let o = run(&["train", "--config", s(&self.config()), "--data", "synth:4x256", "--out", s(&out)]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        out
    }

    /// A checkpoint of the toy geometry with every weight zero.
    fn zero_checkpoint(&self) -> PathBuf {
        let mut model = Spikformer::<f32>::new(ModelConfig::parse(TOY_MODEL).unwrap(), 0).unwrap();
        for p in &mut model.store_mut().params {
            if p.name.ends_with(".weight") && !p.name.contains(".bn.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let path = self.path("zero.ckpt");
        model.to_checkpoint().save(&path).unwrap();
        path
    }

    fn image(&self, w: usize, h: usize) -> PathBuf {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend((0..w * h).map(|i| ((i * 37) % 256) as u8));
        let path = self.path(&format!("img{w}x{h}.pgm"));
        fs::write(&path, bytes).unwrap();
        path
    }
}

fn pgm_pixels(bytes: &[u8]) -> (usize, usize, &[u8]) {
    // the header is the first three newline-terminated lines
    let end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map_or(bytes.len(), |(i, _)| i);
    let text = std::str::from_utf8(&bytes[..end]).unwrap();
    let mut fields = text.split_ascii_whitespace();
    assert_eq!(fields.next(), Some("P5"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    let header = format!("P5\n{w} {h}\n255\n").len();
    (w, h, &bytes[header..])
}

#[test]
fn train_writes_metrics_checkpoints_and_config() {
    let fx = Fixture::new();
    let out = fx.trained();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
    assert!(out.join("last.ckpt").exists());
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("embed_dim=32") && echo.contains("seed=3"));
}

#[test]
fn train_is_reproducible() {
    let fx = Fixture::new();
    let go = |name: &str| {
        let out = fx.path(name);
        let o = run(&["train", "--config", s(&fx.config()), "--data", "synth:3x48", "--out", s(&out), "--seed", "11"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(go("a"), go("b"));
}

#[test]
fn eval_prints_accuracy_for_each_split() {
    let fx = Fixture::new();
    let ck = fx.trained().join("best.ckpt");
    let o = run(&["eval", "--checkpoint", s(&ck), "--data", "synth:4x256"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let acc = value(&text, "accuracy");
    assert!((0.0..=1.0).contains(&acc));

    let o = run(&["eval", "--checkpoint", s(&ck), "--data", "synth:4x256", "--split", "both"]);
    let text = stdout(&o);
    let train = value(&text, "train_accuracy");
    assert_eq!(value(&text, "accuracy"), acc);
    assert!((0.0..=1.0).contains(&train));

    // evaluating the same checkpoint twice gives the same number
    let again = run(&["eval", "--checkpoint", s(&ck), "--data", "synth:4x256"]);
    assert_eq!(stdout(&again), stdout(&run(&["eval", "--checkpoint", s(&ck), "--data", "synth:4x256"])));
}

#[test]
fn profile_totals_add_up() {
    let fx = Fixture::new();
    let ck = fx.trained().join("best.ckpt");
    let out = fx.path("prof");
    let o = run(&["profile", "--checkpoint", s(&ck), "--data", "synth:4x256", "--out", s(&out), "--limit", "32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value(&text, "samples"), 32.0);
    let (snn, ann) = (value(&text, "snn_energy_pj"), value(&text, "ann_energy_pj"));
    assert!(0.0 < snn && snn < ann, "{snn} vs {ann}");
    assert_eq!(value(&text, "attention_sops_estimated"), value(&text, "attention_sops_counted"));

    let csv = fs::read_to_string(out.join("energy.csv")).unwrap();
    // sum picojoule columns exactly in femtojoules
    let fj: u128 = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().replace('.', "").parse::<u128>().unwrap())
        .sum();
    let printed = text.lines().find_map(|l| l.strip_prefix("snn_energy_pj=")).unwrap();
    assert_eq!(fj, printed.replace('.', "").parse::<u128>().unwrap());
    assert!(fs::read_to_string(out.join("firing_rates.csv")).unwrap().lines().count() > 5);
    assert!(fs::read_dir(out.join("value_ranges")).unwrap().count() > 0);
}

#[test]
fn zero_weight_profile_has_no_operations_after_the_stem() {
    let fx = Fixture::new();
    let ck = fx.zero_checkpoint();
    let out = fx.path("prof0");
    let o = run(&["profile", "--checkpoint", s(&ck), "--data", "synth:4x64", "--out", s(&out), "--limit", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("energy.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0].starts_with("rpe.") || cols[0].starts_with("block.") {
            assert_eq!(cols[3], "0", "{line}");
            rows += 1;
        }
    }
    assert!(rows > 0);
}

#[test]
fn export_writes_square_map_and_non_negative_values() {
    let fx = Fixture::new();
    let ck = fx.trained().join("best.ckpt");
    let img = fx.image(16, 16);
    let out = fx.path("attn");
    let o = run(&[
        "export-attn", "--checkpoint", s(&ck), "--input", s(&img), "--block", "0", "--head", "1", "--t", "1", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let n = value(&stdout(&o), "tokens") as usize;
    assert_eq!(n, 16);
    let bytes = fs::read(out.join("attn_map.pgm")).unwrap();
    let (w, h, px) = pgm_pixels(&bytes);
    assert_eq!((w, h, px.len()), (n, n, n * n));
    for name in ["attn_map.csv", "attn_out.csv"] {
        let csv = fs::read_to_string(out.join(name)).unwrap();
        for v in csv.lines().flat_map(|l| l.split(',')) {
            assert!(v.parse::<f64>().unwrap() >= 0.0, "{name}: {v}");
        }
    }
    assert_eq!(fs::read_to_string(out.join("attn_map.csv")).unwrap().lines().count(), n);
}

#[test]
fn zero_weight_export_is_black() {
    let fx = Fixture::new();
    let ck = fx.zero_checkpoint();
    let img = fx.image(16, 16);
    let out = fx.path("attn0");
    let o = run(&[
        "export-attn", "--checkpoint", s(&ck), "--input", s(&img), "--block", "0", "--head", "0", "--t", "0", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = fs::read(out.join("attn_map.pgm")).unwrap();
    let (_, _, px) = pgm_pixels(&bytes);
    assert!(px.iter().all(|&p| p == 0));
}

fn export_args<'a>(ck: &'a str, input: &'a str, [block, head, t]: [&'a str; 3], out: &'a str) -> Vec<&'a str> {
    vec!["export-attn", "--checkpoint", ck, "--input", input, "--block", block, "--head", head, "--t", t, "--out", out]
}

#[test]
fn exit_code_matrix() {
    let fx = Fixture::new();
    let cfg = fx.config();
    let out = fx.path("x");
    let good_ck = fx.zero_checkpoint();

    let bad_cfg = fx.path("bad.cfg");
    fs::write(&bad_cfg, "embed_dim=32\nwarp_factor=9\n").unwrap();
    let corrupt = fx.path("corrupt.ckpt");
    let mut bytes = fs::read(&good_ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&corrupt, bytes).unwrap();
    let empty = fx.path("empty");
    fs::create_dir(&empty).unwrap();
    let (ei, el) = (empty.join("i"), empty.join("l"));
    fs::write(&ei, [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 16, 0, 0, 0, 16]).unwrap();
    fs::write(&el, [0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let empty_spec = format!("idx:{},{}", s(&ei), s(&el));
    let img = fx.image(16, 16);
    let wrong_img = fx.image(8, 8);

    let (cfg, bad_cfg, out, good_ck, corrupt) = (s(&cfg), s(&bad_cfg), s(&out), s(&good_ck), s(&corrupt));
    let (img, wrong_img) = (s(&img), s(&wrong_img));
    let missing_ck = fx.path("none.ckpt");
    let export = |block, head, t, input| export_args(good_ck, input, [block, head, t], out);
    let cases: Vec<(&str, Vec<&str>, i32, &str)> = vec![
        ("missing --out", vec!["train", "--config", cfg, "--data", "synth:4x16"], 2, ""),
        ("no command", vec![], 2, ""),
        ("bad config key", vec!["train", "--config", bad_cfg, "--data", "synth:4x16", "--out", out], 2, "warp_factor=9"),
        ("bad data spec", vec!["train", "--config", cfg, "--data", "csv:x", "--out", out], 2, ""),
        ("unreadable data", vec!["train", "--config", cfg, "--data", "idx:/nonexistent/i,/nonexistent/l", "--out", out], 3, "/nonexistent"),
        ("corrupted checkpoint", vec!["eval", "--checkpoint", corrupt, "--data", "synth:4x16"], 4, "truncated"),
        ("missing checkpoint", vec!["eval", "--checkpoint", s(&missing_ck), "--data", "synth:4x16"], 4, ""),
        ("class mismatch", vec!["eval", "--checkpoint", good_ck, "--data", "synth:3x16"], 4, ""),
        ("empty data", vec!["profile", "--checkpoint", good_ck, "--data", &empty_spec, "--out", out], 3, ""),
        ("unknown variant", vec!["ablate", "--variant", "softmax2", "--config", cfg, "--data", "synth:4x16", "--out", out], 2, "softmax2"),
        ("block out of range", export("1", "0", "0", img), 2, "block"),
        ("head out of range", export("0", "2", "0", img), 2, "head"),
        ("step out of range", export("0", "0", "2", img), 2, ""),
        ("image geometry", export("0", "0", "0", wrong_img), 3, ""),
    ];
    for (what, args, want, needle) in cases {
        let o = bin().args(&args).output().unwrap();
        assert_eq!(code(&o), want, "{what}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{what}: {}", stderr(&o));
    }

    let o = bin().env("SPIKEFORMER_THREADS", "zero").args(["eval", "--checkpoint", good_ck, "--data", "synth:4x16"]).output().unwrap();
    assert_eq!(code(&o), 2);
}
