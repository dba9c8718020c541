//! Cases shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikformer::attention::{AttentionVariant, Order, ProductKernel};
use spikformer::autograd::gradcheck::{check_gradients, random_tensor};
use spikformer::autograd::{Graph, RunningStats, Var};
use spikformer::config::ModelConfig;
use spikformer::error::TensorError;
use spikformer::model::{ForwardMode, Spikformer};
use spikformer::neuron::{LifParams, NeuronMode};
use spikformer::tensor::Tensor;
use spikformer::train::loss_and_grads;

pub const EPS: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, seed)
}

/// Random {0,1} tensor with the given density.
pub fn binary_tensor(shape: &[usize], density: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Every differentiable primitive, on small random inputs.
pub fn primitive_cases() -> Vec<GradCase> {
    let lif = LifParams::default();
    let if_mode = LifParams {
        mode: NeuronMode::If,
        ..LifParams::default()
    };
    vec![
        case("matmul", vec![rt(&[5, 7], 1), rt(&[7, 3], 2)], |g, v| g.matmul(v[0], v[1])),
        case("batched_matmul", vec![rt(&[2, 3, 4], 3), rt(&[2, 5, 4], 4)], |g, v| {
            g.batched_matmul(v[0], v[1], false, true)
        }),
        case("batched_matmul_ta", vec![rt(&[2, 4, 3], 5), rt(&[2, 4, 5], 6)], |g, v| {
            g.batched_matmul(v[0], v[1], true, false)
        }),
        case("conv2d", vec![rt(&[2, 3, 5, 4], 7), rt(&[4, 3, 3, 3], 8)], |g, v| g.conv2d(v[0], v[1])),
        case("max_pool2d", vec![rt(&[2, 2, 4, 6], 9)], |g, v| g.max_pool2d(v[0])),
        case("linear", vec![rt(&[2, 3, 4], 10), rt(&[4, 5], 11), rt(&[5], 12)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        case("batch_norm_train", vec![rt(&[6, 3, 4], 13), rt(&[3], 14), rt(&[3], 15)], |g, v| {
            let mut stats = RunningStats::new(3);
            g.batch_norm(v[0], v[1], v[2], 1, &mut stats, true)
        }),
        case("batch_norm_last_axis", vec![rt(&[5, 4], 16), rt(&[4], 17), rt(&[4], 18)], |g, v| {
            let mut stats = RunningStats::new(4);
            g.batch_norm(v[0], v[1], v[2], 1, &mut stats, true)
        }),
        case("batch_norm_eval", vec![rt(&[4, 3], 19), rt(&[3], 20), rt(&[3], 21)], |g, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            g.batch_norm(v[0], v[1], v[2], 1, &mut stats, false)
        }),
        case("softmax_lastdim", vec![rt(&[3, 5], 22)], |g, v| g.softmax_lastdim(v[0])),
        case("cross_entropy", vec![rt(&[4, 6], 23)], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2])),
        case("add_sub_mul", vec![rt(&[3, 4], 24), rt(&[3, 4], 25)], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            g.mul(s, d)
        }),
        case("scale_add_scalar", vec![rt(&[7], 26)], |g, v| {
            let s = g.scale(v[0], -1.7)?;
            g.add_scalar(s, 0.3)
        }),
        case("scale_by", vec![rt(&[2, 3], 27), rt(&[1], 28)], |g, v| g.scale_by(v[0], v[1])),
        case("relu", vec![rt(&[9], 29)], |g, v| g.relu(v[0])),
        case("leaky_relu", vec![rt(&[9], 30)], |g, v| g.leaky_relu(v[0], 0.01)),
        case("sigmoid", vec![rt(&[9], 31)], |g, v| g.sigmoid(v[0])),
        case("reshape_permute", vec![rt(&[2, 3, 4], 32)], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(p, &[4, 6])
        }),
        case("narrow_concat", vec![rt(&[4, 3], 33), rt(&[2, 3], 34)], |g, v| {
            let a = g.narrow0(v[0], 1, 2)?;
            g.concat0(&[a, v[1], a])
        }),
        case("mean_axis", vec![rt(&[2, 3, 4], 35)], |g, v| g.mean_axis(v[0], 1)),
        case("sum_mean_all", vec![rt(&[3, 3], 36)], |g, v| {
            let s = g.sum_all(v[0])?;
            let m = g.mean_all(v[0])?;
            g.mul(s, m)
        }),
        case("split_merge_heads", vec![rt(&[2, 3, 4], 37)], |g, v| {
            let s = g.split_heads(v[0], 2)?;
            let t = g.scale(s, 2.0)?;
            g.merge_heads(t, 2)
        }),
        case(
            "qktv_qk_first",
            vec![rt(&[2, 4, 3], 38), rt(&[2, 4, 3], 39), rt(&[2, 4, 3], 40)],
            |g, v| Ok(g.qktv(v[0], v[1], v[2], Order::QkFirst, ProductKernel::Float)?.0),
        ),
        case(
            "qktv_kv_first",
            vec![rt(&[2, 4, 3], 41), rt(&[2, 4, 3], 42), rt(&[2, 4, 3], 43)],
            |g, v| Ok(g.qktv(v[0], v[1], v[2], Order::KvFirst, ProductKernel::Float)?.0),
        ),
        case(
            "attention_softmax",
            vec![rt(&[2, 4, 3], 44), rt(&[2, 4, 3], 45), rt(&[2, 4, 3], 46)],
            |g, v| g.variant_scores(AttentionVariant::VsaFloatV, v[0], v[1], v[2]),
        ),
        case(
            "attention_leaky",
            vec![rt(&[2, 4, 3], 47), rt(&[2, 4, 3], 48), rt(&[2, 4, 3], 49)],
            |g, v| g.variant_scores(AttentionVariant::LeakyRelu, v[0], v[1], v[2]),
        ),
        case("lif_soft", vec![random_tensor(&[3, 2, 4], -0.5, 3.0, 50)], move |g, v| {
            g.lif_soft(v[0], 3, &lif)
        }),
        case("if_soft", vec![random_tensor(&[4, 5], -0.5, 2.0, 51)], move |g, v| {
            g.lif_soft(v[0], 4, &if_mode)
        }),
    ]
}

/// Worst relative error of each primitive case.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|c| {
            let report = check_gradients(&c.inputs, EPS, |g, v| (c.build)(g, v)).expect(c.name);
            (c.name, report.max_rel_err)
        })
        .collect()
}

/// Small network used wherever a whole model is needed.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        time_steps: 2,
        in_channels: 1,
        image_height: 4,
        image_width: 4,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        sps_pool: vec![false, true],
        ..ModelConfig::default()
    }
}

pub fn random_images(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 0.0, 1.0, seed)
}

pub const SOFT: ForwardMode = ForwardMode {
    train: true,
    soft: true,
    grad: true,
};

fn soft_loss(model: &mut Spikformer<f64>, images: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, images, ForwardMode { grad: false, ..SOFT }, None)
        .expect("forward");
    let loss = g.cross_entropy(out.logits, labels).expect("loss");
    g.value(loss).data()[0]
}

/// Finite-difference check of the smoothed model's parameter gradients.
/// Checks up to `per_tensor` entries of every parameter tensor and returns
/// the worst relative error and the number of entries checked.
pub fn soft_model_check(per_tensor: usize) -> (f64, usize) {
    let mut model = Spikformer::<f64>::new(tiny_config(), 3).expect("config");
    // Larger weights than the initializer gives, so most gradients are far
    // from zero.
    for p in &mut model.store_mut().params {
        if p.decay {
            p.value = p.value.map(|v| v * 25.0);
        }
    }
    let images = random_images(&[2, 1, 4, 4], 4);
    let labels = [0, 2];
    let (_, grads) = loss_and_grads(&mut model, &images, &labels, SOFT).expect("forward");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut checked) = (0.0f64, 0);
    for pi in 0..model.store().params.len() {
        let len = model.store().params[pi].value.len();
        let analytic = grads[pi].as_ref().map(|t| t.data().to_vec()).unwrap_or(vec![0.0; len]);
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for ei in picks {
            let orig = model.store().params[pi].value.data()[ei];
            let mut at = |x: f64| {
                model.store_mut().params[pi].value.data_mut()[ei] = x;
                soft_loss(&mut model, &images, &labels)
            };
            let numeric = (at(orig + EPS) - at(orig - EPS)) / (2.0 * EPS);
            model.store_mut().params[pi].value.data_mut()[ei] = orig;
            let a = analytic[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(spikformer::autograd::gradcheck::REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}
