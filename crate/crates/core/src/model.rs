//! The full network: convolutional spiking stem, convolutional position
//! embedding, encoder blocks with spiking attention, and a linear head.
//!
//! Activations inside the network are laid out `[T·B, …]` with time
//! outermost. The input image is repeated over the `T` steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionVariant, ProductKernel};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ConfigError, TensorError};
use crate::neuron::LifParams;
use crate::params::{BnIds, BnStats, ParamStore};
use crate::profiler::{count_macs, AttentionCapture, LayerKind, LayerShape, Probe};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics in batch norm (and running-stat updates).
    pub train: bool,
    /// Smooth sigmoid neurons instead of spikes.
    pub soft: bool,
    /// Parameters are recorded as differentiable leaves.
    pub grad: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        train: true,
        soft: false,
        grad: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        soft: false,
        grad: false,
    };
}

pub struct Forward {
    pub logits: Var,
    /// Graph leaf of every parameter, in store order.
    pub params: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    w: usize,
    bn: BnIds,
}

#[derive(Clone, Copy, Debug)]
struct LinearBn {
    w: usize,
    bn: BnIds,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    q: LinearBn,
    k: LinearBn,
    v: LinearBn,
    proj: LinearBn,
    mlp1: LinearBn,
    mlp2: LinearBn,
    scale: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Spikformer<F: Real> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    sps: Vec<ConvBn>,
    rpe: ConvBn,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

impl<F: Real> Spikformer<F> {
    /// Builds a freshly initialized model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;

        let mut sps = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, out_ch) in cfg.sps_channels().into_iter().enumerate() {
            let w = store.add_trunc_normal(format!("sps.{i}.conv.weight"), &[out_ch, in_ch, 3, 3], &mut rng);
            let bn = store.add_bn(&format!("sps.{i}.bn"), out_ch);
            sps.push(ConvBn { w, bn });
            in_ch = out_ch;
        }
        let w = store.add_trunc_normal("rpe.conv.weight", &[d, d, 3, 3], &mut rng);
        let rpe = ConvBn {
            w,
            bn: store.add_bn("rpe.bn", d),
        };

        let mut blocks = Vec::new();
        for l in 0..cfg.num_blocks {
            let mut lin = |name: &str, din: usize, dout: usize, store: &mut ParamStore<F>| {
                let w = store.add_trunc_normal(format!("block.{l}.{name}.weight"), &[din, dout], &mut rng);
                LinearBn {
                    w,
                    bn: store.add_bn(&format!("block.{l}.{name}.bn"), dout),
                }
            };
            let q = lin("q", d, d, &mut store);
            let k = lin("k", d, d, &mut store);
            let v = lin("v", d, d, &mut store);
            let proj = lin("proj", d, d, &mut store);
            let hidden = d * cfg.mlp_ratio;
            let mlp1 = lin("mlp1", d, hidden, &mut store);
            let mlp2 = lin("mlp2", hidden, d, &mut store);
            let scale = cfg.attn_scale_learnable.then(|| {
                store.add(
                    format!("block.{l}.attn.scale"),
                    Tensor::from_f64(&[1], &[cfg.attn_scale]).expect("scalar"),
                    false,
                )
            });
            blocks.push(Block {
                q,
                k,
                v,
                proj,
                mlp1,
                mlp2,
                scale,
            });
        }
        let head_w = store.add_trunc_normal("head.weight", &[d, cfg.num_classes], &mut rng);
        let head_b = store.add("head.bias", Tensor::zeros(&[cfg.num_classes]), false);
        Ok(Spikformer {
            cfg,
            store,
            sps,
            rpe,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Runs the network on `images[B×C×H×W]`, recording onto `g`.
    pub fn forward(
        &mut self,
        g: &mut Graph<F>,
        images: &Tensor<F>,
        mode: ForwardMode,
        probe: Option<&mut Probe>,
    ) -> Result<Forward, TensorError> {
        let cfg = &self.cfg;
        let s = images.shape();
        let expected = [cfg.in_channels, cfg.image_height, cfg.image_width];
        if s.len() != 4 || s[1..] != expected {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let batch = s[0];
        let steps = cfg.time_steps;
        let params: Vec<Var> = self
            .store
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), mode.grad))
            .collect();
        let mut cx = Ctx {
            g,
            vars: &params,
            bn: &mut self.store.bn,
            mode,
            steps,
            batch,
            neuron: cfg.neuron,
            probe,
        };
        if let Some(p) = cx.probe.as_deref_mut() {
            p.samples += batch;
            p.steps = steps;
        }

        // The image is static, so the first conv and its normalization give
        // the same result at every step; they run once and are then repeated
        // over time.
        let mut x = cx.g.input(images.clone());
        let (mut h, mut w) = (cfg.image_height, cfg.image_width);
        for (i, (blk, &pool)) in self.sps.iter().zip(&cfg.sps_pool).enumerate() {
            let kind = if i == 0 { LayerKind::InputConv } else { LayerKind::Conv };
            let mut y = cx.conv_bn(x, *blk, &format!("sps.{i}"), kind, h, w)?;
            if i == 0 {
                y = cx.g.concat0(&vec![y; steps])?;
            }
            let y = cx.neuron(y, cfg.neuron, &format!("sps.{i}.sn"))?;
            x = if pool {
                h /= 2;
                w /= 2;
                cx.g.max_pool2d(y)?
            } else {
                y
            };
        }
        let r = cx.conv_bn(x, self.rpe, "rpe", LayerKind::Conv, h, w)?;
        let r = cx.neuron(r, cfg.neuron, "rpe.sn")?;
        let x0 = cx.g.add(x, r)?;

        let (d, n) = (cfg.embed_dim, h * w);
        let flat = cx.g.reshape(x0, &[steps * batch, d, n])?;
        let mut x = cx.g.permute(flat, &[0, 2, 1])?;
        for (l, blk) in self.blocks.iter().enumerate() {
            x = cx.encoder_block(cfg, l, blk, x, n)?;
        }

        let gap = cx.g.mean_axis(x, 1)?;
        let per_step = cx.g.reshape(gap, &[steps, batch, d])?;
        let feat = cx.g.mean_axis(per_step, 0)?;
        if let Some(p) = cx.probe.as_deref_mut() {
            let macs = count_macs(LayerShape::Linear {
                tokens: batch,
                d_in: d,
                d_out: cfg.num_classes,
            });
            p.record_layer("head", LayerKind::Head, macs, cx.g.value(gap).data(), None);
        }
        let logits = cx.g.linear(feat, params[self.head_w], Some(params[self.head_b]))?;
        Ok(Forward { logits, params })
    }

    /// Eval-mode logits `[B × classes]`, without a gradient tape.
    pub fn predict(&mut self, images: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, ForwardMode::EVAL, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode forward that records into `probe`.
    pub fn probe(&mut self, images: &Tensor<F>, probe: &mut Probe) -> Result<Tensor<F>, TensorError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, ForwardMode::EVAL, Some(probe))?;
        Ok(g.value(out.logits).clone())
    }
}

/// Repeats a static input over `steps` along a new leading time axis.
pub fn replicate_static_input<F: Real>(input: &Tensor<F>, steps: usize) -> Result<Tensor<F>, TensorError> {
    if steps == 0 {
        return Err(TensorError::Empty {
            op: "replicate_static_input",
        });
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(input.shape());
    Tensor::new(&shape, input.data().repeat(steps))
}

struct Ctx<'a, F: Real> {
    g: &'a mut Graph<F>,
    vars: &'a [Var],
    bn: &'a mut [BnStats<F>],
    mode: ForwardMode,
    steps: usize,
    batch: usize,
    neuron: LifParams,
    probe: Option<&'a mut Probe>,
}

impl<F: Real> Ctx<'_, F> {
    fn neuron(&mut self, x: Var, params: LifParams, name: &str) -> Result<Var, TensorError> {
        let y = if self.mode.soft {
            self.g.lif_soft(x, self.steps, &params)?
        } else {
            self.g.lif(x, self.steps, &params)?
        };
        if let Some(p) = self.probe.as_deref_mut() {
            p.record_neuron(name, self.g.value(y).data());
        }
        Ok(y)
    }

    fn batch_norm(&mut self, x: Var, ids: BnIds, axis: usize) -> Result<Var, TensorError> {
        let (gamma, beta) = (self.vars[ids.gamma], self.vars[ids.beta]);
        self.g
            .batch_norm(x, gamma, beta, axis, &mut self.bn[ids.stats].stats, self.mode.train)
    }

    fn conv_bn(&mut self, x: Var, blk: ConvBn, name: &str, kind: LayerKind, h: usize, w: usize) -> Result<Var, TensorError> {
        let wv = self.vars[blk.w];
        let ws = self.g.shape(wv).to_vec();
        if let Some(p) = self.probe.as_deref_mut() {
            let macs = count_macs(LayerShape::Conv3x3 {
                in_ch: ws[1],
                out_ch: ws[0],
                height: h,
                width: w,
            }) * self.batch as u64;
            p.record_layer(&format!("{name}.conv"), kind, macs, self.g.value(x).data(), None);
        }
        let y = self.g.conv2d(x, wv)?;
        self.batch_norm(y, blk.bn, 1)
    }

    fn linear_bn(&mut self, x: Var, blk: LinearBn, name: &str) -> Result<Var, TensorError> {
        let wv = self.vars[blk.w];
        if let Some(p) = self.probe.as_deref_mut() {
            let ws = self.g.shape(wv);
            let tokens = self.g.shape(x)[1];
            let macs = count_macs(LayerShape::Linear {
                tokens,
                d_in: ws[0],
                d_out: ws[1],
            }) * self.batch as u64;
            p.record_layer(&format!("{name}.linear"), LayerKind::Linear, macs, self.g.value(x).data(), None);
        }
        let y = self.g.linear(x, wv, None)?;
        let axis = self.g.shape(y).len() - 1;
        self.batch_norm(y, blk.bn, axis)
    }

    fn linear_bn_sn(&mut self, x: Var, blk: LinearBn, name: &str) -> Result<Var, TensorError> {
        let y = self.linear_bn(x, blk, name)?;
        self.neuron(y, self.neuron, &format!("{name}.sn"))
    }

    fn encoder_block(&mut self, cfg: &ModelConfig, l: usize, blk: &Block, x: Var, n: usize) -> Result<Var, TensorError> {
        let heads = cfg.num_heads;
        let d = cfg.head_dim();
        let variant = cfg.attention;
        let p = format!("block.{l}");
        let q_f = self.linear_bn(x, blk.q, &format!("{p}.q"))?;
        let k_f = self.linear_bn(x, blk.k, &format!("{p}.k"))?;
        let v_f = self.linear_bn(x, blk.v, &format!("{p}.v"))?;
        let v = if variant.spiking_v() {
            self.neuron(v_f, self.neuron, &format!("{p}.v.sn"))?
        } else {
            v_f
        };
        let (q, k) = if variant.spiking_qk() {
            (
                self.neuron(q_f, self.neuron, &format!("{p}.q.sn"))?,
                self.neuron(k_f, self.neuron, &format!("{p}.k.sn"))?,
            )
        } else {
            (q_f, k_f)
        };
        let qh = self.g.split_heads(q, heads)?;
        let kh = self.g.split_heads(k, heads)?;
        let vh = self.g.split_heads(v, heads)?;
        let attn_name = format!("{p}.attn");
        let pre = if variant == AttentionVariant::Ssa {
            let order = cfg.attn_order.resolve(n, d);
            let kernel = if self.mode.soft {
                ProductKernel::Float
            } else {
                ProductKernel::Bits
            };
            let (prod, counts) = self.g.qktv(qh, kh, vh, order, kernel)?;
            if let Some(pr) = self.probe.as_deref_mut() {
                let macs = count_macs(LayerShape::Attention {
                    tokens: n,
                    head_dim: d,
                    heads,
                    order,
                }) * self.batch as u64;
                let ann = count_macs(LayerShape::Attention {
                    tokens: n,
                    head_dim: d,
                    heads,
                    order: crate::attention::Order::QkFirst,
                }) * self.batch as u64;
                let (first, second) = match order {
                    crate::attention::Order::QkFirst => (qh, vh),
                    crate::attention::Order::KvFirst => (kh, qh),
                };
                let stages = [self.g.value(first).data(), self.g.value(second).data()];
                pr.record_attention(&attn_name, LayerKind::Attention, macs, ann, stages, Some(counts));
            }
            self.scale(prod, blk, cfg.attn_scale)?
        } else {
            let raw = self.g.variant_scores(variant, qh, kh, vh)?;
            if let Some(pr) = self.probe.as_deref_mut() {
                let macs = count_macs(LayerShape::Attention {
                    tokens: n,
                    head_dim: d,
                    heads,
                    order: crate::attention::Order::QkFirst,
                }) * self.batch as u64;
                let stages = [self.g.value(qh).data(), self.g.value(vh).data()];
                pr.record_attention(&attn_name, LayerKind::FloatAttention, macs, macs, stages, None);
            }
            match variant {
                AttentionVariant::VsaSpikeV | AttentionVariant::VsaFloatV => raw,
                _ => self.scale(raw, blk, cfg.attn_scale)?,
            }
        };
        if let Some(pr) = self.probe.as_deref_mut() {
            pr.record_values(&attn_name, self.g.value(pre).data());
            if pr.capture_attention {
                let to32 = |t: &Tensor<F>| t.data().iter().map(|v| v.as_f64() as f32).collect();
                pr.captures.push(AttentionCapture {
                    block: l,
                    q: to32(self.g.value(qh)),
                    k: to32(self.g.value(kh)),
                    output: to32(self.g.value(pre)),
                    groups: self.g.shape(pre)[0],
                    tokens: n,
                    head_dim: d,
                });
            }
        }
        let a = self.neuron(pre, cfg.attn_neuron(), &format!("{attn_name}.sn"))?;
        let a = self.g.merge_heads(a, heads)?;
        let proj = self.linear_bn_sn(a, blk.proj, &format!("{p}.proj"))?;
        let x1 = self.g.add(x, proj)?;
        let m1 = self.linear_bn_sn(x1, blk.mlp1, &format!("{p}.mlp1"))?;
        let m2 = self.linear_bn_sn(m1, blk.mlp2, &format!("{p}.mlp2"))?;
        self.g.add(x1, m2)
    }

    fn scale(&mut self, x: Var, blk: &Block, fixed: f64) -> Result<Var, TensorError> {
        match blk.scale {
            Some(i) => self.g.scale_by(x, self.vars[i]),
            None => self.g.scale(x, fixed),
        }
    }
}
