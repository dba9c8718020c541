//! Spiking self-attention and the float attention variants it is compared
//! against.
//!
//! Heads are folded into the leading axis: per-head operands have shape
//! `[G, N, d]` with `G = T·B·H`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autograd::{rule, Graph, Var};
use crate::binary::{and_popcount, mask_left, mask_right, BitMatrix};
use crate::error::{ConfigError, TensorError};
use crate::tensor::{gemm, Real, Tensor};

pub const DEFAULT_SCALE: f64 = 0.125;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Which pair is multiplied first in `Q·Kᵀ·V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    QkFirst,
    KvFirst,
}

/// Configured order; `Auto` picks the cheaper one per shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderPolicy {
    Auto,
    Fixed(Order),
}

impl OrderPolicy {
    pub fn resolve(self, n: usize, d: usize) -> Order {
        match self {
            OrderPolicy::Fixed(o) => o,
            OrderPolicy::Auto => cheaper_order(n, d),
        }
    }
}

/// `KvFirst` when `n > d`; ties go to `QkFirst`.
pub fn cheaper_order(n: usize, d: usize) -> Order {
    if n > d {
        Order::KvFirst
    } else {
        Order::QkFirst
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderPolicy::Auto => "auto",
            OrderPolicy::Fixed(Order::QkFirst) => "qk_first",
            OrderPolicy::Fixed(Order::KvFirst) => "kv_first",
        })
    }
}

impl FromStr for OrderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(OrderPolicy::Auto),
            "qk_first" => Ok(OrderPolicy::Fixed(Order::QkFirst)),
            "kv_first" => Ok(OrderPolicy::Fixed(Order::KvFirst)),
            _ => Err(format!("unknown order {s:?} (expected auto, qk_first or kv_first)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Spike Q, K, V; no softmax.
    Ssa,
    /// Softmax over float Q·Kᵀ, applied to spike V.
    VsaSpikeV,
    /// Softmax attention with float Q, K and V.
    VsaFloatV,
    /// Float Q·Kᵀ with no nonlinearity, applied to spike V.
    Identity,
    Relu,
    LeakyRelu,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 6] = [
        AttentionVariant::Ssa,
        AttentionVariant::VsaSpikeV,
        AttentionVariant::VsaFloatV,
        AttentionVariant::Identity,
        AttentionVariant::Relu,
        AttentionVariant::LeakyRelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Ssa => "ssa",
            AttentionVariant::VsaSpikeV => "vsa",
            AttentionVariant::VsaFloatV => "vsa_floatv",
            AttentionVariant::Identity => "i",
            AttentionVariant::Relu => "relu",
            AttentionVariant::LeakyRelu => "leakyrelu",
        }
    }

    /// Whether Q and K pass through spike neurons.
    pub fn spiking_qk(self) -> bool {
        self == AttentionVariant::Ssa
    }

    pub fn spiking_v(self) -> bool {
        self != AttentionVariant::VsaFloatV
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown attention variant {s:?} (expected ssa, vsa, vsa_floatv, i, relu or leakyrelu)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsaConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub scale: f64,
    pub scale_learnable: bool,
    pub order: OrderPolicy,
}

impl SsaConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Self {
        SsaConfig {
            embed_dim,
            num_heads,
            scale: DEFAULT_SCALE,
            scale_learnable: false,
            order: OrderPolicy::Auto,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ConfigError::Inconsistent(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.scale > 0.0) {
            return Err(ConfigError::Value {
                key: "attn_scale".into(),
                reason: format!("must be positive, got {}", self.scale),
            });
        }
        Ok(())
    }
}

/// How the forward product of [`Graph::qktv`] is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProductKernel {
    /// Packed AND/popcount and masked accumulation; operands must be {0,1}.
    Bits,
    /// Dense float products; any operand values.
    Float,
}

/// Accumulates performed by the two stages of one `Q·Kᵀ·V` evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProductCounts {
    pub first: u64,
    pub second: u64,
}

impl ProductCounts {
    pub fn total(&self) -> u64 {
        self.first + self.second
    }
}

/// Integer `Q·Kᵀ·V` for one head of binary operands, plus accumulate counts.
pub fn binary_qktv<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    n: usize,
    d: usize,
    order: Order,
) -> Result<(Vec<u32>, ProductCounts), TensorError> {
    let qb = BitMatrix::from_values(q, n, d)?;
    match order {
        Order::QkFirst => {
            let kb = BitMatrix::from_values(k, n, d)?;
            let vb = BitMatrix::from_values(v, n, d)?;
            let (map, first) = and_popcount(&qb, &kb)?;
            let (out, second) = mask_right(&map, n, &vb)?;
            Ok((out, ProductCounts { first, second }))
        }
        Order::KvFirst => {
            let kt = BitMatrix::from_values_transposed(k, n, d)?;
            let vt = BitMatrix::from_values_transposed(v, n, d)?;
            let (kv, first) = and_popcount(&kt, &vt)?;
            let (out, second) = mask_left(&qb, &kv, d)?;
            Ok((out, ProductCounts { first, second }))
        }
    }
}

/// The `N×N` map `Q·Kᵀ` of one head of binary operands.
pub fn binary_attention_map<F: Real>(q: &[F], k: &[F], n: usize, d: usize) -> Result<Vec<u32>, TensorError> {
    let qb = BitMatrix::from_values(q, n, d)?;
    let kb = BitMatrix::from_values(k, n, d)?;
    Ok(and_popcount(&qb, &kb)?.0)
}

fn float_qktv<F: Real>(q: &[F], k: &[F], v: &[F], n: usize, d: usize, order: Order) -> Vec<F> {
    let mut out = vec![F::zero(); n * d];
    match order {
        Order::QkFirst => {
            let mut map = vec![F::zero(); n * n];
            gemm(n, d, n, q, false, k, true, &mut map, false);
            gemm(n, n, d, &map, false, v, false, &mut out, false);
        }
        Order::KvFirst => {
            let mut kv = vec![F::zero(); d * d];
            gemm(d, n, d, k, true, v, false, &mut kv, false);
            gemm(n, d, d, q, false, &kv, false, &mut out, false);
        }
    }
    out
}

impl<F: Real> Graph<F> {
    /// Unscaled `Q·Kᵀ·V` per group for `q, k, v: [G, N, d]`.
    ///
    /// The gradient is that of the real-valued product.
    pub fn qktv(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        order: Order,
        kernel: ProductKernel,
    ) -> Result<(Var, ProductCounts), TensorError> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() || shape.len() != 3 {
                return Err(TensorError::ShapeMismatch {
                    op: "qktv",
                    lhs: shape,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (groups, n, d) = (shape[0], shape[1], shape[2]);
        let step = n * d;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let per_group: Vec<Result<(Vec<F>, ProductCounts), TensorError>> = (0..groups)
            .into_par_iter()
            .map(|gi| {
                let r = gi * step..(gi + 1) * step;
                match kernel {
                    ProductKernel::Bits => {
                        let (out, counts) =
                            binary_qktv(&qv[r.clone()], &kv[r.clone()], &vv[r], n, d, order)?;
                        Ok((out.iter().map(|&c| F::of(c as f64)).collect(), counts))
                    }
                    ProductKernel::Float => Ok((
                        float_qktv(&qv[r.clone()], &kv[r.clone()], &vv[r], n, d, order),
                        ProductCounts::default(),
                    )),
                }
            })
            .collect();
        let mut data = Vec::with_capacity(groups * step);
        let mut counts = ProductCounts::default();
        for r in per_group {
            let (out, c) = r?;
            data.extend_from_slice(&out);
            counts.first += c.first;
            counts.second += c.second;
        }
        let value = Tensor::new(&shape, data)?;
        let var = self.push(
            value,
            rule(vec![q, k, v], move |ctx, g: &[F]| {
                let (qv, kv, vv) = (ctx.value(q).data(), ctx.value(k).data(), ctx.value(v).data());
                let (nq, nk, nv) = (ctx.needs_grad(q), ctx.needs_grad(k), ctx.needs_grad(v));
                let parts: Vec<[Option<Vec<F>>; 3]> = (0..groups)
                    .into_par_iter()
                    .map(|gi| {
                        let r = gi * step..(gi + 1) * step;
                        let (qg, kg, vg, gg) = (&qv[r.clone()], &kv[r.clone()], &vv[r.clone()], &g[r]);
                        let mut small = vec![F::zero(); d * d];
                        // dQ = G · (KᵀV)ᵀ
                        let dq = nq.then(|| {
                            gemm(d, n, d, kg, true, vg, false, &mut small, false);
                            let mut o = vec![F::zero(); step];
                            gemm(n, d, d, gg, false, &small, true, &mut o, false);
                            o
                        });
                        // dK = V · (GᵀQ)
                        let dk = nk.then(|| {
                            gemm(d, n, d, gg, true, qg, false, &mut small, false);
                            let mut o = vec![F::zero(); step];
                            gemm(n, d, d, vg, false, &small, false, &mut o, false);
                            o
                        });
                        // dV = K · (QᵀG)
                        let dv = nv.then(|| {
                            gemm(d, n, d, qg, true, gg, false, &mut small, false);
                            let mut o = vec![F::zero(); step];
                            gemm(n, d, d, kg, false, &small, false, &mut o, false);
                            o
                        });
                        [dq, dk, dv]
                    })
                    .collect();
                let mut out: [Option<Vec<F>>; 3] = [
                    nq.then(|| Vec::with_capacity(groups * step)),
                    nk.then(|| Vec::with_capacity(groups * step)),
                    nv.then(|| Vec::with_capacity(groups * step)),
                ];
                for part in parts {
                    for (acc, p) in out.iter_mut().zip(part) {
                        if let (Some(acc), Some(p)) = (acc.as_mut(), p) {
                            acc.extend_from_slice(&p);
                        }
                    }
                }
                out.into_iter().collect()
            }),
        );
        Ok((var, counts))
    }

    /// `[TB, N, H·d] → [TB·H, N, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(TensorError::invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
        }
        let d = s[2] / heads;
        let r = self.reshape(x, &[s[0], s[1], heads, d])?;
        let p = self.permute(r, &[0, 2, 1, 3])?;
        self.reshape(p, &[s[0] * heads, s[1], d])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(TensorError::invalid("merge_heads", format!("cannot merge {s:?} over {heads} heads")));
        }
        let r = self.reshape(x, &[s[0] / heads, heads, s[1], s[2]])?;
        let p = self.permute(r, &[0, 2, 1, 3])?;
        self.reshape(p, &[s[0] / heads, s[1], heads * s[2]])
    }

    /// Pre-neuron attention output of a float variant, per group.
    ///
    /// `q, k` are the real-valued projections and `v` is spike or float
    /// values depending on the variant. The softmax variants scale scores by
    /// `1/sqrt(d)`; the others are returned unscaled. SSA itself goes
    /// through [`Graph::qktv`].
    pub fn variant_scores(
        &mut self,
        variant: AttentionVariant,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var, TensorError> {
        let d = self.shape(q).get(2).copied().unwrap_or(1);
        match variant {
            AttentionVariant::Ssa => Err(TensorError::invalid(
                "variant_scores",
                "the spiking variant is evaluated by qktv",
            )),
            AttentionVariant::VsaSpikeV | AttentionVariant::VsaFloatV => {
                let scores = self.batched_matmul(q, k, false, true)?;
                let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
                let attn = self.softmax_lastdim(scaled)?;
                self.batched_matmul(attn, v, false, false)
            }
            AttentionVariant::Identity | AttentionVariant::Relu | AttentionVariant::LeakyRelu => {
                let (q, k) = match variant {
                    AttentionVariant::Relu => (self.relu(q)?, self.relu(k)?),
                    AttentionVariant::LeakyRelu => (self.leaky_relu(q, LEAKY_SLOPE)?, self.leaky_relu(k, LEAKY_SLOPE)?),
                    _ => (q, k),
                };
                let map = self.batched_matmul(q, k, false, true)?;
                self.batched_matmul(map, v, false, false)
            }
        }
    }
}

/// Dense and spike-driven cost of one multi-head attention product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionCost {
    /// Dense multiply-accumulates per time step, computing `Q·Kᵀ` first.
    pub qk_first_macs: u64,
    /// Dense multiply-accumulates per time step, computing `Kᵀ·V` first.
    pub kv_first_macs: u64,
    pub order: Order,
    /// Expected accumulates over all time steps in the chosen order, given
    /// the operand firing rates.
    pub expected_sops: u64,
}

impl AttentionCost {
    /// Dense cost of the chosen order counted as operations, two per MAC.
    pub fn chosen_flops(&self) -> u64 {
        2 * self.chosen_macs()
    }

    pub fn chosen_macs(&self) -> u64 {
        match self.order {
            Order::QkFirst => self.qk_first_macs,
            Order::KvFirst => self.kv_first_macs,
        }
    }
}

/// Firing rates of the three attention operands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QkvRates {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

/// Theoretical cost of `Q·Kᵀ·V` over `heads` heads of width `d` on `n`
/// tokens, for `steps` time steps.
pub fn attention_cost(cfg: &SsaConfig, n: usize, rates: QkvRates, steps: usize) -> AttentionCost {
    let (h, d, n64) = (cfg.num_heads as u64, cfg.head_dim() as u64, n as u64);
    let qk = 2 * n64 * n64 * d * h;
    let kv = 2 * n64 * d * d * h;
    let order = cfg.order.resolve(n, cfg.head_dim());
    let stage = match order {
        Order::QkFirst => n64 * n64 * d * h,
        Order::KvFirst => n64 * d * d * h,
    } as f64;
    let (r1, r2) = match order {
        Order::QkFirst => (rates.q, rates.v),
        Order::KvFirst => (rates.k, rates.q),
    };
    let t = steps as f64;
    let expected = (r1 * t * stage).floor() + (r2 * t * stage).floor();
    AttentionCost {
        qk_first_macs: qk,
        kv_first_macs: kv,
        order,
        expected_sops: expected as u64,
    }
}
