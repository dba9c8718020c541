//! Firing-rate probes, operation counts and the energy model.
//!
//! A [`Probe`] is handed to the model's forward pass and accumulates, per
//! named layer, the dense cost and the input spike counts it observes. An
//! [`EnergyReport`] turns those counts into synaptic operations and energy.

use std::fmt::Write as _;

use crate::attention::{Order, ProductCounts};
use crate::error::ProfileError;
use crate::tensor::Real;

/// Energy of one multiply-accumulate, in femtojoules (4.6 pJ).
pub const E_MAC_FJ: u64 = 4600;
/// Energy of one accumulate, in femtojoules (0.9 pJ).
pub const E_AC_FJ: u64 = 900;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution on the real-valued input image.
    InputConv,
    Conv,
    Linear,
    /// Spike-driven attention product.
    Attention,
    /// Attention product on real-valued operands.
    FloatAttention,
    /// Classifier on time-averaged features.
    Head,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::InputConv => "input_conv",
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::Attention => "attention",
            LayerKind::FloatAttention => "float_attention",
            LayerKind::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ProfileError> {
        [
            LayerKind::InputConv,
            LayerKind::Conv,
            LayerKind::Linear,
            LayerKind::Attention,
            LayerKind::FloatAttention,
            LayerKind::Head,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| ProfileError::UnknownKind(s.to_string()))
    }

    /// Whether the layer is billed per multiply-accumulate rather than per
    /// spike-driven accumulate.
    pub fn dense(self) -> bool {
        matches!(self, LayerKind::InputConv | LayerKind::FloatAttention | LayerKind::Head)
    }

    /// How many of the `steps` time steps a dense layer is billed for. The
    /// input conv sees the same static image every step and the head sees
    /// time-averaged features, so each runs once.
    pub fn dense_steps(self, steps: usize) -> usize {
        match self {
            LayerKind::InputConv | LayerKind::Head => 1,
            _ => steps,
        }
    }
}

/// Shape descriptor of one synaptic layer, for a single sample and step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerShape {
    Conv3x3 { in_ch: usize, out_ch: usize, height: usize, width: usize },
    Linear { tokens: usize, d_in: usize, d_out: usize },
    Attention { tokens: usize, head_dim: usize, heads: usize, order: Order },
}

/// Dense multiply-accumulate count of a layer for one sample and one step.
pub fn count_macs(shape: LayerShape) -> u64 {
    match shape {
        LayerShape::Conv3x3 { in_ch, out_ch, height, width } => (out_ch * in_ch * 9 * height * width) as u64,
        LayerShape::Linear { tokens, d_in, d_out } => (tokens * d_in * d_out) as u64,
        LayerShape::Attention { tokens, head_dim, heads, order } => {
            let (n, d, h) = (tokens as u64, head_dim as u64, heads as u64);
            match order {
                Order::QkFirst => 2 * n * n * d * h,
                Order::KvFirst => 2 * n * d * d * h,
            }
        }
    }
}

/// `floor(fr · T · flops)` with `fr = spikes / elements`, computed exactly.
pub fn count_sops(spikes: u64, elements: u64, steps: usize, flops: u64) -> Result<u64, ProfileError> {
    if elements == 0 {
        return Ok(0);
    }
    if spikes > elements {
        return Err(ProfileError::RateRange {
            layer: String::new(),
            rate: spikes as f64 / elements as f64,
        });
    }
    Ok((spikes as u128 * steps as u128 * flops as u128 / elements as u128) as u64)
}

/// Same as [`count_sops`] for a firing rate given as a float.
pub fn sops_from_rate(rate: f64, steps: usize, flops: u64) -> Result<u64, ProfileError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ProfileError::RateRange {
            layer: String::new(),
            rate,
        });
    }
    Ok((rate * steps as f64 * flops as f64).floor() as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// Dense MACs per time step, summed over every probed sample.
    pub macs_per_step: u64,
    /// MACs a conventional network of the same shape would spend on this
    /// layer. Differs from `macs_per_step` only where the spiking layer
    /// reorders a product the conventional one cannot.
    pub ann_macs: u64,
    pub input_nonzero: u64,
    pub input_elements: u64,
    /// Accumulates counted inside the kernel, where the kernel counts them.
    pub accumulates: Option<u64>,
}

impl LayerRecord {
    pub fn firing_rate(&self) -> f64 {
        if self.input_elements == 0 {
            0.0
        } else {
            self.input_nonzero as f64 / self.input_elements as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronRecord {
    pub name: String,
    pub spikes: u64,
    pub elements: u64,
    /// Outputs that were neither 0 nor 1.
    pub non_binary: u64,
}

impl NeuronRecord {
    pub fn rate(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.spikes as f64 / self.elements as f64
        }
    }
}

/// Value range of one attention layer's pre-neuron output.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: u64,
    pub non_finite: u64,
    /// Filled only when the probe was given bounds for this layer.
    pub bins: Vec<u64>,
    pub bounds: Option<(f64, f64)>,
}

impl ValueRange {
    pub fn bin_centers(&self) -> Vec<f64> {
        let Some((lo, hi)) = self.bounds else {
            return Vec::new();
        };
        let w = (hi - lo) / HISTOGRAM_BINS as f64;
        (0..HISTOGRAM_BINS).map(|i| lo + w * (i as f64 + 0.5)).collect()
    }

    /// Two-column `bin_center,count` table; empty body without bounds.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_center,count\n");
        for (c, n) in self.bin_centers().iter().zip(&self.bins) {
            let _ = writeln!(s, "{c},{n}");
        }
        s
    }
}

/// Raw attention operands of one block, kept for export.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    pub block: usize,
    /// `[T·B·H, N, d]` operand values.
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    /// Pre-neuron output, scaled, `[T·B·H, N, d]`.
    pub output: Vec<f32>,
    pub groups: usize,
    pub tokens: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub layers: Vec<LayerRecord>,
    pub neurons: Vec<NeuronRecord>,
    pub ranges: Vec<ValueRange>,
    pub captures: Vec<AttentionCapture>,
    pub capture_attention: bool,
    pub samples: usize,
    pub steps: usize,
    bounds: Vec<(String, (f64, f64))>,
}

fn nonzero<F: Real>(values: &[F]) -> u64 {
    values.iter().filter(|&&v| v != F::zero()).count() as u64
}

impl Probe {
    pub fn new() -> Self {
        Self::default()
    }

    /// A probe that also fills fixed-range histograms, using the ranges
    /// observed by an earlier pass.
    pub fn with_histograms(previous: &Probe) -> Self {
        Probe {
            bounds: previous
                .ranges
                .iter()
                .filter(|r| r.count > 0)
                .map(|r| {
                    let hi = if r.max > r.min { r.max } else { r.min + 1.0 };
                    (r.name.clone(), (r.min, hi))
                })
                .collect(),
            ..Default::default()
        }
    }

    pub fn record_layer<F: Real>(
        &mut self,
        name: &str,
        kind: LayerKind,
        macs_per_step: u64,
        input: &[F],
        accumulates: Option<u64>,
    ) {
        self.record(name, kind, [macs_per_step; 2], input, accumulates);
    }

    /// `macs` holds the spiking and the conventional cost per step.
    fn record<F: Real>(&mut self, name: &str, kind: LayerKind, macs: [u64; 2], input: &[F], accumulates: Option<u64>) {
        let [macs_per_step, ann_macs] = macs;
        let nz = nonzero(input);
        match self.layers.iter_mut().find(|l| l.name == name) {
            Some(l) => {
                l.macs_per_step += macs_per_step;
                l.ann_macs += ann_macs;
                l.input_nonzero += nz;
                l.input_elements += input.len() as u64;
                if let (Some(a), Some(b)) = (l.accumulates.as_mut(), accumulates) {
                    *a += b;
                }
            }
            None => self.layers.push(LayerRecord {
                name: name.to_string(),
                kind,
                macs_per_step,
                ann_macs,
                input_nonzero: nz,
                input_elements: input.len() as u64,
                accumulates,
            }),
        }
    }

    /// Attention layers see two operands; their counts are pooled so that
    /// the firing-rate estimate stays per stage.
    ///
    /// `ann_macs` is the cost of the same product in a softmax network,
    /// which must form the token-by-token map first.
    pub fn record_attention<F: Real>(
        &mut self,
        name: &str,
        kind: LayerKind,
        macs_per_step: u64,
        ann_macs: u64,
        stage_inputs: [&[F]; 2],
        counts: Option<ProductCounts>,
    ) {
        for (i, input) in stage_inputs.iter().enumerate() {
            let stage_name = format!("{name}.stage{}", i + 1);
            let acc = counts.map(|c| if i == 0 { c.first } else { c.second });
            self.record(&stage_name, kind, [macs_per_step / 2, ann_macs / 2], input, acc);
        }
    }

    pub fn record_neuron<F: Real>(&mut self, name: &str, output: &[F]) {
        let spikes = output.iter().filter(|&&v| v == F::one()).count() as u64;
        let non_binary = output.iter().filter(|&&v| v != F::one() && v != F::zero()).count() as u64;
        match self.neurons.iter_mut().find(|n| n.name == name) {
            Some(n) => {
                n.spikes += spikes;
                n.elements += output.len() as u64;
                n.non_binary += non_binary;
            }
            None => self.neurons.push(NeuronRecord {
                name: name.to_string(),
                spikes,
                elements: output.len() as u64,
                non_binary,
            }),
        }
    }

    pub fn record_values<F: Real>(&mut self, name: &str, values: &[F]) {
        let bounds = self.bounds.iter().find(|(n, _)| n == name).map(|(_, b)| *b);
        let idx = match self.ranges.iter().position(|r| r.name == name) {
            Some(i) => i,
            None => {
                self.ranges.push(ValueRange {
                    name: name.to_string(),
                    min: f64::INFINITY,
                    max: f64::NEG_INFINITY,
                    count: 0,
                    non_finite: 0,
                    bins: vec![0; if bounds.is_some() { HISTOGRAM_BINS } else { 0 }],
                    bounds,
                });
                self.ranges.len() - 1
            }
        };
        let r = &mut self.ranges[idx];
        for &v in values {
            let v = v.as_f64();
            if !v.is_finite() {
                r.non_finite += 1;
                continue;
            }
            r.min = r.min.min(v);
            r.max = r.max.max(v);
            r.count += 1;
            if let Some((lo, hi)) = r.bounds {
                let t = ((v - lo) / (hi - lo) * HISTOGRAM_BINS as f64).floor();
                let b = t.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
                r.bins[b] += 1;
            }
        }
    }

    pub fn neuron(&self, name: &str) -> Option<&NeuronRecord> {
        self.neurons.iter().find(|n| n.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn non_binary_total(&self) -> u64 {
        self.neurons.iter().map(|n| n.non_binary).sum()
    }

    /// One line per recorded value range: `layer,min,max,count,non_finite`.
    pub fn value_ranges_csv(&self) -> String {
        let mut s = String::from("layer,min,max,count,non_finite\n");
        for r in &self.ranges {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.min, r.max, r.count, r.non_finite);
        }
        s
    }

    /// Firing-rate table as CSV: `layer,spikes,elements,rate`.
    pub fn firing_rates_csv(&self) -> String {
        let mut s = String::from("layer,spikes,elements,rate\n");
        for n in &self.neurons {
            let _ = writeln!(s, "{},{},{},{}", n.name, n.spikes, n.elements, n.rate());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub name: String,
    pub kind: LayerKind,
    /// Dense MACs per step, summed over samples.
    pub flops: u64,
    /// Dense MACs of the conventional counterpart, summed over samples.
    pub ann_flops: u64,
    /// Operations actually billed: MACs for dense layers, synaptic
    /// operations otherwise.
    pub sops: u64,
    pub rate: f64,
    pub energy_fj: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub samples: usize,
    pub steps: usize,
    pub e_mac_fj: u64,
    pub e_ac_fj: u64,
}

impl EnergyReport {
    pub fn from_probe(probe: &Probe) -> Result<Self, ProfileError> {
        Self::with_constants(probe, E_MAC_FJ, E_AC_FJ)
    }

    pub fn with_constants(probe: &Probe, e_mac_fj: u64, e_ac_fj: u64) -> Result<Self, ProfileError> {
        if probe.samples == 0 || probe.layers.is_empty() {
            return Err(ProfileError::EmptyProbe);
        }
        let steps = probe.steps;
        let mut rows = Vec::with_capacity(probe.layers.len());
        for l in &probe.layers {
            let rate = l.firing_rate();
            if !(0.0..=1.0).contains(&rate) {
                return Err(ProfileError::RateRange {
                    layer: l.name.clone(),
                    rate,
                });
            }
            let (ops, unit) = if l.kind.dense() {
                (l.macs_per_step * l.kind.dense_steps(steps) as u64, e_mac_fj)
            } else {
                let sops = count_sops(l.input_nonzero, l.input_elements, steps, l.macs_per_step).map_err(|e| match e {
                    ProfileError::RateRange { rate, .. } => ProfileError::RateRange {
                        layer: l.name.clone(),
                        rate,
                    },
                    other => other,
                })?;
                (sops, e_ac_fj)
            };
            rows.push(EnergyRow {
                name: l.name.clone(),
                kind: l.kind,
                flops: l.macs_per_step,
                ann_flops: l.ann_macs,
                sops: ops,
                rate,
                energy_fj: ops as u128 * unit as u128,
            });
        }
        Ok(EnergyReport {
            rows,
            samples: probe.samples,
            steps,
            e_mac_fj,
            e_ac_fj,
        })
    }

    /// Spiking-model energy over all probed samples, in femtojoules.
    pub fn snn_total_fj(&self) -> u128 {
        self.rows.iter().map(|r| r.energy_fj).sum()
    }

    /// Energy of a conventional network of the same shapes: every dense MAC
    /// of one pass at the MAC rate.
    pub fn ann_total_fj(&self) -> u128 {
        self.rows.iter().map(|r| r.ann_flops as u128 * self.e_mac_fj as u128).sum()
    }

    pub fn total_ops(&self) -> u64 {
        self.rows.iter().map(|r| r.sops).sum()
    }

    /// CSV with columns `layer,kind,flops,sops,fr,energy_pj`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,flops,sops,fr,energy_pj\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.name,
                r.kind.name(),
                r.flops,
                r.sops,
                r.rate,
                format_pj(r.energy_fj)
            );
        }
        s
    }
}

/// Femtojoules as an exact decimal picojoule string.
pub fn format_pj(fj: u128) -> String {
    format!("{}.{:03}", fj / 1000, fj % 1000)
}

/// Femtojoules as microjoules.
pub fn fj_to_uj(fj: u128) -> f64 {
    fj as f64 / 1e9
}

/// Energy of `macs` multiply-accumulates at `E_MAC`, in femtojoules.
pub fn energy_mac_fj(macs: u64) -> u128 {
    macs as u128 * E_MAC_FJ as u128
}

/// Energy of `sops` accumulates at `E_AC`, in femtojoules.
pub fn energy_ac_fj(sops: u64) -> u128 {
    sops as u128 * E_AC_FJ as u128
}
