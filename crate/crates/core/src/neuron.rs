//! Leaky integrate-and-fire (and plain integrate-and-fire) spiking neurons.
//!
//! Inputs carry simulation time as the outermost part of the leading axis:
//! a tensor of shape `[T·B, …]` holds `T` consecutive slices of `B·…`
//! elements. Each neuron starts every call at the reset potential.

use crate::autograd::{Graph, Var};
use crate::error::{ConfigError, TensorError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronMode {
    /// Leaky integration with time constant `tau`.
    Lif,
    /// Pure integration, no leak.
    If,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
    pub mode: NeuronMode,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 4.0,
            mode: NeuronMode::Lif,
        }
    }
}

impl LifParams {
    pub fn with_threshold(self, v_threshold: f64) -> Self {
        LifParams { v_threshold, ..self }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| {
            Err(ConfigError::Value {
                key: key.into(),
                reason,
            })
        };
        if !(self.tau >= 1.0) {
            return bad("tau", format!("must be at least 1, got {}", self.tau));
        }
        if !(self.v_threshold > self.v_reset) {
            return bad(
                "v_threshold",
                format!("{} does not exceed v_reset {}", self.v_threshold, self.v_reset),
            );
        }
        if !(self.surrogate_alpha > 0.0) {
            return bad("surrogate_alpha", format!("must be positive, got {}", self.surrogate_alpha));
        }
        Ok(())
    }

    /// Multiplier on the input in the charge equation.
    fn input_gain(&self) -> f64 {
        match self.mode {
            NeuronMode::Lif => 1.0 / self.tau,
            NeuronMode::If => 1.0,
        }
    }

    /// Derivative of the charge with respect to the previous membrane.
    fn membrane_carry(&self) -> f64 {
        match self.mode {
            NeuronMode::Lif => 1.0 - 1.0 / self.tau,
            NeuronMode::If => 1.0,
        }
    }
}

/// Derivative of `sigmoid(alpha·x)`, the stand-in for the spike derivative.
#[inline]
pub fn surrogate_grad<F: Real>(x: F, alpha: F) -> F {
    let s = crate::autograd::sigmoid(alpha * x);
    alpha * s * (F::one() - s)
}

/// Full state history of one simulation, each `[T × M]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct LifTrace<F> {
    /// Membrane potential after charging, before the spike decision.
    pub charge: Vec<F>,
    pub spikes: Vec<F>,
    /// Membrane potential after reset.
    pub membrane: Vec<F>,
}

/// Runs the neuron over `steps` slices of `x` (time outermost).
pub fn lif_simulate<F: Real>(x: &[F], steps: usize, params: &LifParams) -> Result<LifTrace<F>, TensorError> {
    if steps == 0 || x.is_empty() {
        return Err(TensorError::Empty { op: "lif" });
    }
    if x.len() % steps != 0 {
        return Err(TensorError::invalid(
            "lif",
            format!("{} elements do not split into {steps} time steps", x.len()),
        ));
    }
    let m = x.len() / steps;
    let vth = F::of(params.v_threshold);
    let vr = F::of(params.v_reset);
    let gain = F::of(params.input_gain());
    let leaky = params.mode == NeuronMode::Lif;
    let mut charge = vec![F::zero(); x.len()];
    let mut spikes = vec![F::zero(); x.len()];
    let mut membrane = vec![F::zero(); x.len()];
    let mut v = vec![vr; m];
    for t in 0..steps {
        let range = t * m..(t + 1) * m;
        for (j, i) in range.enumerate() {
            let h = if leaky {
                v[j] + gain * (x[i] - (v[j] - vr))
            } else {
                v[j] + x[i]
            };
            let fired = h >= vth;
            charge[i] = h;
            spikes[i] = if fired { F::one() } else { F::zero() };
            v[j] = if fired { vr } else { h };
            membrane[i] = v[j];
        }
    }
    Ok(LifTrace {
        charge,
        spikes,
        membrane,
    })
}

fn time_split(shape: &[usize], steps: usize) -> Result<(), TensorError> {
    match shape.first() {
        Some(&lead) if steps > 0 && lead % steps == 0 && lead > 0 => Ok(()),
        _ => Err(TensorError::invalid(
            "lif",
            format!("leading axis of {shape:?} is not a multiple of {steps} time steps"),
        )),
    }
}

impl<F: Real> Graph<F> {
    /// Spiking neuron layer with a fused backward-through-time rule.
    ///
    /// The reset does not propagate gradient through the spike; the spike
    /// itself back-propagates the surrogate derivative at `charge - v_th`.
    pub fn lif(&mut self, x: Var, steps: usize, params: &LifParams) -> Result<Var, TensorError> {
        time_split(self.shape(x), steps)?;
        let trace = lif_simulate(self.value(x).data(), steps, params)?;
        let shape = self.shape(x).to_vec();
        let m = trace.spikes.len() / steps;
        let vth = F::of(params.v_threshold);
        let alpha = F::of(params.surrogate_alpha);
        let gain = F::of(params.input_gain());
        let carry = F::of(params.membrane_carry());
        let LifTrace { charge, spikes, .. } = trace;
        let out = Tensor::new(&shape, spikes)?;
        Ok(self.push(
            out,
            crate::autograd::rule(vec![x], move |ctx, g: &[F]| {
                let s = ctx.output().data();
                let mut dx = vec![F::zero(); g.len()];
                let mut gv = vec![F::zero(); m];
                for t in (0..steps).rev() {
                    for j in 0..m {
                        let i = t * m + j;
                        let gh = g[i] * surrogate_grad(charge[i] - vth, alpha) + gv[j] * (F::one() - s[i]);
                        dx[i] = gh * gain;
                        gv[j] = gh * carry;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Heaviside step `x >= 0` whose backward pass uses the surrogate.
    pub fn spike(&mut self, x: Var, alpha: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| if v >= F::zero() { F::one() } else { F::zero() });
        let a = F::of(alpha);
        Ok(self.push(
            out,
            crate::autograd::rule(vec![x], move |ctx, g: &[F]| {
                let xv = ctx.value(x).data();
                vec![Some(g.iter().zip(xv).map(|(&gi, &v)| gi * surrogate_grad(v, a)).collect())]
            }),
        ))
    }

    /// Same neuron unrolled from primitive ops, with the reset detached.
    /// Slower than [`Graph::lif`]; kept as its reference.
    pub fn lif_unrolled(&mut self, x: Var, steps: usize, params: &LifParams) -> Result<Var, TensorError> {
        self.unroll(x, steps, params, false)
    }

    /// Smoothed neuron: the step is replaced by `sigmoid(alpha·(H - v_th))`
    /// in the forward pass and nothing is detached, so its tape gradient is
    /// the exact derivative of a smooth function.
    pub fn lif_soft(&mut self, x: Var, steps: usize, params: &LifParams) -> Result<Var, TensorError> {
        self.unroll(x, steps, params, true)
    }

    fn unroll(&mut self, x: Var, steps: usize, params: &LifParams, soft: bool) -> Result<Var, TensorError> {
        time_split(self.shape(x), steps)?;
        let rows = self.shape(x)[0] / steps;
        let mut slice_shape = self.shape(x).to_vec();
        slice_shape[0] = rows;
        let vr = params.v_reset;
        let mut v = self.input(Tensor::full(&slice_shape, F::of(vr)));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = self.narrow0(x, t * rows, rows)?;
            let h = match params.mode {
                NeuronMode::Lif => {
                    let rel = self.add_scalar(v, -vr)?;
                    let drive = self.sub(xt, rel)?;
                    let step = self.scale(drive, params.input_gain())?;
                    self.add(v, step)?
                }
                NeuronMode::If => self.add(v, xt)?,
            };
            let over = self.add_scalar(h, -params.v_threshold)?;
            let s = if soft {
                let z = self.scale(over, params.surrogate_alpha)?;
                self.sigmoid(z)?
            } else {
                self.spike(over, params.surrogate_alpha)?
            };
            let gate = if soft { s } else { self.detach(s) };
            let neg = self.scale(gate, -1.0)?;
            let keep = self.add_scalar(neg, 1.0)?;
            let kept = self.mul(h, keep)?;
            let reset = self.scale(gate, vr)?;
            v = self.add(kept, reset)?;
            outputs.push(s);
        }
        self.concat0(&outputs)
    }
}
