//! Central finite-difference gradient checking at double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is near zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares the tape gradients of `f` with central differences.
///
/// `f` builds a computation from the given leaves. Its output is reduced to a
/// scalar via a fixed random projection, so non-scalar outputs are fine.
pub fn check_gradients<Fun>(inputs: &[Tensor<f64>], eps: f64, f: Fun) -> Result<GradReport, TensorError>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), want_grad)).collect();
        let out = f(&mut g, &leaves)?;
        let proj = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let shape = g.shape(out).to_vec();
            let data = (0..g.value(out).len()).map(|_| rng.random_range(0.5..1.5)).collect();
            Tensor::new(&shape, data).expect("projection")
        });
        let value = g
            .value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        g.backward_with(out, proj.data().to_vec())?;
        let grads = leaves
            .iter()
            .map(|&v| g.grad_slice(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `lo..hi`, for gradient-check inputs.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}
