use proptest::prelude::*;

use spikformer::autograd::Graph;
use spikformer::neuron::{lif_simulate, LifParams, NeuronMode};
use spikformer::tensor::Tensor;

fn params(tau: f64, vth: f64, mode: NeuronMode) -> LifParams {
    LifParams {
        tau,
        v_threshold: vth,
        mode,
        ..LifParams::default()
    }
}

#[test]
fn single_input_of_two_fires_and_resets() {
    let t = lif_simulate(&[2.0], 1, &LifParams::default()).unwrap();
    assert_eq!(t.charge, vec![1.0]);
    assert_eq!(t.spikes, vec![1.0]);
    assert_eq!(t.membrane, vec![0.0]);
}

#[test]
fn zero_input_stays_at_reset() {
    let t = lif_simulate(&[0.0; 12], 4, &LifParams::default()).unwrap();
    assert!(t.spikes.iter().all(|&s| s == 0.0));
    assert!(t.membrane.iter().all(|&v| v == 0.0));
}

#[test]
fn sub_threshold_pair_accumulates_without_firing() {
    let t = lif_simulate(&[0.6, 0.6], 2, &LifParams::default()).unwrap();
    // the hand recurrence, evaluated in the same double arithmetic
    let h1: f64 = 0.5 * 0.6;
    let h2: f64 = 0.3 + 0.5 * (0.6 - 0.3);
    assert_eq!(t.charge, vec![h1, h2]);
    assert_eq!(t.spikes, vec![0.0, 0.0]);
    assert_eq!(t.membrane, vec![h1, h2]);
    assert_eq!(h1, 0.3);
    assert!((h2 - 0.45).abs() <= f64::EPSILON * 0.45);
}

#[test]
fn equality_fires() {
    let t = lif_simulate(&[1.0], 1, &params(2.0, 0.5, NeuronMode::Lif)).unwrap();
    assert_eq!(t.spikes, vec![1.0]);
}

#[test]
fn zero_steps_is_an_error() {
    assert!(lif_simulate::<f64>(&[], 1, &LifParams::default()).is_err());
    assert!(lif_simulate(&[1.0], 0, &LifParams::default()).is_err());
}

#[test]
fn each_call_starts_from_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[2, 1], vec![0.6, 0.6]).unwrap());
    let a = g.lif(x, 2, &LifParams::default()).unwrap();
    let b = g.lif(x, 2, &LifParams::default()).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

fn any_params() -> impl Strategy<Value = LifParams> {
    (1.0f64..8.0, 0.1f64..2.0, prop::bool::ANY).prop_map(|(tau, vth, leaky)| {
        params(tau, vth, if leaky { NeuronMode::Lif } else { NeuronMode::If })
    })
}

fn any_drive() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(steps, m)| (Just(steps), prop::collection::vec(-3.0f64..4.0, steps * m)))
}

proptest! {
    #[test]
    fn outputs_are_exactly_binary((steps, x) in any_drive(), p in any_params()) {
        let t = lif_simulate(&x, steps, &p).unwrap();
        prop_assert!(t.spikes.iter().all(|&s| s == 0.0 || s == 1.0));
    }

    #[test]
    fn reset_is_exact((steps, x) in any_drive(), p in any_params()) {
        let t = lif_simulate(&x, steps, &p).unwrap();
        for i in 0..x.len() {
            if t.spikes[i] == 1.0 {
                prop_assert_eq!(t.membrane[i], p.v_reset);
            } else {
                prop_assert_eq!(t.membrane[i], t.charge[i]);
            }
        }
    }

    #[test]
    fn raising_the_input_never_removes_a_spike(
        (steps, x) in any_drive(),
        p in any_params(),
        bump in 0.0f64..2.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let m = x.len() / steps;
        let i = pick.index(x.len());
        let t = i / m;
        let mut y = x.clone();
        y[i] += bump;
        let a = lif_simulate(&x, steps, &p).unwrap();
        let b = lif_simulate(&y, steps, &p).unwrap();
        // history before step t is unchanged, so the spike at (t, i) can only appear
        prop_assert!(b.spikes[i] >= a.spikes[i]);
        prop_assert_eq!(&a.spikes[..t * m], &b.spikes[..t * m]);
    }

    #[test]
    fn locations_are_independent((steps, x) in any_drive(), p in any_params()) {
        // Each element follows its own recurrence: simulating one column
        // alone gives that column of the joint simulation.
        let m = x.len() / steps;
        let joint = lif_simulate(&x, steps, &p).unwrap();
        for j in 0..m {
            let col: Vec<f64> = (0..steps).map(|t| x[t * m + j]).collect();
            let alone = lif_simulate(&col, steps, &p).unwrap();
            for t in 0..steps {
                prop_assert_eq!(alone.spikes[t], joint.spikes[t * m + j]);
            }
        }
    }

    #[test]
    fn graph_neuron_matches_simulation((steps, x) in any_drive(), p in any_params()) {
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(&[x.len()], x.clone()).unwrap());
        let y = g.lif(xv, steps, &p).unwrap();
        let u = g.lif_unrolled(xv, steps, &p).unwrap();
        let t = lif_simulate(&x, steps, &p).unwrap();
        prop_assert_eq!(g.value(y).data(), &t.spikes[..]);
        prop_assert_eq!(g.value(u).data(), &t.spikes[..]);
    }
}
