mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikformer::attention::{
    attention_cost, binary_attention_map, binary_qktv, cheaper_order, AttentionVariant, Order, ProductKernel,
    QkvRates, SsaConfig,
};
use spikformer::autograd::gradcheck::random_tensor;
use spikformer::autograd::Graph;
use spikformer::binary::{and_popcount, float_matmul, sparse_dot, BitMatrix};
use spikformer::tensor::Tensor;

use support::binary_tensor;

fn bits(rng: &mut impl Rng, len: usize, density: f64) -> Vec<f64> {
    (0..len).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Integer reference for `Q·Kᵀ·V` by brute force.
fn reference_qktv(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<u32> {
    let map = float_matmul(q, &transpose(k, n, d), n, d, n);
    float_matmul(&map, v, n, n, d).iter().map(|&x| x as u32).collect()
}

#[test]
fn hand_worked_example() {
    let q = [1.0, 0.0, 1.0, 1.0];
    let k = [1.0, 1.0, 0.0, 1.0];
    let v = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(binary_attention_map(&q, &k, 2, 2).unwrap(), vec![1, 0, 2, 1]);
    for order in [Order::QkFirst, Order::KvFirst] {
        assert_eq!(binary_qktv(&q, &k, &v, 2, 2, order).unwrap().0, vec![1, 0, 2, 1]);
    }
}

#[test]
fn both_orders_agree_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let p = rng.random_range(0.05..0.9);
        let (q, k, v) = (bits(&mut rng, n * d, p), bits(&mut rng, n * d, p), bits(&mut rng, n * d, p));
        let a = binary_qktv(&q, &k, &v, n, d, Order::QkFirst).unwrap().0;
        let b = binary_qktv(&q, &k, &v, n, d, Order::KvFirst).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, reference_qktv(&q, &k, &v, n, d));
    }
}

#[test]
fn zero_query_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (7, 5);
    let (k, v) = (bits(&mut rng, n * d, 0.5), bits(&mut rng, n * d, 0.5));
    for order in [Order::QkFirst, Order::KvFirst] {
        let out = binary_qktv(&vec![0.0; n * d], &k, &v, n, d, order).unwrap();
        assert!(out.0.iter().all(|&x| x == 0));
        // the first stage is driven by Q (or by K for kv-first, which is nonzero)
        if order == Order::QkFirst {
            assert_eq!(out.1.first, 0);
        }
    }
}

#[test]
fn sparse_dot_counts_shared_ones() {
    assert_eq!(sparse_dot(&[1, 0, 1], &[1, 1, 0]).unwrap(), 1);
    let k = [1, 0, 1, 1, 0, 1, 1];
    assert_eq!(sparse_dot(&[1; 7], &k).unwrap(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let q: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let k: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let float: f64 = q.iter().zip(&k).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert_eq!(sparse_dot(&q, &k).unwrap() as f64, float);
    }
}

#[test]
fn order_follows_shape() {
    assert_eq!(cheaper_order(196, 64), Order::KvFirst);
    assert_eq!(cheaper_order(64, 64), Order::QkFirst);
    assert_eq!(cheaper_order(16, 64), Order::QkFirst);
    let cost = attention_cost(&SsaConfig::new(64, 1), 64, QkvRates { q: 0.1, k: 0.1, v: 0.1 }, 1);
    assert_eq!(cost.qk_first_macs, cost.kv_first_macs);
    assert_eq!(cost.order, Order::QkFirst);
}

#[test]
fn dense_attention_cost_of_the_large_config() {
    let cfg = SsaConfig::new(512, 8);
    let cost = attention_cost(&cfg, 196, QkvRates { q: 1.0, k: 1.0, v: 1.0 }, 1);
    // dense softmax attention evaluates Q·Kᵀ first
    let flops = 2 * cost.qk_first_macs;
    let rel = (flops as f64 - 77e6).abs() / 77e6;
    assert!(rel < 0.1, "{flops} is {rel} away");
    assert_eq!(cost.order, Order::KvFirst);
    assert!(cost.kv_first_macs < cost.qk_first_macs);
}

#[test]
fn expected_sops_follow_rates() {
    let cfg = SsaConfig::new(16, 2);
    let cost = attention_cost(&cfg, 4, QkvRates { q: 0.5, k: 0.25, v: 0.0 }, 2);
    // qk-first: stage sizes n²·d·h = 16·8·2 = 256
    assert_eq!(cost.order, Order::QkFirst);
    assert_eq!(cost.expected_sops, 256);
}

fn ssa_stack(g: &mut Graph<f64>, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, order: Order) -> Tensor<f64> {
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let (out, _) = g.qktv(qv, kv, vv, order, ProductKernel::Bits).unwrap();
    g.value(out).clone()
}

#[test]
fn groups_are_independent() {
    // Perturbing one time step (one group) leaves every other group unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [4, 6, 3];
    let (q, k, v) = (
        binary_tensor(&shape, 0.4, &mut rng),
        binary_tensor(&shape, 0.4, &mut rng),
        binary_tensor(&shape, 0.4, &mut rng),
    );
    let mut g = Graph::new();
    let base = ssa_stack(&mut g, &q, &k, &v, Order::KvFirst);
    let mut q2 = q.clone();
    for x in &mut q2.data_mut()[18..36] {
        *x = 1.0 - *x;
    }
    let changed = ssa_stack(&mut g, &q2, &k, &v, Order::KvFirst);
    for gi in [0, 2, 3] {
        assert_eq!(&base.data()[gi * 18..(gi + 1) * 18], &changed.data()[gi * 18..(gi + 1) * 18]);
    }
}

#[test]
fn bit_and_float_kernels_agree_in_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [3, 10, 4];
    let (q, k, v) = (
        binary_tensor(&shape, 0.3, &mut rng),
        binary_tensor(&shape, 0.3, &mut rng),
        binary_tensor(&shape, 0.3, &mut rng),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    for order in [Order::QkFirst, Order::KvFirst] {
        let (a, counts) = g.qktv(qv, kv, vv, order, ProductKernel::Bits).unwrap();
        let (b, _) = g.qktv(qv, kv, vv, order, ProductKernel::Float).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(counts.total() > 0);
    }
}

#[test]
fn single_head_split_is_a_reshape() {
    let x = random_tensor(&[2, 5, 6], -1.0, 1.0, 6);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let h = g.split_heads(xv, 1).unwrap();
    assert_eq!(g.value(h).data(), x.data());
    let m = g.merge_heads(h, 1).unwrap();
    assert_eq!(g.value(m), &x);
}

#[test]
fn head_permutation_with_permuted_projection_is_invariant() {
    // Multi-head output followed by a projection: swapping two heads and
    // swapping the matching projection rows gives the same result.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (tb, n, heads, d) = (2, 6, 3, 4);
    let dim = heads * d;
    let (q, k, v) = (
        binary_tensor(&[tb, n, dim], 0.4, &mut rng),
        binary_tensor(&[tb, n, dim], 0.4, &mut rng),
        binary_tensor(&[tb, n, dim], 0.4, &mut rng),
    );
    let w = random_tensor(&[dim, 5], -1.0, 1.0, 8);
    let perm = [2, 0, 1];
    let swap_cols = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for r in 0..tb * n {
            for (new, &old) in perm.iter().enumerate() {
                for j in 0..d {
                    out.data_mut()[r * dim + new * d + j] = t.data()[r * dim + old * d + j];
                }
            }
        }
        out
    };
    let mut wp = w.clone();
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..d {
            for c in 0..5 {
                wp.data_mut()[(new * d + j) * 5 + c] = w.data()[(old * d + j) * 5 + c];
            }
        }
    }
    let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: &Tensor<f64>| {
        let mut g = Graph::new();
        let (qv, kv, vv, wv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()), g.input(w.clone()));
        let (qh, kh, vh) = (
            g.split_heads(qv, heads).unwrap(),
            g.split_heads(kv, heads).unwrap(),
            g.split_heads(vv, heads).unwrap(),
        );
        let (a, _) = g.qktv(qh, kh, vh, Order::QkFirst, ProductKernel::Bits).unwrap();
        let m = g.merge_heads(a, heads).unwrap();
        let y = g.linear(m, wv, None).unwrap();
        g.value(y).clone()
    };
    let a = run(&q, &k, &v, &w);
    let b = run(&swap_cols(&q), &swap_cols(&k), &swap_cols(&v), &wp);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn variant(v: AttentionVariant, q: &Tensor<f64>, k: &Tensor<f64>, val: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (a, b, c) = (g.input(q.clone()), g.input(k.clone()), g.input(val.clone()));
    let out = g.variant_scores(v, a, b, c).unwrap();
    g.value(out).clone()
}

#[test]
fn softmax_rows_sum_to_one() {
    // With V the identity, the output is the attention matrix itself.
    let q = random_tensor(&[2, 4, 4], -2.0, 2.0, 9);
    let k = random_tensor(&[2, 4, 4], -2.0, 2.0, 10);
    let mut eye = Tensor::zeros(&[2, 4, 4]);
    for gi in 0..2 {
        for i in 0..4 {
            eye.data_mut()[gi * 16 + i * 4 + i] = 1.0;
        }
    }
    let a = variant(AttentionVariant::VsaSpikeV, &q, &k, &eye);
    for row in a.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&x| x > 0.0));
    }
    let r = variant(AttentionVariant::Relu, &q, &k, &eye);
    assert!(r.data().iter().all(|&x| x >= 0.0));
}

#[test]
fn identity_variant_is_plain_product() {
    let q = random_tensor(&[1, 5, 3], -1.0, 1.0, 11);
    let k = random_tensor(&[1, 5, 3], -1.0, 1.0, 12);
    let v = random_tensor(&[1, 5, 3], -1.0, 1.0, 13);
    let got = variant(AttentionVariant::Identity, &q, &k, &v);
    let map = float_matmul(q.data(), &transpose(k.data(), 5, 3), 5, 3, 5);
    let want = float_matmul(&map, v.data(), 5, 5, 3);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn associativity_holds_exactly(n in 1usize..=64, d in 1usize..=32, density in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (bits(&mut rng, n * d, density), bits(&mut rng, n * d, density), bits(&mut rng, n * d, density));
        let a = binary_qktv(&q, &k, &v, n, d, Order::QkFirst).unwrap().0;
        let b = binary_qktv(&q, &k, &v, n, d, Order::KvFirst).unwrap().0;
        prop_assert_eq!(&a, &b);
    }

    #[test]
    fn packed_kernel_equals_float_matmul(m in 1usize..40, k in 1usize..150, p in 1usize..40, density in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = bits(&mut rng, m * k, density);
        let bt = bits(&mut rng, p * k, density);
        let (packed, count) = and_popcount(
            &BitMatrix::from_values(&a, m, k).unwrap(),
            &BitMatrix::from_values(&bt, p, k).unwrap(),
        ).unwrap();
        let float = float_matmul(&a, &transpose(&bt, p, k), m, k, p);
        prop_assert!(packed.iter().zip(&float).all(|(&x, &y)| x as f64 == y));
        // every set bit of the left operand drives one accumulate per output column
        let ones = a.iter().filter(|&&x| x == 1.0).count() as u64;
        prop_assert_eq!(count, ones * p as u64);
    }

    #[test]
    fn products_are_non_negative(n in 1usize..20, d in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k) = (bits(&mut rng, n * d, 0.5), bits(&mut rng, n * d, 0.5));
        let map = binary_attention_map(&q, &k, n, d).unwrap();
        prop_assert!(map.iter().all(|&x| x as usize <= d));
    }
}
