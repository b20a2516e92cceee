use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::SplitRng;

type G = Graph<f64>;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v)
}

fn param(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    t(shape, v).with_requires_grad(true)
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = G::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitRng::new(11).stream();
    for _ in 0..10 {
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let expect = triple_loop(a.data(), b.data(), 4, 5, 3);
        let mut g = G::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).unwrap().data().iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn matmul_broadcasts_batch_extents() {
    let mut rng = SplitRng::new(12).stream();
    let a = Tensor::<f64>::randn(&[2, 1, 3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[3, 4, 2], 1.0, &mut rng);
    let mut g = G::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let out = g.value(c).unwrap();
    assert_eq!(out.shape(), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let expect = triple_loop(&a.data()[i * 12..(i + 1) * 12], &b.data()[j * 8..(j + 1) * 8], 3, 4, 2);
            let got = &out.data()[(i * 3 + j) * 6..(i * 3 + j + 1) * 6];
            for (x, y) in got.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("inner dimensions"), "{err}");
}

#[test]
fn depthwise_identity_kernel_and_box_filter() {
    let mut g = G::new();
    let x = g.constant(t(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 9.0]));
    let w = g.constant(t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
    let y = g.depthwise_conv1d(x, w).unwrap();
    assert_eq!(g.value(y).unwrap().data(), g.value(x).unwrap().data());

    let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let y = g.depthwise_conv1d(x, w).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
}

#[test]
fn depthwise_channels_are_independent() {
    let mut rng = SplitRng::new(3).stream();
    let x = Tensor::<f64>::randn(&[1, 3, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
    let mut x2 = x.clone();
    for tt in 0..6 {
        x2.set(&[0, 0, tt], x.at(&[0, 0, tt]) + 1.0);
    }
    let mut g = G::new();
    let (a, b, wv) = (g.constant(x), g.constant(x2), g.constant(w));
    let ya = g.depthwise_conv1d(a, wv).unwrap();
    let yb = g.depthwise_conv1d(b, wv).unwrap();
    let (ya, yb) = (g.value(ya).unwrap(), g.value(yb).unwrap());
    assert!((0..6).any(|tt| ya.at(&[0, 0, tt]) != yb.at(&[0, 0, tt])));
    for c in 1..3 {
        for tt in 0..6 {
            assert_eq!(ya.at(&[0, c, tt]), yb.at(&[0, c, tt]));
        }
    }
}

#[test]
fn depthwise_rejects_even_kernel_and_allows_long_kernel() {
    let mut g = G::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 4]));
    let w = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.depthwise_conv1d(x, w).is_err());
    let x = g.constant(t(&[1, 1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[1, 7], &[1.0; 7]));
    let y = g.depthwise_conv1d(x, w).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn backward_of_sum_and_square() {
    let mut g = G::new();
    let x = g.leaf(param(&[3], &[0.3, -2.0, 5.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = G::new();
    let x = g.leaf(param(&[2], &[2.0, -1.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap().data(), &[4.0, -2.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = G::new();
    let x = g.leaf(param(&[2], &[1.0, 2.0]));
    let a = g.scale(x, 3.0).unwrap();
    let b = g.add(a, x).unwrap();
    let s = g.sum(b).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_stale_graph() {
    let mut g = G::new();
    let x = g.leaf(param(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::StaleGraph)));
}

#[test]
fn vars_from_other_graphs_are_rejected() {
    let mut g1 = G::new();
    let mut g2 = G::new();
    let x = g1.constant(Tensor::zeros(&[2]));
    assert!(g2.sum(x).is_err());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = G::new();
    let w = g.leaf(param(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().is_none());
    assert_eq!(g.grad(w).unwrap().unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
    let mut rng = SplitRng::new(5).stream();
    let x = Tensor::<f64>::randn(&[6, 9], 3.0, &mut rng);
    let mut g = G::new();
    let v = g.constant(x);
    let p = g.softmax(v).unwrap();
    let lp = g.log_softmax(v).unwrap();
    let (p, lp) = (g.value(p).unwrap(), g.value(lp).unwrap());
    for row in p.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    for (a, b) in p.data().iter().zip(lp.data()) {
        assert!((a.ln() - b).abs() <= 1e-6);
    }
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = SplitRng::new(8).stream();
    let x = Tensor::<f64>::randn(&[3, 16], 4.0, &mut rng);
    let mut g = G::new();
    let v = g.constant(x);
    let w = g.constant(Tensor::full(&[16], 1.0));
    let b = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(v, w, b).unwrap();
    for row in g.value(y).unwrap().data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln2() {
    let mut g = G::new();
    let logits = g.constant(Tensor::zeros(&[4, 2]));
    let loss = g.cross_entropy(logits, &[0, 1, 0, 1]).unwrap();
    assert!((g.value(loss).unwrap().item() - std::f64::consts::LN_2).abs() <= 1e-6);
}

#[test]
fn permute_round_trip_and_transpose() {
    let mut rng = SplitRng::new(9).stream();
    let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
    let mut g = G::new();
    let v = g.constant(x.clone());
    let p = g.permute(v, &[0, 2, 3, 1]).unwrap();
    assert_eq!(g.shape(p).unwrap(), &[2, 4, 5, 3]);
    assert_eq!(g.value(p).unwrap().at(&[1, 2, 3, 0]), x.at(&[1, 0, 2, 3]));
    let back = g.permute(p, &[0, 3, 1, 2]).unwrap();
    assert!(g.value(back).unwrap().bit_eq(&x));
    let tr = g.transpose(v).unwrap();
    assert_eq!(g.value(tr).unwrap().at(&[1, 2, 4, 3]), x.at(&[1, 2, 3, 4]));
    assert!(g.permute(v, &[0, 0, 1, 2]).is_err());
}

#[test]
fn mean_and_expand_shapes() {
    let mut g = G::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let m0 = g.mean(x, 0).unwrap();
    let m1 = g.mean(x, 1).unwrap();
    assert_eq!(g.value(m0).unwrap().data(), &[2.5, 3.5, 4.5]);
    assert_eq!(g.value(m1).unwrap().data(), &[2.0, 5.0]);
    let e = g.expand(m1, &[3]).unwrap();
    assert_eq!(g.shape(e).unwrap(), &[3, 2]);
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut rng = SplitRng::new(21).stream();
        let x = Tensor::<f32>::randn(&[2, 4, 8], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[8, 8], 0.3, &mut rng).with_requires_grad(true);
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.constant(x), g.leaf(w));
        let h = g.matmul(xv, wv).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.softmax(h).unwrap();
        let s = g.sum(h).unwrap();
        let mut m = g.mul(s, s).unwrap();
        m = g.scale(m, 0.5).unwrap();
        g.backward(m).unwrap();
        (g.value(h).unwrap().clone(), g.grad(wv).unwrap().unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

proptest! {
    #[test]
    fn concat_then_split_is_identity(
        outer in 1usize..4,
        sizes in proptest::collection::vec(1usize..5, 1..4),
        inner in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = SplitRng::new(seed).stream();
        let parts: Vec<Tensor<f64>> = sizes
            .iter()
            .map(|&s| Tensor::randn(&[outer, s, inner], 1.0, &mut rng))
            .collect();
        let mut g = G::new();
        let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let cat = g.concat(&vars, 1).unwrap();
        let pieces = g.split(cat, 1, &sizes).unwrap();
        for (p, v) in parts.iter().zip(pieces) {
            prop_assert!(g.value(v).unwrap().bit_eq(p));
        }
    }

    #[test]
    fn depthwise_matches_direct_sum(
        c in 1usize..4,
        len in 1usize..12,
        half in 0usize..6,
        seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let mut rng = SplitRng::new(seed).stream();
        let x = Tensor::<f64>::randn(&[2, c, len], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[c, k], 1.0, &mut rng);
        let mut g = G::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.depthwise_conv1d(xv, wv).unwrap();
        let y = g.value(y).unwrap();
        for b in 0..2 {
            for ch in 0..c {
                for tt in 0..len {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let src = tt as isize + j as isize - half as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += x.at(&[b, ch, src as usize]) * w.at(&[ch, j]);
                        }
                    }
                    prop_assert!((acc - y.at(&[b, ch, tt])).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn random_shapes_keep_values_finite() {
    let mut rng = SplitRng::new(4).stream();
    for _ in 0..20 {
        let n = rng.random_range(1..6);
        let x = Tensor::<f64>::randn(&[n, 7], 10.0, &mut rng);
        let mut g = G::new();
        let v = g.constant(x);
        let p = g.log_softmax(v).unwrap();
        assert!(g.value(p).unwrap().all_finite());
    }
}
