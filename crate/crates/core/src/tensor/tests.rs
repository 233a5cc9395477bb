use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradsuite::op_cases;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(&t(&[2, 3], &[1.5, -2.0, 3.0, 0.25, 7.0, -1.0]));
    let out = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(out), tape.value(b));

    let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.constant(&t(&[2, 1], &[5.0, 6.0]));
    let out = tape.matmul(a, c).unwrap();
    assert_eq!(tape.shape(out), &[2, 1]);
    assert_eq!(tape.value(out), &[17.0, 39.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.scalar_value(y), 0.5);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = tape.constant(&Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, c).is_err());
    assert!(matches!(tape.softmax(a, 2), Err(Error::InvalidAxis { .. })));
    let neg = tape.constant(&t(&[2], &[1.0, -1.0]));
    assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
    assert!(matches!(tape.sqrt(neg), Err(Error::Domain { .. })));
    let nan = tape.constant(&t(&[1], &[f64::NAN]));
    assert!(tape.log(nan).is_err());
    assert!(matches!(tape.backward(a), Err(Error::NonScalarRoot(_))));
    assert!(tape.step_quantize(a, c).is_err());
}

#[test]
fn backward_examples() {
    // sum(3x) -> 3
    let mut tape = Tape::new();
    let x = tape.param(&t(&[4], &[1.0, -2.0, 0.5, 9.0]));
    let y = tape.scale(x, 3.0);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 3.0, 3.0, 3.0]);

    // sum(x*x) at [1,2] -> [2,4]
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

    // constant root -> zero grads everywhere
    let mut tape = Tape::new();
    let x = tape.param(&t(&[3], &[1.0, 2.0, 3.0]));
    let c = tape.constant(&Tensor::scalar(5.0));
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get_or_zeros(x, 3), vec![0.0; 3]);
}

#[test]
fn fan_out_accumulates() {
    // f = sum(exp(x)) + sum(3x): x used twice
    let x0 = t(&[3], &[0.1, -0.4, 1.2]);
    let mut tape = Tape::new();
    let x = tape.param(&x0);
    let e = tape.exp(x);
    let a = tape.sum(e);
    let l = tape.scale(x, 3.0);
    let b = tape.sum(l);
    let f = tape.add(a, b).unwrap();
    let g = tape.backward(f).unwrap();
    for (gi, xi) in g.get(x).unwrap().iter().zip(x0.data()) {
        assert!((gi - (xi.exp() + 3.0)).abs() < 1e-15);
    }
}

#[test]
fn long_tail_slope_probe_points() {
    let expect = [
        (0.0, 2.0),
        (0.2, 1.2),
        (-0.2, 1.2),
        (0.4, 0.4),
        (-0.4, 0.4),
        (0.7, 0.4),
        (-0.7, 0.4),
        (1.0, 0.4),
        (-1.0, 0.4),
        (1.5, 0.0),
        (-1.5, 0.0),
    ];
    for (u, h) in expect {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![u]));
        let th = tape.param(&Tensor::vector(vec![0.0]));
        let q = tape.step_quantize(x, th).unwrap();
        let expected_fwd = if u >= 0.0 { 1.0 } else { 0.0 };
        assert_eq!(tape.value(q), &[expected_fwd]);
        let s = tape.sum(q);
        let g = tape.backward(s).unwrap();
        assert!((g.get(x).unwrap()[0] - h).abs() < 1e-15, "u={u}");
        assert!((g.get(th).unwrap()[0] + h).abs() < 1e-15, "u={u}");
    }
}

#[test]
fn step_quantize_tie_is_one() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 2], &[0.3, -0.1, 2.0, 0.0]));
    let q = tape.step_quantize(x, x).unwrap();
    assert_eq!(tape.value(q), &[1.0; 4]);
}

#[test]
fn gradcheck_constant_is_exact() {
    let x = t(&[3], &[0.3, 0.1, -0.2]);
    let r = finite_difference_check(|tape, _| Ok(tape.constant(&Tensor::scalar(2.5))), &x, 1e-5).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn every_op_passes_finite_differences_on_ten_seeds() {
    for (name, f) in op_cases() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[12], -1.0, 1.0, &mut rng);
            let r = finite_difference_check(f, &x, 1e-5).unwrap();
            assert!(
                r.max_rel_error < 1e-4,
                "{name} seed {seed}: rel err {} at {}",
                r.max_rel_error,
                r.worst_index
            );
        }
    }
}

#[test]
fn replay_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::randn(&[12], 1.0, &mut rng);
        let mut out = Vec::new();
        for (_, f) in op_cases() {
            let mut tape = Tape::new();
            let v = tape.param(&x);
            let root = f(&mut tape, v).unwrap();
            let g = tape.backward(root).unwrap();
            out.push(tape.scalar_value(root).to_bits());
            out.extend(g.get_or_zeros(v, 12).iter().map(|v| v.to_bits()));
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_variance_two_sample_formula() {
    let (a, b) = (0.7, -1.9);
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3, 1, 1], &[a, 100.0, b]));
    let v = tape
        .masked_variance(x, Arc::new(vec![true, false, true]))
        .unwrap();
    let m = (a + b) / 2.0;
    let expect = ((a - m) * (a - m) + (b - m) * (b - m)) / 2.0;
    assert!((tape.value(v)[0] - expect).abs() < 1e-15);
}

proptest! {
    #[test]
    fn step_forward_is_binary(xs in proptest::collection::vec(-3.0f64..3.0, 1..40),
                              shift in -1.0f64..1.0) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(xs.clone()));
        let th = tape.constant(&Tensor::full(&[n], shift));
        let q = tape.step_quantize(x, th).unwrap();
        for (qi, xi) in tape.value(q).iter().zip(&xs) {
            prop_assert!(*qi == 0.0 || *qi == 1.0);
            prop_assert_eq!(*qi == 1.0, xi - shift >= 0.0);
        }
    }

    #[test]
    fn matmul_matches_naive_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(&a), tape.constant(&b));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                prop_assert_eq!(tape.value(c)[i * n + j].to_bits(), acc.to_bits());
            }
        }
    }
}
