use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(
        Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[3, 4, 5], &mut rng));
    for axis in 0..3 {
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        let shape = v.shape().to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis])
                    .map(|j| v.data()[o * shape[axis] * inner + j * inner + i])
                    .sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng);
    let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut tape = Tape::new();
    let (i, av) = (tape.constant(eye), tape.constant(a.clone()));
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn cross_entropy_confident_and_ignored() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(t(&[1, 2], &[10.0, -10.0]));
    let loss = tape.cross_entropy_with_ignore(logits, &[0], 99).unwrap();
    // -log softmax = log(1 + e^-20)
    let expected = (1.0 + (-20.0f64).exp()).ln();
    assert!(tape.value(loss).item() < 1e-4);
    assert!((tape.value(loss).item() - expected).abs() < 1e-15);

    let ignored = tape.cross_entropy_with_ignore(logits, &[99], 99).unwrap();
    assert_eq!(tape.value(ignored).item(), 0.0);
}

#[test]
fn cross_entropy_ignored_rows_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 1.0, -1.0, 0.5]), true);
    let loss = tape.cross_entropy_with_ignore(logits, &[2, 0], 0).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(logits).unwrap();
    assert_eq!(&g[3..], &[0.0, 0.0, 0.0]);
    assert!(g[..3].iter().any(|&x| x != 0.0));
}

#[test]
fn backward_of_mean_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
    let m = tape.mean(x);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn reusing_a_tensor_doubles_its_gradient() {
    let x0 = t(&[3], &[0.3, -1.2, 2.0]);
    let w = t(&[3], &[1.5, 2.0, -0.5]);

    let mut once = Tape::new();
    let x = once.leaf(x0.clone(), true);
    let wv = once.constant(w.clone());
    let p = once.mul(x, wv).unwrap();
    let s = once.sum(p);
    once.backward(s).unwrap();

    let mut twice = Tape::new();
    let x2 = twice.leaf(x0, true);
    let wv = twice.constant(w);
    let p1 = twice.mul(x2, wv).unwrap();
    let p2 = twice.mul(x2, wv).unwrap();
    let both = twice.add(p1, p2).unwrap();
    let s = twice.sum(both);
    twice.backward(s).unwrap();

    let g1 = once.grad(x).unwrap();
    let g2 = twice.grad(x2).unwrap();
    for (a, b) in g1.iter().zip(g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn rms_normalize_has_unit_rms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[4, 16], &mut rng));
    let y = tape.rms_normalize(x, 1, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5);
    }
}

#[test]
fn dropout_scales_kept_entries_and_is_identity_at_zero_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1000], 1.0));
    let same = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(same, x);
    let y = tape.dropout(x, 0.5, &mut rng).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    let kept = v.iter().filter(|&&e| e > 0.0).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn gradcheck_sum_of_squares_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[7], &mut rng);
    let err = finite_difference_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_of_constant_function_is_zero() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let err = finite_difference_check(
        |tape, x| {
            let z = tape.scale(x, 0.0);
            Ok(tape.sum(z))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-8);
}

/// Reduces an arbitrary tensor to a scalar with position-dependent weights
/// so every output element influences the check.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::error::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn check(name: &str, shape: &[usize], seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> crate::error::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let err = finite_difference_check(
        |tape, x| {
            let y = f(tape, x)?;
            weighted_sum(tape, y, seed + 1000)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{name}: relative error {err}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let other3 = random(&[2, 3, 4], &mut rng);
    let other_b = random(&[3, 1], &mut rng);
    let rhs = random(&[4, 5], &mut rng);
    let batched_rhs = random(&[2, 4, 3], &mut rng);
    let table_ids = [2usize, 0, 2, 1];

    check("add", &[2, 3, 4], 1, |tp, x| {
        let o = tp.constant(other3.clone());
        tp.add(x, o)
    });
    check("add broadcast", &[2, 3, 4], 2, |tp, x| {
        let o = tp.leaf(other_b.clone(), true);
        let y = tp.add(x, o)?;
        tp.add(y, x)
    });
    check("multiply", &[2, 3, 4], 3, |tp, x| {
        let o = tp.constant(other3.clone());
        let y = tp.mul(x, o)?;
        tp.mul(y, x)
    });
    check("multiply broadcast lhs", &[3, 1], 4, |tp, x| {
        let o = tp.constant(other3.clone());
        tp.mul(o, x)
    });
    check("scale", &[5], 5, |tp, x| Ok(tp.scale(x, -1.7)));
    check("matmul shared rhs", &[2, 3, 4], 6, |tp, x| {
        let r = tp.constant(rhs.clone());
        tp.matmul(x, r)
    });
    check("matmul rhs grad", &[4, 5], 7, |tp, x| {
        let l = tp.constant(other3.clone());
        tp.matmul(l, x)
    });
    check("matmul batched", &[2, 3, 4], 8, |tp, x| {
        let r = tp.constant(batched_rhs.clone());
        tp.matmul(x, r)
    });
    check("matmul batched rhs", &[2, 4, 3], 9, |tp, x| {
        let l = tp.constant(other3.clone());
        tp.matmul(l, x)
    });
    check("transpose", &[2, 3, 4], 10, |tp, x| tp.transpose(x));
    check("permute rank 4", &[2, 3, 2, 2], 11, |tp, x| tp.permute(x, &[0, 2, 1, 3]));
    check("reshape", &[2, 3, 4], 12, |tp, x| tp.reshape(x, &[6, 4]));
    check("concat", &[2, 3, 4], 13, |tp, x| {
        let o = tp.constant(other3.clone());
        tp.concat(&[x, o, x], 1)
    });
    check("embedding_gather", &[3, 4], 14, |tp, x| tp.embedding_gather(x, &table_ids, &[2, 2]));
    check("softmax last axis", &[2, 3, 4], 15, |tp, x| tp.softmax(x, 2));
    check("softmax middle axis", &[2, 3, 4], 16, |tp, x| tp.softmax(x, 1));
    check("rms_normalize", &[2, 3, 4], 17, |tp, x| tp.rms_normalize(x, 2, 1e-6));
    check("rms_normalize axis 0", &[3, 2, 2, 2], 18, |tp, x| tp.rms_normalize(x, 0, 1e-6));
    check("relu", &[2, 3, 4], 19, |tp, x| Ok(tp.relu(x)));
    check("cross_entropy", &[4, 5], 20, |tp, x| tp.cross_entropy_with_ignore(x, &[1, 0, 4, 2], 0));
    check("dropout", &[2, 3, 4], 21, |tp, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        tp.dropout(x, 0.3, &mut rng)
    });
    check("mean", &[2, 3, 4], 22, |tp, x| {
        let sq = tp.mul(x, x)?;
        Ok(tp.mean(sq))
    });
}

mod properties {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn softmax_is_a_distribution(data in proptest::collection::vec(-30.0f64..30.0, 1..24)) {
            let n = data.len();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_vec(data));
            let y = tape.softmax(x, 0).unwrap();
            let v = tape.value(y).data();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(v.iter().all(|&p| p >= 0.0 && p <= 1.0));
            prop_assert_eq!(v.len(), n);
        }

        #[test]
        fn rank4_permute_then_inverse_is_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random(&[2, 3, 1, 4], &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let y = tape.permute(x, &[3, 1, 0, 2]).unwrap();
            let z = tape.permute(y, &[2, 1, 3, 0]).unwrap();
            prop_assert_eq!(tape.value(z), &x0);
        }
    }
}
