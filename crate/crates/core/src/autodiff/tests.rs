use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn add_rejects_non_suffix_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn softmax_uniform() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![3]));
    let s = tape.softmax(v);
    for &x in tape.value(s).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(vec![1, 8], 4.2));
    let n = tape.layer_norm(v);
    assert!(tape.value(n).data().iter().all(|&x| x == 0.0));
}

#[test]
fn square_derivative() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.sum_square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item().unwrap(), 6.0);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let v = tape.leaf(random(&mut rng, &[7]));
    let s = tape.softmax(v);
    let total = tape.sum(s);
    let g = tape.backward(total).unwrap().wrt(v);
    assert!(g.max_abs() < 1e-15, "{g:?}");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(tape.backward(v), Err(crate::Error::NonScalar(_))));
}

#[test]
fn unrelated_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
    let y = tape.sum_square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros(vec![3]));
}

#[test]
fn finite_diff_square() {
    let err = finite_diff_check(
        |p| {
            let x = p.data()[0];
            Ok((x * x, Tensor::from_vec(vec![2.0 * x])))
        },
        &Tensor::from_vec(vec![2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn finite_diff_constant() {
    let err = finite_diff_check(
        |p| Ok((3.5, Tensor::zeros(p.shape().to_vec()))),
        &Tensor::from_vec(vec![1.0, -2.0]),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn finite_diff_rejects_non_finite() {
    let res = finite_diff_check(
        |p| Ok((f64::NAN, Tensor::zeros(p.shape().to_vec()))),
        &Tensor::from_vec(vec![1.0]),
        1e-5,
    );
    assert!(matches!(res, Err(crate::Error::NonFinite(_))));
}

/// Evaluates `build` on a fresh tape with `x` as the only leaf and returns
/// the scalar output and its gradient.
fn eval_grad(
    x: &Tensor,
    build: &dyn Fn(&mut Tape, Var) -> crate::Result<Var>,
) -> crate::Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v)?;
    let g = tape.backward(out)?;
    Ok((tape.value(out).item()?, g.wrt(v)))
}

fn check_op(name: &str, shape: &[usize], build: &dyn Fn(&mut Tape, Var) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..100 {
        let x = random(&mut rng, shape);
        let err = finite_diff_check(|p| eval_grad(p, build), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{name} trial {trial}: rel err {err}");
    }
}

/// Fixed random weights so the op under test sees a nontrivial cotangent.
fn weights(seed: u64, shape: &[usize]) -> Tensor {
    random(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

#[test]
fn gradients_match_finite_differences_per_op() {
    check_op("matmul_lhs", &[3, 4], &|tp, x| {
        let w = tp.constant(weights(1, &[4, 5]));
        let y = tp.matmul(x, w)?;
        Ok(tp.sum_square(y))
    });
    check_op("matmul_rhs", &[4, 2], &|tp, x| {
        let a = tp.constant(weights(2, &[3, 4]));
        let y = tp.matmul(a, x)?;
        Ok(tp.sum_square(y))
    });
    check_op("batch_matmul", &[2, 3, 4], &|tp, x| {
        let b = tp.constant(weights(3, &[2, 4, 3]));
        let y = tp.batch_matmul(x, b, false)?;
        let z = tp.batch_matmul(y, x, false)?;
        Ok(tp.sum_square(z))
    });
    check_op("batch_matmul_trans", &[2, 3, 4], &|tp, x| {
        let y = tp.batch_matmul(x, x, true)?;
        Ok(tp.sum_square(y))
    });
    check_op("add_broadcast", &[4], &|tp, x| {
        let a = tp.constant(weights(4, &[3, 4]));
        let y = tp.add(a, x)?;
        let w = tp.constant(weights(5, &[3, 4]));
        let z = tp.mul(y, w)?;
        Ok(tp.sum_square(z))
    });
    check_op("sub_mul", &[3, 4], &|tp, x| {
        let w = tp.constant(weights(6, &[4]));
        let y = tp.mul(x, w)?;
        let z = tp.sub(y, x)?;
        let q = tp.mul(z, x)?;
        Ok(tp.sum(q))
    });
    check_op("div", &[6], &|tp, x| {
        let shifted = tp.constant(Tensor::full(vec![6], 3.0));
        let den = tp.add(x, shifted)?;
        let num = tp.constant(weights(7, &[6]));
        let y = tp.div(num, den)?;
        let z = tp.div(x, den)?;
        let s = tp.add(y, z)?;
        Ok(tp.sum_square(s))
    });
    check_op("scale", &[5], &|tp, x| {
        let y = tp.scale(x, -2.5);
        Ok(tp.mean_square(y))
    });
    check_op("split_concat", &[2, 6], &|tp, x| {
        let parts = tp.split_last(x, &[2, 3, 1])?;
        let w = tp.constant(weights(8, &[2, 3]));
        let p1 = tp.mul(parts[1], w)?;
        let y = tp.concat_last(&[parts[2], p1, parts[0], parts[1]])?;
        let w2 = tp.constant(weights(9, &[2, 9]));
        let z = tp.mul(y, w2)?;
        Ok(tp.sum_square(z))
    });
    check_op("reshape_permute", &[2, 3, 4], &|tp, x| {
        let y = tp.reshape(x, &[2, 3, 2, 2])?;
        let p = tp.permute(y, &[0, 2, 1, 3])?;
        let w = tp.constant(weights(10, &[2, 2, 3, 2]));
        let z = tp.mul(p, w)?;
        Ok(tp.sum_square(z))
    });
    check_op("repeat_rows", &[2, 3], &|tp, x| {
        let y = tp.repeat_rows(x, 4)?;
        let w = tp.constant(weights(11, &[2, 4, 3]));
        let z = tp.mul(y, w)?;
        Ok(tp.sum_square(z))
    });
    check_op("softmax", &[3, 5], &|tp, x| {
        let s = tp.softmax(x);
        let w = tp.constant(weights(12, &[3, 5]));
        let z = tp.mul(s, w)?;
        Ok(tp.sum(z))
    });
    check_op("layer_norm", &[4, 6], &|tp, x| {
        let n = tp.layer_norm(x);
        let w = tp.constant(weights(13, &[6]));
        let z = tp.mul(n, w)?;
        Ok(tp.sum_square(z))
    });
    check_op("gelu", &[16], &|tp, x| {
        let y = tp.gelu(x);
        let w = tp.constant(weights(14, &[16]));
        let z = tp.mul(y, w)?;
        Ok(tp.sum(z))
    });
    check_op("embedding", &[5, 3], &|tp, x| {
        let e = tp.embedding(x, &[4, 0, 4, 2])?;
        let w = tp.constant(weights(15, &[4, 3]));
        let z = tp.mul(e, w)?;
        Ok(tp.sum_square(z))
    });
    check_op("mean_square", &[64], &|tp, x| Ok(tp.mean_square(x)));
}

#[test]
fn two_layer_perceptron_mse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w1 = random(&mut rng, &[4, 8]);
    let b1 = random(&mut rng, &[8]);
    let w2 = random(&mut rng, &[8, 2]);
    let target = random(&mut rng, &[5, 2]);
    let input = random(&mut rng, &[5, 4]);
    let build = |tp: &mut Tape, x: Var| -> crate::Result<Var> {
        let (w1, b1, w2, target) = (
            tp.constant(w1.clone()),
            tp.constant(b1.clone()),
            tp.constant(w2.clone()),
            tp.constant(target.clone()),
        );
        let h = tp.matmul(x, w1)?;
        let h = tp.add(h, b1)?;
        let h = tp.gelu(h);
        let y = tp.matmul(h, w2)?;
        let r = tp.sub(y, target)?;
        Ok(tp.mean_square(r))
    };
    let err = finite_diff_check(|p| eval_grad(p, &build), &input, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");

    // Gradient with respect to the first weight matrix as well.
    let build_w = |tp: &mut Tape, w: Var| -> crate::Result<Var> {
        let x = tp.constant(input.clone());
        let w2 = tp.constant(w2.clone());
        let target = tp.constant(target.clone());
        let h = tp.matmul(x, w)?;
        let h = tp.gelu(h);
        let y = tp.matmul(h, w2)?;
        let r = tp.sub(y, target)?;
        Ok(tp.mean_square(r))
    };
    let err = finite_diff_check(|p| eval_grad(p, &build_w), &w1, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 8]);
    let build = |tp: &mut Tape, v: Var| -> crate::Result<Var> {
        let n = tp.layer_norm(v);
        let s = tp.softmax(n);
        let g = tp.gelu(s);
        Ok(tp.mean_square(g))
    };
    let a = eval_grad(&x, &build).unwrap();
    let b = eval_grad(&x, &build).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], v).unwrap());
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(v in prop::collection::vec(-1e3f64..1e3, 16)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 8], v).unwrap());
        let n = tape.layer_norm(x);
        for row in tape.value(n).data().chunks(8) {
            prop_assert!((row.iter().sum::<f64>() / 8.0).abs() <= 1e-10);
        }
    }
}
