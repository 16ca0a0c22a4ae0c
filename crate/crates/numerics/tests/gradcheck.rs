//! Central finite differences against the tape's analytic gradients, one op
//! at a time and for a stacked composite.

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sskgqa_numerics::{softmax, Tape, Tensor, Var};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output entry contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn check<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_sum(&mut tape, out, 99);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, out, 99);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, numeric) < REL_TOL,
                "{name}: input {k} entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 3, 4);
    let m = random(&mut rng, 4, 2);
    let r = random(&mut rng, 1, 4);
    let pos = a.map(|x| x.abs() + 0.5);
    // keep relu inputs away from the kink
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });

    check("add", &[a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check("sub", &[a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    check("mul", &[a.clone(), b.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check("matmul", &[a.clone(), m.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check("scale", std::slice::from_ref(&a), |t, v| {
        t.scale(v[0], -2.5)
    });
    check("add_scalar", std::slice::from_ref(&a), |t, v| {
        t.add_scalar(v[0], 1.5)
    });
    check("add_row", &[a.clone(), r.clone()], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
    check("mean_rows", std::slice::from_ref(&a), |t, v| {
        t.mean_rows(v[0]).unwrap()
    });
    check("row_sum", std::slice::from_ref(&a), |t, v| t.row_sum(v[0]));
    check("softmax", std::slice::from_ref(&a), |t, v| t.softmax(v[0]));
    check("log_softmax", std::slice::from_ref(&a), |t, v| {
        t.log_softmax(v[0])
    });
    check("log", std::slice::from_ref(&pos), |t, v| t.log(v[0]));
    check("relu", std::slice::from_ref(&away), |t, v| t.relu(v[0]));
    check("log_sigmoid", &[a.map(|x| 4.0 * x)], |t, v| {
        t.log_sigmoid(v[0])
    });
    check("sin", std::slice::from_ref(&a), |t, v| t.sin(v[0]));
    check("cos", std::slice::from_ref(&a), |t, v| t.cos(v[0]));
    check("l2norm", std::slice::from_ref(&a), |t, v| t.l2norm(v[0]));
    check("euclid", &[a.clone(), b.clone()], |t, v| {
        t.euclid(v[0], v[1]).unwrap()
    });
    check("row_norm", std::slice::from_ref(&a), |t, v| {
        t.row_norm(v[0])
    });
    check("split_halves.lo", std::slice::from_ref(&a), |t, v| {
        t.split_halves(v[0]).unwrap().0
    });
    check("split_halves.hi", std::slice::from_ref(&a), |t, v| {
        t.split_halves(v[0]).unwrap().1
    });
    check("concat_halves", &[a.clone(), b.clone()], |t, v| {
        t.concat_halves(v[0], v[1]).unwrap()
    });
    check("complex_mul", &[a.clone(), b.clone()], |t, v| {
        t.complex_mul(v[0], v[1]).unwrap()
    });
    check("transpose", std::slice::from_ref(&a), |t, v| {
        t.transpose(v[0])
    });
    check("slice_cols", std::slice::from_ref(&a), |t, v| {
        t.slice_cols(v[0], 1, 2).unwrap()
    });
    check(
        "concat_cols",
        &[a.clone(), m.transpose().slice_cols(0, 3).transpose()],
        |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
    );
    check("gather_rows", std::slice::from_ref(&a), |t, v| {
        t.gather_rows(v[0], &[2, 0, 2]).unwrap()
    });
    check("pick_cols", std::slice::from_ref(&a), |t, v| {
        t.pick_cols(v[0], &[3, 0, 1]).unwrap()
    });
    check("dropout", std::slice::from_ref(&a), |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.5, &mut rng)
    });
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let x = random(&mut rng, 5, 6);
        let w1 = random(&mut rng, 6, 8);
        let b1 = random(&mut rng, 1, 8);
        let w2 = random(&mut rng, 8, 8);
        let w3 = random(&mut rng, 8, 3);
        check(
            &format!("composite {trial}"),
            &[x, w1, b1, w2, w3],
            |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let h = t.log_sigmoid(h);
                let h = t.matmul(h, v[3]).unwrap();
                let h = t.complex_mul(h, h).unwrap();
                let h = t.matmul(h, v[4]).unwrap();
                let pooled = t.mean_rows(h).unwrap();
                t.log_softmax(pooled)
            },
        );
    }
}

#[test]
fn softmax_sums_to_one_and_ignores_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x = random(&mut rng, 4, 7).map(|v| 30.0 * v);
        let s = softmax(&x);
        for r in 0..4 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shift: f64 = rng.random_range(-50.0..50.0);
        let shifted = softmax(&x.map(|v| v + shift));
        for (p, q) in s.data().iter().zip(shifted.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn complex_mul_agrees_with_num_complex(
        pairs in proptest::collection::vec(((-5.0f64..5.0, -5.0f64..5.0), (-5.0f64..5.0, -5.0f64..5.0)), 1..16)
    ) {
        let h = pairs.len();
        let mut a = vec![0.0; 2 * h];
        let mut b = vec![0.0; 2 * h];
        for (i, ((ar, ai), (br, bi))) in pairs.iter().enumerate() {
            a[i] = *ar; a[h + i] = *ai; b[i] = *br; b[h + i] = *bi;
        }
        let mut t = Tape::new();
        let va = t.constant(Tensor::row_vector(a));
        let vb = t.constant(Tensor::row_vector(b));
        let out = t.complex_mul(va, vb).unwrap();
        let got = t.value(out).data();
        for (i, ((ar, ai), (br, bi))) in pairs.iter().enumerate() {
            let z = Complex64::new(*ar, *ai) * Complex64::new(*br, *bi);
            prop_assert!((got[i] - z.re).abs() < 1e-12);
            prop_assert!((got[h + i] - z.im).abs() < 1e-12);
        }
    }
}
