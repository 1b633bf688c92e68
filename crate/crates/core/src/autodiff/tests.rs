use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(i2.matmul(&m).unwrap(), m);

    let a = Tensor::from_rows(&[&[1.0, 2.0]]);
    let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_structured() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    // Frozen from central differences with h = 1e-6: d sum(A·I)/dA = ones.
    let a = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
    let b = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap().get(av);

    let h = 1e-6;
    for j in 0..4 {
        let mut p = a.clone();
        p.data_mut()[j] += h;
        let plus = p.matmul(&b).unwrap().sum();
        p.data_mut()[j] -= 2.0 * h;
        let minus = p.matmul(&b).unwrap().sum();
        let fd = (plus - minus) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-8);
        assert!((g.data()[j] - fd).abs() < 1e-8);
    }
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]]));
    assert_eq!(s.data(), &[0.5, 0.5]);

    let s = softmax_rows(&Tensor::from_rows(&[&[1f64.ln(), 3f64.ln()]]));
    // exp(0) = 1, exp(ln 3) = 3, normalized by 4
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);

    let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0]]));
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn log_sum_exp_examples() {
    assert!((log_sum_exp(&Tensor::vector(vec![0.0, 0.0])) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(log_sum_exp(&Tensor::vector(vec![5.0])), 5.0);

    let mut tape = Tape::new();
    let y = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let l = tape.log_sum_exp(y);
    assert_eq!(tape.backward(l).unwrap().get(y).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[3, 4]));
    let l = tape.cross_entropy(logits, &[0, 1, 3]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let confident = tape.constant(Tensor::from_rows(&[&[5.0, 0.0, 0.0, 0.0]]));
    let l = tape.cross_entropy(confident, &[0]).unwrap();
    assert!(tape.value(l).item() < 4f64.ln());

    let bad = tape.cross_entropy(confident, &[4]);
    assert!(matches!(bad, Err(AutodiffError::IndexOutOfRange { .. })));
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_tensor(&mut rng, 3, 5);
    let targets = [4usize, 0, 2];

    // independent scalar implementation: -Σ log p / T
    let mut oracle = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row: Vec<f64> = (0..5).map(|j| logits.get(t, j)).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        oracle -= (row[y].exp() / z).ln();
    }
    oracle /= 3.0;

    let mut tape = Tape::new();
    let lv = tape.constant(logits);
    let l = tape.cross_entropy(lv, &targets).unwrap();
    assert!((tape.value(l).item() - oracle).abs() < 1e-13);
}

#[test]
fn backward_trivial_cases() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
    let s = tape.sum(p);
    assert_eq!(tape.backward(s).unwrap().get(p).data(), &[1.0, 1.0, 1.0]);

    let z = tape.scale(p, 0.0);
    let s = tape.sum(z);
    assert_eq!(tape.backward(s).unwrap().get(p).data(), &[0.0, 0.0, 0.0]);

    // unreachable parameters read back as zeros
    let q = tape.param(Tensor::zeros(&[2, 2]));
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(q), Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(p), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn grad_check_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_tensor(&mut rng, 2, 3);
    let err = grad_check(std::slice::from_ref(&p), 1e-5, None, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(err < 1e-8, "quadratic err {err}");

    let err = grad_check(&[p], 1e-5, None, |t, _| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_softmax_cross_entropy_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, 4, 3);
    let w = random_tensor(&mut rng, 3, 6);
    let err = grad_check(&[x, w], 1e-5, None, |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let p = t.softmax_rows(z);
        let l = t.scale(p, 3.0);
        t.cross_entropy(l, &[0, 5, 2, 1])
    })
    .unwrap();
    assert!(err < 1e-4, "chain err {err}");
}

/// Every registered operation, checked at 100 random points.
#[test]
fn every_op_matches_finite_differences() {
    type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<(usize, usize)>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            Box::new(|t, v| {
                let c = t.matmul(v[0], v[1])?;
                Ok(t.sum(c))
            }),
            vec![(3, 4), (4, 2)],
        ),
        (
            "add",
            Box::new(|t, v| {
                let c = t.add(v[0], v[1])?;
                let s = t.mul(c, c)?;
                Ok(t.sum(s))
            }),
            vec![(3, 4), (3, 4)],
        ),
        (
            "mul",
            Box::new(|t, v| {
                let c = t.mul(v[0], v[1])?;
                Ok(t.sum(c))
            }),
            vec![(2, 3), (2, 3)],
        ),
        (
            "scale",
            Box::new(|t, v| {
                let c = t.scale(v[0], -2.5);
                let s = t.mul(c, c)?;
                Ok(t.mean(s))
            }),
            vec![(2, 3)],
        ),
        (
            "gelu",
            Box::new(|t, v| {
                let c = t.gelu(v[0]);
                Ok(t.sum(c))
            }),
            vec![(3, 3)],
        ),
        (
            "softmax_rows",
            Box::new(|t, v| {
                let p = t.softmax_rows(v[0]);
                let q = t.mul(p, v[1])?;
                Ok(t.sum(q))
            }),
            vec![(3, 4), (3, 4)],
        ),
        ("log_sum_exp", Box::new(|t, v| Ok(t.log_sum_exp(v[0]))), vec![(1, 5)]),
        ("cross_entropy", Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3])), vec![(3, 4)]),
        (
            "embedding",
            Box::new(|t, v| {
                let e = t.embedding(v[0], &[Some(2), None, Some(0), Some(2)])?;
                let q = t.mul(e, v[1])?;
                Ok(t.sum(q))
            }),
            vec![(3, 2), (4, 2)],
        ),
        (
            "concat_cols",
            Box::new(|t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let q = t.mul(c, c)?;
                Ok(t.sum(q))
            }),
            vec![(2, 3), (2, 1)],
        ),
        (
            "concat_rows",
            Box::new(|t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let q = t.gelu(c);
                Ok(t.sum(q))
            }),
            vec![(2, 3), (1, 3)],
        ),
        (
            "rows",
            Box::new(|t, v| {
                let c = t.rows(v[0], 1, 2)?;
                let q = t.mul(c, c)?;
                Ok(t.sum(q))
            }),
            vec![(4, 3)],
        ),
        (
            "transpose",
            Box::new(|t, v| {
                let c = t.transpose(v[0]);
                let q = t.matmul(c, v[1])?;
                Ok(t.sum(q))
            }),
            vec![(3, 2), (3, 2)],
        ),
        (
            "scale_rows",
            Box::new(|t, v| {
                let c = t.scale_rows(v[0], v[1])?;
                let q = t.gelu(c);
                Ok(t.sum(q))
            }),
            vec![(3, 4), (3, 1)],
        ),
        (
            "column",
            Box::new(|t, v| {
                let c = t.column(v[0], 1)?;
                let q = t.mul(c, c)?;
                Ok(t.sum(q))
            }),
            vec![(3, 4)],
        ),
        (
            "mean_rows",
            Box::new(|t, v| {
                let c = t.mean_rows(v[0]);
                let q = t.mul(c, c)?;
                Ok(t.sum(q))
            }),
            vec![(3, 4)],
        ),
        (
            "topk_gate",
            Box::new(|t, v| {
                let p = t.softmax_rows(v[0]);
                let g = t.topk_gate(p, &[true, false, true, false, true, true])?;
                let q = t.mul(g, v[1])?;
                Ok(t.sum(q))
            }),
            vec![(2, 3), (2, 3)],
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, f, shapes) in &cases {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let params: Vec<Tensor> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
            worst = worst.max(grad_check(&params, 1e-5, None, |t, v| f(t, v)).unwrap());
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, 5, 4);
    let w = random_tensor(&mut rng, 4, 7);
    let run = || {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let z = t.matmul(xv, wv).unwrap();
        let a = t.gelu(z);
        let l = t.cross_entropy(a, &[0, 1, 2, 3, 6]).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(xv), g.get(wv))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.data().iter().zip(a2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = row.len();
        let s = softmax_rows(&Tensor::matrix(1, n, row).unwrap());
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_sum_exp_shift_invariance(row in proptest::collection::vec(-30.0f64..30.0, 1..10), c in -100.0f64..100.0) {
        let base = log_sum_exp(&Tensor::vector(row.clone()));
        let shifted = log_sum_exp(&Tensor::vector(row.iter().map(|v| v + c).collect()));
        prop_assert!((shifted - base - c).abs() <= 1e-10);
    }
}
