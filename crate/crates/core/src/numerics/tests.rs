use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const TRIALS: u64 = 20;
const PRIMITIVE_TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Contracts an output with fixed random weights so that no coordinate of
/// the gradient is structurally zero.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check_primitive<F>(name: &str, shapes: &[&[usize]], out_shape: &[usize], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
        let weights = randn(out_shape, &mut rng);
        // Subtracting the unperturbed output leaves the gradient unchanged
        // and keeps the loss near zero, which lowers the roundoff floor of
        // the central difference.
        let base = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let y = f(&mut tape, &vars).unwrap();
            tape.value(y).clone()
        };
        let report = gradcheck(
            |tape, vars| {
                let y = f(tape, vars)?;
                let b = tape.leaf(base.map(|v| -v));
                let centered = tape.add(y, b)?;
                project(tape, centered, &weights)
            },
            &params,
            EPS,
        )
        .unwrap();
        if std::env::var("GRADCHECK_VERBOSE").is_ok() {
            eprintln!("{name} {trial}: {report:?}");
        }
        assert!(
            report.max_rel_error < PRIMITIVE_TOL,
            "{name} trial {trial}: {report:?}"
        );
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0f64));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn identity_gradcheck_is_exact() {
    let x = Tensor::from_vec(&[3], vec![0.5f64, -1.0, 2.0]).unwrap();
    // A power-of-two step keeps the perturbed points exact.
    let r = gradcheck(|t, v| t.sum(v[0]), &[x], 1.0 / 1024.0).unwrap();
    assert!(r.max_rel_error < 1e-12, "{r:?}");
}

#[test]
fn untouched_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
    let unused = tape.leaf(Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
    let y = tape.sum(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f32>::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_forward_names_the_primitive() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1], vec![f64::MAX]).unwrap());
    let err = tape.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }), "{err}");
}

#[test]
fn non_finite_gradient_names_the_primitive() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[1], vec![1e200f64]).unwrap());
    let y = tape.leaf(Tensor::from_vec(&[1], vec![1e200f64]).unwrap());
    let p = tape.mul(x, y).unwrap_err();
    assert!(matches!(p, Error::NonFinite { op: "mul" }));

    // Forward stays finite; the gradient of `b` overflows.
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(&[1], vec![1e200f64]).unwrap());
    let b = tape.leaf(Tensor::from_vec(&[1], vec![1e-200f64]).unwrap());
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let l = tape.scale(s, 1e200).unwrap();
    let err = tape.backward(l).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }), "{err}");
}

#[test]
fn gradcheck_elementwise_primitives() {
    check_primitive("add", &[&[3, 4], &[3, 4]], &[3, 4], |t, v| t.add(v[0], v[1]));
    check_primitive("mul", &[&[3, 4], &[3, 4]], &[3, 4], |t, v| t.mul(v[0], v[1]));
    check_primitive("scale", &[&[5]], &[5], |t, v| t.scale(v[0], -1.7));
    check_primitive("sum", &[&[2, 3]], &[], |t, v| t.sum(v[0]));
    check_primitive("mean", &[&[2, 3]], &[], |t, v| t.mean(v[0]));
    for kind in [ActivationKind::Silu, ActivationKind::SquaredRelu] {
        let act = kind.resolve().unwrap();
        check_primitive("activation", &[&[4, 5]], &[4, 5], move |t, v| {
            t.activation(v[0], act.clone())
        });
    }
}

#[test]
fn gradcheck_matrix_primitives() {
    check_primitive("linear", &[&[4, 3], &[5, 3]], &[4, 5], |t, v| t.linear(v[0], v[1]));
    check_primitive("matmul", &[&[4, 3], &[3, 2]], &[4, 2], |t, v| t.matmul(v[0], v[1]));
    check_primitive("columns", &[&[3, 7]], &[3, 4], |t, v| t.columns(v[0], 2, 4));
    check_primitive("softmax", &[&[3, 6]], &[3, 6], |t, v| t.softmax_rows(v[0]));
    check_primitive("log_softmax_gather", &[&[3, 6]], &[3], |t, v| {
        t.log_softmax_gather(v[0], vec![0, 5, 2])
    });
    check_primitive("rms_norm", &[&[3, 8], &[8]], &[3, 8], |t, v| {
        t.rms_norm(v[0], v[1], 1e-5)
    });
    let positions = Arc::new(vec![0, 1, 2, 7]);
    check_primitive("rope", &[&[4, 8]], &[4, 8], move |t, v| {
        t.rope(v[0], 4, positions.clone(), 10000.0)
    });
    check_primitive("embedding", &[&[5, 3]], &[4, 3], |t, v| {
        t.embedding(v[0], Arc::new(vec![4, 0, 4, 2]))
    });
}

#[test]
fn gradcheck_attention_with_gqa_and_documents() {
    // Two sequences of length 4, two documents in the first one.
    let layout = AttentionLayout {
        seq_len: 4,
        q_heads: 4,
        kv_heads: 2,
        head_dim: 4,
        segments: Arc::new(vec![0, 0, 1, 1, 2, 2, 2, 2]),
    };
    check_primitive(
        "attention",
        &[&[8, 16], &[8, 8], &[8, 8]],
        &[8, 16],
        move |t, v| t.attention(v[0], v[1], v[2], layout.clone()),
    );
}

#[test]
fn gradcheck_sparse_kd() {
    let targets = Arc::new(vec![
        Some(SparseTarget {
            label: 2,
            teacher: Some((vec![1, 4, 2], vec![0.5, 0.2, 0.1])),
        }),
        None,
        Some(SparseTarget {
            label: 0,
            teacher: Some((vec![0], vec![0.9])),
        }),
    ]);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let z = randn(&[3, 6], &mut rng);
        let t2 = targets.clone();
        let r = gradcheck(move |t, v| t.sparse_kd(v[0], t2.clone(), 0.9), &[z], EPS).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}

#[test]
fn two_layer_chain_gradcheck() {
    let act = ActivationKind::Silu.resolve().unwrap();
    check_primitive(
        "two-layer",
        &[&[4, 3], &[6, 3], &[2, 6]],
        &[4, 2],
        move |t, v| {
            let h = t.linear(v[0], v[1])?;
            let a = t.activation(h, act.clone())?;
            t.linear(a, v[2])
        },
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x64: Tensor<f64> = Tensor::randn(&[16, 33], 3.0, &mut rng);
    let y64 = softmax_rows(&x64);
    for r in 0..y64.rows() {
        assert!((y64.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let x32: Tensor<f32> = x64.cast();
    let y32 = softmax_rows(&x32);
    for r in 0..y32.rows() {
        assert!((y32.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn masked_attention_ignores_other_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = AttentionLayout {
        seq_len: 6,
        q_heads: 2,
        kv_heads: 1,
        head_dim: 4,
        segments: Arc::new(vec![0, 0, 0, 1, 1, 1]),
    };
    let q: Tensor<f32> = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let k: Tensor<f32> = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let v: Tensor<f32> = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
        let o = t.attention(qv, kv, vv, layout.clone()).unwrap();
        t.value(o).clone()
    };
    let base = run(&k, &v);
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for r in 0..3 {
        k2.row_mut(r).iter_mut().for_each(|x| *x += 5.0);
        v2.row_mut(r).iter_mut().for_each(|x| *x -= 3.0);
    }
    let pert = run(&k2, &v2);
    for r in 3..6 {
        assert_eq!(base.row(r), pert.row(r));
    }
    assert_ne!(base.row(2), pert.row(2));
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let w = tape.leaf(Tensor::randn(&[8, 8], 1.0, &mut rng));
    let g = tape.leaf(Tensor::full(&[8], 1.0));
    let h = tape.linear(x, w).unwrap();
    let n = tape.rms_norm(h, g, 1e-5).unwrap();
    let s = tape.softmax_rows(n).unwrap();
    let _ = tape.sum(s).unwrap();
    let again = tape.replay().unwrap();
    assert!(tape.values_bit_eq(&again));
}

struct Rounder;

impl FakeQuantizer<f64> for Rounder {
    fn fake_quant(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<bool>)> {
        Ok((x.map(f64::round), vec![false; x.len()]))
    }
}

#[test]
fn piecewise_constant_function_reports_mismatch() {
    // Without a straight-through pass the analytic gradient is zero while a
    // finite difference straddling a rounding boundary is not.
    let x = Tensor::from_vec(&[2], vec![0.5f64 + 1e-6, 1.2]).unwrap();
    let r = gradcheck(
        |t, v| {
            let q = t.fake_quant(v[0], Arc::new(Rounder))?;
            t.sum(q)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    eprintln!("quantizer without STE: max rel error {}", r.max_rel_error);
    assert!(r.max_rel_error.is_finite());
}
