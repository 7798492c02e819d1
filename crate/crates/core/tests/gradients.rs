//! Tape gradients against central finite differences: every differentiable
//! op, then the full residual loss of a tiny model.

mod common;

use common::{check_gradient, loss_gradient_error, random_tensor, tiny_setup};
use piann_core::parallel::Workers;
use piann_core::residual::{loss_and_gradient, loss_and_gradient_single_tape, R1Mode, R2Mode};
use piann_core::{ScorerKind, Tape, Tensor, Var};

const TOL: f64 = 1e-5;

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry gets its own
/// upstream gradient.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let w = tape.constant(random_tensor(&y.shape(), seed, -1.0, 1.0));
    y.mul(w).unwrap().sum()
}

fn assert_op(name: &str, inputs: &[Tensor], build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let err = check_gradient(inputs, build);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn matmul_variants() {
    let a = random_tensor(&[3, 4], 1, -1.0, 1.0);
    let b = random_tensor(&[4, 2], 2, -1.0, 1.0);
    assert_op("matmul", &[a.clone(), b], &|t, x| project(t, x[0].matmul(x[1]).unwrap(), 9));
    let v = random_tensor(&[4], 3, -1.0, 1.0);
    assert_op("matvec", &[a.clone(), v.clone()], &|t, x| project(t, x[0].matmul(x[1]).unwrap(), 9));
    let row = random_tensor(&[3], 4, -1.0, 1.0);
    assert_op("vecmat", &[row, a], &|t, x| project(t, x[0].matmul(x[1]).unwrap(), 9));
}

#[test]
fn elementwise_binary_ops_with_broadcast() {
    let a = random_tensor(&[2, 3], 5, -1.0, 1.0);
    let b = random_tensor(&[2, 3], 6, 0.5, 2.0);
    let s = random_tensor(&[], 7, 0.5, 2.0);
    assert_op("add", &[a.clone(), b.clone()], &|t, x| project(t, x[0].add(x[1]).unwrap(), 1));
    assert_op("sub", &[a.clone(), b.clone()], &|t, x| project(t, x[0].sub(x[1]).unwrap(), 1));
    assert_op("mul", &[a.clone(), b.clone()], &|t, x| project(t, x[0].mul(x[1]).unwrap(), 1));
    assert_op("div", &[a.clone(), b.clone()], &|t, x| project(t, x[0].div(x[1]).unwrap(), 1));
    assert_op("add scalar", &[a.clone(), s.clone()], &|t, x| project(t, x[0].add(x[1]).unwrap(), 1));
    assert_op("scalar sub", &[s.clone(), a.clone()], &|t, x| project(t, x[0].sub(x[1]).unwrap(), 1));
    assert_op("mul scalar", &[a.clone(), s.clone()], &|t, x| project(t, x[0].mul(x[1]).unwrap(), 1));
    assert_op("div scalar", &[a, s], &|t, x| project(t, x[0].div(x[1]).unwrap(), 1));
}

#[test]
fn elementwise_unary_ops() {
    let a = random_tensor(&[2, 3], 8, -2.0, 2.0);
    assert_op("affine", std::slice::from_ref(&a), &|t, x| project(t, x[0].affine(-1.5, 0.25), 2));
    assert_op("scale", std::slice::from_ref(&a), &|t, x| project(t, x[0].scale(3.0), 2));
    assert_op("neg", std::slice::from_ref(&a), &|t, x| project(t, x[0].neg(), 2));
    assert_op("sigmoid", std::slice::from_ref(&a), &|t, x| project(t, x[0].sigmoid(), 2));
    assert_op("tanh", std::slice::from_ref(&a), &|t, x| project(t, x[0].tanh(), 2));
    assert_op("square", &[a], &|t, x| project(t, x[0].square(), 2));
}

#[test]
fn softmax_rows() {
    let a = random_tensor(&[3, 5], 10, -2.0, 2.0);
    assert_op("softmax rows", &[a], &|t, x| project(t, x[0].softmax_rows().unwrap(), 3));
    let v = random_tensor(&[6], 11, -2.0, 2.0);
    assert_op("softmax vector", &[v], &|t, x| project(t, x[0].softmax_rows().unwrap(), 3));
}

#[test]
fn structural_ops() {
    let a = random_tensor(&[2, 3], 12, -1.0, 1.0);
    let b = random_tensor(&[2, 2], 13, -1.0, 1.0);
    let c = random_tensor(&[1, 3], 14, -1.0, 1.0);
    assert_op("concat axis 1", &[a.clone(), b], &|t, x| project(t, x[0].concat(x[1], 1).unwrap(), 4));
    assert_op("concat axis 0", &[a.clone(), c], &|t, x| project(t, x[0].concat(x[1], 0).unwrap(), 4));
    assert_op("slice axis 1", std::slice::from_ref(&a), &|t, x| project(t, x[0].slice(1, 1..3).unwrap(), 4));
    assert_op("slice axis 0", std::slice::from_ref(&a), &|t, x| project(t, x[0].slice(0, 1..2).unwrap(), 4));
    assert_op("reshape", std::slice::from_ref(&a), &|t, x| project(t, x[0].reshape(&[3, 2]).unwrap(), 4));
    assert_op("transpose", &[a], &|t, x| project(t, x[0].transpose().unwrap(), 4));
}

#[test]
fn reductions() {
    let a = random_tensor(&[3, 4], 15, -1.0, 1.0);
    assert_op("sum", std::slice::from_ref(&a), &|_, x| x[0].sum());
    assert_op("mean", std::slice::from_ref(&a), &|_, x| x[0].mean());
    assert_op("frobenius_sq", &[a], &|_, x| x[0].frobenius_sq());
}

#[test]
fn fused_additive_scores() {
    let keys = random_tensor(&[5, 3], 16, -1.0, 1.0);
    let query = random_tensor(&[3], 17, -1.0, 1.0);
    let v = random_tensor(&[3], 18, -1.0, 1.0);
    assert_op("additive scores", &[keys, query, v], &|t, x| {
        project(t, x[0].additive_scores(x[1], x[2]).unwrap(), 5)
    });
}

#[test]
fn fan_out_and_chained_ops() {
    let a = random_tensor(&[2, 2], 19, -1.0, 1.0);
    assert_op("fan-out", &[a], &|t, x| {
        let y = x[0].matmul(x[0]).unwrap().tanh();
        let z = y.mul(x[0]).unwrap().add(x[0].sigmoid()).unwrap();
        project(t, z.softmax_rows().unwrap(), 6)
    });
}

#[test]
fn tiny_model_loss_gradient_matches_finite_differences() {
    let (model, config) = tiny_setup(R1Mode::FiniteDifference, R2Mode::Central, ScorerKind::Additive);
    let err = loss_gradient_error(&model, &config, &[2.0]);
    assert!(err < TOL, "max relative error {err:e}");
}

#[test]
fn tiny_model_variants_match_finite_differences() {
    for (r1, r2, scorer) in [
        (R1Mode::Autodiff, R2Mode::Central, ScorerKind::Additive),
        (R1Mode::FiniteDifference, R2Mode::Upwind, ScorerKind::Linear),
    ] {
        let (model, config) = tiny_setup(r1, r2, scorer);
        let err = loss_gradient_error(&model, &config, &[4.5]);
        assert!(err < TOL, "{r1}/{r2}/{scorer}: max relative error {err:e}");
    }
}

#[test]
fn per_sample_gradient_equals_single_tape_gradient() {
    let (model, config) = tiny_setup(R1Mode::FiniteDifference, R2Mode::Central, ScorerKind::Additive);
    let m = [2.0, 50.0];
    let lg = loss_and_gradient(&model, &config, &m, &Workers::serial()).unwrap();
    let (loss, grads) = loss_and_gradient_single_tape(&model, &config, &m).unwrap();
    assert!((lg.loss.total - loss).abs() <= 1e-12 * loss.abs());
    for (a, b) in lg.grads.iter().zip(&grads) {
        let diff = a.max_abs_diff(b).unwrap();
        let scale = b.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        assert!(diff <= 1e-10 * scale, "{diff:e}");
    }
}
