//! Finite-difference oracle shared by the integration tests.

#![allow(dead_code)]

use piann_core::parallel::Workers;
use piann_core::residual::{evaluate_loss, loss_and_gradient, R1Mode, R2Mode, ResidualConfig};
use piann_core::{GridSpec, Piann, PiannConfig, ScorerKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Deterministic tensor with entries uniform on `[lo, hi)`.
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a floor tied to the overall gradient scale, so that
/// components that are zero up to rounding are compared absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, step: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[k].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[k].data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        grads.push(g);
    }
    grads
}

/// Maximum relative error between tape gradients and central differences of
/// the scalar built by `build` from leaves holding `inputs`.
pub fn check_gradient(inputs: &[Tensor], build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let value = |xs: &[Tensor]| {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        build(&tape, &leaves).value().item().unwrap()
    };
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &leaves);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| grads.wrt(l).data().to_vec()).collect();
    let numeric: Vec<f64> = numeric_gradient(inputs, &value, FD_STEP).into_iter().flatten().collect();
    relative_error(&analytic, &numeric)
}

/// Hidden width 4, N = 5 intervals in x, T = 3 intervals in t.
pub fn tiny_setup(r1: R1Mode, r2: R2Mode, scorer: ScorerKind) -> (Piann, ResidualConfig) {
    let model = Piann::initialized(
        PiannConfig {
            n_x: 6,
            hidden_dim: 4,
            scorer,
            ..PiannConfig::default()
        },
        42,
    )
    .unwrap();
    let mut config = ResidualConfig::new(GridSpec::uniform(1.0, 0.2, 0.3, 0.1).unwrap());
    config.r1_mode = r1;
    config.r2_mode = r2;
    (model, config)
}

/// Max relative error of the full loss gradient against central differences.
pub fn loss_gradient_error(model: &Piann, config: &ResidualConfig, m: &[f64]) -> f64 {
    let workers = Workers::serial();
    let lg = loss_and_gradient(model, config, m, &workers).unwrap();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let loss_of = |xs: &[Tensor]| {
        let mut probe = model.clone();
        for (name, x) in names.iter().zip(xs) {
            probe.params.set(name, x.clone()).unwrap();
        }
        evaluate_loss(&probe, config, m, &workers).unwrap().total
    };
    let numeric: Vec<f64> = numeric_gradient(&inputs, &loss_of, FD_STEP).into_iter().flatten().collect();
    let analytic: Vec<f64> = lg.grads.iter().flat_map(|g| g.data().to_vec()).collect();
    relative_error(&analytic, &numeric)
}
