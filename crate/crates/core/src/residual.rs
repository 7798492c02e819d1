//! Physics-informed residual loss.
//!
//! For each mobility ratio the network is evaluated at every t-node, giving
//! a saturation matrix `U` with one row per time. The PDE residual on the
//! interior nodes is `R = R1 + R2`, where
//!
//! * `R1` approximates `∂u/∂t`, either by the forward difference
//!   `(U[j+1, i] − U[j, i]) / (t_{j+1} − t_j)` or by the exact time
//!   derivative of the network;
//! * `R2` approximates `∂f(u)/∂x` with a central or a backward (upwind)
//!   difference of the fractional flow.
//!
//! The loss is `Σ_M ‖R(M)‖²_F`. Initial and boundary values are imposed by
//! the architecture, so no other term appears.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dual::{concat_dual, Dual};
use crate::error::{Error, Result, TensorError};
use crate::grid::{GridSpec, SolutionField};
use crate::layers::BoundParams;
use crate::model::{initial_state, Piann};
use crate::parallel::Workers;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R1Mode {
    FiniteDifference,
    Autodiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Mode {
    Central,
    Upwind,
}

impl std::str::FromStr for R1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite_difference" | "fd" => Ok(Self::FiniteDifference),
            "autodiff" | "ad" => Ok(Self::Autodiff),
            other => Err(Error::InvalidInput(format!(
                "unknown r1 mode `{other}` (expected finite_difference or autodiff)"
            ))),
        }
    }
}

impl std::str::FromStr for R2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(Self::Central),
            "upwind" => Ok(Self::Upwind),
            other => Err(Error::InvalidInput(format!(
                "unknown r2 mode `{other}` (expected central or upwind)"
            ))),
        }
    }
}

impl std::fmt::Display for R1Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FiniteDifference => "finite_difference",
            Self::Autodiff => "autodiff",
        })
    }
}

impl std::fmt::Display for R2Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Central => "central",
            Self::Upwind => "upwind",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualConfig {
    pub r1_mode: R1Mode,
    pub r2_mode: R2Mode,
    /// Also difference the first step `t_0 → t_1` against the imposed
    /// initial state. Only meaningful for the finite-difference `R1`.
    pub include_first_step: bool,
    pub grid: GridSpec,
}

impl ResidualConfig {
    pub fn new(grid: GridSpec) -> Self {
        Self {
            r1_mode: R1Mode::FiniteDifference,
            r2_mode: R2Mode::Central,
            include_first_step: true,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n_x() < 3 || self.grid.n_t() < 3 {
            return Err(Error::InvalidInput(format!(
                "residual grid needs ≥ 3 x-nodes and ≥ 3 t-nodes, got {}×{}",
                self.grid.n_x(),
                self.grid.n_t()
            )));
        }
        Ok(())
    }

    /// Time indices `j` at which residual rows are formed.
    pub fn time_rows(&self) -> Range<usize> {
        let last = self.grid.n_t() - 1;
        match (self.r1_mode, self.include_first_step) {
            (R1Mode::FiniteDifference, true) => 0..last,
            _ => 1..last,
        }
    }

    /// Shape `[N − 1, rows]` of each residual matrix.
    pub fn residual_shape(&self) -> [usize; 2] {
        [self.grid.n_x() - 2, self.time_rows().len()]
    }

    fn check_model(&self, model: &Piann) -> Result<()> {
        self.validate()?;
        let cfg = model.config();
        let x = cfg.x_nodes();
        let matches = x.len() == self.grid.n_x()
            && x.iter().zip(&self.grid.x).all(|(a, b)| (a - b).abs() < 1e-12);
        if !matches {
            return Err(Error::InvalidInput(format!(
                "model x-nodes ({} on [0, {}]) differ from the residual grid ({} nodes)",
                cfg.n_x,
                cfg.x_max,
                self.grid.n_x()
            )));
        }
        Ok(())
    }
}

/// Fractional flow applied elementwise on the tape.
pub fn flux_on_tape<'t>(u: Var<'t>, mobility: f64) -> Result<Var<'t>, TensorError> {
    let u2 = u.square();
    let w2 = u.affine(-1.0, 1.0).square().scale(1.0 / mobility);
    u2.div(u2.add(w2)?)
}

/// A constant matrix of row-repeated reciprocal spacings.
fn reciprocal_spacings<'t>(tape: &'t Tape, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Var<'t> {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(1.0 / f(r, c));
        }
    }
    tape.constant(Tensor::matrix(rows, cols, data).expect("spacing shape"))
}

/// Time-derivative term, shape `[N − 1, rows]`.
///
/// `u` is the `(T + 1) × (N + 1)` solution matrix. In autodiff mode `u_dot`
/// must hold `∂u/∂t` with the same layout.
pub fn residual_r1<'t>(u: Var<'t>, u_dot: Option<Var<'t>>, config: &ResidualConfig) -> Result<Var<'t>, TensorError> {
    let rows = config.time_rows();
    let n = config.grid.n_x() - 1;
    let r1 = match config.r1_mode {
        R1Mode::FiniteDifference => {
            let later = u.slice(0, rows.start + 1..rows.end + 1)?.slice(1, 1..n)?;
            let earlier = u.slice(0, rows.clone())?.slice(1, 1..n)?;
            let t = &config.grid.t;
            let inv_dt = reciprocal_spacings(u.tape(), rows.len(), n - 1, |r, _| {
                let j = rows.start + r;
                t[j + 1] - t[j]
            });
            later.sub(earlier)?.mul(inv_dt)?
        }
        R1Mode::Autodiff => {
            let u_dot = u_dot.ok_or(TensorError::ShapeMismatch {
                op: "residual_r1: autodiff mode needs time derivatives",
                left: u.shape(),
                right: Vec::new(),
            })?;
            u_dot.slice(0, rows)?.slice(1, 1..n)?
        }
    };
    r1.transpose()
}

/// Flux-divergence term, shape `[N − 1, rows]`.
pub fn residual_r2<'t>(u: Var<'t>, mobility: f64, config: &ResidualConfig) -> Result<Var<'t>, TensorError> {
    let rows = config.time_rows();
    let n = config.grid.n_x() - 1;
    let f = flux_on_tape(u.slice(0, rows.clone())?, mobility)?;
    let x = &config.grid.x;
    let (ahead, behind, inv_dx) = match config.r2_mode {
        R2Mode::Central => (
            f.slice(1, 2..n + 1)?,
            f.slice(1, 0..n - 1)?,
            reciprocal_spacings(u.tape(), rows.len(), n - 1, |_, c| x[c + 2] - x[c]),
        ),
        R2Mode::Upwind => (
            f.slice(1, 1..n)?,
            f.slice(1, 0..n - 1)?,
            reciprocal_spacings(u.tape(), rows.len(), n - 1, |_, c| x[c + 1] - x[c]),
        ),
    };
    ahead.sub(behind)?.mul(inv_dx)?.transpose()
}

/// `R1 + R2` for one mobility ratio.
pub fn residual<'t>(
    u: Var<'t>,
    u_dot: Option<Var<'t>>,
    mobility: f64,
    config: &ResidualConfig,
) -> Result<Var<'t>, TensorError> {
    residual_r1(u, u_dot, config)?.add(residual_r2(u, mobility, config)?)
}

/// Records the `(T + 1) × (N + 1)` solution matrix of `model` for one
/// mobility ratio, plus its time derivative in autodiff mode.
pub fn taped_solution<'t>(
    model: &Piann,
    tape: &'t Tape,
    params: &BoundParams<'t>,
    mobility: f64,
    config: &ResidualConfig,
) -> Result<(Var<'t>, Option<Var<'t>>), TensorError> {
    let n_x = config.grid.n_x();
    let tangent = config.r1_mode == R1Mode::Autodiff;
    let mut rows = Vec::with_capacity(config.grid.n_t());
    for &t in &config.grid.t {
        let row = if t == 0.0 {
            let value = tape.constant(initial_state(n_x).u);
            if tangent {
                Dual::with_tangent(value, tape.constant(Tensor::zeros(&[n_x])))
            } else {
                Dual::constant(value)
            }
        } else {
            model.forward_on_tape(tape, params, t, mobility, tangent)?.u
        };
        rows.push(row.reshape(&[1, n_x])?);
    }
    let stacked = concat_dual(&rows, 0)?;
    Ok((stacked.value, stacked.tangent))
}

/// Loss recorded on a single tape: every forward pass for every mobility
/// ratio lives on `tape`.
pub fn loss_on_tape<'t>(
    model: &Piann,
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &ResidualConfig,
    mobilities: &[f64],
) -> Result<Var<'t>> {
    config.check_model(model)?;
    check_mobilities(mobilities)?;
    let mut total: Option<Var<'t>> = None;
    for &m in mobilities {
        let (u, u_dot) = taped_solution(model, tape, params, m, config)?;
        let term = residual(u, u_dot, m, config)?.frobenius_sq();
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("mobility list is non-empty"))
}

/// Value of the loss.
pub fn loss(model: &Piann, config: &ResidualConfig, mobilities: &[f64]) -> Result<f64> {
    Ok(evaluate_loss(model, config, mobilities, &Workers::serial())?.total)
}

fn check_mobilities(mobilities: &[f64]) -> Result<()> {
    if mobilities.is_empty() {
        return Err(Error::InvalidInput("mobility list is empty".into()));
    }
    if let Some(bad) = mobilities.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(Error::InvalidInput(format!("mobility ratio must be > 0, got {bad}")));
    }
    Ok(())
}

/// Loss value with its breakdown over mobility ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_mobility: Vec<f64>,
}

/// Loss value and gradient aligned with the parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: LossValue,
    pub grads: Vec<Tensor>,
}

/// One network evaluation: which mobility and which time row.
#[derive(Debug, Clone, Copy)]
struct Sample {
    mobility_index: usize,
    time_index: usize,
}

struct SampleOutput {
    u: Tensor,
    u_dot: Option<Tensor>,
}

fn samples(config: &ResidualConfig, mobilities: &[f64]) -> Vec<Sample> {
    let mut out = Vec::new();
    for mobility_index in 0..mobilities.len() {
        for (time_index, &t) in config.grid.t.iter().enumerate() {
            if t != 0.0 {
                out.push(Sample {
                    mobility_index,
                    time_index,
                });
            }
        }
    }
    out
}

fn forward_sample(model: &Piann, config: &ResidualConfig, t: f64, mobility: f64) -> Result<SampleOutput> {
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let out = model.forward_on_tape(&tape, &params, t, mobility, config.r1_mode == R1Mode::Autodiff)?;
    Ok(SampleOutput {
        u: out.u.value.value(),
        u_dot: out.u.tangent.map(|v| v.value()),
    })
}

/// Solution matrices assembled from independent per-sample evaluations.
fn solution_matrices(
    model: &Piann,
    config: &ResidualConfig,
    mobilities: &[f64],
    workers: &Workers,
) -> Result<Vec<(Tensor, Option<Tensor>)>> {
    let all = samples(config, mobilities);
    let outputs = workers.map(&all, |s| {
        forward_sample(model, config, config.grid.t[s.time_index], mobilities[s.mobility_index])
    });
    let (n_t, n_x) = (config.grid.n_t(), config.grid.n_x());
    let autodiff = config.r1_mode == R1Mode::Autodiff;
    let mut mats: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..mobilities.len())
        .map(|_| {
            let mut u = vec![0.0; n_t * n_x];
            for (j, &t) in config.grid.t.iter().enumerate() {
                if t == 0.0 {
                    u[j * n_x..(j + 1) * n_x].copy_from_slice(initial_state(n_x).u.data());
                }
            }
            (u, autodiff.then(|| vec![0.0; n_t * n_x]))
        })
        .collect();
    for (s, out) in all.iter().zip(outputs) {
        let out = out?;
        let (u, u_dot) = &mut mats[s.mobility_index];
        let j = s.time_index;
        u[j * n_x..(j + 1) * n_x].copy_from_slice(out.u.data());
        if let (Some(dst), Some(src)) = (u_dot.as_mut(), out.u_dot) {
            dst[j * n_x..(j + 1) * n_x].copy_from_slice(src.data());
        }
    }
    mats.into_iter()
        .map(|(u, u_dot)| {
            Ok((
                Tensor::matrix(n_t, n_x, u)?,
                u_dot.map(|d| Tensor::matrix(n_t, n_x, d)).transpose()?,
            ))
        })
        .collect()
}

/// `∂L/∂U` and, in autodiff mode, `∂L/∂U̇`.
type Adjoints = (Tensor, Option<Tensor>);

/// Loss of one solution matrix and its adjoints `∂L/∂U`, `∂L/∂U̇`.
fn head(
    u: &Tensor,
    u_dot: Option<&Tensor>,
    mobility: f64,
    config: &ResidualConfig,
    with_grad: bool,
) -> Result<(f64, Option<Adjoints>)> {
    let tape = Tape::new();
    let u_var = tape.leaf(u.clone());
    let u_dot_var = u_dot.map(|d| tape.leaf(d.clone()));
    let loss = residual(u_var, u_dot_var, mobility, config)?.frobenius_sq();
    let value = loss.value().item()?;
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let du = grads.wrt(u_var).clone();
    let ddot = u_dot_var.map(|v| grads.wrt(v).clone());
    Ok((value, Some((du, ddot))))
}

/// Loss value computed from independent per-sample forward passes.
pub fn evaluate_loss(model: &Piann, config: &ResidualConfig, mobilities: &[f64], workers: &Workers) -> Result<LossValue> {
    config.check_model(model)?;
    check_mobilities(mobilities)?;
    let mats = solution_matrices(model, config, mobilities, workers)?;
    let per_mobility = mats
        .iter()
        .zip(mobilities)
        .map(|((u, u_dot), &m)| Ok(head(u, u_dot.as_ref(), m, config, false)?.0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LossValue {
        total: per_mobility.iter().sum(),
        per_mobility,
    })
}

/// Loss and parameter gradient, one mobility ratio at a time.
///
/// The loss couples time rows only through the solution matrix, so the
/// gradient factors as `Σ_samples (∂L/∂u_sample)ᵀ ∂u_sample/∂θ`. For each
/// mobility ratio every time row is recorded on its own tape, the adjoints
/// `∂L/∂U` come from a small tape over the assembled matrices, and each
/// sample tape is then pulled back with its row of adjoints. Mobility ratios
/// are independent jobs; contributions are summed in sample order, so the
/// result does not depend on the worker count.
pub fn loss_and_gradient(
    model: &Piann,
    config: &ResidualConfig,
    mobilities: &[f64],
    workers: &Workers,
) -> Result<LossGradient> {
    config.check_model(model)?;
    check_mobilities(mobilities)?;
    let per_job = workers.map(mobilities, |&m| mobility_loss_and_gradient(model, config, m));

    let mut per_mobility = Vec::with_capacity(mobilities.len());
    let mut total: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for job in per_job {
        let (value, grads) = job?;
        per_mobility.push(value);
        add_into(&mut total, &grads);
    }
    Ok(LossGradient {
        loss: LossValue {
            total: per_mobility.iter().sum(),
            per_mobility,
        },
        grads: total,
    })
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
}

fn mobility_loss_and_gradient(model: &Piann, config: &ResidualConfig, mobility: f64) -> Result<(f64, Vec<Tensor>)> {
    let (n_t, n_x) = (config.grid.n_t(), config.grid.n_x());
    let autodiff = config.r1_mode == R1Mode::Autodiff;
    let times: Vec<usize> = (0..n_t).filter(|&j| config.grid.t[j] != 0.0).collect();
    let tapes: Vec<Tape> = times.iter().map(|_| Tape::new()).collect();

    let mut u = vec![0.0; n_t * n_x];
    let mut u_dot = vec![0.0; n_t * n_x];
    for (j, &t) in config.grid.t.iter().enumerate() {
        if t == 0.0 {
            u[j * n_x..(j + 1) * n_x].copy_from_slice(initial_state(n_x).u.data());
        }
    }
    let mut recorded = Vec::with_capacity(times.len());
    for (tape, &j) in tapes.iter().zip(&times) {
        let params = model.params.bind(tape);
        let out = model.forward_on_tape(tape, &params, config.grid.t[j], mobility, autodiff)?;
        u[j * n_x..(j + 1) * n_x].copy_from_slice(out.u.value.value().data());
        if let Some(tan) = out.u.tangent {
            u_dot[j * n_x..(j + 1) * n_x].copy_from_slice(tan.value().data());
        }
        recorded.push((params, out.u));
    }
    let u = Tensor::matrix(n_t, n_x, u)?;
    let u_dot = autodiff.then(|| Tensor::matrix(n_t, n_x, u_dot)).transpose()?;
    let (value, adjoints) = head(&u, u_dot.as_ref(), mobility, config, true)?;
    let (du, ddot) = adjoints.expect("requested");

    let row = |t: &Tensor, j: usize| Tensor::vector(t.data()[j * n_x..(j + 1) * n_x].to_vec());
    let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
    let mut total: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for ((tape, &j), (params, out)) in tapes.iter().zip(&times).zip(recorded) {
        let seed_u = row(&du, j);
        let seed_dot = ddot.as_ref().map(|d| row(d, j));
        if zero(&seed_u) && seed_dot.as_ref().is_none_or(zero) {
            continue;
        }
        let mut seeds = vec![(out.value, seed_u)];
        if let (Some(tan), Some(seed)) = (out.tangent, seed_dot) {
            seeds.push((tan, seed));
        }
        let mut grads = tape.backward_seeded(&seeds)?;
        let sample: Vec<Tensor> = params
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("parameter leaf"))
            .collect();
        add_into(&mut total, &sample);
    }
    Ok((value, total))
}

/// Loss and gradient from one tape holding the whole computation.
pub fn loss_and_gradient_single_tape(model: &Piann, config: &ResidualConfig, mobilities: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let loss = loss_on_tape(model, &tape, &params, config, mobilities)?;
    let value = loss.value().item()?;
    let grads = tape.backward(loss)?;
    Ok((value, params.vars().iter().map(|&v| grads.wrt(v).clone()).collect()))
}

/// Residual matrix `R1 + R2` of a sampled field (finite-difference `R1`).
pub fn field_residual(field: &SolutionField, config: &ResidualConfig) -> Result<Tensor> {
    config.validate()?;
    if config.r1_mode == R1Mode::Autodiff {
        return Err(Error::InvalidInput("a sampled field has no time derivative; use finite_difference".into()));
    }
    if field.x.len() != config.grid.n_x() || field.t.len() != config.grid.n_t() {
        return Err(Error::InvalidInput("field does not match the residual grid".into()));
    }
    let tape = Tape::new();
    let u = tape.constant(Tensor::matrix(field.t.len(), field.x.len(), field.values().to_vec())?);
    Ok(residual(u, None, field.mobility, config)?.value())
}

/// Mean of the squared residual entries: the loss of one mobility ratio
/// divided by the number of residual entries, comparable across grids.
pub fn mean_squared_residual(model: &Piann, config: &ResidualConfig, mobility: f64, workers: &Workers) -> Result<f64> {
    let value = evaluate_loss(model, config, &[mobility], workers)?;
    let [rows, cols] = config.residual_shape();
    Ok(value.total / (rows * cols) as f64)
}
