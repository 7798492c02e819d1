//! Buckley-Leverett fractional flow, its exact self-similar solution and a
//! first-order upwind finite-volume solver.
//!
//! The flux is `f(u) = u² / (u² + (1 − u)² / M)` with `M` the mobility
//! ratio. It is S-shaped, so the Riemann solution from `u = 1` into `u = 0`
//! is a rarefaction fan on `[u*, 1]` terminated by a shock from `u*` down to
//! zero. `u*` is the tangency point of the chord from the origin, i.e. the
//! Rankine-Hugoniot speed `f(u*)/u*` equals the characteristic speed
//! `f'(u*)`.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SolutionField};

/// Bisection stops once the bracket is narrower than this.
pub const BISECTION_TOL: f64 = 1e-12;

/// Lattice spacing for the monotonicity checks.
const LATTICE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxParams {
    mobility: f64,
}

impl FluxParams {
    pub fn new(mobility: f64) -> Result<Self> {
        if !(mobility.is_finite() && mobility > 0.0) {
            return Err(Error::InvalidInput(format!(
                "mobility ratio must be finite and > 0, got {mobility}"
            )));
        }
        Ok(Self { mobility })
    }

    pub fn mobility(&self) -> f64 {
        self.mobility
    }

    /// Fractional flow. The caller guarantees `u ∈ [0, 1]`.
    #[inline]
    pub fn flux(&self, u: f64) -> f64 {
        let w = 1.0 - u;
        let d = u * u + w * w / self.mobility;
        u * u / d
    }

    /// `df/du` in closed form. The caller guarantees `u ∈ [0, 1]`.
    #[inline]
    pub fn flux_derivative(&self, u: f64) -> f64 {
        let w = 1.0 - u;
        let d = u * u + w * w / self.mobility;
        let dd = 2.0 * u - 2.0 * w / self.mobility;
        (2.0 * u * d - u * u * dd) / (d * d)
    }

    /// Largest characteristic speed over `[0, 1]`, taken on a lattice of
    /// spacing 1e-5.
    pub fn max_wave_speed(&self) -> f64 {
        let n = 100_000;
        (0..=n)
            .map(|i| self.flux_derivative(i as f64 / n as f64))
            .fold(0.0, f64::max)
    }
}

fn check_saturation(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("saturation {u} outside [0, 1]")))
    }
}

/// `f_M(u)` with input validation.
pub fn flux(u: f64, mobility: f64) -> Result<f64> {
    check_saturation(u)?;
    Ok(FluxParams::new(mobility)?.flux(u))
}

/// `f'_M(u)` with input validation.
pub fn flux_derivative(u: f64, mobility: f64) -> Result<f64> {
    check_saturation(u)?;
    Ok(FluxParams::new(mobility)?.flux_derivative(u))
}

/// Root of `g` on `[lo, hi]` where `g(lo)` and `g(hi)` have opposite signs.
///
/// Halves the bracket until it stops shrinking in floating point, which is
/// well below [`BISECTION_TOL`].
fn bisect(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> Option<f64> {
    let mut g_lo = g(lo);
    let g_hi = g(hi);
    if g_lo == 0.0 {
        return Some(lo);
    }
    if g_hi == 0.0 {
        return Some(hi);
    }
    if g_lo.signum() == g_hi.signum() {
        return None;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return Some(mid);
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    debug_assert!(hi - lo <= BISECTION_TOL);
    Some(0.5 * (lo + hi))
}

/// Post-shock saturation `u*` solving `f'(u) = f(u)/u` on `(0, 1)`.
pub fn shock_saturation(mobility: f64) -> Result<f64> {
    let flux = FluxParams::new(mobility)?;
    let tangency = |u: f64| flux.flux_derivative(u) - flux.flux(u) / u;
    bisect(1e-12, 1.0, tangency).ok_or_else(|| {
        Error::Bracketing(format!("tangency condition has no sign change for M = {mobility}"))
    })
}

/// Exact solution of the Riemann problem for one mobility ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSolution {
    flux: FluxParams,
    u_star: f64,
    shock_speed: f64,
}

impl AnalyticSolution {
    pub fn new(mobility: f64) -> Result<Self> {
        let flux = FluxParams::new(mobility)?;
        let u_star = shock_saturation(mobility)?;
        let shock_speed = flux.flux(u_star) / u_star;

        // The rarefaction is inverted by bisection, which needs f' strictly
        // decreasing on [u*, 1].
        let mut prev = flux.flux_derivative(u_star);
        let steps = ((1.0 - u_star) / LATTICE_STEP).ceil() as usize;
        for k in 1..=steps {
            let u = (u_star + k as f64 * LATTICE_STEP).min(1.0);
            let s = flux.flux_derivative(u);
            if s >= prev {
                return Err(Error::Bracketing(format!(
                    "f' is not decreasing on [u*, 1] near u = {u} for M = {mobility}"
                )));
            }
            prev = s;
        }

        Ok(Self {
            flux,
            u_star,
            shock_speed,
        })
    }

    pub fn mobility(&self) -> f64 {
        self.flux.mobility()
    }

    pub fn flux_params(&self) -> FluxParams {
        self.flux
    }

    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    /// Shock speed `s = f(u*)/u*`, in units of x per unit t.
    pub fn shock_speed(&self) -> f64 {
        self.shock_speed
    }

    /// Shock position `s·t`.
    pub fn shock_position(&self, t: f64) -> f64 {
        self.shock_speed * t
    }

    /// Saturation on the rarefaction fan with characteristic speed `xi`,
    /// for `0 ≤ xi ≤ s`.
    pub fn rarefaction(&self, xi: f64) -> f64 {
        if xi >= self.shock_speed {
            return self.u_star;
        }
        if xi <= 0.0 {
            return 1.0;
        }
        bisect(self.u_star, 1.0, |u| self.flux.flux_derivative(u) - xi)
            .expect("f' - xi changes sign on [u*, 1]")
    }

    pub fn evaluate(&self, x: f64, t: f64) -> Result<f64> {
        if !(x >= 0.0 && t >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "analytic solution needs x ≥ 0 and t ≥ 0, got x = {x}, t = {t}"
            )));
        }
        if x == 0.0 {
            return Ok(1.0);
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let xi = x / t;
        if xi > self.shock_speed {
            Ok(0.0)
        } else {
            Ok(self.rarefaction(xi))
        }
    }

    /// Samples the solution at every node of `grid`.
    pub fn field(&self, grid: &GridSpec) -> SolutionField {
        let mut values = Vec::with_capacity(grid.n_x() * grid.n_t());
        for &t in &grid.t {
            for &x in &grid.x {
                values.push(self.evaluate(x, t).expect("grid nodes are non-negative"));
            }
        }
        SolutionField::new(self.mobility(), grid.x.clone(), grid.t.clone(), values)
            .expect("field matches grid")
    }
}

pub fn analytic_solution(mobility: f64, x: f64, t: f64) -> Result<f64> {
    AnalyticSolution::new(mobility)?.evaluate(x, t)
}

pub fn analytic_field(mobility: f64, grid: &GridSpec) -> Result<SolutionField> {
    Ok(AnalyticSolution::new(mobility)?.field(grid))
}

/// Result of a finite-volume run.
#[derive(Debug, Clone)]
pub struct FvSolution {
    pub field: SolutionField,
    /// Total number of explicit substeps taken.
    pub substeps: usize,
}

/// Explicit first-order upwind solve with inflow `u = 1` at `x_0`.
///
/// Each output interval `[t_n, t_{n+1}]` is split into equal substeps no
/// longer than `cfl · Δx / max|f'|`, so the scheme is monotone and the
/// solution stays in `[0, 1]`.
pub fn solve_upwind_fv(mobility: f64, grid: &GridSpec, cfl: f64) -> Result<FvSolution> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::InvalidInput(format!("cfl must lie in (0, 1], got {cfl}")));
    }
    if grid.n_x() < 2 {
        return Err(Error::InvalidInput("finite-volume grid needs at least two x-nodes".into()));
    }
    let flux = FluxParams::new(mobility)?;
    let dx = grid.dx();
    let max_dt = cfl * dx / flux.max_wave_speed();

    let n = grid.n_x();
    let mut u = vec![0.0; n];
    u[0] = 1.0;
    let mut f = vec![0.0; n];
    let mut values = Vec::with_capacity(n * grid.n_t());
    values.extend_from_slice(&u);
    let mut substeps = 0;

    for w in grid.t.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / max_dt).ceil().max(1.0) as usize;
        let lambda = span / steps as f64 / dx;
        for _ in 0..steps {
            for (fi, &ui) in f.iter_mut().zip(&u) {
                *fi = flux.flux(ui);
            }
            for i in 1..n {
                u[i] -= lambda * (f[i] - f[i - 1]);
            }
        }
        substeps += steps;
        values.extend_from_slice(&u);
    }

    Ok(FvSolution {
        field: SolutionField::new(mobility, grid.x.clone(), grid.t.clone(), values)?,
        substeps,
    })
}

/// Total variation `Σ |u_{i+1} − u_i|`.
pub fn total_variation(profile: &[f64]) -> f64 {
    profile.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Composite trapezoid rule on a uniform spacing.
pub fn trapezoid(values: &[f64], spacing: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, .., last] => spacing * (values.iter().sum::<f64>() - 0.5 * (first + last)),
    }
}
