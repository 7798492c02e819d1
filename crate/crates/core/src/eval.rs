//! Accuracy of trained models against the analytic solution, attention
//! maps, resolution studies and residual-scheme comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Piann;
use crate::parallel::Workers;
use crate::physics::AnalyticSolution;
use crate::residual::mean_squared_residual;
use crate::tensor::Tensor;
use crate::trainer::{train, EpochReport, TrainConfig};

/// Half-width of the excluded band around the exact shock, in cells.
pub const DEFAULT_BAND_WIDTH: f64 = 5.0;

/// Predicted and exact saturation at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub t: f64,
    pub x: Vec<f64>,
    pub predicted: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Errors of one profile.
///
/// `l2` is the grid L2 norm `√(Δx Σ e²)`; the `_outside` variants only use
/// nodes with `|x − s·t| > band_width · Δx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileErrors {
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
    pub l2_outside: f64,
    pub linf_outside: f64,
    pub shock_exact: f64,
    pub shock_estimate: f64,
    /// `|shock_estimate − shock_exact| / Δx`.
    pub shock_error_cells: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mobility: f64,
    pub dx: f64,
    pub band_width: f64,
    pub errors: Vec<ProfileErrors>,
    pub profiles: Vec<Profile>,
    /// Mean squared residual over the evaluation grid, when requested.
    pub residual: Option<f64>,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.profiles.iter().all(|p| p.predicted.iter().all(|v| v.is_finite()))
            && self.residual.is_none_or(f64::is_finite)
    }
}

/// Midpoint of the steepest downward step `u_i − u_{i+1}`.
pub fn shock_location(x: &[f64], u: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..u.len().saturating_sub(1) {
        let drop = u[i] - u[i + 1];
        if drop > best.0 {
            best = (drop, i);
        }
    }
    let i = best.1;
    0.5 * (x[i] + x[(i + 1).min(x.len() - 1)])
}

/// Compares a profile at time `t` with the exact solution.
pub fn profile_errors(profile: &Profile, exact: &AnalyticSolution, band_width: f64) -> ProfileErrors {
    let dx = profile.x[1] - profile.x[0];
    let shock = exact.shock_position(profile.t);
    let (mut sq, mut linf, mut sq_out, mut linf_out) = (0.0, 0.0f64, 0.0, 0.0f64);
    for ((&x, &p), &e) in profile.x.iter().zip(&profile.predicted).zip(&profile.exact) {
        let err = (p - e).abs();
        sq += err * err;
        linf = linf.max(err);
        if (x - shock).abs() > band_width * dx {
            sq_out += err * err;
            linf_out = linf_out.max(err);
        }
    }
    let estimate = shock_location(&profile.x, &profile.predicted);
    ProfileErrors {
        t: profile.t,
        l2: (dx * sq).sqrt(),
        linf,
        l2_outside: (dx * sq_out).sqrt(),
        linf_outside: linf_out,
        shock_exact: shock,
        shock_estimate: estimate,
        shock_error_cells: (estimate - shock).abs() / dx,
    }
}

/// Errors of already computed profiles against the exact solution.
pub fn evaluate_profiles(mobility: f64, profiles: Vec<Profile>, band_width: f64) -> Result<EvalReport> {
    let exact = AnalyticSolution::new(mobility)?;
    let dx = profiles
        .first()
        .map(|p| p.x[1] - p.x[0])
        .ok_or_else(|| Error::InvalidInput("no profiles to evaluate".into()))?;
    Ok(EvalReport {
        mobility,
        dx,
        band_width,
        errors: profiles.iter().map(|p| profile_errors(p, &exact, band_width)).collect(),
        profiles,
        residual: None,
    })
}

/// Exact profile at `t` on the nodes `x`.
pub fn exact_profile(exact: &AnalyticSolution, x: &[f64], t: f64) -> Result<Vec<f64>> {
    x.iter().map(|&xi| exact.evaluate(xi, t)).collect()
}

/// Evaluates `model` at each of `times` for one mobility ratio.
pub fn evaluate(model: &Piann, mobility: f64, times: &[f64], band_width: f64) -> Result<EvalReport> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no evaluation times".into()));
    }
    let exact = AnalyticSolution::new(mobility)?;
    let x = model.config().x_nodes();
    let profiles = times
        .iter()
        .map(|&t| {
            Ok(Profile {
                t,
                predicted: model.forward(t, mobility)?.u.into_data(),
                exact: exact_profile(&exact, &x, t)?,
                x: x.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_profiles(mobility, profiles, band_width)
}

/// Attention weights `α` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub mobility: f64,
    pub t: f64,
    /// `N × N`; row `i` produced `u_{i+1}`.
    pub alpha: Tensor,
    /// Shannon entropy (natural log) of every row.
    pub entropy: Vec<f64>,
}

impl AttentionMap {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len() as f64
    }
}

pub fn row_entropy(alpha: &Tensor) -> Vec<f64> {
    let cols = alpha.shape()[1];
    alpha
        .data()
        .chunks(cols)
        .map(|row| row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum())
        .collect()
}

pub fn attention_map(model: &Piann, mobility: f64, t: f64) -> Result<AttentionMap> {
    if t <= 0.0 {
        return Err(Error::InvalidInput(format!("attention needs t > 0, got {t}")));
    }
    let alpha = model.forward(t, mobility)?.attention.expect("t > 0 runs the decoder");
    Ok(AttentionMap {
        mobility,
        t,
        entropy: row_entropy(&alpha),
        alpha,
    })
}

/// One row of a resolution study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub dx: f64,
    pub dt: f64,
    /// Mean squared residual at the study's mobility ratio.
    pub residual: f64,
}

fn check_coarse_to_fine(resolutions: &[(f64, f64)]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(Error::InvalidInput("no resolutions given".into()));
    }
    if resolutions.windows(2).any(|w| w[1].0 > w[0].0 || w[1].1 > w[0].1) {
        return Err(Error::InvalidInput("resolutions must be sorted from coarse to fine".into()));
    }
    Ok(())
}

fn config_at(base: &TrainConfig, dx: f64, dt: f64) -> Result<TrainConfig> {
    let intervals = (base.model.x_max / dx).round();
    if !(intervals >= 2.0) || ((intervals * dx) - base.model.x_max).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("Δx = {dx} does not divide [0, {}]", base.model.x_max)));
    }
    let mut config = base.clone();
    config.model.n_x = intervals as usize + 1;
    config.dt = dt;
    config.validate()?;
    Ok(config)
}

/// Mean squared residual of a trained model on the `(dx, dt)` grid.
pub fn residual_at(
    model: &Piann,
    base: &TrainConfig,
    dx: f64,
    dt: f64,
    mobility: f64,
    workers: &Workers,
) -> Result<f64> {
    let config = config_at(base, dx, dt)?;
    let resampled = model.with_nodes(config.model.n_x)?;
    mean_squared_residual(&resampled, &config.residual_config()?, mobility, workers)
}

/// Trains `base` afresh at every resolution and reports the mean squared
/// residual at `mobility`.
pub fn resolution_study(
    base: &TrainConfig,
    resolutions: &[(f64, f64)],
    mobility: f64,
    workers: &Workers,
    mut on_epoch: impl FnMut(usize, &EpochReport),
) -> Result<Vec<ResolutionRow>> {
    check_coarse_to_fine(resolutions)?;
    let mut rows = Vec::with_capacity(resolutions.len());
    for (k, &(dx, dt)) in resolutions.iter().enumerate() {
        let config = config_at(base, dx, dt)?;
        let (state, _) = train(config.clone(), None, workers, |r| on_epoch(k, r))?;
        rows.push(ResolutionRow {
            dx,
            dt,
            residual: mean_squared_residual(&state.model, &config.residual_config()?, mobility, workers)?,
        });
    }
    Ok(rows)
}

/// Evaluates one trained model at every resolution.
pub fn resolution_residuals(
    model: &Piann,
    base: &TrainConfig,
    resolutions: &[(f64, f64)],
    mobility: f64,
    workers: &Workers,
) -> Result<Vec<ResolutionRow>> {
    check_coarse_to_fine(resolutions)?;
    resolutions
        .iter()
        .map(|&(dx, dt)| {
            Ok(ResolutionRow {
                dx,
                dt,
                residual: residual_at(model, base, dx, dt, mobility, workers)?,
            })
        })
        .collect()
}

/// Predictions of a central-residual and an upwind-residual model.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeComparison {
    pub mobility: f64,
    pub t: f64,
    pub x: Vec<f64>,
    pub central: Vec<f64>,
    pub upwind: Vec<f64>,
    pub exact: Vec<f64>,
    /// `max |central − upwind|`.
    pub linf_between: f64,
    pub linf_central: f64,
    pub linf_upwind: f64,
}

pub fn compare_residual_schemes(central: &Piann, upwind: &Piann, mobility: f64, t: f64) -> Result<SchemeComparison> {
    let x = central.config().x_nodes();
    if upwind.config().x_nodes() != x {
        return Err(Error::InvalidInput("the two models use different x-nodes".into()));
    }
    let exact = exact_profile(&AnalyticSolution::new(mobility)?, &x, t)?;
    let c = central.forward(t, mobility)?.u.into_data();
    let u = upwind.forward(t, mobility)?.u.into_data();
    let linf = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok(SchemeComparison {
        mobility,
        t,
        linf_between: linf(&c, &u),
        linf_central: linf(&c, &exact),
        linf_upwind: linf(&u, &exact),
        x,
        central: c,
        upwind: u,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PiannConfig;

    fn exact_profiles(m: f64, times: &[f64]) -> Vec<Profile> {
        let exact = AnalyticSolution::new(m).unwrap();
        let x: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        times
            .iter()
            .map(|&t| {
                let u = exact_profile(&exact, &x, t).unwrap();
                Profile {
                    t,
                    x: x.clone(),
                    predicted: u.clone(),
                    exact: u,
                }
            })
            .collect()
    }

    #[test]
    fn exact_field_has_zero_error() {
        let report = evaluate_profiles(2.0, exact_profiles(2.0, &[0.04, 0.2, 0.4]), 5.0).unwrap();
        for e in &report.errors {
            assert_eq!((e.l2, e.linf, e.l2_outside, e.linf_outside), (0.0, 0.0, 0.0, 0.0));
            assert!(e.shock_error_cells <= 0.5 + 1e-9, "{e:?}");
        }
    }

    #[test]
    fn shock_location_picks_the_steepest_drop() {
        let x = [0.0, 0.1, 0.2, 0.3, 0.4];
        assert!((shock_location(&x, &[1.0, 0.9, 0.8, 0.1, 0.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn band_excludes_errors_near_the_shock() {
        let mut profiles = exact_profiles(2.0, &[0.2]);
        let shock = AnalyticSolution::new(2.0).unwrap().shock_position(0.2);
        let i = (shock / 0.01).round() as usize;
        profiles[0].predicted[i] += 0.3;
        let report = evaluate_profiles(2.0, profiles, 5.0).unwrap();
        let e = report.errors[0];
        assert!((e.linf - 0.3).abs() < 1e-12);
        assert_eq!(e.linf_outside, 0.0);
    }

    #[test]
    fn random_model_reports_finite_errors() {
        let model = Piann::initialized(
            PiannConfig {
                n_x: 11,
                hidden_dim: 4,
                ..PiannConfig::default()
            },
            3,
        )
        .unwrap();
        let report = evaluate(&model, 2.0, &[0.1, 0.3], DEFAULT_BAND_WIDTH).unwrap();
        assert!(report.is_finite());
        assert!(report.errors.iter().all(|e| e.l2.is_finite() && e.linf >= 0.0));
    }

    #[test]
    fn zeroed_scorer_gives_uniform_attention() {
        let model = Piann::initialized(
            PiannConfig {
                n_x: 9,
                hidden_dim: 4,
                ..PiannConfig::default()
            },
            5,
        )
        .unwrap()
        .with_zeroed_scorer();
        let map = attention_map(&model, 2.0, 0.3).unwrap();
        for (row, h) in map.alpha.data().chunks(8).zip(&map.entropy) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((h - 8f64.ln()).abs() < 1e-12);
        }
        assert!(attention_map(&model, 2.0, 0.0).is_err());
    }

    #[test]
    fn resolutions_must_refine() {
        assert!(check_coarse_to_fine(&[(0.01, 0.01), (0.005, 0.005)]).is_ok());
        assert!(check_coarse_to_fine(&[(0.005, 0.005), (0.01, 0.01)]).is_err());
        assert!(check_coarse_to_fine(&[]).is_err());
    }

    #[test]
    fn scheme_comparison_of_a_model_with_itself_is_zero() {
        let model = Piann::initialized(
            PiannConfig {
                n_x: 11,
                hidden_dim: 4,
                ..PiannConfig::default()
            },
            1,
        )
        .unwrap();
        let cmp = compare_residual_schemes(&model, &model, 2.0, 0.2).unwrap();
        assert_eq!(cmp.linf_between, 0.0);
    }
}
