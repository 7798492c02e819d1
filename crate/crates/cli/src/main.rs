//! `piann`: analytic and finite-volume solves, PIANN training, evaluation,
//! attention maps, residual-scheme comparison and resolution studies for
//! the Buckley-Leverett equation.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical abort.

mod config;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, Parser, Subcommand};

use piann_core::checkpoint;
use piann_core::eval::{self, AttentionMap, EvalReport};
use piann_core::parallel::Workers;
use piann_core::physics::{analytic_field, solve_upwind_fv, AnalyticSolution};
use piann_core::report::{self, LineChart, Series};
use piann_core::residual::mean_squared_residual;
use piann_core::trainer::{train_from, TrainState};
use piann_core::GridSpec;

use config::{ConfigError, RunArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "piann", version, about = "Physics-informed attention networks for the Buckley-Leverett equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the exact solution on the grid (`analytic.csv`).
    Analytic(RunArgs),
    /// Solve with the first-order upwind finite-volume scheme (`fv.csv`).
    Fv(RunArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Compare a trained model with the exact solution.
    Eval(RunArgs),
    /// Write attention maps and their row entropies.
    Attention(RunArgs),
    /// Compare a central-residual model with an upwind-residual model.
    Compare(RunArgs),
    /// Residuals of a trained model, or of fresh trainings, per resolution.
    Resolution(RunArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from the checkpoint instead of initializing a new model.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use piann_core::Error as E;
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidInput(_) | E::Bracketing(_) => 1,
                E::Io(_) | E::Csv(_) | E::Json(_) | E::Checkpoint(_) => 2,
                E::NonFiniteLoss { .. } | E::Tensor(_) | E::MissingGradient(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let (args, resume) = match &cli.command {
        Command::Train(t) => (&t.run, t.resume),
        Command::Analytic(a)
        | Command::Fv(a)
        | Command::Eval(a)
        | Command::Attention(a)
        | Command::Compare(a)
        | Command::Resolution(a) => (a, false),
    };
    let config = resolve(args)?;
    println!("{config}");
    let workers = Workers::from_env()?;
    fs::create_dir_all(&config.out_dir).with_context(|| format!("cannot create {}", config.out_dir.display()))?;
    match cli.command {
        Command::Analytic(_) => cmd_analytic(&config),
        Command::Fv(_) => cmd_fv(&config),
        Command::Train(_) => cmd_train(&config, resume, &workers),
        Command::Eval(_) => cmd_eval(&config, &workers),
        Command::Attention(_) => cmd_attention(&config),
        Command::Compare(_) => cmd_compare(&config),
        Command::Resolution(_) => cmd_resolution(&config, &workers),
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    RunConfig::resolve(args).map_err(|e| match e.downcast::<std::io::Error>() {
        Ok(io) => anyhow::Error::from(*io).context("cannot read config file"),
        Err(other) => anyhow::Error::from(ConfigError(other.to_string())),
    })
}

fn grid(config: &RunConfig) -> Result<GridSpec> {
    config.n_x()?;
    Ok(GridSpec::uniform(config.x_max, config.dx, config.t_max, config.dt)?)
}

fn time_index(grid: &GridSpec, t: f64) -> Result<usize> {
    grid.t
        .iter()
        .position(|&tj| (tj - t).abs() < 1e-9)
        .ok_or_else(|| ConfigError(format!("time {t} is not a node of the t-grid")).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    report::write_csv(path, rows).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainState> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_analytic(config: &RunConfig) -> Result<()> {
    let grid = grid(config)?;
    let mut rows = Vec::new();
    let mut chart = LineChart::new("Exact solution", "x", "u");
    for &m in &config.mobilities {
        let field = analytic_field(m, &grid)?;
        for &t in &config.times {
            let j = time_index(&grid, t)?;
            let points = grid.x.iter().copied().zip(field.row(j).iter().copied()).collect();
            chart.series.push(Series::new(format!("M={m} t={t}"), points));
        }
        rows.extend(report::analytic_rows(&field));
    }
    write_rows(&config.path("analytic.csv"), &rows)?;
    write_text(&config.path("analytic.svg"), &chart.to_svg())
}

fn cmd_fv(config: &RunConfig) -> Result<()> {
    let grid = grid(config)?;
    let mut rows = Vec::new();
    let mut chart = LineChart::new("Upwind finite volume vs exact", "x", "u");
    for &m in &config.mobilities {
        let exact = AnalyticSolution::new(m)?;
        let fv = solve_upwind_fv(m, &grid, config.cfl)?;
        for (j, &t) in grid.t.iter().enumerate() {
            for (i, &x) in grid.x.iter().enumerate() {
                rows.push(report::FvRow {
                    mobility: m,
                    t,
                    x,
                    u_fv: fv.field.at(j, i),
                    u_exact: exact.evaluate(x, t)?,
                });
            }
        }
        for &t in &config.times {
            let j = time_index(&grid, t)?;
            let u = fv.field.row(j);
            let l1: f64 = grid
                .x
                .iter()
                .zip(u)
                .map(|(&x, &v)| Ok((v - exact.evaluate(x, t)?).abs()))
                .sum::<Result<f64>>()?
                * grid.dx();
            println!(
                "M={m} t={t} shock_fv={:.6} shock_exact={:.6} l1={l1:.6e}",
                eval::shock_location(&grid.x, u),
                exact.shock_position(t)
            );
            chart
                .series
                .push(Series::new(format!("FV M={m} t={t}"), grid.x.iter().copied().zip(u.iter().copied()).collect()));
            let exact_u = eval::exact_profile(&exact, &grid.x, t)?;
            chart
                .series
                .push(Series::new(format!("exact M={m} t={t}"), grid.x.iter().copied().zip(exact_u).collect()).dashed());
        }
        println!("M={m} substeps={}", fv.substeps);
    }
    write_rows(&config.path("fv.csv"), &rows)?;
    write_text(&config.path("fv.svg"), &chart.to_svg())
}

fn cmd_train(config: &RunConfig, resume: bool, workers: &Workers) -> Result<()> {
    let path = config.checkpoint_path();
    let mut state = if resume {
        let mut state = load_model(path)?;
        state.config.epochs = config.epochs;
        state
    } else {
        TrainState::new(config.train_config()?)?
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let log = train_from(&mut state, Some(path), workers, |r| println!("epoch={} loss={:e}", r.epoch, r.loss))
        .with_context(|| format!("training stopped; last checkpoint at {}", path.display()))?;
    println!("wrote {}", path.display());

    let rows = report::loss_rows(&log);
    let loss_path = config.path("loss.csv");
    if rows.is_empty() {
        write_text(&loss_path, "epoch,loss,seconds\n")?;
    } else {
        write_rows(&loss_path, &rows)?;
        let mut chart = LineChart::new("Training loss", "epoch", "loss");
        chart.log_y = true;
        chart.series.push(Series::new(
            "loss",
            rows.iter().map(|r| (r.epoch as f64, r.loss)).collect(),
        ));
        write_text(&config.path("loss.svg"), &chart.to_svg())?;
    }
    if let Some(last) = log.losses.last() {
        println!("final loss={last:e} epochs={}", state.epoch);
    }
    Ok(())
}

fn profile_chart(report: &EvalReport) -> LineChart {
    let mut chart = LineChart::new(format!("PIANN vs exact, M={}", report.mobility), "x", "u");
    for p in &report.profiles {
        let pts = |v: &[f64]| p.x.iter().copied().zip(v.iter().copied()).collect();
        chart.series.push(Series::new(format!("PIANN t={}", p.t), pts(&p.predicted)));
        chart.series.push(Series::new(format!("exact t={}", p.t), pts(&p.exact)).dashed());
    }
    chart
}

fn cmd_eval(config: &RunConfig, workers: &Workers) -> Result<()> {
    let state = load_model(config.checkpoint_path())?;
    let residual_config = state.config.residual_config()?;
    let (mut profiles, mut metrics) = (Vec::new(), Vec::new());
    for &m in &config.mobilities {
        let mut report = eval::evaluate(&state.model, m, &config.times, config.band_width)?;
        report.residual = Some(mean_squared_residual(&state.model, &residual_config, m, workers)?);
        if !report.is_finite() {
            return Err(piann_core::Error::NonFiniteLoss {
                epoch: state.epoch,
                mobility: m,
                detail: "evaluation produced non-finite values".into(),
            }
            .into());
        }
        for e in &report.errors {
            println!(
                "M={m} t={} l2={:.4e} linf={:.4e} linf_outside={:.4e} shock={:.4} exact_shock={:.4} shock_error_cells={:.2}",
                e.t, e.l2, e.linf, e.linf_outside, e.shock_estimate, e.shock_exact, e.shock_error_cells
            );
        }
        println!("M={m} mean_squared_residual={:.6e}", report.residual.unwrap_or(f64::NAN));
        write_text(&config.path(&format!("profiles_M{m}.svg")), &profile_chart(&report).to_svg())?;
        profiles.extend(report::profile_rows(&report));
        metrics.extend(report::metrics_rows(&report));
    }
    write_rows(&config.path("profiles.csv"), &profiles)?;
    write_rows(&config.path("metrics.csv"), &metrics)
}

fn write_attention(config: &RunConfig, map: &AttentionMap) -> Result<()> {
    let stem = format!("attention_M{}_t{}", map.mobility, map.t);
    write_rows(&config.path(&format!("{stem}.csv")), &report::attention_rows(map))?;
    write_rows(&config.path(&format!("{stem}_entropy.csv")), &report::entropy_rows(map))?;
    let title = format!("Attention, M={} t={}", map.mobility, map.t);
    write_text(
        &config.path(&format!("{stem}.svg")),
        &report::heatmap_svg(&title, &map.alpha, "encoder position j", "output position i"),
    )
}

fn cmd_attention(config: &RunConfig) -> Result<()> {
    let state = load_model(config.checkpoint_path())?;
    let n = state.model.config().n_x - 1;
    for &m in &config.mobilities {
        for &t in &config.times {
            let map = eval::attention_map(&state.model, m, t)?;
            println!(
                "M={m} t={t} mean_row_entropy={:.6} uniform_entropy={:.6}",
                map.mean_entropy(),
                (n as f64).ln()
            );
            write_attention(config, &map)?;
        }
    }
    Ok(())
}

fn cmd_compare(config: &RunConfig) -> Result<()> {
    let Some(upwind_path) = &config.upwind_checkpoint else {
        bail!(ConfigError("compare needs --upwind-checkpoint".into()));
    };
    let central = load_model(config.checkpoint_path())?;
    let upwind = load_model(upwind_path)?;
    for &m in &config.mobilities {
        for &t in &config.times {
            let cmp = eval::compare_residual_schemes(&central.model, &upwind.model, m, t)?;
            println!(
                "M={m} t={t} linf_between={:.4e} linf_central={:.4e} linf_upwind={:.4e}",
                cmp.linf_between, cmp.linf_central, cmp.linf_upwind
            );
            let stem = format!("comparison_M{m}_t{t}");
            write_rows(&config.path(&format!("{stem}.csv")), &report::comparison_rows(&cmp))?;
            let mut chart = LineChart::new(format!("Central vs upwind residual, M={m} t={t}"), "x", "u");
            let pts = |v: &[f64]| cmp.x.iter().copied().zip(v.iter().copied()).collect();
            chart.series.push(Series::new("central", pts(&cmp.central)));
            chart.series.push(Series::new("upwind", pts(&cmp.upwind)));
            chart.series.push(Series::new("exact", pts(&cmp.exact)).dashed());
            write_text(&config.path(&format!("{stem}.svg")), &chart.to_svg())?;
        }
    }
    Ok(())
}

fn cmd_resolution(config: &RunConfig, workers: &Workers) -> Result<()> {
    let rows = if config.retrain {
        eval::resolution_study(&config.train_config()?, &config.resolutions, config.study_m, workers, |k, r| {
            println!("resolution={k} epoch={} loss={:e}", r.epoch, r.loss)
        })?
    } else {
        let state = load_model(config.checkpoint_path())?;
        eval::resolution_residuals(&state.model, &state.config, &config.resolutions, config.study_m, workers)?
    };
    for r in &rows {
        println!("dx={} dt={} residual={:.6e}", r.dx, r.dt, r.residual);
    }
    write_rows(&config.path("resolution.csv"), &rows)
}
