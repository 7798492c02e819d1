//! Run configuration: defaults, an optional `key = value` file, and flags,
//! in increasing order of precedence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use piann_core::residual::{R1Mode, R2Mode};
use piann_core::trainer::TrainConfig;
use piann_core::{PiannConfig, ScorerKind};

/// Every option a subcommand may read. Each long flag is also a config-file
/// key of the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Config file of `key = value` lines; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Right end of the spatial domain [default: 1].
    #[arg(long)]
    pub x_max: Option<f64>,
    /// Spatial step [default: 0.01].
    #[arg(long)]
    pub dx: Option<f64>,
    /// Final time [default: 0.5].
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Time step [default: 0.01].
    #[arg(long)]
    pub dt: Option<f64>,
    /// A single mobility ratio.
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<String>,
    /// Comma-separated mobility ratios, e.g. `2,4.5,71`.
    #[arg(long, allow_hyphen_values = true)]
    pub m_list: Option<String>,
    /// Inclusive `start:step:end`, e.g. `2:2:100`.
    #[arg(long)]
    pub m_range: Option<String>,
    /// GRU and attention width [default: 32].
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// `additive` or `linear`.
    #[arg(long)]
    pub scorer: Option<String>,
    /// `finite_difference` or `autodiff`.
    #[arg(long)]
    pub r1_mode: Option<String>,
    /// `central` or `upwind`.
    #[arg(long)]
    pub r2_mode: Option<String>,
    /// Also difference the first time step against the initial state.
    #[arg(long)]
    pub include_first_step: Option<bool>,
    /// Training epochs [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initialization seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint every this many epochs (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Comma-separated evaluation times.
    #[arg(long)]
    pub times: Option<String>,
    /// Half-width, in cells, of the band around the shock excluded from the
    /// `_outside` errors.
    #[arg(long)]
    pub band_width: Option<f64>,
    /// Courant number of the finite-volume solver.
    #[arg(long)]
    pub cfl: Option<f64>,
    /// Output directory [default: out].
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Model checkpoint [default: <out-dir>/model.ckpt].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint of the upwind-residual model (`compare`).
    #[arg(long, value_name = "FILE")]
    pub upwind_checkpoint: Option<PathBuf>,
    /// Comma-separated `dx:dt` pairs, coarse to fine (`resolution`).
    #[arg(long)]
    pub resolutions: Option<String>,
    /// Mobility ratio at which residuals are reported (`resolution`).
    #[arg(long)]
    pub study_m: Option<f64>,
    /// Train afresh at every resolution instead of evaluating a checkpoint.
    #[arg(long)]
    pub retrain: Option<bool>,
}

/// The fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub x_max: f64,
    pub dx: f64,
    pub t_max: f64,
    pub dt: f64,
    pub mobilities: Vec<f64>,
    pub hidden_dim: usize,
    pub scorer: ScorerKind,
    pub r1_mode: R1Mode,
    pub r2_mode: R2Mode,
    pub include_first_step: bool,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub times: Vec<f64>,
    pub band_width: f64,
    pub cfl: f64,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub upwind_checkpoint: Option<PathBuf>,
    pub resolutions: Vec<(f64, f64)>,
    pub study_m: f64,
    pub retrain: bool,
}

/// A configuration problem; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

const KEYS: &[&str] = &[
    "x-max",
    "dx",
    "t-max",
    "dt",
    "m",
    "m-list",
    "m-range",
    "hidden-dim",
    "scorer",
    "r1-mode",
    "r2-mode",
    "include-first-step",
    "epochs",
    "lr",
    "seed",
    "checkpoint-every",
    "times",
    "band-width",
    "cfl",
    "out-dir",
    "checkpoint",
    "upwind-checkpoint",
    "resolutions",
    "study-m",
    "retrain",
];

/// Parses `key = value` lines. `#` and `;` start comments, `[section]`
/// headers are ignored and `_` in keys is read as `-`.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError(format!("line {}: unknown key `{key}`", n + 1)));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<f64>(key, s))
        .collect()
}

/// Inclusive `start:step:end`.
pub fn parse_range(value: &str) -> Result<Vec<f64>> {
    let parts = value.split(':').map(|s| parse::<f64>("m-range", s)).collect::<Result<Vec<_>>>()?;
    let [start, step, end] = parts[..] else {
        return Err(ConfigError(format!("m-range must be start:step:end, got `{value}`")));
    };
    if !(step > 0.0 && end >= start) {
        return Err(ConfigError(format!("m-range needs step > 0 and end ≥ start, got `{value}`")));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| start + k as f64 * step).collect())
}

fn parse_resolutions(value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (dx, dt) = pair
                .split_once(':')
                .ok_or_else(|| ConfigError(format!("resolution must be dx:dt, got `{pair}`")))?;
            Ok((parse("resolutions", dx)?, parse("resolutions", dt)?))
        })
        .collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match (flag, self.file.get(key)) {
            (Some(v), _) => Ok(v),
            (None, Some(s)) => parse(key, s),
            (None, None) => Ok(default),
        }
    }

    fn get_with<T>(&self, flag: Option<&str>, key: &str, default: T, f: impl Fn(&str) -> Result<T>) -> Result<T> {
        match flag.or(self.file.get(key).map(String::as_str)) {
            Some(s) => f(s),
            None => Ok(default),
        }
    }

    fn mobilities(&self, args: &RunArgs) -> Result<Vec<f64>> {
        let pick = |m: Option<&str>, list: Option<&str>, range: Option<&str>, origin: &str| -> Result<Option<Vec<f64>>> {
            match (m, list, range) {
                (None, None, None) => Ok(None),
                (Some(v), None, None) => Ok(Some(vec![parse("m", v)?])),
                (None, Some(v), None) => Ok(Some(parse_list("m-list", v)?)),
                (None, None, Some(v)) => Ok(Some(parse_range(v)?)),
                _ => Err(ConfigError(format!("{origin}: give only one of m, m-list and m-range"))),
            }
        };
        let from_flags = pick(args.m.as_deref(), args.m_list.as_deref(), args.m_range.as_deref(), "flags")?;
        let from_file = pick(
            self.file.get("m").map(String::as_str),
            self.file.get("m-list").map(String::as_str),
            self.file.get("m-range").map(String::as_str),
            "config file",
        )?;
        let list = from_flags.or(from_file).unwrap_or_else(|| TrainConfig::default().mobilities);
        if list.is_empty() {
            return Err(ConfigError("the mobility list is empty".into()));
        }
        if let Some(bad) = list.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(ConfigError(format!("mobility ratio must be > 0, got {bad}")));
        }
        Ok(list)
    }
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> std::result::Result<Self, Box<dyn std::error::Error>> {
        let file = match &args.config {
            Some(path) => parse_config_file(&std::fs::read_to_string(path)?)?,
            None => BTreeMap::new(),
        };
        Ok(Self::resolve_with(args, file)?)
    }

    pub fn resolve_with(args: &RunArgs, file: BTreeMap<String, String>) -> Result<Self> {
        let r = Resolver { file };
        let defaults = TrainConfig::default();
        let enum_value = |flag: &Option<String>, key: &str, default: &str| -> Result<String> {
            r.get_with(flag.as_deref(), key, default.to_string(), |s| Ok(s.to_string()))
        };
        let out_dir: PathBuf = r.get(args.out_dir.clone(), "out-dir", PathBuf::from("out"))?;
        let config = Self {
            x_max: r.get(args.x_max, "x-max", defaults.model.x_max)?,
            dx: r.get(args.dx, "dx", defaults.dx())?,
            t_max: r.get(args.t_max, "t-max", defaults.t_max)?,
            dt: r.get(args.dt, "dt", defaults.dt)?,
            mobilities: r.mobilities(args)?,
            hidden_dim: r.get(args.hidden_dim, "hidden-dim", defaults.model.hidden_dim)?,
            scorer: parse("scorer", &enum_value(&args.scorer, "scorer", "additive")?)?,
            r1_mode: parse("r1-mode", &enum_value(&args.r1_mode, "r1-mode", "finite_difference")?)?,
            r2_mode: parse("r2-mode", &enum_value(&args.r2_mode, "r2-mode", "central")?)?,
            include_first_step: r.get(args.include_first_step, "include-first-step", defaults.include_first_step)?,
            epochs: r.get(args.epochs, "epochs", defaults.epochs)?,
            lr: r.get(args.lr, "lr", defaults.lr)?,
            seed: r.get(args.seed, "seed", defaults.seed)?,
            checkpoint_every: r.get(args.checkpoint_every, "checkpoint-every", defaults.checkpoint_every)?,
            times: r.get_with(args.times.as_deref(), "times", vec![0.04, 0.2, 0.4], |s| parse_list("times", s))?,
            band_width: r.get(args.band_width, "band-width", 5.0)?,
            cfl: r.get(args.cfl, "cfl", 0.9)?,
            checkpoint: r.get(args.checkpoint.clone(), "checkpoint", out_dir.join("model.ckpt"))?,
            upwind_checkpoint: match (&args.upwind_checkpoint, r.file.get("upwind-checkpoint")) {
                (Some(p), _) => Some(p.clone()),
                (None, Some(s)) => Some(PathBuf::from(s)),
                (None, None) => None,
            },
            resolutions: r.get_with(
                args.resolutions.as_deref(),
                "resolutions",
                vec![(0.01, 0.01), (0.005, 0.005)],
                parse_resolutions,
            )?,
            study_m: r.get(args.study_m, "study-m", 4.5)?,
            retrain: r.get(args.retrain, "retrain", false)?,
            out_dir,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("x-max", self.x_max),
            ("dx", self.dx),
            ("t-max", self.t_max),
            ("dt", self.dt),
            ("lr", self.lr),
            ("study-m", self.study_m),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError(format!("`{key}` must be > 0, got {v}")));
            }
        }
        if self.band_width.is_nan() || self.band_width < 0.0 {
            return Err(ConfigError(format!("`band-width` must be ≥ 0, got {}", self.band_width)));
        }
        if self.hidden_dim == 0 {
            return Err(ConfigError("`hidden-dim` must be ≥ 1".into()));
        }
        if self.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(ConfigError("evaluation times must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn n_x(&self) -> Result<usize> {
        let intervals = (self.x_max / self.dx).round();
        if (intervals * self.dx - self.x_max).abs() > 1e-9 * self.x_max.max(1.0) || intervals < 2.0 {
            return Err(ConfigError(format!(
                "dx = {} must divide x-max = {} into at least two cells",
                self.dx, self.x_max
            )));
        }
        Ok(intervals as usize + 1)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: PiannConfig {
                n_x: self.n_x()?,
                x_max: self.x_max,
                hidden_dim: self.hidden_dim,
                scorer: self.scorer,
                ..PiannConfig::default()
            },
            t_max: self.t_max,
            dt: self.dt,
            mobilities: self.mobilities.clone(),
            r1_mode: self.r1_mode,
            r2_mode: self.r2_mode,
            include_first_step: self.include_first_step,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn checkpoint_path(&self) -> &Path {
        &self.checkpoint
    }
}

impl fmt::Display for RunConfig {
    /// The resolved configuration in config-file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let resolutions: Vec<String> = self.resolutions.iter().map(|(dx, dt)| format!("{dx}:{dt}")).collect();
        writeln!(f, "# resolved configuration")?;
        writeln!(f, "x-max = {}", self.x_max)?;
        writeln!(f, "dx = {}", self.dx)?;
        writeln!(f, "t-max = {}", self.t_max)?;
        writeln!(f, "dt = {}", self.dt)?;
        writeln!(f, "m-list = {}", join(&self.mobilities))?;
        writeln!(f, "hidden-dim = {}", self.hidden_dim)?;
        writeln!(f, "scorer = {}", self.scorer)?;
        writeln!(f, "r1-mode = {}", self.r1_mode)?;
        writeln!(f, "r2-mode = {}", self.r2_mode)?;
        writeln!(f, "include-first-step = {}", self.include_first_step)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "checkpoint-every = {}", self.checkpoint_every)?;
        writeln!(f, "times = {}", join(&self.times))?;
        writeln!(f, "band-width = {}", self.band_width)?;
        writeln!(f, "cfl = {}", self.cfl)?;
        writeln!(f, "out-dir = {}", self.out_dir.display())?;
        writeln!(f, "checkpoint = {}", self.checkpoint.display())?;
        if let Some(p) = &self.upwind_checkpoint {
            writeln!(f, "upwind-checkpoint = {}", p.display())?;
        }
        writeln!(f, "resolutions = {}", resolutions.join(","))?;
        writeln!(f, "study-m = {}", self.study_m)?;
        write!(f, "retrain = {}", self.retrain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_inclusive() {
        let m = parse_range("2:2:100").unwrap();
        assert_eq!(m.len(), 50);
        assert_eq!((m[0], m[49]), (2.0, 100.0));
        assert!(parse_range("2:0:10").is_err());
        assert!(parse_range("2:2").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let file = parse_config_file("# desk run\n[train]\nepochs = 7\nlr=0.01\nm_list = 2, 4.5\n").unwrap();
        let args = RunArgs {
            epochs: Some(3),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve_with(&args, file).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.mobilities, vec![2.0, 4.5]);
    }

    #[test]
    fn mobility_flag_replaces_file_list() {
        let file = parse_config_file("m-range = 2:2:10").unwrap();
        let args = RunArgs {
            m: Some("4.5".into()),
            ..RunArgs::default()
        };
        assert_eq!(RunConfig::resolve_with(&args, file).unwrap().mobilities, vec![4.5]);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(parse_config_file("no equals sign").is_err());
        assert!(parse_config_file("colour = red").is_err());
        let args = RunArgs {
            m: Some("-3".into()),
            ..RunArgs::default()
        };
        assert!(RunConfig::resolve_with(&args, BTreeMap::new()).is_err());
        let args = RunArgs {
            m: Some("2".into()),
            m_list: Some("3".into()),
            ..RunArgs::default()
        };
        assert!(RunConfig::resolve_with(&args, BTreeMap::new()).is_err());
    }

    #[test]
    fn echoed_configuration_parses_back() {
        let cfg = RunConfig::resolve_with(&RunArgs::default(), BTreeMap::new()).unwrap();
        let again = RunConfig::resolve_with(&RunArgs::default(), parse_config_file(&cfg.to_string()).unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
    }
}
