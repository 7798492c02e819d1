//! Full-batch ADAM training against the residual loss.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::layers::ParamRegistry;
use crate::model::{Piann, PiannConfig};
use crate::parallel::Workers;
use crate::residual::{loss_and_gradient, R1Mode, R2Mode, ResidualConfig};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments of every parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamRegistry, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected ADAM update:
///
/// ```text
/// m ← β₁ m + (1 − β₁) g        v ← β₂ v + (1 − β₂) g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)    with m̂ = m / (1 − β₁ᵏ), v̂ = v / (1 − β₂ᵏ)
/// ```
pub fn adam_step(state: &mut AdamState, params: &mut ParamRegistry, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::MissingGradient(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for ((name, g), value) in names.iter().zip(grads).zip(params.values_mut()) {
        if g.shape() != value.shape() {
            return Err(Error::MissingGradient(format!(
                "gradient of `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                value.shape()
            )));
        }
    }

    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - BETA1.powi(k);
    let c2 = 1.0 - BETA2.powi(k);
    for (((theta, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((th, &g), m), v) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *th -= state.lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: PiannConfig,
    pub t_max: f64,
    pub dt: f64,
    pub mobilities: Vec<f64>,
    pub r1_mode: R1Mode,
    pub r2_mode: R2Mode,
    pub include_first_step: bool,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// The desk-scale run: `Δx = Δt = 0.01` on `[0, 1] × [0, 0.5]`,
    /// `M ∈ {2, 10, 50}`, 200 epochs at learning rate 1e-3.
    fn default() -> Self {
        Self {
            model: PiannConfig::default(),
            t_max: 0.5,
            dt: 0.01,
            mobilities: vec![2.0, 10.0, 50.0],
            r1_mode: R1Mode::FiniteDifference,
            r2_mode: R2Mode::Central,
            include_first_step: true,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn dx(&self) -> f64 {
        self.model.x_max / (self.model.n_x - 1) as f64
    }

    /// Residual grid whose x-nodes coincide with the model's.
    pub fn residual_config(&self) -> Result<ResidualConfig> {
        self.model.validate()?;
        let grid = GridSpec::uniform(self.model.x_max, self.dx(), self.t_max, self.dt)?
            .with_mobilities(self.mobilities.clone())?;
        let config = ResidualConfig {
            r1_mode: self.r1_mode,
            r2_mode: self.r2_mode,
            include_first_step: self.include_first_step,
            grid,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.residual_config()?;
        if self.mobilities.is_empty() {
            return Err(Error::InvalidInput("mobility list is empty".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidInput(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub seed: u64,
    /// Index of the first logged epoch (non-zero after a resume).
    pub first_epoch: usize,
    /// Loss at the parameters entering each epoch's update.
    pub losses: Vec<f64>,
    pub seconds: Vec<f64>,
}

/// Model, optimizer and progress: everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Piann,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// Freshly initialized state for `config`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Piann::initialized(config.model.clone(), config.seed)?;
        let adam = AdamState::new(&model.params, config.lr);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
        })
    }
}

/// Progress passed to the per-epoch callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Runs the remaining epochs of `state`, checkpointing to `checkpoint_path`
/// every `checkpoint_every` epochs and once at the end.
pub fn train_from(
    state: &mut TrainState,
    checkpoint_path: Option<&Path>,
    workers: &Workers,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainLog> {
    let config = state.config.clone();
    let residual = config.residual_config()?;
    let mut log = TrainLog {
        config: config.clone(),
        seed: config.seed,
        first_epoch: state.epoch,
        losses: Vec::new(),
        seconds: Vec::new(),
    };
    while state.epoch < config.epochs {
        let start = Instant::now();
        let epoch = state.epoch;
        let lg = loss_and_gradient(&state.model, &residual, &config.mobilities, workers)?;
        if !lg.loss.total.is_finite() {
            let (i, bad) = lg
                .loss
                .per_mobility
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
                .unwrap_or((0, &lg.loss.total));
            return Err(Error::NonFiniteLoss {
                epoch,
                mobility: config.mobilities[i],
                detail: format!("loss {bad}; per mobility {:?}", lg.loss.per_mobility),
            });
        }
        if let Some((name, _)) = state
            .model
            .params
            .names()
            .zip(&lg.grads)
            .find(|(_, g)| !g.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                epoch,
                mobility: f64::NAN,
                detail: format!("gradient of `{name}` is not finite"),
            });
        }
        adam_step(&mut state.adam, &mut state.model.params, &lg.grads)?;
        if let Some((name, _)) = state.model.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                mobility: f64::NAN,
                detail: format!("parameter `{name}` is not finite after the update"),
            });
        }
        state.epoch += 1;
        let seconds = start.elapsed().as_secs_f64();
        log.losses.push(lg.loss.total);
        log.seconds.push(seconds);
        on_epoch(&EpochReport {
            epoch,
            loss: lg.loss.total,
            seconds,
        });
        if let Some(path) = checkpoint_path {
            let every = config.checkpoint_every;
            if every > 0 && state.epoch.is_multiple_of(every) && state.epoch < config.epochs {
                checkpoint::save(path, state)?;
            }
        }
    }
    if let Some(path) = checkpoint_path {
        checkpoint::save(path, state)?;
    }
    Ok(log)
}

/// Initializes a model from `config.seed` and trains it for `config.epochs`.
pub fn train(
    config: TrainConfig,
    checkpoint_path: Option<&Path>,
    workers: &Workers,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(TrainState, TrainLog)> {
    let mut state = TrainState::new(config)?;
    let log = train_from(&mut state, checkpoint_path, workers, on_epoch)?;
    Ok((state, log))
}

/// Running median over a trailing window of `width` values; the first
/// `width − 1` entries use the shorter prefix.
pub fn median_filter(values: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    (0..values.len())
        .map(|i| {
            let mut window = values[i.saturating_sub(width - 1)..=i].to_vec();
            window.sort_by(f64::total_cmp);
            let n = window.len();
            if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            }
        })
        .collect()
}
