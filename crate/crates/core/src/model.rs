//! The PIANN forward pass `u_θ(t, M)`.
//!
//! ```text
//! (t, M) ──dense──▶ h⁰ ──GRU(x₁)──▶ y¹ ──GRU(x₂)──▶ … ──GRU(x_N)──▶ y^N = d⁰
//!
//! for i = 1..N:
//!     E_i,j = a(d^{i-1}, y^j)          α_i = softmax(E_i)
//!     c^i   = Σ_j α_i,j y^j
//!     d^i   = GRU([u_{i-1}; c^i], d^{i-1})
//!     u_i   = σ(dense(d^i))
//! ```
//!
//! `u_0 = 1` is concatenated in front (inflow boundary), and `t = 0` returns
//! the initial state `[1, 0, …, 0]` without evaluating the network.

use serde::{Deserialize, Serialize};

use crate::dual::{concat_dual, Dual};
use crate::error::{Error, Result, TensorError};
use crate::layers::{
    init_params, AttentionScorer, BoundParams, DenseLayer, GruCell, InitScheme, ParamRegistry, ScorerKind,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiannConfig {
    /// Number of x-nodes, `N + 1`.
    pub n_x: usize,
    /// Right end of the spatial domain; nodes are uniform on `[0, x_max]`.
    pub x_max: f64,
    pub hidden_dim: usize,
    pub scorer: ScorerKind,
    /// Inputs are fed as `(t · time_scale, M · mobility_scale)`.
    pub time_scale: f64,
    pub mobility_scale: f64,
}

impl Default for PiannConfig {
    fn default() -> Self {
        Self {
            n_x: 101,
            x_max: 1.0,
            hidden_dim: 32,
            scorer: ScorerKind::Additive,
            time_scale: 1.0,
            mobility_scale: 0.01,
        }
    }
}

impl PiannConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_x < 3 {
            return Err(Error::InvalidInput(format!("n_x must be ≥ 3, got {}", self.n_x)));
        }
        if self.hidden_dim < 1 {
            return Err(Error::InvalidInput("hidden_dim must be ≥ 1".into()));
        }
        if !(self.x_max.is_finite() && self.x_max > 0.0) {
            return Err(Error::InvalidInput(format!("x_max must be > 0, got {}", self.x_max)));
        }
        if !(self.time_scale.is_finite() && self.mobility_scale.is_finite()) {
            return Err(Error::InvalidInput("input scales must be finite".into()));
        }
        Ok(())
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        let n = self.n_x - 1;
        (0..=n).map(|i| self.x_max * i as f64 / n as f64).collect()
    }
}

/// Saturations at `x_0..x_N` and the attention rows that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PiannOutput {
    pub u: Tensor,
    /// `N × N` row-stochastic matrix; absent at `t = 0`.
    pub attention: Option<Tensor>,
}

/// Forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedOutput<'t> {
    /// `[N + 1]` saturations, with the time tangent when requested.
    pub u: Dual<'t>,
    pub attention: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    embed: DenseLayer,
    encoder_input: DenseLayer,
    encoder: GruCell,
    attention: AttentionScorer,
    decoder: GruCell,
    output: DenseLayer,
}

/// Architecture plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Piann {
    config: PiannConfig,
    layers: Layers,
    pub params: ParamRegistry,
}

impl Piann {
    /// Registers every layer; parameters are zero until initialized.
    pub fn new(config: PiannConfig) -> Result<Self> {
        config.validate()?;
        let hid = config.hidden_dim;
        let mut params = ParamRegistry::new();
        let layers = Layers {
            embed: DenseLayer::new(&mut params, "embed", 2, hid)?,
            encoder_input: DenseLayer::new(&mut params, "encoder_input", 1, hid)?,
            encoder: GruCell::new(&mut params, "encoder", hid, hid)?,
            attention: AttentionScorer::new(&mut params, "attention", config.scorer, hid, hid)?,
            decoder: GruCell::new(&mut params, "decoder", 1 + hid, hid)?,
            output: DenseLayer::new(&mut params, "output", hid, 1)?,
        };
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    /// A model with Xavier-uniform weights drawn from `seed`.
    pub fn initialized(config: PiannConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config)?;
        init_params(&mut model.params, InitScheme::XavierUniform, seed);
        Ok(model)
    }

    pub fn config(&self) -> &PiannConfig {
        &self.config
    }

    /// The same weights on `n_x` uniform nodes over the same domain. No
    /// parameter depends on the node count, so any resolution can be
    /// evaluated with a trained model.
    pub fn with_nodes(&self, n_x: usize) -> Result<Self> {
        let mut model = Self::new(PiannConfig {
            n_x,
            ..self.config.clone()
        })?;
        model.params = self.params.clone();
        Ok(model)
    }

    /// A copy whose attention scorer parameters are all zero, so every
    /// encoder position receives the same score.
    pub fn with_zeroed_scorer(&self) -> Self {
        let mut model = self.clone();
        for name in self.scorer_param_names() {
            let shape = model.params.get(&name).expect("registered").shape().to_vec();
            model.params.set(&name, Tensor::zeros(&shape)).expect("same shape");
        }
        model
    }

    /// Parameters of the attention scorer, in registration order.
    pub fn scorer_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("attention."))
            .map(str::to_string)
            .collect()
    }

    /// Records `u_θ(t, M)` for `t > 0` on `tape`. With `time_tangent` the
    /// output also carries `∂u/∂t`.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        t: f64,
        mobility: f64,
        time_tangent: bool,
    ) -> Result<TapedOutput<'t>, TensorError> {
        let cfg = &self.config;
        let n = cfg.n_x - 1;
        let layers = &self.layers;

        let input_value = tape.constant(Tensor::vector(vec![t * cfg.time_scale, mobility * cfg.mobility_scale]));
        let input = if time_tangent {
            Dual::with_tangent(input_value, tape.constant(Tensor::vector(vec![cfg.time_scale, 0.0])))
        } else {
            Dual::constant(input_value)
        };
        let mut h = layers.embed.forward(params, input)?;

        let x_nodes = cfg.x_nodes();
        let mut encoded = Vec::with_capacity(n);
        for &x in &x_nodes[1..] {
            let x = Dual::constant(tape.constant(Tensor::vector(vec![x])));
            let lifted = layers.encoder_input.forward(params, x)?;
            h = layers.encoder.step(params, lifted, h)?;
            encoded.push(h.reshape(&[1, cfg.hidden_dim])?);
        }
        let ys = concat_dual(&encoded, 0)?;
        let keys = layers.attention.keys(params, ys)?;

        let mut d = h;
        let mut u_prev = Dual::constant(tape.constant(Tensor::vector(vec![1.0])));
        let mut u_parts = Vec::with_capacity(n + 1);
        u_parts.push(u_prev);
        let mut alpha_rows = Vec::with_capacity(n);
        for _ in 0..n {
            let scores = layers.attention.scores(params, &keys, d)?;
            let alpha = scores.softmax_rows()?;
            let context = alpha.matmul(ys)?;
            let step_input = concat_dual(&[u_prev, context], 0)?;
            d = layers.decoder.step(params, step_input, d)?;
            let u = layers.output.forward(params, d)?.sigmoid()?;
            alpha_rows.push(alpha.value.reshape(&[1, n])?);
            u_parts.push(u);
            u_prev = u;
        }

        Ok(TapedOutput {
            u: concat_dual(&u_parts, 0)?,
            attention: crate::tape::concat(&alpha_rows, 0)?,
        })
    }

    /// Initial state `[1, 0, …, 0]`, independent of the parameters.
    pub fn forward_at_t0(&self) -> PiannOutput {
        initial_state(self.config.n_x)
    }

    pub fn forward(&self, t: f64, mobility: f64) -> Result<PiannOutput> {
        check_inputs(t, mobility)?;
        if t == 0.0 {
            return Ok(self.forward_at_t0());
        }
        let tape = Tape::new();
        let params = self.params.bind(&tape);
        let out = self.forward_on_tape(&tape, &params, t, mobility, false)?;
        Ok(PiannOutput {
            u: out.u.value.value(),
            attention: Some(out.attention.value()),
        })
    }

    /// `∂u_i/∂t` for every node; the boundary component is identically 0.
    pub fn time_derivative(&self, t: f64, mobility: f64) -> Result<Tensor> {
        check_inputs(t, mobility)?;
        if t == 0.0 {
            return Err(Error::InvalidInput(
                "time derivative is undefined at t = 0, where the initial state is imposed".into(),
            ));
        }
        let tape = Tape::new();
        let params = self.params.bind(&tape);
        let out = self.forward_on_tape(&tape, &params, t, mobility, true)?;
        Ok(out.u.tangent_value())
    }
}

pub fn initial_state(n_x: usize) -> PiannOutput {
    let mut u = Tensor::zeros(&[n_x]);
    u.data_mut()[0] = 1.0;
    PiannOutput { u, attention: None }
}

fn check_inputs(t: f64, mobility: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidInput(format!("time must be finite and ≥ 0, got {t}")));
    }
    if !(mobility.is_finite() && mobility > 0.0) {
        return Err(Error::InvalidInput(format!("mobility ratio must be finite and > 0, got {mobility}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Piann {
        Piann::initialized(
            PiannConfig {
                n_x: 8,
                hidden_dim: 5,
                ..PiannConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn output_range_and_boundary() {
        let model = small(1);
        let out = model.forward(0.3, 4.5).unwrap();
        assert_eq!(out.u.len(), 8);
        assert_eq!(out.u.data()[0], 1.0);
        assert!(out.u.data()[1..].iter().all(|&u| u > 0.0 && u < 1.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = small(2);
        let att = model.forward(0.2, 2.0).unwrap().attention.unwrap();
        assert_eq!(att.shape(), &[7, 7]);
        for row in att.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small(3);
        let a = model.forward(0.17, 48.0).unwrap();
        let b = model.forward(0.17, 48.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn t0_is_initial_state() {
        for seed in [1, 2] {
            let out = small(seed).forward(0.0, 7.0).unwrap();
            assert_eq!(out.u.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            assert!(out.attention.is_none());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = small(1);
        assert!(model.forward(-0.1, 2.0).is_err());
        assert!(model.forward(f64::NAN, 2.0).is_err());
        assert!(model.forward(0.1, 0.0).is_err());
        assert!(model.time_derivative(0.0, 2.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Piann::new(PiannConfig {
            n_x: 2,
            ..PiannConfig::default()
        })
        .is_err());
        assert!(Piann::new(PiannConfig {
            hidden_dim: 0,
            ..PiannConfig::default()
        })
        .is_err());
    }

    #[test]
    fn time_derivative_matches_central_difference() {
        let model = small(4);
        let (t, m) = (0.25, 4.0);
        let d = model.time_derivative(t, m).unwrap();
        assert_eq!(d.data()[0], 0.0);
        let delta = 1e-4;
        let plus = model.forward(t + delta, m).unwrap().u;
        let minus = model.forward(t - delta, m).unwrap().u;
        for i in 0..8 {
            let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * delta);
            assert!((fd - d.data()[i]).abs() < 1e-5, "node {i}: {fd} vs {}", d.data()[i]);
        }
    }

    #[test]
    fn time_derivative_vanishes_when_time_is_disconnected() {
        let mut model = small(5);
        // zero the time column of the embedding: h⁰ no longer depends on t
        let mut w = model.params.get("embed.weight").unwrap().clone();
        for row in w.data_mut().chunks_mut(2) {
            row[0] = 0.0;
        }
        model.params.set("embed.weight", w).unwrap();
        let d = model.time_derivative(0.3, 2.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }
}
