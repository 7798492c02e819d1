//! Trainable layers and the parameter registry they draw from.
//!
//! Layers hold [`ParamId`] handles, not values. A forward pass binds the
//! registry to a tape with [`ParamRegistry::bind`] and every layer reads its
//! weights from the resulting [`BoundParams`].

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{concat_dual, Dual};
use crate::error::{Error, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    kind: ParamKind,
    value: Tensor,
}

/// Ordered name → tensor map of every trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    params: IndexMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        let (id, _) = self.params.insert_full(
            name.to_string(),
            Param {
                kind,
                value: Tensor::zeros(shape),
            },
        );
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut().map(|p| &mut p.value)
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        if param.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set parameter",
                left: param.value.shape().to_vec(),
                right: value.shape().to_vec(),
            }
            .into());
        }
        param.value = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.params.values().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape, indexed like the registry.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn dual(&self, id: ParamId) -> Dual<'t> {
        Dual::constant(self.vars[id.0])
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Weights uniform on `±√(6 / (fan_in + fan_out))`, biases zero.
    XavierUniform,
}

/// Seeded initialization over the registry in insertion order.
pub fn init_params(registry: &mut ParamRegistry, scheme: InitScheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for param in registry.params.values_mut() {
        match (scheme, param.kind) {
            (InitScheme::XavierUniform, ParamKind::Weight { fan_in, fan_out }) => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in param.value.data_mut() {
                    *w = rng.gen_range(-limit..=limit);
                }
            }
            (_, ParamKind::Bias) => param.value.data_mut().fill(0.0),
        }
    }
}

/// Fully connected layer `W x + b` with `W: out × in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(registry: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = registry.register(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            ParamKind::Weight {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = registry.register(&format!("{name}.bias"), &[out_dim], ParamKind::Bias)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, params: &BoundParams<'t>, x: Dual<'t>) -> Result<Dual<'t>, TensorError> {
        let shape = x.value.shape();
        if shape != [self.in_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                left: vec![self.out_dim, self.in_dim],
                right: shape,
            });
        }
        params.dual(self.weight).matmul(x)?.add(params.dual(self.bias))
    }
}

/// `dense_forward` on plain tensors, evaluated on a scratch tape.
pub fn dense_forward(layer: &DenseLayer, registry: &ParamRegistry, x: &Tensor) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let params = registry.bind(&tape);
    let x = Dual::constant(tape.constant(x.clone()));
    Ok(layer.forward(&params, x)?.value.value())
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// ĥ  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub gates: [GruGate; 3],
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Input weight, recurrent weight and bias of one GRU gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruGate {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

const UPDATE: usize = 0;
const RESET: usize = 1;
const CANDIDATE: usize = 2;

impl GruCell {
    pub fn new(registry: &mut ParamRegistry, name: &str, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        let mut gate = |g: &str| -> Result<GruGate> {
            Ok(GruGate {
                input: registry.register(
                    &format!("{name}.w_{g}"),
                    &[hidden_dim, input_dim],
                    ParamKind::Weight {
                        fan_in: input_dim,
                        fan_out: hidden_dim,
                    },
                )?,
                recurrent: registry.register(
                    &format!("{name}.u_{g}"),
                    &[hidden_dim, hidden_dim],
                    ParamKind::Weight {
                        fan_in: hidden_dim,
                        fan_out: hidden_dim,
                    },
                )?,
                bias: registry.register(&format!("{name}.b_{g}"), &[hidden_dim], ParamKind::Bias)?,
            })
        };
        Ok(Self {
            gates: [gate("z")?, gate("r")?, gate("h")?],
            input_dim,
            hidden_dim,
        })
    }

    pub fn step<'t>(
        &self,
        params: &BoundParams<'t>,
        x: Dual<'t>,
        h: Dual<'t>,
    ) -> Result<Dual<'t>, TensorError> {
        let (xs, hs) = (x.value.shape(), h.value.shape());
        if xs != [self.input_dim] || hs != [self.hidden_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "gru_step",
                left: vec![self.input_dim, self.hidden_dim],
                right: [xs, hs].concat(),
            });
        }
        let pre = |gate: &GruGate, recurrent_in: Dual<'t>| -> Result<Dual<'t>, TensorError> {
            params
                .dual(gate.input)
                .matmul(x)?
                .add(params.dual(gate.recurrent).matmul(recurrent_in)?)?
                .add(params.dual(gate.bias))
        };
        let z = pre(&self.gates[UPDATE], h)?.sigmoid()?;
        let r = pre(&self.gates[RESET], h)?.sigmoid()?;
        let candidate = pre(&self.gates[CANDIDATE], r.mul(h)?)?.tanh()?;
        // h + z ⊙ (ĥ − h) == (1 − z) ⊙ h + z ⊙ ĥ
        h.add(z.mul(candidate.sub(h)?)?)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.gates.iter().flat_map(|g| [g.input, g.recurrent, g.bias])
    }
}

/// `gru_step` on plain tensors, evaluated on a scratch tape.
pub fn gru_step(cell: &GruCell, registry: &ParamRegistry, x: &Tensor, h: &Tensor) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let params = registry.bind(&tape);
    let x = Dual::constant(tape.constant(x.clone()));
    let h = Dual::constant(tape.constant(h.clone()));
    Ok(cell.step(&params, x, h)?.value.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    /// `vᵀ tanh(W [d; y] + b) + c`
    Additive,
    /// `wᵀ [d; y] + c`
    Linear,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidInput(format!(
                "unknown scorer `{other}` (expected additive or linear)"
            ))),
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Additive => "additive",
            Self::Linear => "linear",
        })
    }
}

/// Alignment model scoring a decoder state against every encoder state.
///
/// The score of `y_j` is a function of the concatenation `[d; y_j]`. The
/// weight acting on that concatenation is split into its `d` and `y` column
/// blocks so the `y` projections are computed once per sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionScorer {
    pub kind: ScorerKind,
    /// First stage acting on `[d; y]`: `attn_dim × 2·hidden` (additive) or
    /// `1 × 2·hidden` (linear).
    pub hidden: DenseLayer,
    /// Scalar projection of the additive form.
    pub score: Option<DenseLayer>,
    pub state_dim: usize,
}

/// Encoder states projected by the `y` block of the scorer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionKeys<'t> {
    keys: Dual<'t>,
    query_weight: Dual<'t>,
    len: usize,
}

impl AttentionScorer {
    pub fn new(
        registry: &mut ParamRegistry,
        name: &str,
        kind: ScorerKind,
        state_dim: usize,
        attn_dim: usize,
    ) -> Result<Self> {
        let (hidden, score) = match kind {
            ScorerKind::Additive => (
                DenseLayer::new(registry, &format!("{name}.hidden"), 2 * state_dim, attn_dim)?,
                Some(DenseLayer::new(registry, &format!("{name}.score"), attn_dim, 1)?),
            ),
            ScorerKind::Linear => (
                DenseLayer::new(registry, &format!("{name}.score"), 2 * state_dim, 1)?,
                None,
            ),
        };
        Ok(Self {
            kind,
            hidden,
            score,
            state_dim,
        })
    }

    /// Projects the stacked encoder states `ys: N × state_dim`.
    pub fn keys<'t>(&self, params: &BoundParams<'t>, ys: Dual<'t>) -> Result<AttentionKeys<'t>, TensorError> {
        let shape = ys.value.shape();
        let &[len, dim] = shape.as_slice() else {
            return Err(TensorError::Rank {
                op: "attention keys",
                expected: 2,
                shape,
            });
        };
        if dim != self.state_dim {
            return Err(TensorError::ShapeMismatch {
                op: "attention keys",
                left: vec![len, self.state_dim],
                right: shape,
            });
        }
        let weight = params.dual(self.hidden.weight);
        let query_weight = weight.slice(1, 0..dim)?;
        let key_weight = weight.slice(1, dim..2 * dim)?;
        Ok(AttentionKeys {
            keys: ys.matmul(key_weight.transpose()?)?,
            query_weight,
            len,
        })
    }

    /// Scores `E_j = a(d_prev, y_j)` for every encoder position.
    pub fn scores<'t>(
        &self,
        params: &BoundParams<'t>,
        keys: &AttentionKeys<'t>,
        d_prev: Dual<'t>,
    ) -> Result<Dual<'t>, TensorError> {
        let shape = d_prev.value.shape();
        if shape != [self.state_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "attention scores",
                left: vec![self.state_dim],
                right: shape,
            });
        }
        let query = keys
            .query_weight
            .matmul(d_prev)?
            .add(params.dual(self.hidden.bias))?;
        match self.score {
            None => {
                // keys: N × 1, query: [1]
                keys.keys.reshape(&[keys.len])?.add(query)
            }
            Some(score) => {
                let attn_dim = self.hidden.out_dim;
                let v = params.dual(score.weight).reshape(&[attn_dim])?;
                let bias = params.dual(score.bias);
                if keys.keys.tangent.is_none() && query.tangent.is_none() {
                    let fused = keys.keys.value.additive_scores(query.value, v.value)?;
                    return Dual::constant(fused).add(bias);
                }
                let tape = d_prev.value.tape();
                let ones = Dual::constant(tape.constant(Tensor::ones(&[keys.len, 1])));
                let spread = ones.matmul(query.reshape(&[1, attn_dim])?)?;
                let hidden = keys.keys.add(spread)?.tanh()?;
                hidden.matmul(v)?.add(bias)
            }
        }
    }
}

/// Scores of every row of `ys` against `d_prev`, on plain tensors.
pub fn attention_scores(
    scorer: &AttentionScorer,
    registry: &ParamRegistry,
    d_prev: &Tensor,
    ys: &[Tensor],
) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let params = registry.bind(&tape);
    let rows = ys
        .iter()
        .map(|y| Dual::constant(tape.constant(y.clone())).reshape(&[1, y.len()]))
        .collect::<Result<Vec<_>, TensorError>>()?;
    let stacked = concat_dual(&rows, 0)?;
    let keys = scorer.keys(&params, stacked)?;
    let d = Dual::constant(tape.constant(d_prev.clone()));
    Ok(scorer.scores(&params, &keys, d)?.value.value())
}
