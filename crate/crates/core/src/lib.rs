//! Physics-informed attention-based neural networks (PIANNs) for the
//! Buckley-Leverett equation with a non-concave fractional flow.

// Tape handles use op-named methods (`add`, `mul`, …) that return `Result`,
// and `!(x > 0.0)` checks are deliberate so that NaN is rejected.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dual;
pub mod eval;
pub mod error;
pub mod grid;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod physics;
pub mod report;
pub mod residual;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use grid::{GridSpec, SolutionField};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use layers::{ParamRegistry, ScorerKind};
pub use model::{Piann, PiannConfig, PiannOutput};
