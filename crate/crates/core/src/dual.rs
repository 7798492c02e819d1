//! Taped values carrying an optional directional derivative.
//!
//! A [`Dual`] pairs a value with its derivative along one input direction
//! (here: the time input of the network). Both halves are ordinary tape
//! variables, so a loss built from tangents is itself differentiable with
//! respect to the parameters by the usual reverse pass. A missing tangent
//! means "identically zero" and costs nothing.

use std::ops::Range;

use crate::error::TensorError;
use crate::tape::{concat, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Dual<'t> {
    pub value: Var<'t>,
    pub tangent: Option<Var<'t>>,
}

impl<'t> From<Var<'t>> for Dual<'t> {
    fn from(value: Var<'t>) -> Self {
        Self::constant(value)
    }
}

fn add_opt<'t>(a: Option<Var<'t>>, b: Option<Var<'t>>) -> Result<Option<Var<'t>>, TensorError> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)?),
        (x, None) | (None, x) => x,
    })
}

impl<'t> Dual<'t> {
    /// A value with zero tangent.
    pub fn constant(value: Var<'t>) -> Self {
        Self {
            value,
            tangent: None,
        }
    }

    pub fn with_tangent(value: Var<'t>, tangent: Var<'t>) -> Self {
        Self {
            value,
            tangent: Some(tangent),
        }
    }

    /// Tangent as a tensor, materializing zeros when absent.
    pub fn tangent_value(&self) -> Tensor {
        match self.tangent {
            Some(t) => t.value(),
            None => Tensor::zeros(&self.value.shape()),
        }
    }

    /// Tangent as a tape variable, recording zeros when absent.
    pub fn tangent_var(&self) -> Var<'t> {
        match self.tangent {
            Some(t) => t,
            None => self.value.tape().constant(Tensor::zeros(&self.value.shape())),
        }
    }

    fn map_tangent(
        self,
        value: Var<'t>,
        f: impl FnOnce(Var<'t>) -> Result<Var<'t>, TensorError>,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            value,
            tangent: self.tangent.map(f).transpose()?,
        })
    }

    pub fn matmul(self, other: Dual<'t>) -> Result<Self, TensorError> {
        let value = self.value.matmul(other.value)?;
        let left = self.tangent.map(|t| t.matmul(other.value)).transpose()?;
        let right = other.tangent.map(|t| self.value.matmul(t)).transpose()?;
        Ok(Self {
            value,
            tangent: add_opt(left, right)?,
        })
    }

    pub fn add(self, other: Dual<'t>) -> Result<Self, TensorError> {
        Ok(Self {
            value: self.value.add(other.value)?,
            tangent: add_opt(self.tangent, other.tangent)?,
        })
    }

    pub fn sub(self, other: Dual<'t>) -> Result<Self, TensorError> {
        let tangent = match (self.tangent, other.tangent) {
            (Some(a), Some(b)) => Some(a.sub(b)?),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b.neg()),
            (None, None) => None,
        };
        Ok(Self {
            value: self.value.sub(other.value)?,
            tangent,
        })
    }

    pub fn mul(self, other: Dual<'t>) -> Result<Self, TensorError> {
        let value = self.value.mul(other.value)?;
        let left = self.tangent.map(|t| t.mul(other.value)).transpose()?;
        let right = other.tangent.map(|t| self.value.mul(t)).transpose()?;
        Ok(Self {
            value,
            tangent: add_opt(left, right)?,
        })
    }

    pub fn affine(self, scale: f64, shift: f64) -> Self {
        Self {
            value: self.value.affine(scale, shift),
            tangent: self.tangent.map(|t| t.scale(scale)),
        }
    }

    pub fn sigmoid(self) -> Result<Self, TensorError> {
        let y = self.value.sigmoid();
        self.map_tangent(y, |t| t.mul(y.mul(y.affine(-1.0, 1.0))?))
    }

    pub fn tanh(self) -> Result<Self, TensorError> {
        let y = self.value.tanh();
        self.map_tangent(y, |t| t.mul(y.square().affine(-1.0, 1.0)))
    }

    /// Row softmax; the tangent is `s ⊙ (ȧ − rowsum(s ⊙ ȧ))`.
    pub fn softmax_rows(self) -> Result<Self, TensorError> {
        let s = self.value.softmax_rows()?;
        self.map_tangent(s, |t| {
            let weighted = s.mul(t)?;
            let shape = s.shape();
            let centered = match *shape.as_slice() {
                [_] => t.sub(weighted.sum())?,
                [rows, cols] => {
                    let tape = s.tape();
                    let row_sums = weighted
                        .matmul(tape.constant(Tensor::ones(&[cols])))?
                        .reshape(&[rows, 1])?;
                    let spread = row_sums.matmul(tape.constant(Tensor::ones(&[1, cols])))?;
                    t.sub(spread)?
                }
                _ => unreachable!("softmax_rows validated the rank"),
            };
            s.mul(centered)
        })
    }

    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Self, TensorError> {
        let value = self.value.slice(axis, range.clone())?;
        self.map_tangent(value, |t| t.slice(axis, range))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        let value = self.value.reshape(shape)?;
        self.map_tangent(value, |t| t.reshape(shape))
    }

    pub fn transpose(self) -> Result<Self, TensorError> {
        let value = self.value.transpose()?;
        self.map_tangent(value, |t| t.transpose())
    }

    pub fn square(self) -> Result<Self, TensorError> {
        let value = self.value.square();
        self.map_tangent(value, |t| Ok(t.mul(self.value)?.scale(2.0)))
    }
}

/// Concatenation of duals; zeros stand in for absent tangents when at least
/// one part has a tangent.
pub fn concat_dual<'t>(parts: &[Dual<'t>], axis: usize) -> Result<Dual<'t>, TensorError> {
    let values: Vec<Var<'t>> = parts.iter().map(|p| p.value).collect();
    let value = concat(&values, axis)?;
    let tangent = if parts.iter().any(|p| p.tangent.is_some()) {
        let tangents: Vec<Var<'t>> = parts.iter().map(Dual::tangent_var).collect();
        Some(concat(&tangents, axis)?)
    } else {
        None
    };
    Ok(Dual { value, tangent })
}
