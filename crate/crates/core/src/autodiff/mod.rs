//! Reverse-mode differentiation of scalar losses.
//!
//! Losses are written as closures `Fn(&mut Tape, &[Var]) -> Var` that build
//! the computation from the primitives on [`Tape`]. Because the primitive set
//! is closed, every loss expressible through this API is differentiable.

mod tape;

pub use tape::{sigmoid, softplus, Op, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by {op:?} at node {node}")]
    NonFiniteValue { node: usize, op: Op },
    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}

/// Named contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat vector of trainable parameters with a named-segment index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Builds from `(name, len)` pairs, zero-initialized.
    pub fn from_layout<S: Into<String>>(layout: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in layout {
            segments.push(Segment {
                name: name.into(),
                offset,
                len,
            });
            offset += len;
        }
        Self {
            values: vec![0.0; offset],
            segments,
        }
    }

    /// Unsegmented vector, useful for ad-hoc losses.
    pub fn flat(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            segments: vec![Segment {
                name: "theta".into(),
                offset: 0,
                len,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.segment(name)?.clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, AutodiffError> {
        if values.len() != self.values.len() {
            return Err(AutodiffError::LayoutMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            segments: self.segments.clone(),
        })
    }
}

/// Value and gradient of a tape-built loss at `at`.
pub fn value_and_grad<F>(loss: F, at: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves = tape.vars(at);
    let out = loss(&mut tape, &leaves);
    tape.check_finite()?;
    let adj = tape.backward(out);
    let g = leaves.iter().map(|v| adj[v.index()]).collect();
    Ok((tape.value(out), g))
}

/// Gradient of `loss` with respect to every parameter in `at`.
pub fn grad<F>(loss: F, at: &ParamVector) -> Result<ParamVector, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (_, g) = value_and_grad(loss, at.values())?;
    at.with_values(g)
}

/// Forward value of a tape-built loss.
pub fn evaluate<F>(loss: &F, at: &[f64]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves = tape.vars(at);
    let out = loss(&mut tape, &leaves);
    tape.value(out)
}

/// Largest `|analytic − central difference| / (|analytic| + 1e-8)` over all coordinates.
pub fn check_gradient<F>(loss: F, at: &ParamVector, h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let (_, analytic) = value_and_grad(&loss, at.values())?;
    let mut probe = at.values().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = evaluate(&loss, &probe);
        probe[i] = orig - h;
        let down = evaluate(&loss, &probe);
        probe[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8));
    }
    Ok(worst)
}
