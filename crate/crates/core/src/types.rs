use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Sizes of the expression and pose blocks of one action frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDims {
    pub exp: usize,
    pub pose: usize,
}

impl ActionDims {
    pub const fn new(exp: usize, pose: usize) -> Self {
        Self { exp, pose }
    }

    /// Tokens (or scalar channels) per frame.
    pub const fn total(&self) -> usize {
        self.exp + self.pose
    }

    pub fn is_exp(&self, dim: usize) -> bool {
        dim < self.exp
    }
}

impl Default for ActionDims {
    fn default() -> Self {
        Self::new(10, 3)
    }
}

/// One frame of listener behaviour: expression coefficients followed by head pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceAction {
    pub exp: Vec<f64>,
    pub pose: Vec<f64>,
}

impl FaceAction {
    pub fn new(exp: Vec<f64>, pose: Vec<f64>) -> Self {
        Self { exp, pose }
    }

    pub fn zeros(dims: ActionDims) -> Self {
        Self::new(vec![0.0; dims.exp], vec![0.0; dims.pose])
    }

    pub fn from_flat(values: &[f64], dims: ActionDims) -> Result<Self> {
        check_len("action", dims.total(), values.len())?;
        Ok(Self::new(
            values[..dims.exp].to_vec(),
            values[dims.exp..].to_vec(),
        ))
    }

    pub fn dims(&self) -> ActionDims {
        ActionDims::new(self.exp.len(), self.pose.len())
    }

    /// Flattened `[exp; pose]` vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.exp.len() + self.pose.len());
        v.extend_from_slice(&self.exp);
        v.extend_from_slice(&self.pose);
        v
    }

    pub fn validate(&self, dims: ActionDims) -> Result<()> {
        check_len("exp", dims.exp, self.exp.len())?;
        check_len("pose", dims.pose, self.pose.len())?;
        if self.exp.iter().chain(&self.pose).any(|x| !x.is_finite()) {
            return Err(Error::contract("action contains non-finite components"));
        }
        Ok(())
    }
}

/// Stack a sequence of actions into a `T x D` matrix.
pub fn actions_to_matrix(actions: &[FaceAction]) -> Result<Array2<f64>> {
    let first = actions.first().ok_or(Error::EmptyInput("action sequence"))?;
    let dims = first.dims();
    let mut m = Array2::zeros((actions.len(), dims.total()));
    for (t, a) in actions.iter().enumerate() {
        a.validate(dims)?;
        for (d, v) in a.to_flat().into_iter().enumerate() {
            m[[t, d]] = v;
        }
    }
    Ok(m)
}

pub fn matrix_to_actions(m: &Array2<f64>, dims: ActionDims) -> Result<Vec<FaceAction>> {
    check_len("action columns", dims.total(), m.ncols())?;
    m.rows()
        .into_iter()
        .map(|row| FaceAction::from_flat(&row.to_vec(), dims))
        .collect()
}
