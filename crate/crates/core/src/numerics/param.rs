use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is for; drives weight decay and the alpha floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Latent weight of a binarized linear or embedding table.
    Weight,
    Bias,
    Norm,
    /// Trainable binarizer scale; kept strictly positive.
    Scale,
    /// Trainable binarizer shift.
    Shift,
    /// Low-rank residual estimator factor.
    Estimator,
    /// Full-precision head weight.
    Head,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Estimator | ParamKind::Head)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named parameter tensors with additive gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) -> Result<()> {
        self.params[id.0].grad.add_assign(grad)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.frobenius_sq()).sum::<f64>().sqrt()
    }

    /// Scales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad = p.grad.scale(s);
            }
        }
        norm
    }

    /// Name of the first parameter holding a non-finite value or gradient.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params.iter().find_map(|p| {
            if !p.value.is_finite() {
                Some(p.name.clone())
            } else if !p.grad.is_finite() {
                Some(format!("{}.grad", p.name))
            } else {
                None
            }
        })
    }

    /// Copies values from `other` wherever names and shapes match. Returns
    /// the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn check_shape(&self, id: ParamId, shape: (usize, usize)) -> Result<()> {
        let p = &self.params[id.0];
        if p.value.shape() != shape {
            return Err(Error::dim("param shape", p.value.shape(), shape));
        }
        Ok(())
    }
}
