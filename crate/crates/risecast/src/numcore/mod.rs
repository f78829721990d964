//! Minimal dense numeric kernel with reverse-mode differentiation.
//!
//! Everything is 64-bit: gradient checking against central finite
//! differences is meaningless at lower precision. Tensors are row-major and
//! dense; the only structural trick is that every tensor is viewed as a
//! matrix whose column count is its last dimension, which is exactly the
//! flattening the embedding contractions need ([t,c,n] becomes [t*c, n]).

mod tape;

pub mod gradcheck;

pub use tape::{BufId, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical SELU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Canonical SELU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Saturation value a dropped unit is set to under alpha dropout.
pub const ALPHA_DROPOUT_SATURATION: f64 = -SELU_LAMBDA * SELU_ALPHA;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major tensor of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Data(format!(
                "tensor data length {} does not match shape {:?} (needs {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view: columns = last dim, rows = product of the rest.
    /// A 1-D tensor is a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.shape[..self.shape.len() - 1].iter().product(), cols)
            }
        }
    }

    /// Element accessor for oracle-style index loops in tests.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[d], "index out of bounds");
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Elementwise non-linearity used across the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Selu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative, given the input `x` and the already-computed output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Elementwise SELU over a tensor.
pub fn selu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| Activation::Selu.apply(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A learnable tensor with gradient storage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Ordered, name-addressable collection of parameters.
///
/// Creation order is the canonical iteration order everywhere (optimizer
/// steps, gradient checks, artifact serialization), which keeps runs
/// bitwise reproducible.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    items: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn add(&mut self, param: Parameter) -> Result<()> {
        if self.items.iter().any(|p| p.name == param.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name {:?}",
                param.name
            )));
        }
        self.items.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.items
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.items
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.zero_grad();
        }
    }

    /// Add the tape's parameter gradients into this set's `.grad` storage.
    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, grad) in tape.param_grads() {
            let p = self.get_mut(name)?;
            if p.grad.len() != grad.len() {
                return Err(Error::Data(format!(
                    "gradient length mismatch for {name:?}"
                )));
            }
            for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
                *g += d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_fixed_point_and_reference_values() {
        assert_eq!(Activation::Selu.apply(0.0), 0.0);
        let one = Activation::Selu.apply(1.0);
        assert!((one - 1.0507009873554805).abs() < 1e-12, "selu(1)={one}");
        // Deep negative saturates at -lambda*alpha.
        let sat = Activation::Selu.apply(-20.0);
        let expect = SELU_LAMBDA * SELU_ALPHA * ((-20.0f64).exp() - 1.0);
        assert!((sat - expect).abs() < 1e-15);
        assert!((sat - (-1.7580993408473766)).abs() < 1e-7, "selu(-20)={sat}");
    }

    #[test]
    fn selu_slope_at_zero_plus() {
        let h = 1e-9;
        let slope = (Activation::Selu.apply(h) - Activation::Selu.apply(0.0)) / h;
        assert!((slope - SELU_LAMBDA).abs() < 1e-9);
    }

    #[test]
    fn tensor_matrix_view_flattens_leading_dims() {
        let t = Tensor::zeros(vec![3, 4, 5]);
        assert_eq!(t.matrix_dims(), (12, 5));
        let v = Tensor::zeros(vec![7]);
        assert_eq!(v.matrix_dims(), (1, 7));
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn paramset_rejects_duplicates() {
        let mut set = ParamSet::new();
        set.add(Parameter::new("w", Tensor::zeros(vec![2]))).unwrap();
        assert!(set.add(Parameter::new("w", Tensor::zeros(vec![2]))).is_err());
    }
}
