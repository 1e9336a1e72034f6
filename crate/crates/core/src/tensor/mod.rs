//! Dense row-major tensors and a small recorded-graph reverse-mode differentiator.
//!
//! Values always live in `f64` memory. A tensor tagged [`DType::F32`] keeps every
//! element exactly representable as `f32`: op outputs are rounded on creation and
//! the AESC codec writes four-byte payloads for it.
//!
//! Broadcasting is limited to two cases: equal shapes, and a single-element
//! operand against any shape. Row-vector broadcasts are a separate explicit op
//! ([`Graph::add_row`]).

mod aesc;
mod graph;
mod optim;
mod params;

pub use aesc::{decode, encode, read_tensor, write_tensor, AescError, MAGIC, VERSION};
pub use graph::{Graph, Var};
pub use optim::{sgd_step, AdamW, Optimizer, Sgd};
pub use params::{ParamId, ParamStore};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// The narrower of two dtypes; mixed-precision ops produce `F32`.
    pub fn join(self, other: DType) -> DType {
        if self == DType::F32 || other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the function's domain")]
    DomainError { op: &'static str },
    #[error("backward needs a single-element loss, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any trainable tensor")]
    DisconnectedGraph,
    #[error("parameter #{0} has no gradient")]
    MissingGrad(usize),
    #[error("dims {dims:?} do not describe {len} values")]
    BadShape { dims: Vec<usize>, len: usize },
}

/// A dense tensor. `grad` is present exactly when the tensor requires gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds an `f64` tensor. A rank-0 tensor (`dims == []`) holds one value.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::with_dtype(dims, data, DType::F64)
    }

    pub fn with_dtype(dims: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self, TensorError> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape {
                len: data.len(),
                dims,
            });
        }
        let data = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|v| dtype.round(v)).collect(),
        };
        Ok(Tensor {
            dims,
            dtype,
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims, vec![0.0; n]).expect("zero extent in dims")
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims, vec![value; n]).expect("zero extent in dims")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value]).unwrap()
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::BadShape {
                dims: vec![m, n],
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    /// Marks the tensor trainable, attaching a zeroed gradient accumulator.
    pub fn requires_grad(mut self) -> Self {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Writes are rounded on the next op, not here;
    /// callers holding an `F32` tensor should store `f32`-representable values.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {i} out of range for extent {d}");
            off = off * d + i;
        }
        self.data[off]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.dims.len(), 2);
        let n = self.dims[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.contains(&0) || dims.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadShape {
                dims,
                len: self.data.len(),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor::with_dtype(self.dims.clone(), self.data.clone(), dtype).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy without the gradient accumulator.
    pub fn detached(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            dtype: self.dtype,
            data: self.data.clone(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_cover_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::BadShape { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn f32_tensors_hold_f32_values() {
        let t = Tensor::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn grad_present_iff_trainable() {
        let t = Tensor::zeros(vec![2, 2]);
        assert!(t.grad().is_none());
        let t = t.requires_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
    }
}
