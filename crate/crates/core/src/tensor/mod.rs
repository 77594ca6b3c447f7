//! Dense N-d arrays with reverse-mode automatic differentiation — just the
//! primitives the encoder-decoder network needs, in either f32 (training
//! throughput) or f64 (gradient-check) precision.

mod ops;
mod params;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use ops::{
    add, avg_pool_2x2, batch_norm, concat_channels, conv2d, leaky_relu, max_pool_2x2,
    softmax_cross_entropy_per_pixel, softmax_per_pixel, sum, upsample_nearest_2x, weighted_sum,
    BnMode, BN_EPSILON,
};
pub use params::{decode_records, encode_record, Dtype, Parameter, RecordOwned};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};

/// Element type usable in tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense value array. Cloning is cheap (the buffer is shared); `node` ties
/// the tensor to the tape that produced it, when one did.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Arc<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: Arc::new(vec![T::zero(); n]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.values)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, values: Arc<Vec<T>>, node: NodeId) -> Self {
        Tensor {
            shape,
            values,
            node: Some(node),
        }
    }

    /// Scalar extraction for loss values.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor of {} values",
                self.len()
            )));
        }
        Ok(self.values[0])
    }

    /// Interpret as (batch, channels, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected 4-d tensor, got {other:?}"
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let s = Tensor::<f64>::scalar(2.5);
        assert_eq!(s.item().unwrap(), 2.5);
        assert_eq!(numel(&[]), 1);
    }
}
