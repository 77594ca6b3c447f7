use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::{Gradients, NodeId, Tape};
use super::{numel, Scalar, Tensor};

/// Element encoding used by checkpoint records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format {
                offset,
                reason: format!("unknown dtype tag {other}"),
            }),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A trainable tensor with its gradient accumulator and a unique name path.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    shape: Vec<usize>,
    values: Arc<Vec<T>>,
    grad: Vec<T>,
    node: Option<NodeId>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        let grad = vec![T::zero(); values.len()];
        Ok(Parameter {
            name: name.into(),
            shape,
            values: Arc::new(values),
            grad,
            node: None,
        })
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

    /// Mutable access for the optimizer. Copy-on-write if a tape still holds
    /// the buffer; in the training loop the tape is dropped first, so this is
    /// an in-place update.
    pub fn values_mut(&mut self) -> &mut [T] {
        let vec: &mut Vec<T> = Arc::make_mut(&mut self.values);
        vec.as_mut_slice()
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Overwrite values (checkpoint load); shape must match.
    pub fn load_values(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot load {} values into parameter '{}' of {}",
                values.len(),
                self.name,
                self.len()
            )));
        }
        self.values = Arc::new(values);
        Ok(())
    }

    /// Register this parameter on the tape for the current step.
    pub fn leaf(&mut self, tape: &mut Tape<T>) -> Tensor<T> {
        let tensor = Tensor::with_values(self.shape.clone(), Arc::clone(&self.values));
        let leafed = tape.leaf(&tensor);
        self.node = leafed.node();
        leafed
    }

    /// Pull this parameter's gradient out of a backward result, adding into
    /// the accumulator. A parameter the loss never reached keeps its current
    /// (zero) gradient.
    pub fn accumulate_grad(&mut self, grads: &Gradients<T>) {
        if let Some(node) = self.node.take() {
            if let Some(g) = grads.by_node(node) {
                for (acc, &gi) in self.grad.iter_mut().zip(g) {
                    *acc = *acc + gi;
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn with_values(shape: Vec<usize>, values: Arc<Vec<T>>) -> Self {
        Tensor {
            shape,
            values,
            node: None,
        }
    }
}

// ── length-prefixed named tensor records ─────────────────────────────────
//
// record := u16 name_len | name utf8 | u8 dtype | u8 ndim | u32 dims[ndim] |
//           raw little-endian values

pub fn encode_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[T]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

/// One decoded record, values kept in their stored precision.
#[derive(Debug)]
pub struct RecordOwned {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub f64_values: Vec<f64>,
}

impl RecordOwned {
    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.f64_values.iter().map(|&v| T::from_f64(v)).collect()
    }
}

pub fn decode_records(data: &[u8], base_offset: u64, count: usize) -> Result<(Vec<RecordOwned>, usize)> {
    let mut pos = 0usize;
    let fail = |pos: usize, what: &str| Error::Format {
        offset: base_offset + pos as u64,
        reason: format!("truncated while decoding {what}"),
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > data.len() {
            return Err(fail(pos, "record name length"));
        }
        let name_len = u16::from_le_bytes([data[pos], data[pos + 1]]) as usize;
        pos += 2;
        if pos + name_len > data.len() {
            return Err(fail(pos, "record name"));
        }
        let name = String::from_utf8(data[pos..pos + name_len].to_vec()).map_err(|_| Error::Format {
            offset: base_offset + pos as u64,
            reason: "record name is not utf-8".into(),
        })?;
        pos += name_len;
        if pos + 2 > data.len() {
            return Err(fail(pos, "record header"));
        }
        let dtype = Dtype::from_tag(data[pos], base_offset + pos as u64)?;
        let ndim = data[pos + 1] as usize;
        pos += 2;
        if pos + 4 * ndim > data.len() {
            return Err(fail(pos, "record dims"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for d in 0..ndim {
            shape.push(u32::from_le_bytes(data[pos + 4 * d..pos + 4 * d + 4].try_into().unwrap()) as usize);
        }
        pos += 4 * ndim;
        let n = numel(&shape);
        let width = dtype.bytes();
        if pos + n * width > data.len() {
            return Err(fail(pos, &format!("values of '{name}'")));
        }
        let mut f64_values = Vec::with_capacity(n);
        for i in 0..n {
            let chunk = &data[pos + i * width..pos + (i + 1) * width];
            f64_values.push(match dtype {
                Dtype::F32 => f32::read_le(chunk) as f64,
                Dtype::F64 => f64::read_le(chunk),
            });
        }
        pos += n * width;
        records.push(RecordOwned {
            name,
            shape,
            dtype,
            f64_values,
        });
    }
    Ok((records, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip_preserves_bits() {
        let values = vec![0.1f32, -2.5, 3.25e-8, 7.0];
        let mut buf = Vec::new();
        encode_record(&mut buf, "block.conv.kernel", &[2, 2], &values);
        let (records, used) = decode_records(&buf, 0, 1).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(records[0].name, "block.conv.kernel");
        assert_eq!(records[0].shape, vec![2, 2]);
        assert_eq!(records[0].dtype, Dtype::F32);
        let back = records[0].values_as::<f32>();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn record_roundtrip_f64() {
        let values = vec![std::f64::consts::PI, -1e-300];
        let mut buf = Vec::new();
        encode_record(&mut buf, "p", &[2], &values);
        let (records, _) = decode_records(&buf, 0, 1).unwrap();
        let back = records[0].values_as::<f64>();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_record_reports_offset() {
        let mut buf = Vec::new();
        encode_record(&mut buf, "p", &[4], &[1.0f32; 4]);
        buf.truncate(buf.len() - 3);
        let err = decode_records(&buf, 100, 1).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset >= 100),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_grad_accumulates_across_backwards() {
        let mut tape = Tape::<f64>::new();
        let mut p = Parameter::new("w", vec![2], vec![1.0, 2.0]).unwrap();
        let w = p.leaf(&mut tape);
        let loss = super::super::sum(&mut tape, &w).unwrap();
        let grads = tape.backward(&loss).unwrap();
        p.accumulate_grad(&grads);
        assert_eq!(p.grad(), &[1.0, 1.0]);

        // Second pass adds on top until zeroed.
        let mut tape = Tape::<f64>::new();
        let w = p.leaf(&mut tape);
        let loss = super::super::sum(&mut tape, &w).unwrap();
        let grads = tape.backward(&loss).unwrap();
        p.accumulate_grad(&grads);
        assert_eq!(p.grad(), &[2.0, 2.0]);
        p.zero_grad();
        assert_eq!(p.grad(), &[0.0, 0.0]);
    }
}
