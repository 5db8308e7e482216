use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Row-major f64 tensor. Data is reference counted so that a tape can borrow
/// parameter storage without copying; mutation copies only when shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Location of one tensor inside a little-endian f64 payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![],
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self::from_shared(shape, Arc::new(data)))
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_shared(vec![], Arc::new(vec![v]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_shared(shape.to_vec(), Arc::new(vec![v; numel(shape)]))
    }

    /// Normal samples drawn from the documented Box-Muller stream.
    pub fn rng_normal(shape: &[usize], mean: f64, std: f64, seed: u64) -> Self {
        let mut rng = DetRng::new(seed);
        Self::normal_from(shape, mean, std, &mut rng)
    }

    pub(crate) fn normal_from(shape: &[usize], mean: f64, std: f64, rng: &mut DetRng) -> Self {
        assert!(std >= 0.0, "std must be non-negative");
        let data = (0..numel(shape)).map(|_| rng.normal(mean, std)).collect();
        Self::from_shared(shape.to_vec(), Arc::new(data))
    }

    /// Uniform samples in `[low, high)`.
    pub fn rng_uniform(shape: &[usize], low: f64, high: f64, seed: u64) -> Self {
        let mut rng = DetRng::new(seed);
        let data = (0..numel(shape))
            .map(|_| low + (high - low) * rng.uniform())
            .collect();
        Self::from_shared(shape.to_vec(), Arc::new(data))
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    /// Whether two tensors share the same storage.
    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        }
        self.grad = grad;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn write_le<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_le<R: Read>(r: &mut R, shape: Vec<usize>) -> std::io::Result<Self> {
        let n = numel(&shape);
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self::from_shared(shape, Arc::new(data)))
    }
}
