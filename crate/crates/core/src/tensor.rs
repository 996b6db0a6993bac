use crate::checkpoint::Dtype;
use crate::error::{Error, Result};

/// A dense F32 tensor in row-major order, remembering the dtype it was
/// stored as.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    dtype: Dtype,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::with_dtype(shape, data, Dtype::F32)
    }

    pub fn with_dtype(shape: Vec<usize>, data: Vec<f32>, dtype: Dtype) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data, dtype }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dtype(&self) -> &Dtype {
        &self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis; 0-d and 1-d tensors are a single row.
    pub fn row_len(&self) -> usize {
        row_len(&self.shape)
    }

    pub fn check_same_shape(&self, other: &Tensor, name: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                name,
                format!("shape {:?} does not match {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

pub(crate) fn row_len(shape: &[usize]) -> usize {
    match shape.last() {
        Some(&d) if shape.len() > 1 => d,
        _ => shape.iter().product(),
    }
}
