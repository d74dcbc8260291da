//! Dense row-major tensors of 64-bit floats.

use super::EngineError;

/// An n-dimensional array of `f64` values stored in row-major order.
///
/// All engine operators run on `f64`; this keeps finite-difference gradient
/// checks tight at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, EngineError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(EngineError::Shape(format!(
                "tensor data length {} does not match shape {:?} (wants {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Returns a copy of this tensor with a new shape of the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, EngineError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Elementwise `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), EngineError> {
        if self.shape != other.shape {
            return Err(EngineError::Shape(format!(
                "cannot add tensor {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, EngineError::Shape(_)));
    }

    #[test]
    fn scalar_has_unit_shape() {
        let t = Tensor::scalar(4.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.data(), &[4.5]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn add_assign_requires_equal_shape() {
        let mut a = Tensor::zeros(&[2, 2]);
        let b = Tensor::filled(&[2, 2], 1.5);
        a.add_assign(&b).unwrap();
        assert_eq!(a.data(), &[1.5; 4]);
        let c = Tensor::zeros(&[4]);
        assert!(a.add_assign(&c).is_err());
    }
}
