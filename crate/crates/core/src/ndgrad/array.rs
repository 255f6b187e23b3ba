use super::GradError;

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, GradError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(GradError::InvalidArray(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::InvalidArray(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Builds an array without the positive-extent check; used internally where
    /// the shape is produced by a checked op.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    /// Marks the array as a gradient-carrying leaf, allocating a zeroed grad.
    pub fn requiring_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, GradError> {
        Self::new(shape, self.data.clone())
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn without_grad(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}
