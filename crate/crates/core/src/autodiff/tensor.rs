use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, VectorField};

/// Dense row-major tensor. Spatial tensors use the layout
/// `[channels, s0, s1, (s2)]`; scalars have an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn spatial(&self) -> &[usize] {
        if self.shape.is_empty() {
            &[]
        } else {
            &self.shape[1..]
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n: usize = self.spatial().iter().product();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn from_scalar_field(f: &ScalarField) -> Self {
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape().dims());
        Self {
            shape,
            data: f.data().to_vec(),
        }
    }

    pub fn from_vector_field(v: &VectorField) -> Self {
        let mut shape = vec![v.ndim()];
        shape.extend_from_slice(v.shape().dims());
        let mut data = Vec::with_capacity(v.ndim() * v.shape().len());
        for c in v.components() {
            data.extend_from_slice(c.data());
        }
        Self { shape, data }
    }

    pub fn to_scalar_field(&self, c: usize) -> Result<ScalarField> {
        let shape = GridShape::new(self.spatial())?;
        ScalarField::new(shape, self.channel(c).to_vec())
    }

    /// Interprets a `[d, spatial..]` tensor as a vector field.
    pub fn to_vector_field(&self) -> Result<VectorField> {
        let d = self.spatial().len();
        if self.channels() != d {
            return Err(Error::InvalidShape(format!(
                "vector field tensor needs {d} channels, has shape {:?}",
                self.shape
            )));
        }
        VectorField::new(
            (0..d)
                .map(|c| self.to_scalar_field(c))
                .collect::<Result<_>>()?,
        )
    }
}
