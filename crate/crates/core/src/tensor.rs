//! Dense row-major tensors and gradient masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense real-valued n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid zero shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a trainable parameter and allocates its gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        } else if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Gradient as a standalone tensor of the same shape (zeros when absent).
    pub fn grad_tensor(&self) -> Tensor {
        let data = self.grad.clone().unwrap_or_else(|| vec![0.0; self.data.len()]);
        Tensor::new(&self.shape, data).expect("grad shape matches value shape")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor; a vector is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Rank(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("rank-2 tensor");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Entries of one parameter's gradient that are forced to zero before an
/// optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientMask {
    pub param: String,
    /// Flat row-major element indices, sorted and deduplicated.
    pub indices: Vec<usize>,
}

impl GradientMask {
    pub fn new(param: impl Into<String>, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { param: param.into(), indices }
    }

    pub fn empty(param: impl Into<String>) -> Self {
        Self::new(param, Vec::new())
    }

    /// Masks whole slices along axis 0 of a tensor with the given shape.
    pub fn rows(param: impl Into<String>, shape: &[usize], rows: impl IntoIterator<Item = usize>) -> Self {
        let inner: usize = shape[1..].iter().product();
        let indices = rows.into_iter().flat_map(|r| r * inner..(r + 1) * inner).collect();
        Self::new(param, indices)
    }

    /// Masks whole slices along the last axis of a tensor with the given shape.
    pub fn last_axis(param: impl Into<String>, shape: &[usize], slots: impl IntoIterator<Item = usize>) -> Self {
        let last = *shape.last().expect("non-scalar shape");
        let outer: usize = shape[..shape.len() - 1].iter().product();
        let slots: Vec<usize> = slots.into_iter().collect();
        let indices = (0..outer).flat_map(|o| slots.iter().map(move |&s| o * last + s)).collect();
        Self::new(param, indices)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn merge(&mut self, other: &GradientMask) {
        self.indices.extend_from_slice(&other.indices);
        self.indices.sort_unstable();
        self.indices.dedup();
    }
}

/// Returns `grad` with every masked entry set to exactly zero.
pub fn apply_gradient_mask(grad: &Tensor, mask: &GradientMask) -> Result<Tensor> {
    let mut out = grad.clone();
    mask_in_place(out.data_mut(), mask)?;
    Ok(out)
}

pub(crate) fn mask_in_place(values: &mut [f64], mask: &GradientMask) -> Result<()> {
    if let Some(&bad) = mask.indices.iter().find(|&&i| i >= values.len()) {
        return Err(Error::Index(format!(
            "mask index {bad} out of range for '{}' with {} entries",
            mask.param,
            values.len()
        )));
    }
    for &i in &mask.indices {
        values[i] = 0.0;
    }
    Ok(())
}
