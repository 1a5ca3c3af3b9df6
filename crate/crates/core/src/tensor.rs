use serde::{Deserialize, Serialize};

/// A named, trainable row-major matrix with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::from_vec(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(name: impl Into<String>, rows: usize, cols: usize, value: Vec<f64>) -> Self {
        assert_eq!(value.len(), rows * cols, "parameter buffer does not match its shape");
        Self {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.value[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.value[r * self.cols..(r + 1) * self.cols]
    }

    pub fn grad_row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.grad[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_is_zero(&self) -> bool {
        self.grad.iter().all(|&g| g == 0.0)
    }

    /// Restores the gradient buffer after deserialization.
    pub fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}
