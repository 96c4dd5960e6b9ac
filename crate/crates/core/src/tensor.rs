//! Dense row-major matrices and the named-tensor view used by the optimizer
//! and checkpoint code.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Sum of each row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// An owned tensor with a name and explicit shape, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Tensor::new(name, vec![v.len()], v.to_vec())
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Tensor::new(name, vec![1], vec![v])
    }
}

/// Looks up tensors by name while rebuilding a parameter object.
pub(crate) struct TensorTable {
    tensors: Vec<Tensor>,
}

impl TensorTable {
    pub(crate) fn new(tensors: Vec<Tensor>) -> Self {
        TensorTable { tensors }
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        match self.tensors.iter().position(|t| t.name == name) {
            Some(i) => Ok(self.tensors.swap_remove(i)),
            None => invalid(format!("missing tensor `{name}`")),
        }
    }

    pub(crate) fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let t = self.take(name)?;
        if t.shape.len() != 2 {
            return invalid(format!("tensor `{name}` must be 2-d, has shape {:?}", t.shape));
        }
        Matrix::from_vec(t.shape[0], t.shape[1], t.data)
    }

    pub(crate) fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let t = self.take(name)?;
        if t.shape.len() != 1 {
            return invalid(format!("tensor `{name}` must be 1-d, has shape {:?}", t.shape));
        }
        Ok(t.data)
    }

    pub(crate) fn scalar(&mut self, name: &str) -> Result<f64> {
        let v = self.vector(name)?;
        if v.len() != 1 {
            return invalid(format!("tensor `{name}` must hold one value"));
        }
        Ok(v[0])
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.tensors.first() {
            Some(t) => invalid(format!("unexpected tensor `{}`", t.name)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let m = Matrix::from_fn(2, 3, |r, c| (10 * r + c) as f64);
        assert_eq!(m.as_slice(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(m[(1, 2)], 12.0);
        assert_eq!(m.transpose()[(2, 1)], 12.0);
        assert_eq!(m.row_sums(), vec![3.0, 33.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn table_rejects_leftovers() {
        let mut t = TensorTable::new(vec![Tensor::scalar("a", 1.0), Tensor::scalar("b", 2.0)]);
        assert_eq!(t.scalar("a").unwrap(), 1.0);
        assert!(t.finish().is_err());
    }
}
