//! Basis-expanded datasets: per-subject coefficient matrices plus responses.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::real::{cnt, Real};

/// What was subtracted when a dataset was centered, kept so fitted models can
/// reconstruct an intercept and predict on raw data.
#[derive(Debug, Clone)]
pub struct Centering<T: Real> {
    /// Column-wise mean of the coefficient matrices (p x M).
    pub coeff_mean: DMatrix<T>,
    /// Mean response.
    pub y_mean: T,
}

/// A sample of `n` subjects, each carrying `p` curves expanded over a common
/// basis (one `p x M` coefficient matrix per subject) and a scalar response.
#[derive(Debug, Clone)]
pub struct FunctionalDataset<T: Real> {
    coeffs: Vec<DMatrix<T>>,
    responses: DVector<T>,
    centering: Option<Centering<T>>,
}

impl<T: Real> FunctionalDataset<T> {
    pub fn new(coeffs: Vec<DMatrix<T>>, responses: DVector<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::param("dataset needs at least one subject"));
        }
        if coeffs.len() != responses.len() {
            return Err(Error::shape(format!(
                "{} coefficient matrices but {} responses",
                coeffs.len(),
                responses.len()
            )));
        }
        let shape = coeffs[0].shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::shape("coefficient matrices must be nonempty"));
        }
        for (i, c) in coeffs.iter().enumerate() {
            if c.shape() != shape {
                return Err(Error::shape(format!(
                    "subject {i} has coefficient shape {:?}, expected {:?}",
                    c.shape(),
                    shape
                )));
            }
        }
        Ok(FunctionalDataset { coeffs, responses, centering: None })
    }

    /// Projects raw curves onto `basis` and assembles a dataset.
    ///
    /// `curves[i]` holds subject `i`'s observations as a `grid.len() x p`
    /// matrix, one dimension per column.
    pub fn from_curves(
        basis: &BasisSystem<T>,
        grid: &[T],
        curves: &[DMatrix<T>],
        responses: DVector<T>,
    ) -> Result<Self> {
        let coeffs = curves
            .iter()
            .map(|c| basis.project(grid, c).map(|a| a.transpose()))
            .collect::<Result<Vec<_>>>()?;
        FunctionalDataset::new(coeffs, responses)
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    /// Number of dimensions (curves per subject).
    pub fn p(&self) -> usize {
        self.coeffs[0].nrows()
    }

    /// Basis size the coefficients are expressed in.
    pub fn basis_size(&self) -> usize {
        self.coeffs[0].ncols()
    }

    pub fn coeffs(&self) -> &[DMatrix<T>] {
        &self.coeffs
    }

    pub fn responses(&self) -> &DVector<T> {
        &self.responses
    }

    pub fn centering(&self) -> Option<&Centering<T>> {
        self.centering.as_ref()
    }

    pub fn is_centered(&self) -> bool {
        self.centering.is_some()
    }

    /// Subtracts the per-coordinate means of the coefficients and the mean
    /// response. The removed means are stored on the returned dataset.
    pub fn center(&self) -> FunctionalDataset<T> {
        let n = cnt::<T>(self.n());
        let mut coeff_mean = DMatrix::zeros(self.p(), self.basis_size());
        for c in &self.coeffs {
            coeff_mean += c;
        }
        coeff_mean /= n;
        let y_mean = self.responses.sum() / n;
        let coeffs = self.coeffs.iter().map(|c| c - &coeff_mean).collect();
        let responses = self.responses.add_scalar(-y_mean);
        FunctionalDataset {
            coeffs,
            responses,
            centering: Some(Centering { coeff_mean, y_mean }),
        }
    }

    /// Row subset (for train/validation splits). Keeps the centering marker:
    /// a subset of centered data is still expressed around the same means.
    pub fn subset(&self, indices: &[usize]) -> Result<FunctionalDataset<T>> {
        if indices.is_empty() {
            return Err(Error::param("subset needs at least one index"));
        }
        let mut coeffs = Vec::with_capacity(indices.len());
        let mut responses = DVector::zeros(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.n() {
                return Err(Error::param(format!("subject index {i} out of range")));
            }
            coeffs.push(self.coeffs[i].clone());
            responses[k] = self.responses[i];
        }
        Ok(FunctionalDataset { coeffs, responses, centering: self.centering.clone() })
    }
}
