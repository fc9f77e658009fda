//! Quantum operators with a diagonal fast path.
//!
//! Most couplings of interest are diagonal in a fixed basis (`σ_z`-type
//! couplings, the GHZ lattice, the gravitating superposition), so a
//! diagonal representation keeps per-step work linear in the Hilbert-space
//! dimension. Dense operators fall back to ordinary matrix products.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CqError, Result};
use crate::numlin;
use crate::{CMatrix, StateVector};

#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Diagonal(DVector<Complex64>),
    Dense(CMatrix),
}

impl Operator {
    pub fn zeros(d: usize) -> Self {
        Operator::Diagonal(DVector::zeros(d))
    }

    pub fn identity(d: usize) -> Self {
        Operator::Diagonal(DVector::from_element(d, Complex64::new(1.0, 0.0)))
    }

    pub fn from_real_diagonal(values: &[f64]) -> Self {
        Operator::Diagonal(DVector::from_iterator(
            values.len(),
            values.iter().map(|&x| Complex64::new(x, 0.0)),
        ))
    }

    /// Wraps a dense matrix, switching to the diagonal form when every
    /// off-diagonal entry is zero.
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(CqError::Dimension(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if numlin::is_diagonal(&m) {
            Ok(Operator::Diagonal(m.diagonal()))
        } else {
            Ok(Operator::Dense(m))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Operator::Diagonal(v) => v.len(),
            Operator::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Operator::Diagonal(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Operator::Diagonal(v) => v.iter().all(|x| *x == Complex64::default()),
            Operator::Dense(m) => m.iter().all(|x| *x == Complex64::default()),
        }
    }

    pub fn to_dense(&self) -> CMatrix {
        match self {
            Operator::Diagonal(v) => DMatrix::from_diagonal(v),
            Operator::Dense(m) => m.clone(),
        }
    }

    pub fn adjoint(&self) -> Self {
        match self {
            Operator::Diagonal(v) => Operator::Diagonal(v.map(|x| x.conj())),
            Operator::Dense(m) => Operator::Dense(m.adjoint()),
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        match self {
            Operator::Diagonal(v) => Operator::Diagonal(v * c),
            Operator::Dense(m) => Operator::Dense(m * c),
        }
    }

    pub fn add(&self, other: &Operator) -> Self {
        match (self, other) {
            (Operator::Diagonal(a), Operator::Diagonal(b)) => Operator::Diagonal(a + b),
            _ => Operator::Dense(self.to_dense() + other.to_dense()),
        }
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &Operator) -> Self {
        match (self, other) {
            (Operator::Diagonal(a), Operator::Diagonal(b)) => {
                Operator::Diagonal(a.component_mul(b))
            }
            _ => Operator::Dense(self.to_dense() * other.to_dense()),
        }
    }

    /// `self · ψ`.
    pub fn apply(&self, psi: &StateVector) -> StateVector {
        match self {
            Operator::Diagonal(v) => v.component_mul(psi),
            Operator::Dense(m) => m * psi,
        }
    }

    /// `⟨ψ|A|ψ⟩` (ψ need not be normalized).
    pub fn expectation_pure(&self, psi: &StateVector) -> Complex64 {
        match self {
            Operator::Diagonal(v) => v
                .iter()
                .zip(psi.iter())
                .map(|(a, x)| a * x.norm_sqr())
                .sum(),
            Operator::Dense(m) => psi.dotc(&(m * psi)),
        }
    }

    /// `Tr(A ρ)`.
    pub fn expectation(&self, rho: &CMatrix) -> Complex64 {
        match self {
            Operator::Diagonal(v) => v.iter().enumerate().map(|(i, a)| a * rho[(i, i)]).sum(),
            Operator::Dense(m) => {
                let d = m.nrows();
                let mut acc = Complex64::default();
                for i in 0..d {
                    for k in 0..d {
                        acc += m[(i, k)] * rho[(k, i)];
                    }
                }
                acc
            }
        }
    }

    /// `A · ρ`.
    pub fn left_mul(&self, rho: &CMatrix) -> CMatrix {
        match self {
            Operator::Diagonal(v) => {
                let mut out = rho.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= v[i];
                }
                out
            }
            Operator::Dense(m) => m * rho,
        }
    }

    /// `ρ · A`.
    pub fn right_mul(&self, rho: &CMatrix) -> CMatrix {
        match self {
            Operator::Diagonal(v) => {
                let mut out = rho.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= v[j];
                }
                out
            }
            Operator::Dense(m) => rho * m,
        }
    }

    pub fn hermiticity_residual(&self) -> f64 {
        match self {
            Operator::Diagonal(v) => v.iter().map(|x| x.im.abs()).fold(0.0, f64::max),
            Operator::Dense(m) => numlin::hermiticity_residual(m),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Operator::Diagonal(v) => v.iter().map(|x| x.norm()).fold(0.0, f64::max),
            Operator::Dense(m) => numlin::max_abs(m),
        }
    }

    pub fn is_finite(&self) -> bool {
        let ok = |x: &Complex64| x.re.is_finite() && x.im.is_finite();
        match self {
            Operator::Diagonal(v) => v.iter().all(ok),
            Operator::Dense(m) => m.iter().all(ok),
        }
    }
}

/// Pauli matrices and tensor-product helpers.
pub mod pauli {
    use super::*;

    pub fn sigma_x() -> CMatrix {
        let o = Complex64::new(0.0, 0.0);
        let l = Complex64::new(1.0, 0.0);
        CMatrix::from_row_slice(2, 2, &[o, l, l, o])
    }

    pub fn sigma_y() -> CMatrix {
        let o = Complex64::new(0.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        CMatrix::from_row_slice(2, 2, &[o, -i, i, o])
    }

    pub fn sigma_z() -> Operator {
        Operator::from_real_diagonal(&[1.0, -1.0])
    }

    /// `σ_z` acting on qubit `site` of an `n`-qubit register. Qubit 0 is the
    /// most significant bit of the basis index.
    pub fn sigma_z_site(site: usize, n: usize) -> Operator {
        let d = 1usize << n;
        let shift = n - 1 - site;
        let diag: Vec<f64> = (0..d)
            .map(|k| if (k >> shift) & 1 == 0 { 1.0 } else { -1.0 })
            .collect();
        Operator::from_real_diagonal(&diag)
    }

    pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
        a.kronecker(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn dense_sample() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(1.0, 0.5), c(0.2, -0.3), c(-0.7, 0.1), c(0.4, 0.0)])
    }

    #[test]
    fn from_matrix_detects_diagonal() {
        let op = Operator::from_matrix(pauli::sigma_z().to_dense()).unwrap();
        assert!(op.is_diagonal());
        let op = Operator::from_matrix(pauli::sigma_x()).unwrap();
        assert!(!op.is_diagonal());
        assert!(Operator::from_matrix(CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn site_operators_follow_big_endian_order() {
        let z0 = pauli::sigma_z_site(0, 2).to_dense();
        let expected = pauli::kron(&pauli::sigma_z().to_dense(), &CMatrix::identity(2, 2));
        assert_eq!(z0, expected);
        let z1 = pauli::sigma_z_site(1, 2).to_dense();
        let expected = pauli::kron(&CMatrix::identity(2, 2), &pauli::sigma_z().to_dense());
        assert_eq!(z1, expected);
    }

    #[test]
    fn expectations_match_dense_forms() {
        let rho = CMatrix::from_row_slice(2, 2, &[c(0.6, 0.0), c(0.1, 0.2), c(0.1, -0.2), c(0.4, 0.0)]);
        let diag = Operator::Diagonal(nalgebra::dvector![c(2.0, 1.0), c(-1.0, 0.0)]);
        let dense = Operator::Dense(diag.to_dense());
        assert!((diag.expectation(&rho) - dense.expectation(&rho)).norm() < 1e-15);
        let psi = nalgebra::dvector![c(0.6, 0.0), c(0.0, 0.8)];
        assert!((diag.expectation_pure(&psi) - dense.expectation_pure(&psi)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn diagonal_and_dense_paths_agree(v in proptest::collection::vec(-2.0..2.0f64, 12)) {
            let diag = Operator::Diagonal(nalgebra::dvector![c(v[0], v[1]), c(v[2], v[3])]);
            let dense = Operator::Dense(diag.to_dense());
            let rho = CMatrix::from_row_slice(2, 2, &[c(v[4], v[5]), c(v[6], v[7]), c(v[8], v[9]), c(v[10], v[11])]);
            prop_assert!((diag.left_mul(&rho) - dense.left_mul(&rho)).norm() < 1e-12);
            prop_assert!((diag.right_mul(&rho) - dense.right_mul(&rho)).norm() < 1e-12);
            let other = Operator::Dense(dense_sample());
            prop_assert!((diag.mul(&other).to_dense() - dense.to_dense() * dense_sample()).norm() < 1e-12);
            prop_assert!((diag.adjoint().to_dense() - dense.to_dense().adjoint()).norm() < 1e-15);
        }
    }
}
