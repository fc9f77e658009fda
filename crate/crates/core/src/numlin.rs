//! Dense linear-algebra helpers shared by every other module.
//!
//! All routines are generic over the nalgebra scalar (`f32`, `f64` or their
//! complex counterparts). Matrices here are small (tens of rows at most), so
//! eigendecompositions are used directly. Diagonal inputs take a shortcut that
//! skips the decomposition; the builtin models are almost entirely diagonal
//! and these routines sit on the per-step hot path.

use approx::AbsDiffEq;
use nalgebra::{ComplexField, DMatrix, DVector, RealField};
use num_traits::Zero;

use crate::error::{CqError, Result};

/// Singular values below `PINV_RTOL · σ_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// Default relative tolerance for Hermiticity and positivity checks.
pub const DEFAULT_TOL: f64 = 1e-10;

fn real<T: ComplexField>(x: f64) -> T::RealField {
    nalgebra::convert(x)
}

fn as_f64<R: RealField>(x: R) -> f64 {
    x.to_subset().unwrap_or(f64::NAN)
}

fn require_square<T: ComplexField>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(CqError::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// True if every off-diagonal entry is exactly zero.
pub fn is_diagonal<T: ComplexField>(m: &DMatrix<T>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && !m[(i, j)].is_zero() {
                return false;
            }
        }
    }
    true
}

/// Largest entry modulus.
pub fn max_abs<T: ComplexField>(m: &DMatrix<T>) -> T::RealField {
    m.iter()
        .map(|x| x.clone().modulus())
        .fold(T::RealField::zero(), |a, b| if b > a { b } else { a })
}

/// `max_ij |m_ij - conj(m_ji)|`.
pub fn hermiticity_residual<T: ComplexField>(m: &DMatrix<T>) -> T::RealField {
    let mut worst = T::RealField::zero();
    for j in 0..m.ncols().min(m.nrows()) {
        for i in 0..=j {
            let r = (m[(i, j)].clone() - m[(j, i)].clone().conjugate()).modulus();
            if r > worst {
                worst = r;
            }
        }
    }
    worst
}

fn unit_floor<R: RealField>(x: R) -> R {
    let one = R::one();
    if x > one {
        x
    } else {
        one
    }
}

/// Errors unless `m` is square and Hermitian to `tol` relative to its largest
/// entry (floored at 1).
pub fn check_hermitian<T: ComplexField>(m: &DMatrix<T>, tol: f64) -> Result<()> {
    require_square(m, "matrix")?;
    let residual = hermiticity_residual(m);
    if residual > real::<T>(tol) * unit_floor(max_abs(m)) {
        return Err(CqError::Symmetry {
            residual: as_f64(residual),
        });
    }
    Ok(())
}

/// Eigenvalues (ascending) and eigenvectors (as columns) of a Hermitian
/// matrix. Only the lower triangle is read.
pub fn hermitian_eigen<T: ComplexField>(m: &DMatrix<T>) -> (Vec<T::RealField>, DMatrix<T>) {
    let n = m.nrows();
    let mut pairs: Vec<(T::RealField, DVector<T>)>;
    if is_diagonal(m) {
        pairs = (0..n)
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = T::one();
                (m[(i, i)].clone().real(), e)
            })
            .collect();
    } else {
        let eig = symmetric_eigen(m);
        pairs = (0..n)
            .map(|i| {
                (
                    eig.eigenvalues[i].clone(),
                    eig.eigenvectors.column(i).into_owned(),
                )
            })
            .collect();
    }
    pairs.sort_by(|a, b| ascending(&a.0, &b.0));
    let values = pairs.iter().map(|p| p.0.clone()).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (i, (_, v)) in pairs.iter().enumerate() {
        vectors.set_column(i, v);
    }
    (values, vectors)
}

/// `SymmetricEigen` with a retry: nalgebra's complex tridiagonalization can
/// return NaN on finite Hermitian input with exactly-zero subcolumns (GHZ
/// density matrices hit this). Conjugating by a fixed generic reflection `Q`
/// breaks the zero pattern without changing the spectrum; eigenvectors map
/// back as `Q v`.
fn symmetric_eigen<T: ComplexField>(m: &DMatrix<T>) -> nalgebra::SymmetricEigen<T, nalgebra::Dyn> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let finite = |e: &nalgebra::SymmetricEigen<T, nalgebra::Dyn>| {
        e.eigenvalues.iter().all(|x| x.clone().is_finite()) && e.eigenvectors.iter().all(|x| x.clone().is_finite())
    };
    if finite(&eig) {
        return eig;
    }
    let n = m.nrows();
    // Golden-ratio fractions: no zero or repeated components.
    let u: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_749_895).fract()).collect();
    let norm2: f64 = u.iter().map(|x| x * x).sum();
    let q = DMatrix::<T>::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        T::from_real(real::<T>(delta - 2.0 * u[i] * u[j] / norm2))
    });
    let mut reflected = nalgebra::SymmetricEigen::new(&q * m * &q);
    if !finite(&reflected) {
        return eig;
    }
    reflected.eigenvectors = &q * &reflected.eigenvectors;
    reflected
}

/// Total order for sorting eigenvalues: NaN sorts last instead of breaking
/// the sort.
fn ascending<R: PartialOrd>(a: &R, b: &R) -> std::cmp::Ordering {
    #[allow(clippy::eq_op)]
    let nan = |x: &R| x != x;
    match (nan(a), nan(b)) {
        (false, false) => a.partial_cmp(b).unwrap(),
        (a, b) => a.cmp(&b),
    }
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues<T: ComplexField>(m: &DMatrix<T>) -> Vec<T::RealField> {
    if is_diagonal(m) {
        let mut v: Vec<_> = (0..m.nrows()).map(|i| m[(i, i)].clone().real()).collect();
        v.sort_by(ascending);
        return v;
    }
    let mut v: Vec<_> = symmetric_eigen(m)
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    v.sort_by(ascending);
    v
}

/// Smallest eigenvalue of a Hermitian matrix (`+∞`-free: empty → 0).
pub fn min_eigenvalue<T: ComplexField>(m: &DMatrix<T>, tol: f64) -> Result<T::RealField> {
    check_hermitian(m, tol)?;
    Ok(hermitian_eigenvalues(m)
        .into_iter()
        .next()
        .unwrap_or_else(T::RealField::zero))
}

/// Positive semi-definiteness test: the smallest eigenvalue must be at least
/// `-tol · max(1, max |λ|)`.
pub fn is_psd<T: ComplexField>(m: &DMatrix<T>, tol: f64) -> Result<bool> {
    check_hermitian(m, tol)?;
    let eig = hermitian_eigenvalues(m);
    let Some(lo) = eig.first().cloned() else {
        return Ok(true);
    };
    let hi = eig.last().cloned().unwrap_or_else(T::RealField::zero);
    let scale = unit_floor(if hi.clone().abs() > lo.clone().abs() {
        hi.abs()
    } else {
        lo.clone().abs()
    });
    Ok(lo >= -(real::<T>(tol) * scale))
}

/// Moore–Penrose pseudoinverse with the default rank cutoff [`PINV_RTOL`].
pub fn pinv<T: ComplexField>(m: &DMatrix<T>) -> DMatrix<T> {
    pinv_rtol(m, PINV_RTOL)
}

/// Moore–Penrose pseudoinverse; singular values below `rtol · σ_max` are
/// dropped.
pub fn pinv_rtol<T: ComplexField>(m: &DMatrix<T>, rtol: f64) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    if is_diagonal(m) {
        let k = rows.min(cols);
        let smax = (0..k)
            .map(|i| m[(i, i)].clone().modulus())
            .fold(T::RealField::zero(), |a, b| if b > a { b } else { a });
        let cut = real::<T>(rtol) * smax;
        let mut out = DMatrix::zeros(cols, rows);
        for i in 0..k {
            let x = m[(i, i)].clone();
            if x.clone().modulus() > cut {
                out[(i, i)] = x.recip();
            }
        }
        return out;
    }
    let scale = unit_floor(max_abs(m));
    if rows == cols && hermiticity_residual(m) <= real::<T>(1e-14) * scale {
        let (vals, vecs) = hermitian_eigen(m);
        let smax = vals
            .iter()
            .map(|v| v.clone().abs())
            .fold(T::RealField::zero(), |a, b| if b > a { b } else { a });
        let cut = real::<T>(rtol) * smax;
        let mut out = DMatrix::zeros(rows, rows);
        for (k, l) in vals.iter().enumerate() {
            if l.clone().abs() > cut {
                let x = vecs.column(k);
                out += &x * x.adjoint() * T::from_real(l.clone().recip());
            }
        }
        return out;
    }
    // Singular pairs from the Hermitian dilation [[0, M], [M†, 0]], whose
    // positive eigenpairs are (s, (u; v)/√2). nalgebra's SVD can stall on
    // exactly rank-deficient input; the symmetric solver does not.
    let n = rows + cols;
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, rows), (rows, cols)).copy_from(m);
    h.view_mut((rows, 0), (cols, rows)).copy_from(&m.adjoint());
    let (vals, vecs) = hermitian_eigen(&h);
    let smax = vals
        .last()
        .cloned()
        .unwrap_or_else(T::RealField::zero);
    let cut = real::<T>(rtol) * smax;
    let two = T::from_real(real::<T>(2.0));
    let mut out = DMatrix::zeros(cols, rows);
    for (k, l) in vals.iter().enumerate() {
        if *l > cut {
            let top = vecs.view((0, k), (rows, 1));
            let bot = vecs.view((rows, k), (cols, 1));
            out += &bot * top.adjoint() * (two.clone() * T::from_real(l.clone().recip()));
        }
    }
    out
}

/// Numerical rank of a Hermitian PSD matrix: eigenvalues above
/// `rtol · max(1, λ_max)`.
pub fn psd_rank<T: ComplexField>(m: &DMatrix<T>, rtol: f64) -> usize {
    let eig = hermitian_eigenvalues(m);
    let top = eig.last().cloned().unwrap_or_else(T::RealField::zero);
    let cut = real::<T>(rtol) * unit_floor(top);
    eig.into_iter().filter(|e| *e > cut).count()
}

/// Principal square root of a Hermitian PSD matrix. Eigenvalues in
/// `[-tol·scale, 0)` are treated as zero; anything more negative is a
/// positivity error.
pub fn principal_sqrt<T: ComplexField>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    principal_sqrt_tol(m, DEFAULT_TOL)
}

pub fn principal_sqrt_tol<T: ComplexField>(m: &DMatrix<T>, tol: f64) -> Result<DMatrix<T>> {
    check_hermitian(m, tol)?;
    let n = m.nrows();
    let scale = unit_floor(max_abs(m));
    let floor = -(real::<T>(tol) * scale);
    let root = |x: T::RealField| -> Result<T::RealField> {
        if x < floor {
            Err(CqError::Positivity(format!(
                "square root of a matrix with eigenvalue {:e}",
                as_f64(x)
            )))
        } else if x < T::RealField::zero() {
            Ok(T::RealField::zero())
        } else {
            Ok(x.sqrt())
        }
    };
    if is_diagonal(m) {
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = T::from_real(root(m[(i, i)].clone().real())?);
        }
        return Ok(out);
    }
    let (values, vectors) = hermitian_eigen(m);
    // Eigenvalues at rounding level of the largest one are zero; keeping them
    // would turn a rank-deficient input into a full-rank root with ~1e-8
    // singular values.
    let top = values.last().cloned().unwrap_or_else(T::RealField::zero);
    let noise = T::RealField::default_epsilon() * real::<T>(64.0) * top;
    let mut out = DMatrix::zeros(n, n);
    for (k, lam) in values.into_iter().enumerate() {
        let lam = if lam.clone().abs() <= noise {
            T::RealField::zero()
        } else {
            lam
        };
        let s = root(lam)?;
        if s.is_zero() {
            continue;
        }
        let s = T::from_real(s);
        for j in 0..n {
            let vjk = vectors[(j, k)].clone().conjugate() * s.clone();
            for i in 0..n {
                out[(i, j)] += vectors[(i, k)].clone() * vjk.clone();
            }
        }
    }
    // Symmetrize away rounding.
    let adj = out.adjoint();
    Ok((out + adj) * T::from_real(real::<T>(0.5)))
}

/// Diffusion factor `σ` with `½ σ σᵀ = D2`: the symmetric root
/// `σ = sqrt(2 D2)`.
pub fn factor_sigma<T: RealField>(d2: &DMatrix<T>) -> Result<DMatrix<T>> {
    require_square(d2, "D2")?;
    let two: T = nalgebra::convert(2.0);
    principal_sqrt(&(d2 * two))
}
