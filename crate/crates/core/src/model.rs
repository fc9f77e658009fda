//! Hybrid classical-quantum models: coefficient maps, positivity validation,
//! and the Hamiltonian and mean-field (standard semi-classical) builders.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CqError, Result};
use crate::numlin;
use crate::operator::Operator;
use crate::{CMatrix, PhaseVector, RMatrix};

/// Coefficients of the master equation at one phase-space point.
///
/// `d1[(i, a)]` couples classical direction `i` to `L_a`; the conjugate
/// coupling is implied. `d1c` is the purely classical drift.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub lindblad: Vec<Operator>,
    pub d0: CMatrix,
    pub d1: CMatrix,
    pub d1c: PhaseVector,
    pub sigma: RMatrix,
    pub hamiltonian: Operator,
}

impl Coefficients {
    /// `D2 = ½ σ σᵀ`.
    pub fn d2(&self) -> RMatrix {
        &self.sigma * self.sigma.transpose() * 0.5
    }

    pub fn sigma_sigma_t_pinv(&self) -> RMatrix {
        numlin::pinv(&(&self.sigma * self.sigma.transpose()))
    }

    /// `D1† · pinv(σσᵀ) · D1`, the decoherence a saturated model must have.
    pub fn saturating_d0(&self) -> CMatrix {
        let p = complexify(&self.sigma_sigma_t_pinv());
        self.d1.adjoint() * p * &self.d1
    }

    /// `D0 − D1† · pinv(σσᵀ) · D1`.
    pub fn excess_decoherence(&self) -> CMatrix {
        &self.d0 - self.saturating_d0()
    }

    /// Maps a Wiener increment `dW` to the per-operator weights
    /// `w_a = Σ_ij dW_i pinv(σ)_ij conj(D1_ja)`; returned as a p×n matrix.
    pub fn noise_weights(&self) -> CMatrix {
        let sp = complexify(&numlin::pinv(&self.sigma));
        (sp * self.d1.map(|x| x.conj())).transpose()
    }

    /// Classical drift `D1C_i + Σ_a 2 Re(conj(D1_ia) ⟨L_a⟩)` given the
    /// expectations `⟨L_a⟩`.
    pub fn drift(&self, expectations: &[Complex64]) -> PhaseVector {
        let mut out = self.d1c.clone();
        for i in 0..out.len() {
            for (a, e) in expectations.iter().enumerate() {
                out[i] += 2.0 * (self.d1[(i, a)].conj() * e).re;
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d1.nrows(), self.hamiltonian.dim(), self.lindblad.len())
    }

    fn check(&self, n: usize, d: usize, p: usize) -> Result<()> {
        let mismatch = |what: &str, got: String, want: String| {
            Err(CqError::Dimension(format!("{what}: expected {want}, got {got}")))
        };
        if self.lindblad.len() != p {
            return mismatch("lindblad count", self.lindblad.len().to_string(), p.to_string());
        }
        for (a, l) in self.lindblad.iter().enumerate() {
            if l.dim() != d {
                return mismatch(&format!("L_{a} dimension"), l.dim().to_string(), d.to_string());
            }
        }
        if self.hamiltonian.dim() != d {
            return mismatch("H dimension", self.hamiltonian.dim().to_string(), d.to_string());
        }
        if self.d0.shape() != (p, p) {
            return mismatch("D0 shape", format!("{:?}", self.d0.shape()), format!("({p}, {p})"));
        }
        if self.d1.shape() != (n, p) {
            return mismatch("D1 shape", format!("{:?}", self.d1.shape()), format!("({n}, {p})"));
        }
        if self.d1c.len() != n {
            return mismatch("D1C length", self.d1c.len().to_string(), n.to_string());
        }
        if self.sigma.shape() != (n, n) {
            return mismatch("sigma shape", format!("{:?}", self.sigma.shape()), format!("({n}, {n})"));
        }
        let finite = self.d0.iter().chain(self.d1.iter()).all(|x| x.re.is_finite() && x.im.is_finite())
            && self.d1c.iter().chain(self.sigma.iter()).all(|x| x.is_finite())
            && self.hamiltonian.is_finite()
            && self.lindblad.iter().all(Operator::is_finite);
        if !finite {
            return Err(CqError::NonFinite("model coefficients".into()));
        }
        Ok(())
    }
}

pub(crate) fn complexify(m: &RMatrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

pub type CoefficientFn = dyn Fn(&PhaseVector) -> Coefficients + Send + Sync;
/// Returns `Some(reason)` when `z` lies outside the model's domain.
pub type DomainFn = dyn Fn(&PhaseVector) -> Option<String> + Send + Sync;

/// A complete hybrid dynamics: dimensions plus coefficient maps.
///
/// Cloning is cheap; the maps are shared, and must be pure so one model can
/// serve many worker threads.
#[derive(Clone)]
pub struct CqModel {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    coefficients: Arc<CoefficientFn>,
    domain: Option<Arc<DomainFn>>,
}

impl fmt::Debug for CqModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CqModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("p", &self.p)
            .finish_non_exhaustive()
    }
}

impl CqModel {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        d: usize,
        p: usize,
        coefficients: impl Fn(&PhaseVector) -> Coefficients + Send + Sync + 'static,
    ) -> Self {
        CqModel {
            name: name.into(),
            n,
            d,
            p,
            coefficients: Arc::new(coefficients),
            domain: None,
        }
    }

    pub fn with_domain(
        mut self,
        domain: impl Fn(&PhaseVector) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.domain = Some(Arc::new(domain));
        self
    }

    pub(crate) fn with_shared_domain(mut self, domain: Option<Arc<DomainFn>>) -> Self {
        self.domain = domain;
        self
    }

    pub(crate) fn shared_domain(&self) -> Option<Arc<DomainFn>> {
        self.domain.clone()
    }

    /// Coefficients at `z`, checked for shape and finiteness.
    pub fn coefficients(&self, z: &PhaseVector) -> Result<Coefficients> {
        if z.len() != self.n {
            return Err(CqError::Dimension(format!(
                "phase point has length {}, model expects {}",
                z.len(),
                self.n
            )));
        }
        let c = (self.coefficients)(z);
        c.check(self.n, self.d, self.p)?;
        Ok(c)
    }

    pub fn domain_violation(&self, z: &PhaseVector) -> Option<String> {
        self.domain.as_ref().and_then(|f| f(z))
    }

    /// Coefficients without the shape and finiteness checks, for models
    /// built on top of this one; their own evaluation re-checks.
    pub(crate) fn raw_coefficients(&self, z: &PhaseVector) -> Coefficients {
        (self.coefficients)(z)
    }
}

/// Outcome of the positivity checks at one phase-space point.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub z: Vec<f64>,
    /// Smallest eigenvalue of `2 D0 − D1† pinv(D2) D1`.
    pub tradeoff_min_eigenvalue: f64,
    /// Frobenius norm of `(I − σ pinv(σ)) D1`.
    pub range_residual: f64,
    pub hamiltonian_hermiticity: f64,
    pub d0_hermiticity: f64,
    pub saturated: bool,
    pub valid: bool,
}

/// Checks the complete-positivity conditions at `z`.
pub fn validate(model: &CqModel, z: &PhaseVector, tol: f64) -> Result<ValidationReport> {
    let c = model.coefficients(z)?;
    let d2 = complexify(&c.d2());
    let tradeoff = &c.d0 * Complex64::new(2.0, 0.0) - c.d1.adjoint() * numlin::pinv(&d2) * &c.d1;
    let herm = (&tradeoff + tradeoff.adjoint()) * Complex64::new(0.5, 0.0);
    let min_eig = numlin::hermitian_eigenvalues(&herm)
        .first()
        .copied()
        .unwrap_or(0.0);
    let sigma = complexify(&c.sigma);
    let proj = CMatrix::identity(model.n, model.n) - &sigma * numlin::pinv(&sigma);
    let range_residual = (proj * &c.d1).norm();
    let hamiltonian_hermiticity = c.hamiltonian.hermiticity_residual();
    let d0_hermiticity = numlin::hermiticity_residual(&c.d0);
    let d0_scale = numlin::max_abs(&c.d0).max(1.0);
    let saturated = numlin::max_abs(&c.excess_decoherence()) <= tol * d0_scale;
    let h_scale = c.hamiltonian.max_abs().max(1.0);
    let valid = min_eig >= -tol * d0_scale
        && range_residual <= tol * numlin::max_abs(&c.d1).max(1.0)
        && hamiltonian_hermiticity <= tol * h_scale
        && d0_hermiticity <= tol * d0_scale;
    Ok(ValidationReport {
        z: z.iter().copied().collect(),
        tradeoff_min_eigenvalue: min_eig,
        range_residual,
        hamiltonian_hermiticity,
        d0_hermiticity,
        saturated,
        valid,
    })
}

/// `z0` plus `count` deterministic perturbations inside the model domain.
pub fn default_probes(model: &CqModel, z0: &PhaseVector, count: usize) -> Vec<PhaseVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed0f9e0b);
    let mut out = vec![z0.clone()];
    let mut attempts = 0;
    while out.len() < count + 1 && attempts < 100 * (count + 1) {
        attempts += 1;
        let z = z0.map(|x| x + 0.1 * x.abs().max(1.0) * rng.random_range(-1.0..1.0));
        if model.domain_violation(&z).is_none() {
            out.push(z);
        }
    }
    out
}

/// Validates at every probe and returns all reports.
pub fn validate_many(model: &CqModel, probes: &[PhaseVector], tol: f64) -> Result<Vec<ValidationReport>> {
    probes.iter().map(|z| validate(model, z, tol)).collect()
}

pub type ScalarFn = dyn Fn(&PhaseVector) -> f64 + Send + Sync;
pub type OperatorFn = dyn Fn(&PhaseVector) -> Operator + Send + Sync;
pub type VectorFn = dyn Fn(&PhaseVector) -> PhaseVector + Send + Sync;
pub type OperatorListFn = dyn Fn(&PhaseVector) -> Vec<Operator> + Send + Sync;
pub type MatrixFn = dyn Fn(&PhaseVector) -> RMatrix + Send + Sync;

/// A hybrid Hamiltonian `H_C(z)·I + H_I(z)` on a canonical phase space
/// ordered `(q_1..q_k, p_1..p_k)`, with the noise matrix `σ(z)` on the
/// classical sector.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub h_c: Arc<ScalarFn>,
    pub h_i: Arc<OperatorFn>,
    /// `∂H_C/∂z_i` for every i.
    pub grad_c: Arc<VectorFn>,
    /// `∂H_I/∂z_i` for every i.
    pub grad_i: Arc<OperatorListFn>,
    pub sigma: Arc<MatrixFn>,
    pub domain: Option<Arc<DomainFn>>,
    /// Point used to probe the range condition when building.
    pub reference_z: PhaseVector,
}

impl fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("reference_z", &self.reference_z)
            .finish_non_exhaustive()
    }
}

impl HamiltonianSpec {
    /// Builds a spec whose gradients come from central finite differences
    /// with step `1e-5 · max(1, |z_i|)`.
    pub fn with_finite_differences(
        name: impl Into<String>,
        n: usize,
        d: usize,
        h_c: impl Fn(&PhaseVector) -> f64 + Send + Sync + 'static,
        h_i: impl Fn(&PhaseVector) -> Operator + Send + Sync + 'static,
        sigma: impl Fn(&PhaseVector) -> RMatrix + Send + Sync + 'static,
        reference_z: PhaseVector,
    ) -> Self {
        let h_c: Arc<ScalarFn> = Arc::new(h_c);
        let h_i: Arc<OperatorFn> = Arc::new(h_i);
        let hc = h_c.clone();
        let grad_c = move |z: &PhaseVector| {
            PhaseVector::from_fn(z.len(), |i, _| {
                let (zp, zm, h) = nudge(z, i);
                (hc(&zp) - hc(&zm)) / (2.0 * h)
            })
        };
        let hi = h_i.clone();
        let grad_i = move |z: &PhaseVector| {
            (0..z.len())
                .map(|i| {
                    let (zp, zm, h) = nudge(z, i);
                    hi(&zp)
                        .add(&hi(&zm).scale(Complex64::new(-1.0, 0.0)))
                        .scale(Complex64::new(0.5 / h, 0.0))
                })
                .collect()
        };
        HamiltonianSpec {
            name: name.into(),
            n,
            d,
            h_c,
            h_i,
            grad_c: Arc::new(grad_c),
            grad_i: Arc::new(grad_i),
            sigma: Arc::new(sigma),
            domain: None,
            reference_z,
        }
    }
}

fn nudge(z: &PhaseVector, i: usize) -> (PhaseVector, PhaseVector, f64) {
    let h = 1e-5 * z[i].abs().max(1.0);
    let mut zp = z.clone();
    let mut zm = z.clone();
    zp[i] += h;
    zm[i] -= h;
    (zp, zm, h)
}

/// Poisson brackets `{z_i, H_C}` and `{z_i, H_I}` for every coordinate.
#[derive(Clone, Debug)]
pub struct Brackets {
    pub classical: PhaseVector,
    pub quantum: Vec<Operator>,
}

/// Canonical brackets: `{q_i, H} = ∂H/∂p_i`, `{p_i, H} = −∂H/∂q_i`.
pub fn poisson_bracket(spec: &HamiltonianSpec, z: &PhaseVector) -> Result<Brackets> {
    let n = spec.n;
    if !n.is_multiple_of(2) {
        return Err(CqError::Dimension(format!(
            "canonical phase space needs an even dimension, got {n}"
        )));
    }
    if z.len() != n {
        return Err(CqError::Dimension(format!(
            "phase point has length {}, spec expects {n}",
            z.len()
        )));
    }
    let k = n / 2;
    let gc = (spec.grad_c)(z);
    let gi = (spec.grad_i)(z);
    if gc.len() != n || gi.len() != n {
        return Err(CqError::Dimension("gradient length differs from n".into()));
    }
    let minus = Complex64::new(-1.0, 0.0);
    let mut classical = PhaseVector::zeros(n);
    let mut quantum = Vec::with_capacity(n);
    for i in 0..k {
        classical[i] = gc[k + i];
        quantum.push(gi[k + i].clone());
    }
    for i in 0..k {
        classical[k + i] = -gc[i];
        quantum.push(gi[i].scale(minus));
    }
    for op in &quantum {
        if op.dim() != spec.d {
            return Err(CqError::Dimension(format!(
                "H_I gradient has dimension {}, spec expects {}",
                op.dim(),
                spec.d
            )));
        }
    }
    Ok(Brackets { classical, quantum })
}

/// Largest `‖Σ_j (I − σσ⁺)_ij {z_j, H_I}‖_F` over directions `i`, and the
/// direction attaining it.
pub fn range_violation(sigma: &RMatrix, brackets: &[Operator]) -> (f64, usize) {
    let n = sigma.nrows();
    let proj = RMatrix::identity(n, n) - sigma * numlin::pinv(sigma);
    let mut worst = (0.0, 0);
    for i in 0..n {
        let mut acc: Option<Operator> = None;
        for (j, op) in brackets.iter().enumerate() {
            let w = proj[(i, j)];
            if w == 0.0 {
                continue;
            }
            let term = op.scale(Complex64::new(w, 0.0));
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term),
            });
        }
        let norm = acc.map(|a| a.to_dense().norm()).unwrap_or(0.0);
        if norm > worst.0 {
            worst = (norm, i);
        }
    }
    worst
}

fn hamiltonian_coefficients(spec: &HamiltonianSpec, z: &PhaseVector) -> Coefficients {
    let n = spec.n;
    let br = poisson_bracket(spec, z).unwrap_or_else(|_| Brackets {
        classical: PhaseVector::from_element(n, f64::NAN),
        quantum: vec![Operator::zeros(spec.d); n],
    });
    let sigma = (spec.sigma)(z);
    let ss = &sigma * sigma.transpose();
    // Projector onto range(σ): D1 = ½·Π instead of ½·I so that directions
    // without noise carry no coupling. Under the range condition both give
    // the same dynamics, and this form passes the range check exactly.
    let proj = &ss * numlin::pinv(&ss);
    Coefficients {
        lindblad: br.quantum,
        d0: complexify(&(numlin::pinv(&ss) * 0.25)),
        d1: complexify(&(proj * 0.5)),
        d1c: br.classical,
        sigma,
        hamiltonian: (spec.h_i)(z),
    }
}

/// Builds the healed semi-classical model of a Hamiltonian spec: one
/// Lindblad operator `{z_a, H_I}` per coordinate, `D0 = ¼ pinv(σσᵀ)`, and a
/// `½`-coupling restricted to the noisy directions. Saturated by
/// construction.
pub fn build_hamiltonian_model(spec: &HamiltonianSpec) -> Result<CqModel> {
    let z0 = &spec.reference_z;
    let br = poisson_bracket(spec, z0)?;
    let sigma = (spec.sigma)(z0);
    if sigma.shape() != (spec.n, spec.n) {
        return Err(CqError::Dimension(format!(
            "sigma has shape {:?}, expected ({n}, {n})",
            sigma.shape(),
            n = spec.n
        )));
    }
    let scale = br
        .quantum
        .iter()
        .map(Operator::max_abs)
        .fold(1.0_f64, f64::max);
    let (residual, dir) = range_violation(&sigma, &br.quantum);
    if residual > 1e-10 * scale {
        return Err(CqError::Positivity(format!(
            "coupling {{z_{dir}, H_I}} has a component outside the range of sigma \
             (residual {residual:.3e}); direction {dir} needs noise"
        )));
    }
    let s = spec.clone();
    let model = CqModel::new(spec.name.clone(), spec.n, spec.d, spec.n, move |z| {
        hamiltonian_coefficients(&s, z)
    });
    Ok(model.with_shared_domain(spec.domain.clone()))
}

/// Coefficients of a mean-field model at one point:
/// `dz = (drift + Re⟨couplings⟩) dt`, `dψ = −i H ψ dt`.
#[derive(Clone, Debug)]
pub struct StandardCoefficients {
    pub drift: PhaseVector,
    pub couplings: Vec<Operator>,
    pub hamiltonian: Operator,
}

/// The deterministic mean-field ("standard semi-classical") dynamics.
#[derive(Clone)]
pub struct StandardScModel {
    pub name: String,
    pub n: usize,
    pub d: usize,
    coefficients: Arc<dyn Fn(&PhaseVector) -> Result<StandardCoefficients> + Send + Sync>,
    domain: Option<Arc<DomainFn>>,
}

impl fmt::Debug for StandardScModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StandardScModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .finish_non_exhaustive()
    }
}

impl StandardScModel {
    pub fn coefficients(&self, z: &PhaseVector) -> Result<StandardCoefficients> {
        (self.coefficients)(z)
    }

    pub fn domain_violation(&self, z: &PhaseVector) -> Option<String> {
        self.domain.as_ref().and_then(|f| f(z))
    }

    /// Mean-field counterpart of a general model: the backreaction drift of
    /// the unravelling with noise and state conditioning removed.
    pub fn from_model(model: &CqModel) -> Self {
        let m = model.clone();
        StandardScModel {
            name: format!("{} (mean field)", model.name),
            n: model.n,
            d: model.d,
            domain: model.shared_domain(),
            coefficients: Arc::new(move |z| {
                let c = m.coefficients(z)?;
                let couplings = (0..m.n)
                    .map(|i| {
                        c.lindblad.iter().enumerate().fold(Operator::zeros(m.d), |acc, (a, l)| {
                            acc.add(&l.scale(c.d1[(i, a)].conj() * 2.0))
                        })
                    })
                    .collect();
                Ok(StandardCoefficients {
                    drift: c.d1c,
                    couplings,
                    hamiltonian: c.hamiltonian,
                })
            }),
        }
    }
}

/// Mean-field dynamics of a Hamiltonian spec: `dz_i = {z_i, H_C} dt +
/// ⟨{z_i, H_I}⟩ dt`, `dψ = −i H_I ψ dt`. No noise, so no range condition.
pub fn build_standard_semiclassical(spec: &HamiltonianSpec) -> StandardScModel {
    let s = spec.clone();
    StandardScModel {
        name: format!("{} (standard)", spec.name),
        n: spec.n,
        d: spec.d,
        domain: spec.domain.clone(),
        coefficients: Arc::new(move |z| {
            let br = poisson_bracket(&s, z)?;
            Ok(StandardCoefficients {
                drift: br.classical,
                couplings: br.quantum,
                hamiltonian: (s.h_i)(z),
            })
        }),
    }
}

/// A general single-qubit model monitored through `L = σ_z`: one classical
/// coordinate with drift `2 d1 ⟨σ_z⟩`, noise `σ`, decoherence
/// `D0 = d1²/σ² + ε` and Hamiltonian `φ σ_z`. `ε = 0` saturates the
/// trade-off; `ε > 0` leaves room for purification; `ε < 0` violates
/// complete positivity.
pub fn monitored_qubit(d1: f64, sigma: f64, epsilon: f64, phi: f64) -> CqModel {
    let d0 = if sigma == 0.0 { 0.0 } else { d1 * d1 / (sigma * sigma) } + epsilon;
    explicit_qubit_model("monitored qubit", d0, d1, sigma, phi)
}

/// Single-qubit, single-coordinate model with the coefficients given
/// directly; no positivity is implied.
pub fn explicit_qubit_model(name: &str, d0: f64, d1: f64, sigma: f64, phi: f64) -> CqModel {
    CqModel::new(name, 1, 2, 1, move |_z| Coefficients {
        lindblad: vec![Operator::from_real_diagonal(&[1.0, -1.0])],
        d0: CMatrix::from_element(1, 1, Complex64::new(d0, 0.0)),
        d1: CMatrix::from_element(1, 1, Complex64::new(d1, 0.0)),
        d1c: DVector::zeros(1),
        sigma: RMatrix::from_element(1, 1, sigma),
        hamiltonian: Operator::from_real_diagonal(&[phi, -phi]),
    })
}
