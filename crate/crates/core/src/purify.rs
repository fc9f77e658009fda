//! Purification in an enlarged classical phase space.
//!
//! A valid but unsaturated model carries excess decoherence
//! `D̃0 = D0 − D1† pinv(σσᵀ) D1 ⪰ 0`. Adding `r = rank D̃0` auxiliary
//! coordinates driven by `D̃1 = √D̃0` (restricted to its row space) with unit
//! noise absorbs that excess: the enlarged model saturates the trade-off, its
//! conditioned states stay pure, and tracing out the auxiliary coordinates
//! gives back the original dynamics.

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Serialize;

use crate::ensemble::{mean_stderr, run_ensemble, EnsembleConfig, Initial};
use crate::error::{CqError, Result};
use crate::integrator::{Mode, QuantumState, SimConfig, Trajectory};
use crate::model::{complexify, default_probes, validate, Coefficients, CqModel};
use crate::numlin;
use crate::{CMatrix, PhaseVector, RMatrix};

/// Relative eigenvalue cut deciding the rank of `D̃0`.
pub const RANK_RTOL: f64 = 1e-9;
const VALIDATE_TOL: f64 = 1e-10;
const RANK_PROBES: usize = 8;

#[derive(Clone, Debug)]
pub struct PurifiedModel {
    pub base: CqModel,
    /// Number of auxiliary coordinates, `rank D̃0`.
    pub extra_dims: usize,
    /// Model on `n + extra_dims` coordinates; the auxiliary ones come last.
    pub enlarged: CqModel,
}

/// The auxiliary blocks at one base point.
#[derive(Clone, Debug)]
pub struct Auxiliary {
    /// `D̃0`, p×p.
    pub d0: CMatrix,
    /// `D̃1`, r×p.
    pub d1: CMatrix,
    /// `σ̃ = I_r`.
    pub sigma: RMatrix,
}

fn excess(c: &Coefficients) -> CMatrix {
    let e = c.excess_decoherence();
    (&e + e.adjoint()) * Complex64::new(0.5, 0.0)
}

/// `diag(√λ_k) V_r†` over the `r` largest eigenpairs of `d0`, which equals
/// `V_r† √d0`.
fn auxiliary_rows(d0: &CMatrix, r: usize) -> CMatrix {
    let p = d0.nrows();
    let (values, vectors) = numlin::hermitian_eigen(d0);
    let mut rows = CMatrix::zeros(r, p);
    for k in 0..r {
        let col = p - 1 - k;
        let s = values[col].max(0.0).sqrt();
        for a in 0..p {
            rows[(k, a)] = vectors[(a, col)].conj() * s;
        }
    }
    rows
}

fn head(z: &PhaseVector, n: usize) -> PhaseVector {
    z.rows(0, n).into_owned()
}

/// Builds the saturated enlarged model. The auxiliary coefficients depend on
/// the base coordinates only.
pub fn purify_classical(model: &CqModel, z_probe: &PhaseVector) -> Result<PurifiedModel> {
    let report = validate(model, z_probe, VALIDATE_TOL)?;
    if !report.valid {
        return Err(CqError::Positivity(format!(
            "model '{}' fails validation at the probe point (trade-off min eigenvalue {:e}, range residual {:e})",
            model.name, report.tradeoff_min_eigenvalue, report.range_residual
        )));
    }
    let c = model.coefficients(z_probe)?;
    let r = numlin::psd_rank(&excess(&c), RANK_RTOL);
    for z in default_probes(model, z_probe, RANK_PROBES).iter().skip(1) {
        let rz = numlin::psd_rank(&excess(&model.coefficients(z)?), RANK_RTOL);
        if rz != r {
            return Err(CqError::Unsupported(format!(
                "rank of the excess decoherence changes from {r} to {rz} at z = {:?}; \
                 the block construction needs a constant rank",
                z.as_slice()
            )));
        }
    }
    if r == 0 {
        return Ok(PurifiedModel { base: model.clone(), extra_dims: 0, enlarged: model.clone() });
    }
    let (n, d, p) = (model.n, model.d, model.p);
    let base = model.clone();
    let mut enlarged = CqModel::new(format!("{} (purified)", model.name), n + r, d, p, move |z| {
        let c = base.raw_coefficients(&head(z, n));
        let aux = auxiliary_rows(&excess(&c), r);
        let mut d1 = CMatrix::zeros(n + r, p);
        d1.rows_mut(0, n).copy_from(&c.d1);
        d1.rows_mut(n, r).copy_from(&aux);
        let mut sigma = RMatrix::zeros(n + r, n + r);
        sigma.view_mut((0, 0), (n, n)).copy_from(&c.sigma);
        sigma.view_mut((n, n), (r, r)).fill_with_identity();
        let mut d1c = DVector::zeros(n + r);
        d1c.rows_mut(0, n).copy_from(&c.d1c);
        Coefficients { lindblad: c.lindblad, d0: c.d0, d1, d1c, sigma, hamiltonian: c.hamiltonian }
    });
    if let Some(domain) = model.shared_domain() {
        enlarged = enlarged.with_shared_domain(Some(Arc::new(move |z: &PhaseVector| domain(&head(z, n)))));
    }
    Ok(PurifiedModel { base: model.clone(), extra_dims: r, enlarged })
}

impl PurifiedModel {
    /// `D̃0`, `D̃1` and `σ̃` at a base point.
    pub fn auxiliary(&self, z_base: &PhaseVector) -> Result<Auxiliary> {
        let c = self.base.coefficients(z_base)?;
        let d0 = excess(&c);
        let d1 = auxiliary_rows(&d0, self.extra_dims);
        Ok(Auxiliary { d0, d1, sigma: RMatrix::identity(self.extra_dims, self.extra_dims) })
    }

    /// Enlarged phase point `(z, 0)`.
    pub fn lift(&self, z_base: &PhaseVector) -> PhaseVector {
        let mut z = DVector::zeros(self.base.n + self.extra_dims);
        z.rows_mut(0, self.base.n).copy_from(z_base);
        z
    }

    /// Largest entry of
    /// `[D1; D̃1]† diag(pinv(σσᵀ), (σ̃σ̃ᵀ)⁻¹) [D1; D̃1] − D0`, assembled from the
    /// blocks rather than from the enlarged model.
    pub fn block_tradeoff_residual(&self, z_base: &PhaseVector) -> Result<f64> {
        let c = self.base.coefficients(z_base)?;
        let aux = self.auxiliary(z_base)?;
        let (n, r, p) = (self.base.n, self.extra_dims, self.base.p);
        let mut stacked = CMatrix::zeros(n + r, p);
        stacked.rows_mut(0, n).copy_from(&c.d1);
        stacked.rows_mut(n, r).copy_from(&aux.d1);
        let mut inv = RMatrix::zeros(n + r, n + r);
        inv.view_mut((0, 0), (n, n)).copy_from(&c.sigma_sigma_t_pinv());
        let ss = &aux.sigma * aux.sigma.transpose();
        let ss_inv = ss
            .try_inverse()
            .ok_or_else(|| CqError::Contract("auxiliary noise matrix is singular".into()))?;
        inv.view_mut((n, n), (r, r)).copy_from(&ss_inv);
        let lhs = stacked.adjoint() * complexify(&inv) * stacked;
        Ok(numlin::max_abs(&(lhs - &c.d0)))
    }
}

/// A quantity compared between the base ensemble and the marginal of the
/// enlarged ensemble.
#[derive(Clone)]
pub enum Observable {
    /// `Re Tr{A(z) ρ}` averaged over trajectories; `A` sees base coordinates.
    Expectation { label: String, op: Arc<dyn Fn(&PhaseVector) -> CMatrix + Send + Sync> },
    CoordinateMean(usize),
    CoordinateVariance(usize),
    /// `Tr ρ̄²` of the trajectory-averaged quantum state.
    PurityOfMean,
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl Observable {
    pub fn expectation(label: impl Into<String>, op: impl Fn(&PhaseVector) -> CMatrix + Send + Sync + 'static) -> Self {
        Observable::Expectation { label: label.into(), op: Arc::new(op) }
    }

    pub fn label(&self) -> String {
        match self {
            Observable::Expectation { label, .. } => label.clone(),
            Observable::CoordinateMean(i) => format!("mean z[{i}]"),
            Observable::CoordinateVariance(i) => format!("var z[{i}]"),
            Observable::PurityOfMean => "purity of mean state".into(),
        }
    }

    /// Estimate and standard error over `(z, ρ)` samples.
    fn estimate(&self, samples: &[(PhaseVector, CMatrix)]) -> (f64, f64) {
        match self {
            Observable::Expectation { op, .. } => {
                let xs: Vec<f64> = samples.iter().map(|(z, r)| (op(z) * r).trace().re).collect();
                mean_stderr(&xs)
            }
            Observable::CoordinateMean(i) => mean_stderr(&samples.iter().map(|(z, _)| z[*i]).collect::<Vec<_>>()),
            Observable::CoordinateVariance(i) => {
                let xs: Vec<f64> = samples.iter().map(|(z, _)| z[*i]).collect();
                variance_stderr(&xs)
            }
            Observable::PurityOfMean => {
                let n = samples.len() as f64;
                let mean = samples.iter().fold(CMatrix::zeros(samples[0].1.nrows(), samples[0].1.ncols()), |a, (_, r)| a + r)
                    / Complex64::new(n, 0.0);
                let value = (&mean * &mean).trace().re;
                // Delta method: the gradient of Tr ρ̄² is 2ρ̄.
                let g: Vec<f64> = samples.iter().map(|(_, r)| 2.0 * (&mean * r).trace().re).collect();
                (value, mean_stderr(&g).1)
            }
        }
    }
}

/// Unbiased sample variance and its large-sample standard error
/// `√((m4 − s⁴)/N)`.
fn variance_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (f64::NAN, f64::INFINITY);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let s2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (s2, ((m4 - s2 * s2).max(0.0) / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct EquivalenceConfig {
    pub t_final: f64,
    pub dt: f64,
    /// Trajectories per ensemble.
    pub trajectories: usize,
    pub seed: u64,
    /// Number of compared times after `t = 0`.
    pub checkpoints: usize,
    pub workers: Option<usize>,
}

impl EquivalenceConfig {
    pub fn new(t_final: f64, dt: f64, trajectories: usize, seed: u64) -> Self {
        EquivalenceConfig { t_final, dt, trajectories, seed, checkpoints: 10, workers: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservableDeviation {
    pub label: String,
    /// Largest `|base − enlarged| / √(se_base² + se_enlarged²)` over the
    /// checkpoints.
    pub max_deviation: f64,
    pub at_t: f64,
    pub base: f64,
    pub enlarged: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub extra_dims: usize,
    pub trajectories: usize,
    pub observables: Vec<ObservableDeviation>,
    /// Smallest `Tr ρ²` over every step of every enlarged trajectory.
    pub enlarged_min_purity: f64,
    /// Mean `Tr ρ²` of the base trajectories at the final time.
    pub base_final_purity: f64,
    /// Trajectories of either ensemble that left the model domain.
    pub domain_exits: usize,
}

impl EquivalenceReport {
    pub fn passes(&self, k: f64) -> bool {
        self.observables.iter().all(|o| o.max_deviation <= k)
    }
}

fn samples_at(trs: &[Trajectory], step: usize, n: usize) -> Vec<(PhaseVector, CMatrix)> {
    trs.iter()
        .filter_map(|t| t.sample_at_step(step))
        .map(|s| (head(&s.z, n), s.state.density()))
        .collect()
}

/// Runs the base model in density mode and the enlarged model with
/// independent noise, drops the auxiliary coordinates, and compares each
/// observable at evenly spaced checkpoints in standard-error units.
///
/// The enlarged model runs in pure mode from a pure initial state: the
/// density-mode Euler step loses purity at order `√(T·dt)` even for a
/// saturated model, which would hide the purity the construction restores.
pub fn marginal_equivalence(
    purified: &PurifiedModel,
    initial: &Initial,
    observables: &[Observable],
    cfg: &EquivalenceConfig,
) -> Result<EquivalenceReport> {
    let (z0, state) = match initial {
        Initial::Point { z, state } => (z.clone(), state.clone()),
        Initial::Grid(_) => {
            return Err(CqError::Usage("marginal equivalence needs a point initial condition".into()));
        }
    };
    let n = purified.base.n;
    if z0.len() != n {
        return Err(CqError::Dimension(format!("initial point has length {}, base model expects {n}", z0.len())));
    }
    let steps = SimConfig::new(cfg.t_final, cfg.dt, cfg.seed).steps()?;
    let every = (steps / cfg.checkpoints.max(1)).max(1);
    let sim = |seed| SimConfig::new(cfg.t_final, cfg.dt, seed).with_record_every(every);
    let ens = |seed, mode| EnsembleConfig { sim: sim(seed), trajectories: cfg.trajectories, mode, workers: cfg.workers };
    let base = run_ensemble(&purified.base, initial, &ens(cfg.seed, Mode::Density))?;
    let enlarged_mode = if matches!(state, QuantumState::Pure(_)) { Mode::Pure } else { Mode::Density };
    let lifted = Initial::Point { z: purified.lift(&z0), state };
    let enlarged = run_ensemble(&purified.enlarged, &lifted, &ens(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, enlarged_mode))?;

    let checkpoints: Vec<(usize, f64)> = base[0].samples.iter().skip(1).map(|s| (s.step, s.t)).collect();
    let mut out = Vec::with_capacity(observables.len());
    for obs in observables {
        let mut worst = ObservableDeviation { label: obs.label(), max_deviation: 0.0, at_t: 0.0, base: f64::NAN, enlarged: f64::NAN };
        for &(step, t) in &checkpoints {
            let (a, sa) = obs.estimate(&samples_at(&base, step, n));
            let (b, sb) = obs.estimate(&samples_at(&enlarged, step, n));
            let se = sa.hypot(sb);
            let dev = if se > 0.0 {
                (a - b).abs() / se
            } else if a == b {
                0.0
            } else {
                f64::INFINITY
            };
            if dev > worst.max_deviation || worst.base.is_nan() {
                worst = ObservableDeviation { label: obs.label(), max_deviation: dev, at_t: t, base: a, enlarged: b };
            }
        }
        out.push(worst);
    }
    let enlarged_min_purity = enlarged.iter().map(|t| t.min_purity).fold(f64::INFINITY, f64::min);
    let base_final_purity = base.iter().map(|t| t.last().state.purity()).sum::<f64>() / base.len() as f64;
    let domain_exits = base.iter().chain(enlarged.iter()).filter(|t| !t.completed()).count();
    Ok(EquivalenceReport {
        extra_dims: purified.extra_dims,
        trajectories: cfg.trajectories,
        observables: out,
        enlarged_min_purity,
        base_final_purity,
        domain_exits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::simulate;
    use crate::model::{explicit_qubit_model, monitored_qubit};
    use crate::operator::{pauli, Operator};
    use crate::{zoo, StateVector};
    use proptest::prelude::*;

    fn z(v: &[f64]) -> PhaseVector {
        PhaseVector::from_column_slice(v)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn plus() -> QuantumState {
        let s = 0.5f64.sqrt();
        QuantumState::Pure(StateVector::from_vec(vec![c(s), c(s)]))
    }

    #[test]
    fn worked_qubit_example() {
        // D0 = ½, D1 = ½, σ = 1: D̃0 = ½ − ¼ = ¼, √¼ = ½.
        let m = explicit_qubit_model("half", 0.5, 0.5, 1.0, 0.0);
        let p = purify_classical(&m, &z(&[0.0])).unwrap();
        assert_eq!(p.extra_dims, 1);
        let aux = p.auxiliary(&z(&[0.0])).unwrap();
        assert_eq!(aux.d0[(0, 0)], c(0.25));
        assert_eq!(aux.d1[(0, 0)].norm(), 0.5);
        assert_eq!(aux.sigma, RMatrix::identity(1, 1));
        let r = validate(&p.enlarged, &z(&[0.0, 0.0]), 1e-10).unwrap();
        assert!(r.valid && r.saturated, "{r:?}");
    }

    #[test]
    fn saturated_model_is_returned_unchanged() {
        let setup = zoo::builtin_default("diosi").unwrap();
        let (m, z0) = (setup.model, setup.z0);
        let p = purify_classical(&m, &z0).unwrap();
        assert_eq!(p.extra_dims, 0);
        assert_eq!(p.enlarged.n, m.n);
        let sim = SimConfig::new(0.05, 1e-3, 7);
        let a = simulate(&m, &z0, &plus(), &sim, Mode::Density).unwrap();
        let b = simulate(&p.enlarged, &z0, &plus(), &sim, Mode::Density).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_model_is_rejected() {
        let m = explicit_qubit_model("broken", 0.0, 0.5, 1.0, 0.0);
        assert!(matches!(purify_classical(&m, &z(&[0.0])), Err(CqError::Positivity(_))));
    }

    #[test]
    fn varying_rank_is_unsupported() {
        // Excess decoherence switches on only for z > 0.
        let m = CqModel::new("switch", 1, 2, 1, |z| {
            let extra = if z[0] > 0.0 { 0.3 } else { 0.0 };
            Coefficients {
                lindblad: vec![pauli::sigma_z()],
                d0: CMatrix::from_element(1, 1, c(0.25 + extra)),
                d1: CMatrix::from_element(1, 1, c(0.5)),
                d1c: DVector::zeros(1),
                sigma: RMatrix::identity(1, 1),
                hamiltonian: Operator::zeros(2),
            }
        });
        assert!(matches!(purify_classical(&m, &z(&[-1e-3])), Err(CqError::Unsupported(_))));
    }

    #[test]
    fn auxiliary_rows_match_principal_root() {
        let d0 = CMatrix::from_row_slice(2, 2, &[c(0.4), Complex64::new(0.1, 0.2), Complex64::new(0.1, -0.2), c(0.3)]);
        let rows = auxiliary_rows(&d0, 2);
        let (_, v) = numlin::hermitian_eigen(&d0);
        let v_r = CMatrix::from_columns(&[v.column(1).into_owned(), v.column(0).into_owned()]);
        let via_root = v_r.adjoint() * numlin::principal_sqrt(&d0).unwrap();
        assert!((&rows - via_root).norm() < 1e-12);
        assert!((rows.adjoint() * &rows - &d0).norm() < 1e-12);
    }

    /// Two non-commuting channels with z-dependent excess decoherence of
    /// rank one and a rank-deficient σ on a spectator coordinate.
    fn two_channel(eps: f64) -> CqModel {
        CqModel::new("two channel", 2, 2, 2, move |z| {
            let g = 0.5 + 0.1 * z[0].tanh();
            let d1 = CMatrix::from_row_slice(2, 2, &[c(g), Complex64::new(0.0, 0.2), c(0.0), c(0.0)]);
            let mut sigma = RMatrix::zeros(2, 2);
            sigma[(0, 0)] = 1.3;
            let pinv = complexify(&numlin::pinv(&(&sigma * sigma.transpose())));
            let sat = d1.adjoint() * pinv * &d1;
            let v = DVector::from_vec(vec![c(1.0), Complex64::new(0.0, 1.0)]);
            let d0 = sat + &v * v.adjoint() * c(eps * (1.0 + 0.2 * z[1].cos()));
            Coefficients {
                lindblad: vec![pauli::sigma_z(), Operator::from_matrix(pauli::sigma_x()).unwrap()],
                d0,
                d1,
                d1c: DVector::from_vec(vec![0.0, 0.3]),
                sigma,
                hamiltonian: Operator::from_real_diagonal(&[0.4, -0.4]),
            }
        })
    }

    #[test]
    fn enlarged_model_saturates_and_ignores_auxiliary_coordinates() {
        let m = two_channel(0.2);
        let p = purify_classical(&m, &z(&[0.1, -0.3])).unwrap();
        assert_eq!(p.extra_dims, 1);
        for zb in [z(&[0.1, -0.3]), z(&[1.5, 2.0]), z(&[-2.0, 0.7])] {
            assert!(p.block_tradeoff_residual(&zb).unwrap() < 1e-10);
            let mut ze = p.lift(&zb);
            let r = validate(&p.enlarged, &ze, 1e-10).unwrap();
            assert!(r.valid && r.saturated, "{r:?}");
            let a = p.enlarged.coefficients(&ze).unwrap();
            ze[2] = 17.0;
            let b = p.enlarged.coefficients(&ze).unwrap();
            assert_eq!(a.d1, b.d1);
            assert_eq!(a.d1c, b.d1c);
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(a.d0, b.d0);
            let base = m.coefficients(&zb).unwrap();
            assert_eq!(a.d1.rows(0, 2), base.d1);
            assert_eq!(a.d1c.rows(0, 2), base.d1c);
            assert_eq!(a.sigma.view((0, 0), (2, 2)), base.sigma);
        }
    }

    #[test]
    fn enlarged_domain_follows_base_coordinates() {
        let setup = zoo::builtin_default("sqrt_well").unwrap();
        let (m, z0) = (setup.model, setup.z0);
        let p = purify_classical(&m, &z0).unwrap();
        let mut ze = p.lift(&z0);
        assert_eq!(p.enlarged.domain_violation(&ze), m.domain_violation(&z0));
        ze[0] = -1.0;
        let mut zb = z0.clone();
        zb[0] = -1.0;
        assert_eq!(p.enlarged.domain_violation(&ze).is_some(), m.domain_violation(&zb).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn block_equality_holds_for_monitored_qubits(
            d1 in 0.05f64..2.0, sigma in 0.2f64..3.0, eps in 0.01f64..1.0, zz in -3.0f64..3.0,
        ) {
            let m = monitored_qubit(d1, sigma, eps, 0.3);
            let p = purify_classical(&m, &z(&[zz])).unwrap();
            prop_assert_eq!(p.extra_dims, 1);
            prop_assert!(p.block_tradeoff_residual(&z(&[zz])).unwrap() < 1e-10);
            let aux = p.auxiliary(&z(&[zz])).unwrap();
            prop_assert!((aux.d1[(0, 0)].norm() - eps.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_agree_and_enlarged_purity_is_kept() {
        let m = explicit_qubit_model("half", 0.5, 0.5, 1.0, 0.7);
        let p = purify_classical(&m, &z(&[0.0])).unwrap();
        let init = Initial::Point { z: z(&[0.0]), state: plus() };
        let obs = [
            Observable::expectation("<sigma_z>", |_| pauli::sigma_z().to_dense()),
            Observable::expectation("<sigma_x>", |_| pauli::sigma_x()),
            Observable::PurityOfMean,
            Observable::CoordinateMean(0),
            Observable::CoordinateVariance(0),
        ];
        let mut cfg = EquivalenceConfig::new(0.5, 2e-3, 4000, 11);
        cfg.checkpoints = 5;
        let rep = marginal_equivalence(&p, &init, &obs, &cfg).unwrap();
        assert!(rep.passes(4.0), "{rep:?}");
        assert!(rep.enlarged_min_purity > 1.0 - 1e-6, "{rep:?}");
        assert!(rep.base_final_purity < 0.9, "{rep:?}");
    }

    #[test]
    fn marginal_mismatch_is_detected() {
        // Compare against a "purification" whose base model differs: the
        // check must flag the wrong variance.
        let m = explicit_qubit_model("half", 0.5, 0.5, 1.0, 0.0);
        let mut p = purify_classical(&m, &z(&[0.0])).unwrap();
        p.base = explicit_qubit_model("wider", 0.5, 0.5, 1.5, 0.0);
        let init = Initial::Point { z: z(&[0.0]), state: plus() };
        let mut cfg = EquivalenceConfig::new(0.5, 2e-3, 2000, 3);
        cfg.checkpoints = 2;
        let rep = marginal_equivalence(&p, &init, &[Observable::CoordinateVariance(0)], &cfg).unwrap();
        assert!(!rep.passes(4.0), "{rep:?}");
    }

    #[test]
    fn variance_error_matches_gaussian_formula() {
        // For N(0, 1) samples, SE(s²) ≈ √(2/N).
        let mut noise = crate::noise::NoiseStream::new(5, 0);
        let xs: Vec<f64> = (0..4000).flat_map(|k| noise.normals(k, 10)).collect();
        let (v, se) = variance_stderr(&xs);
        assert!((v - 1.0).abs() < 4.0 * se);
        assert!((se / (2.0f64 / 40_000.0).sqrt() - 1.0).abs() < 0.05);
    }
}
