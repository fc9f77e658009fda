//! Purity dynamics, conditioned-state reconstruction from a classical
//! record, the linearity test that separates the healed dynamics from mean
//! field, and the local validity estimate for mean-field dynamics.

use num_complex::Complex64;
use serde::Serialize;

use crate::ensemble::{
    estimate_cq_state, run_ensemble, run_standard_ensemble, CQGridState, EnsembleConfig, Initial, McEstimate,
};
use crate::error::{CqError, Result};
use crate::integrator::{
    density_increment, expectations_density, expectations_pure, finish_density, finish_pure, pure_increment,
    purity_of, require_saturated, weights_from_increment, Mode, QuantumState, SimConfig, Trajectory,
};
use crate::model::{CqModel, StandardScModel};
use crate::numlin;
use crate::{CMatrix, PhaseVector, StateVector};

/// States with `|Tr ρ² − 1|` below this count as pure.
pub const PURITY_TOL: f64 = 1e-8;

/// `Tr ρ²`.
pub fn purity(rho: &CMatrix) -> f64 {
    purity_of(rho)
}

fn require_pure(rho: &CMatrix) -> Result<()> {
    let p = purity_of(rho) / rho.trace().re.powi(2);
    if (p - 1.0).abs() > PURITY_TOL {
        return Err(CqError::Contract(format!("state must be pure (Tr ρ² = {p})")));
    }
    Ok(())
}

/// Instantaneous `d Tr ρ² / dt` of the conditioned state at a pure `ρ`:
/// `2 Σ_α (|⟨L̄_α⟩|² − ⟨L̄_α† L̄_α⟩)` with `L̄_α = Σ_a B_αa L_a` and
/// `B = √(Mᵀ)`, where `M = D0 − D1† pinv(σσᵀ) D1` is the decoherence in
/// excess of the trade-off bound. Never positive for a valid model; zero for
/// every state exactly when the model is saturated.
pub fn purity_rate(model: &CqModel, rho: &CMatrix, z: &PhaseVector) -> Result<f64> {
    require_pure(rho)?;
    let rho = rho / Complex64::new(rho.trace().re, 0.0);
    let c = model.coefficients(z)?;
    let excess = c.excess_decoherence();
    let scale = numlin::max_abs(&c.d0).max(1.0);
    let b = numlin::principal_sqrt_tol(&excess.transpose(), 1e-10 * scale)?;
    let dense: Vec<CMatrix> = c.lindblad.iter().map(|l| l.to_dense()).collect();
    let d = model.d;
    let mut rate = 0.0;
    for alpha in 0..b.nrows() {
        let mut lbar = CMatrix::zeros(d, d);
        for (a, l) in dense.iter().enumerate() {
            if b[(alpha, a)] != Complex64::new(0.0, 0.0) {
                lbar += l * b[(alpha, a)];
            }
        }
        let mean = (&lbar * &rho).trace();
        let second = (lbar.adjoint() * &lbar * &rho).trace().re;
        rate += 2.0 * (mean.norm_sqr() - second);
    }
    Ok(rate)
}

/// One entry of a classical record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordPoint {
    pub t: f64,
    pub z: PhaseVector,
}

/// The classical record of a trajectory. It must hold every step.
pub fn classical_record(traj: &Trajectory) -> Result<Vec<RecordPoint>> {
    if traj.samples.iter().enumerate().any(|(k, s)| s.step != k) {
        return Err(CqError::Usage("reconstruction needs a trajectory recorded at every step".into()));
    }
    Ok(traj.samples.iter().map(|s| RecordPoint { t: s.t, z: s.z.clone() }).collect())
}

/// Infers the quantum state along a classical record.
///
/// At each step the Wiener weights are recovered from the observed increment
/// as `D1† pinv(σσᵀ)(dZ − drift·dt)` and fed into the same quantum update
/// the simulator uses. A state-vector `init` follows the pure-state law and
/// needs a saturated model; a density matrix follows the density law.
/// Returns one state per record entry.
pub fn reconstruct_conditioned(
    model: &CqModel,
    record: &[RecordPoint],
    init: &QuantumState,
) -> Result<Vec<QuantumState>> {
    let Some(first) = record.first() else {
        return Err(CqError::Usage("empty classical record".into()));
    };
    if init.dim() != model.d {
        return Err(CqError::Dimension(format!("initial state has dimension {}, model has {}", init.dim(), model.d)));
    }
    let dt = if record.len() > 1 { record[1].t - record[0].t } else { 0.0 };
    for (k, p) in record.iter().enumerate() {
        let want = first.t + k as f64 * dt;
        if (p.t - want).abs() > 1e-9 * want.abs().max(1.0) || (k > 0 && !(dt > 0.0)) {
            return Err(CqError::Usage(format!(
                "record times must be evenly spaced; entry {k} has t = {} (expected {want})",
                p.t
            )));
        }
        if p.z.len() != model.n {
            return Err(CqError::Dimension(format!("record entry {k} has {} coordinates, model has {}", p.z.len(), model.n)));
        }
    }
    let mut state = match init {
        QuantumState::Pure(psi) => QuantumState::Pure(psi / Complex64::new(psi.norm(), 0.0)),
        QuantumState::Density(rho) => QuantumState::Density(rho / Complex64::new(rho.trace().re, 0.0)),
    };
    let mut out = Vec::with_capacity(record.len());
    out.push(state.clone());
    for (k, pair) in record.windows(2).enumerate() {
        let c = model.coefficients(&pair[0].z).map_err(|e| e.at_step(k + 1))?;
        let dz = &pair[1].z - &pair[0].z;
        state = match &state {
            QuantumState::Pure(psi) => {
                require_saturated(&c).map_err(|e| e.at_step(k + 1))?;
                let e = expectations_pure(&c, psi);
                let w = weights_from_increment(&c, &dz, &c.drift(&e), dt);
                QuantumState::Pure(finish_pure(psi + pure_increment(&c, psi, &e, &w, dt)).map_err(|e| e.at_step(k + 1))?)
            }
            QuantumState::Density(rho) => {
                let e = expectations_density(&c, rho);
                let w = weights_from_increment(&c, &dz, &c.drift(&e), dt);
                let raw = rho + density_increment(&c, rho, &e, &w, dt, false);
                QuantumState::Density(finish_density(raw).map_err(|e| e.at_step(k + 1))?.0)
            }
        };
        out.push(state.clone());
    }
    Ok(out)
}

/// `|⟨a|b⟩|²` for state vectors, `Tr(ρσ)` when either side is mixed
/// (exact for one pure side).
pub fn fidelity(a: &QuantumState, b: &QuantumState) -> f64 {
    match (a, b) {
        (QuantumState::Pure(x), QuantumState::Pure(y)) => x.dotc(y).norm_sqr() / (x.norm_squared() * y.norm_squared()),
        _ => (a.density() * b.density()).trace().re,
    }
}

/// Which law a linearity test runs.
#[derive(Clone, Copy, Debug)]
pub enum Dynamics<'a> {
    /// The unravelling, in density mode so mixed cell states are allowed.
    Healed(&'a CqModel),
    /// Deterministic mean-field backreaction.
    Standard(&'a StandardScModel),
}

#[derive(Clone, Debug)]
pub struct LinearityConfig {
    pub t_final: f64,
    pub dt: f64,
    /// Trajectories per ensemble; three ensembles are run.
    pub trajectories: usize,
    pub seed: u64,
    pub resamples: usize,
    pub workers: Option<usize>,
}

impl LinearityConfig {
    pub fn new(t_final: f64, dt: f64, trajectories: usize, seed: u64) -> Self {
        LinearityConfig {
            t_final,
            dt,
            trajectories,
            seed,
            resamples: crate::ensemble::BOOTSTRAP_RESAMPLES,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearityReport {
    /// L1 distance, summed over Hermitian components, between the evolved
    /// mixture and the mixture of the evolved components.
    pub distance: f64,
    /// Bootstrap noise floor of `distance`.
    pub error: f64,
    /// `distance / error`.
    pub score: f64,
    /// Whether `distance > 3 · error`.
    pub rejects: bool,
    /// L1 distance of the classical marginals alone.
    pub marginal_distance: f64,
    /// Terminal mean of `z` when the mixture is evolved as one ensemble.
    pub mixture_mean: Vec<f64>,
    /// Terminal mean of `z` for each component evolved alone.
    pub component_means: [Vec<f64>; 2],
    pub trajectories: usize,
}

fn terminal_mean(trs: &[Trajectory]) -> Vec<f64> {
    let n = trs[0].last().z.len();
    let mut acc = vec![0.0; n];
    for t in trs {
        for (a, x) in acc.iter_mut().zip(t.last().z.iter()) {
            *a += x;
        }
    }
    acc.iter().map(|x| x / trs.len() as f64).collect()
}

fn total_floor(est: &McEstimate, resamples: usize, seed: u64) -> f64 {
    est.noise_floor(resamples, seed).total
}

/// Evolves `p·ϱ_a + (1 − p)·ϱ_b` as one ensemble and each component as its
/// own ensemble, then compares the first with the mixture of the others on
/// the common grid. A linear law gives a distance at the sampling-noise
/// floor.
pub fn linearity_test(
    dynamics: Dynamics<'_>,
    rho_a: &CQGridState,
    rho_b: &CQGridState,
    p: f64,
    cfg: &LinearityConfig,
) -> Result<LinearityReport> {
    rho_a.require_compatible(rho_b)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(CqError::Usage(format!("mixing probability must lie in (0, 1), got {p}")));
    }
    let mixed = CQGridState::mixture(rho_a, rho_b, p)?;
    let grid = &rho_a.grid;
    let t = cfg.t_final;
    let run = |init: &CQGridState, seed: u64| -> Result<Vec<Trajectory>> {
        let sim = SimConfig::new(t, cfg.dt, seed).endpoints_only();
        let initial = Initial::Grid(init.clone());
        match dynamics {
            Dynamics::Healed(m) => run_ensemble(
                m,
                &initial,
                &EnsembleConfig { sim, trajectories: cfg.trajectories, mode: Mode::Density, workers: cfg.workers },
            ),
            Dynamics::Standard(m) => run_standard_ensemble(m, &initial, &sim, cfg.trajectories, cfg.workers),
        }
    };
    let tr_mix = run(&mixed, cfg.seed)?;
    let tr_a = run(rho_a, cfg.seed.wrapping_add(1))?;
    let tr_b = run(rho_b, cfg.seed.wrapping_add(2))?;
    let t_end = tr_mix[0].dt * (t / tr_mix[0].dt).round();
    let est_mix = estimate_cq_state(&tr_mix, t_end, grid)?;
    let est_a = estimate_cq_state(&tr_a, t_end, grid)?;
    let est_b = estimate_cq_state(&tr_b, t_end, grid)?;
    let combined = CQGridState::mixture(&est_a.state, &est_b.state, p)?;
    let distance: f64 = est_mix.state.component_l1(&combined)?.iter().sum();
    let marginal_distance = est_mix.state.marginal_l1(&combined)?;
    let error = total_floor(&est_mix, cfg.resamples, cfg.seed)
        .hypot(p * total_floor(&est_a, cfg.resamples, cfg.seed.wrapping_add(1)))
        .hypot((1.0 - p) * total_floor(&est_b, cfg.resamples, cfg.seed.wrapping_add(2)));
    Ok(LinearityReport {
        distance,
        error,
        score: if error > 0.0 { distance / error } else if distance > 0.0 { f64::INFINITY } else { 0.0 },
        rejects: distance > 3.0 * error + 1e-12,
        marginal_distance,
        mixture_mean: terminal_mean(&tr_mix),
        component_means: [terminal_mean(&tr_a), terminal_mean(&tr_b)],
        trajectories: cfg.trajectories,
    })
}

/// Size of the non-unitary deterministic part of the pure-state law
/// relative to the Hamiltonian part, `‖Gψ‖ / ‖Hψ‖`, with
/// `Gψ = −½ Σ D0_ab (L_b† − ⟨L_b⟩*)(L_a − ⟨L_a⟩)ψ + ½ Σ D0_ab (⟨L_b⟩* L_a − ⟨L_a⟩ L_b†)ψ`.
/// Small values mean mean-field dynamics is locally adequate. Returns `+∞`
/// when `Hψ = 0`.
pub fn standard_sc_residual(model: &CqModel, psi: &StateVector, z: &PhaseVector) -> Result<f64> {
    if psi.len() != model.d {
        return Err(CqError::Dimension(format!("state has dimension {}, model has {}", psi.len(), model.d)));
    }
    let psi = psi / Complex64::new(psi.norm(), 0.0);
    let c = model.coefficients(z)?;
    let e = expectations_pure(&c, &psi);
    let zero_w = vec![Complex64::new(0.0, 0.0); c.lindblad.len()];
    // The pure-state increment with no noise and dt = 1 is −iHψ + Gψ.
    let h_psi = c.hamiltonian.apply(&psi);
    let g_psi = pure_increment(&c, &psi, &e, &zero_w, 1.0) + &h_psi * Complex64::new(0.0, 1.0);
    let h = h_psi.norm();
    if h == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(g_psi.norm() / h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::PhaseGrid;
    use crate::integrator::simulate;
    use crate::model::monitored_qubit;
    use crate::operator::pauli;
    use crate::zoo;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn pv(x: &[f64]) -> PhaseVector {
        PhaseVector::from_column_slice(x)
    }

    fn proj(psi: &StateVector) -> CMatrix {
        psi * psi.adjoint()
    }

    #[test]
    fn purity_examples() {
        assert!((purity(&proj(&zoo::basis_state(2, 0))) - 1.0).abs() < 1e-15);
        assert!((purity(&(CMatrix::identity(2, 2) * c(0.5))) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_model_has_zero_purity_rate() {
        let s = zoo::builtin_default("diosi").unwrap();
        for psi in [zoo::plus_state(), nalgebra::dvector![c(0.6), Complex64::new(0.0, 0.8)]] {
            let r = purity_rate(&s.model, &proj(&psi), &pv(&[0.3, -0.2])).unwrap();
            assert!(r.abs() < 1e-12, "{r}");
        }
    }

    #[test]
    fn excess_dephasing_rate_matches_hand_value() {
        // M = ε, L = σz at |+⟩: 2ε(⟨σz⟩² − 1) = −2ε.
        let m = monitored_qubit(0.5, 1.0, 0.1, 2.0);
        let r = purity_rate(&m, &proj(&zoo::plus_state()), &pv(&[0.0])).unwrap();
        assert!((r + 0.2).abs() < 1e-10, "{r}");
        // Eigenstates of L are fixed points even without saturation.
        let r0 = purity_rate(&m, &proj(&zoo::basis_state(2, 1)), &pv(&[0.0])).unwrap();
        assert!(r0.abs() < 1e-15);
    }

    #[test]
    fn mixed_state_is_a_contract_error() {
        let m = monitored_qubit(0.5, 1.0, 0.1, 2.0);
        let r = purity_rate(&m, &(CMatrix::identity(2, 2) * c(0.5)), &pv(&[0.0]));
        assert!(matches!(r, Err(CqError::Contract(_))));
    }

    /// Independent evaluation: `2 Σ_ab M_ab (⟨L_a⟩⟨L_b⟩* − ⟨L_b† L_a⟩)`.
    fn rate_double_sum(model: &CqModel, psi: &StateVector, z: &PhaseVector) -> f64 {
        let cf = model.coefficients(z).unwrap();
        let m = &cf.d0 - cf.d1.adjoint() * crate::model::complexify(&cf.sigma_sigma_t_pinv()) * &cf.d1;
        let ls: Vec<CMatrix> = cf.lindblad.iter().map(|l| l.to_dense()).collect();
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..ls.len() {
            for b in 0..ls.len() {
                let ea = psi.dotc(&(&ls[a] * psi));
                let eb = psi.dotc(&(&ls[b] * psi));
                let second = psi.dotc(&(ls[b].adjoint() * &ls[a] * psi));
                acc += m[(a, b)] * (ea * eb.conj() - second);
            }
        }
        2.0 * acc.re
    }

    fn random_state(d: usize, v: &[f64]) -> StateVector {
        let psi = StateVector::from_fn(d, |i, _| Complex64::new(v[2 * i], v[2 * i + 1]));
        &psi / c(psi.norm())
    }

    /// Two non-commuting operators with a full-rank excess matrix.
    fn two_channel_model(eps: f64) -> CqModel {
        CqModel::new("two channel", 2, 2, 2, move |_| {
            let sigma = crate::RMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.8]);
            let d1 = CMatrix::from_row_slice(2, 2, &[c(0.4), Complex64::new(0.0, 0.2), c(-0.1), c(0.3)]);
            let ssp = crate::model::complexify(&numlin::pinv(&(&sigma * sigma.transpose())));
            let sat = d1.adjoint() * ssp * &d1;
            let extra = CMatrix::from_row_slice(2, 2, &[c(2.0), Complex64::new(0.5, 0.5), Complex64::new(0.5, -0.5), c(1.0)]);
            crate::Coefficients {
                lindblad: vec![
                    crate::Operator::from_matrix(pauli::sigma_x()).unwrap(),
                    pauli::sigma_z(),
                ],
                d0: sat + extra * c(eps),
                d1,
                d1c: PhaseVector::zeros(2),
                sigma,
                hamiltonian: crate::Operator::zeros(2),
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rate_routes_agree_and_rate_is_never_positive(v in proptest::collection::vec(-1.0f64..1.0, 4), eps in 0.0f64..0.5) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            let m = two_channel_model(eps);
            let psi = random_state(2, &v);
            let z = pv(&[0.0, 0.0]);
            let a = purity_rate(&m, &proj(&psi), &z).unwrap();
            let b = rate_double_sum(&m, &psi, &z);
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            prop_assert!(a <= 1e-12);
        }
    }

    #[test]
    fn rate_vanishes_for_all_states_iff_saturated() {
        let z = pv(&[0.0, 0.0]);
        let mut rng = crate::noise::NoiseStream::new(4, 0);
        for (eps, saturated) in [(0.0, true), (0.05, false)] {
            let m = two_channel_model(eps);
            let report = crate::validate(&m, &z, 1e-10).unwrap();
            assert_eq!(report.saturated, saturated);
            let worst = (0..100)
                .map(|k| {
                    let psi = random_state(2, &rng.normals(k, 4));
                    purity_rate(&m, &proj(&psi), &z).unwrap().abs()
                })
                .fold(0.0, f64::max);
            assert_eq!(worst < 1e-10, saturated, "eps {eps}: {worst}");
        }
    }

    fn replay(setup: &zoo::Setup, t: f64, dt: f64, seed: u64) -> f64 {
        let cfg = SimConfig::new(t, dt, seed);
        let init = QuantumState::Pure(setup.psi0.clone());
        let tr = simulate(&setup.model, &setup.z0, &init, &cfg, Mode::Pure).unwrap();
        let rec = classical_record(&tr).unwrap();
        let states = reconstruct_conditioned(&setup.model, &rec, &init).unwrap();
        tr.samples
            .iter()
            .zip(&states)
            .map(|(s, r)| fidelity(&s.state, r))
            .fold(1.0, f64::min)
    }

    #[test]
    fn reconstruction_replays_rank_deficient_noise() {
        let s = zoo::builtin_default("diosi").unwrap();
        let f = replay(&s, 1.0, 1e-3, 21);
        assert!(f >= 1.0 - 1e-6, "{f}");
    }

    #[test]
    fn reconstruction_replays_full_rank_noise() {
        let s = zoo::builtin_default("monitored_qubit").unwrap();
        let f = replay(&s, 1.0, 1e-3, 22);
        assert!(f >= 1.0 - 1e-6, "{f}");
    }

    #[test]
    fn density_reconstruction_matches_density_run() {
        let s = zoo::builtin_default("diosi").unwrap();
        let cfg = SimConfig::new(0.5, 1e-3, 5);
        let init = QuantumState::Density(proj(&s.psi0));
        let tr = simulate(&s.model, &s.z0, &init, &cfg, Mode::Density).unwrap();
        let states = reconstruct_conditioned(&s.model, &classical_record(&tr).unwrap(), &init).unwrap();
        for (a, b) in tr.samples.iter().zip(&states) {
            assert!((a.state.density() - b.density()).norm() < 1e-8);
        }
    }

    #[test]
    fn without_coupling_the_record_is_irrelevant() {
        // D1 = 0 with D0 > 0: plain Lindblad dephasing whatever the record.
        let m = monitored_qubit(0.0, 1.0, 0.3, 1.0);
        let dt = 1e-3;
        let rec_a: Vec<RecordPoint> = (0..=100).map(|k| RecordPoint { t: k as f64 * dt, z: pv(&[(k as f64).sin()]) }).collect();
        let rec_b: Vec<RecordPoint> = (0..=100).map(|k| RecordPoint { t: k as f64 * dt, z: pv(&[0.0]) }).collect();
        let init = QuantumState::Density(proj(&zoo::plus_state()));
        let a = reconstruct_conditioned(&m, &rec_a, &init).unwrap();
        let b = reconstruct_conditioned(&m, &rec_b, &init).unwrap();
        assert_eq!(a, b);
        // Coherence decays as e^{−2·0.3·t} to first order in dt.
        let coh = a.last().unwrap().density()[(0, 1)].norm();
        assert!((coh - 0.5 * (-0.6 * 0.1f64).exp()).abs() < 5e-4, "{coh}");
    }

    #[test]
    fn uneven_record_is_a_usage_error() {
        let m = monitored_qubit(0.5, 1.0, 0.0, 1.0);
        let rec = vec![
            RecordPoint { t: 0.0, z: pv(&[0.0]) },
            RecordPoint { t: 0.1, z: pv(&[0.0]) },
            RecordPoint { t: 0.25, z: pv(&[0.0]) },
        ];
        let r = reconstruct_conditioned(&m, &rec, &QuantumState::Pure(zoo::plus_state()));
        assert!(matches!(r, Err(CqError::Usage(_))));
    }

    #[test]
    fn pure_reconstruction_needs_saturation() {
        let m = monitored_qubit(0.5, 1.0, 0.1, 1.0);
        let rec: Vec<RecordPoint> = (0..3).map(|k| RecordPoint { t: k as f64 * 0.1, z: pv(&[0.0]) }).collect();
        let r = reconstruct_conditioned(&m, &rec, &QuantumState::Pure(zoo::plus_state()));
        assert!(matches!(r.map_err(|e| e.root().clone()), Err(CqError::Contract(_))));
    }

    #[test]
    fn residual_vanishes_on_eigenstates_and_matches_hand_value() {
        let s = zoo::builtin_default("diosi").unwrap();
        let z = pv(&[0.0, 0.0]);
        let r0 = standard_sc_residual(&s.model, &zoo::basis_state(2, 0), &z).unwrap();
        assert!(r0.abs() < 1e-15);
        // |+⟩, λ = σ = 1, φ = 2: D0 = 1/4 on L = −2σz gives ‖Gψ‖ = ½ and
        // ‖Hψ‖ = φ = 2.
        let r = standard_sc_residual(&s.model, &zoo::plus_state(), &z).unwrap();
        assert!((r - 0.25).abs() < 1e-12, "{r}");
    }

    #[test]
    fn residual_scales_like_lambda_squared() {
        let z = pv(&[0.0, 0.0]);
        let at = |lambda: f64| {
            let spec = zoo::diosi_linear(1.0, lambda, 2.0, 1.0).unwrap();
            let m = crate::build_hamiltonian_model(&spec).unwrap();
            standard_sc_residual(&m, &zoo::plus_state(), &z).unwrap()
        };
        for lambda in [0.1, 0.01, 0.001] {
            let ratio = at(lambda) / at(lambda / 2.0);
            assert!((ratio - 4.0).abs() < 1e-6, "{ratio}");
        }
    }

    #[test]
    fn residual_is_infinite_without_hamiltonian_action() {
        let s = zoo::builtin_default("diosi").unwrap();
        // φ + 2λq = 0 at q = −1.
        let r = standard_sc_residual(&s.model, &zoo::plus_state(), &pv(&[-1.0, 0.0])).unwrap();
        assert!(r.is_infinite());
    }

    fn diosi_linearity_inputs() -> (CQGridState, CQGridState, PhaseGrid) {
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 20), (-3.0, 3.0, 30)]).unwrap();
        let z = pv(&[0.0, 0.0]);
        let a = CQGridState::point_mass(grid.clone(), &z, &proj(&zoo::basis_state(2, 0))).unwrap();
        let b = CQGridState::point_mass(grid.clone(), &z, &proj(&zoo::basis_state(2, 1))).unwrap();
        (a, b, grid)
    }

    #[test]
    fn healed_dynamics_is_linear_and_mean_field_is_not() {
        let (a, b, _) = diosi_linearity_inputs();
        let s = zoo::builtin_default("diosi").unwrap();
        let cfg = LinearityConfig { resamples: 50, ..LinearityConfig::new(0.5, 1e-2, 1000, 3) };
        let healed = linearity_test(Dynamics::Healed(&s.model), &a, &b, 0.5, &cfg).unwrap();
        assert!(!healed.rejects, "{healed:?}");
        let sm = StandardScModel::from_model(&s.model);
        let standard = linearity_test(Dynamics::Standard(&sm), &a, &b, 0.5, &cfg).unwrap();
        assert!(standard.rejects, "{standard:?}");
        // Mixture feels no net force; components feel ∓2λ. Starting points
        // are spread uniformly over the initial cell.
        let p0 = a.first_moment(1).unwrap();
        assert!((standard.mixture_mean[1] - p0).abs() < 0.01);
        assert!((standard.component_means[0][1] - (p0 - 1.0)).abs() < 0.01);
        assert!((standard.component_means[1][1] - (p0 + 1.0)).abs() < 0.01);
    }

    #[test]
    fn identical_components_are_within_noise_for_both_laws() {
        let (a, _, _) = diosi_linearity_inputs();
        let s = zoo::builtin_default("diosi").unwrap();
        let sm = StandardScModel::from_model(&s.model);
        let cfg = LinearityConfig { resamples: 50, ..LinearityConfig::new(0.2, 1e-2, 400, 3) };
        for dynamics in [Dynamics::Standard(&sm), Dynamics::Healed(&s.model)] {
            let r = linearity_test(dynamics, &a, &a, 0.3, &cfg).unwrap();
            assert!(!r.rejects, "{r:?}");
        }
        assert!(linearity_test(Dynamics::Standard(&sm), &a, &a, 1.0, &cfg).is_err());
    }
}
