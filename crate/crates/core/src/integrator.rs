//! Fixed-step Itô (Euler–Maruyama) steppers and the trajectory driver.
//!
//! Four evolution laws share one driver:
//! - `Density`: the conditioned density matrix together with the classical
//!   coordinates;
//! - `Pure`: the state-vector form, defined only for saturated models;
//! - `Standard`: deterministic mean-field backreaction, no noise;
//! - `Joint`: the linear (unnormalized) form, with the dropped trace carried
//!   as a scalar weight.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CqError, Result};
use crate::model::{Coefficients, CqModel, StandardScModel};
use crate::noise::NoiseStream;
use crate::numlin;
use crate::operator::Operator;
use crate::{CMatrix, PhaseVector, StateVector};

/// Steps whose trace (or squared norm) falls below this before
/// renormalization are rejected.
pub const TRACE_FLOOR: f64 = 1e-6;

/// A renormalized density matrix with `Tr ρ²` above this has left the
/// physical region; the step is rejected rather than carried forward.
pub const PURITY_CEILING: f64 = 1.5;

/// Relative tolerance for the per-step saturation check in pure mode.
pub const SATURATION_TOL: f64 = 1e-8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Density(CMatrix),
    Pure(StateVector),
}

impl QuantumState {
    pub fn dim(&self) -> usize {
        match self {
            QuantumState::Density(r) => r.nrows(),
            QuantumState::Pure(p) => p.len(),
        }
    }

    pub fn density(&self) -> CMatrix {
        match self {
            QuantumState::Density(r) => r.clone(),
            QuantumState::Pure(p) => p * p.adjoint(),
        }
    }

    pub fn expectation(&self, op: &Operator) -> Complex64 {
        match self {
            QuantumState::Density(r) => op.expectation(r),
            QuantumState::Pure(p) => op.expectation_pure(p),
        }
    }

    /// `Tr(A ρ)` for a dense `A`.
    pub fn expectation_matrix(&self, a: &CMatrix) -> Complex64 {
        match self {
            QuantumState::Density(r) => (a * r).trace(),
            QuantumState::Pure(p) => p.dotc(&(a * p)),
        }
    }

    pub fn purity(&self) -> f64 {
        match self {
            QuantumState::Density(r) => purity_of(r),
            QuantumState::Pure(p) => p.norm_squared().powi(2),
        }
    }

    pub fn is_finite(&self) -> bool {
        let ok = |x: &Complex64| x.re.is_finite() && x.im.is_finite();
        match self {
            QuantumState::Density(r) => r.iter().all(ok),
            QuantumState::Pure(p) => p.iter().all(ok),
        }
    }
}

/// `Tr ρ²` for Hermitian ρ.
pub fn purity_of(rho: &CMatrix) -> f64 {
    rho.iter().map(|x| x.norm_sqr()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CqStateDensity {
    pub t: f64,
    pub z: PhaseVector,
    pub rho: CMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CqStatePure {
    pub t: f64,
    pub z: PhaseVector,
    pub psi: StateVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Density,
    Pure,
    Standard,
    Joint,
}

impl FromStr for Mode {
    type Err = CqError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "density" => Ok(Mode::Density),
            "pure" => Ok(Mode::Pure),
            "standard" => Ok(Mode::Standard),
            "joint" => Ok(Mode::Joint),
            other => Err(CqError::Usage(format!(
                "unknown mode '{other}'; expected density, pure, standard or joint"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Density => "density",
            Mode::Pure => "pure",
            Mode::Standard => "standard",
            Mode::Joint => "joint",
        };
        f.write_str(s)
    }
}

fn check_step_inputs(n: usize, dt: f64, dw: &PhaseVector) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CqError::Usage(format!("time step must be positive, got {dt}")));
    }
    if dw.len() != n {
        return Err(CqError::Dimension(format!(
            "noise increment has length {}, model has {n} classical dimensions",
            dw.len()
        )));
    }
    Ok(())
}

/// Indices of the non-zero Lindblad operators.
fn active(c: &Coefficients) -> Vec<usize> {
    (0..c.lindblad.len()).filter(|&a| !c.lindblad[a].is_zero()).collect()
}

fn all_diagonal(c: &Coefficients, act: &[usize]) -> bool {
    c.hamiltonian.is_diagonal() && act.iter().all(|&a| c.lindblad[a].is_diagonal())
}

fn diag(op: &Operator) -> &nalgebra::DVector<Complex64> {
    match op {
        Operator::Diagonal(v) => v,
        Operator::Dense(_) => unreachable!("caller checked for diagonal operators"),
    }
}

/// Per-operator noise weights `w_a` for a Wiener increment.
pub fn noise_weights(c: &Coefficients, dw: &PhaseVector) -> Vec<Complex64> {
    let w = c.noise_weights() * complexify_vec(dw);
    w.iter().copied().collect()
}

/// Weights recovered from an observed classical increment:
/// `w = D1† pinv(σσᵀ) (dz − drift·dt)`. Equals [`noise_weights`] of the
/// increment that produced `dz` whenever `D1` lies in the range of `σ`.
pub fn weights_from_increment(c: &Coefficients, dz: &PhaseVector, drift: &PhaseVector, dt: f64) -> Vec<Complex64> {
    let y = c.sigma_sigma_t_pinv() * (dz - drift * dt);
    let w = c.d1.adjoint() * complexify_vec(&y);
    w.iter().copied().collect()
}

fn complexify_vec(v: &PhaseVector) -> nalgebra::DVector<Complex64> {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Raw Euler increment of the conditioned density matrix (before
/// Hermitization and renormalization). With `linear` the expectation
/// subtraction in the stochastic terms is dropped.
pub(crate) fn density_increment(
    c: &Coefficients,
    rho: &CMatrix,
    e: &[Complex64],
    w: &[Complex64],
    dt: f64,
    linear: bool,
) -> CMatrix {
    let act = active(c);
    let d = rho.nrows();
    let shift = |a: usize| if linear { ZERO } else { e[a] };
    if all_diagonal(c, &act) {
        let h = diag(&c.hamiltonian);
        let ls: Vec<&nalgebra::DVector<Complex64>> = act.iter().map(|&a| diag(&c.lindblad[a])).collect();
        let np = act.len();
        // v[a][j] = Σ_b D0_ab conj(l_bj); g_i = Σ_a l_ai conj-weighted by v.
        let mut v = vec![ZERO; np * d];
        for (ai, &a) in act.iter().enumerate() {
            for (bi, &b) in act.iter().enumerate() {
                let dab = c.d0[(a, b)];
                if dab == ZERO {
                    continue;
                }
                for j in 0..d {
                    v[ai * d + j] += dab * ls[bi][j].conj();
                }
            }
        }
        let mut g = vec![ZERO; d];
        let mut k = vec![ZERO; d];
        for i in 0..d {
            for ai in 0..np {
                g[i] += ls[ai][i] * v[ai * d + i];
                k[i] += w[act[ai]] * (ls[ai][i] - shift(act[ai]));
            }
        }
        let mut out = CMatrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                let mut cij = ZERO;
                for ai in 0..np {
                    cij += ls[ai][i] * v[ai * d + j];
                }
                let gen = -I * (h[i] - h[j].conj()) + cij - 0.5 * (g[i] + g[j].conj());
                out[(i, j)] = rho[(i, j)] * (gen * dt + k[i] + k[j].conj());
            }
        }
        return out;
    }
    let hd = c.hamiltonian.to_dense();
    let hr = &hd * rho;
    let mut out = (&hr - rho * &hd) * (-I * dt);
    let dense: Vec<CMatrix> = act.iter().map(|&a| c.lindblad[a].to_dense()).collect();
    let mut gen = CMatrix::zeros(d, d);
    let mut anti = CMatrix::zeros(d, d);
    let mut kop = CMatrix::zeros(d, d);
    for (ai, &a) in act.iter().enumerate() {
        let la_rho = &dense[ai] * rho;
        for (bi, &b) in act.iter().enumerate() {
            let dab = c.d0[(a, b)];
            if dab == ZERO {
                continue;
            }
            gen += &la_rho * dense[bi].adjoint() * dab;
            anti += dense[bi].adjoint() * &dense[ai] * dab;
        }
        kop += (&dense[ai] - CMatrix::identity(d, d) * shift(a)) * w[a];
    }
    gen -= (&anti * rho + rho * &anti) * Complex64::new(0.5, 0.0);
    out += gen * Complex64::new(dt, 0.0);
    out += &kop * rho + rho * kop.adjoint();
    out
}

fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

fn finite_matrix(m: &CMatrix) -> bool {
    m.iter().all(|x| x.re.is_finite() && x.im.is_finite())
}

fn finite_vector(v: &PhaseVector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Hermitizes and renormalizes a raw density update; returns the state and
/// the trace that was divided out.
pub(crate) fn finish_density(raw: CMatrix) -> Result<(CMatrix, f64)> {
    if !finite_matrix(&raw) {
        return Err(CqError::NonFinite("density matrix".into()));
    }
    let h = hermitize(&raw);
    let tr = h.trace().re;
    if tr < TRACE_FLOOR {
        return Err(CqError::StepSize(format!(
            "trace fell to {tr:.3e} before renormalization; reduce dt"
        )));
    }
    let rho = h / Complex64::new(tr, 0.0);
    let purity = purity_of(&rho);
    if purity > PURITY_CEILING {
        return Err(CqError::StepSize(format!(
            "state left the physical region (Tr ρ² = {purity:.3e}); reduce dt"
        )));
    }
    Ok((rho, tr))
}

pub(crate) fn expectations_density(c: &Coefficients, rho: &CMatrix) -> Vec<Complex64> {
    c.lindblad.iter().map(|l| l.expectation(rho)).collect()
}

pub(crate) fn expectations_pure(c: &Coefficients, psi: &StateVector) -> Vec<Complex64> {
    c.lindblad.iter().map(|l| l.expectation_pure(psi)).collect()
}

fn classical_update(c: &Coefficients, z: &PhaseVector, e: &[Complex64], dt: f64, dw: &PhaseVector) -> Result<PhaseVector> {
    let z_new = z + c.drift(e) * dt + &c.sigma * dw;
    if !finite_vector(&z_new) {
        return Err(CqError::NonFinite("classical coordinates".into()));
    }
    Ok(z_new)
}

/// One Euler–Maruyama step of the conditioned density-matrix unravelling.
pub fn step_density(model: &CqModel, s: &CqStateDensity, dt: f64, dw: &PhaseVector) -> Result<CqStateDensity> {
    check_step_inputs(model.n, dt, dw)?;
    let c = model.coefficients(&s.z)?;
    let e = expectations_density(&c, &s.rho);
    let w = noise_weights(&c, dw);
    let z = classical_update(&c, &s.z, &e, dt, dw)?;
    let raw = &s.rho + density_increment(&c, &s.rho, &e, &w, dt, false);
    let (rho, _) = finish_density(raw)?;
    Ok(CqStateDensity { t: s.t + dt, z, rho })
}

/// One step of the linear form: the state is advanced without the
/// normalization terms, and the trace it acquires multiplies `weight`.
/// After normalization the state agrees with [`step_density`] in
/// distribution.
pub fn step_joint(
    model: &CqModel,
    weight: f64,
    s: &CqStateDensity,
    dt: f64,
    dw: &PhaseVector,
) -> Result<(f64, CqStateDensity)> {
    check_step_inputs(model.n, dt, dw)?;
    let c = model.coefficients(&s.z)?;
    let e = expectations_density(&c, &s.rho);
    let w = noise_weights(&c, dw);
    let z = classical_update(&c, &s.z, &e, dt, dw)?;
    let raw = &s.rho + density_increment(&c, &s.rho, &e, &w, dt, true);
    let (rho, _) = finish_density(raw)?;
    // The linear increment changes the trace by exactly Σ 2 Re(w_a ⟨L_a⟩);
    // using that instead of the numerical trace keeps the weight exact when
    // there is no backreaction.
    let growth = 1.0 + w.iter().zip(&e).map(|(wa, ea)| 2.0 * (wa * ea).re).sum::<f64>();
    let new_weight = weight * growth;
    if !(new_weight > f64::MIN_POSITIVE) {
        return Err(CqError::StepSize(format!(
            "joint weight underflowed ({weight:.3e} × {growth:.3e}); reduce dt"
        )));
    }
    Ok((new_weight, CqStateDensity { t: s.t + dt, z, rho }))
}

/// Errors unless `D0 = D1† pinv(σσᵀ) D1` at these coefficients.
pub fn require_saturated(c: &Coefficients) -> Result<()> {
    let excess = numlin::max_abs(&c.excess_decoherence());
    let scale = numlin::max_abs(&c.d0).max(1.0);
    if excess > SATURATION_TOL * scale {
        return Err(CqError::Contract(format!(
            "pure-state unravelling needs a saturated model; D0 exceeds the trade-off bound by {excess:.3e}"
        )));
    }
    Ok(())
}

/// Raw Euler increment of the state vector given weights `w`.
pub(crate) fn pure_increment(c: &Coefficients, psi: &StateVector, e: &[Complex64], w: &[Complex64], dt: f64) -> StateVector {
    let act = active(c);
    let mut out = c.hamiltonian.apply(psi) * (-I * dt);
    // (L_a − ⟨L_a⟩)ψ for active a.
    let shifted: Vec<StateVector> = act
        .iter()
        .map(|&a| c.lindblad[a].apply(psi) - psi * e[a])
        .collect();
    for (ai, &a) in act.iter().enumerate() {
        out += &shifted[ai] * w[a];
    }
    let half_dt = Complex64::new(0.5 * dt, 0.0);
    for (ai, &a) in act.iter().enumerate() {
        for &b in act.iter() {
            let dab = c.d0[(a, b)];
            if dab == ZERO {
                continue;
            }
            // −½ D0_ab (L_b† − conj⟨L_b⟩)(L_a − ⟨L_a⟩)ψ
            let lb_dag = c.lindblad[b].adjoint();
            let back = lb_dag.apply(&shifted[ai]) - &shifted[ai] * e[b].conj();
            out -= back * (dab * half_dt);
            // +½ D0_ab (conj⟨L_b⟩ L_a − ⟨L_a⟩ L_b†)ψ
            let la_psi = &shifted[ai] + psi * e[a];
            let corr = la_psi * e[b].conj() - lb_dag.apply(psi) * e[a];
            out += corr * (dab * half_dt);
        }
    }
    out
}

pub(crate) fn finish_pure(raw: StateVector) -> Result<StateVector> {
    if !raw.iter().all(|x| x.re.is_finite() && x.im.is_finite()) {
        return Err(CqError::NonFinite("state vector".into()));
    }
    let n2 = raw.norm_squared();
    if n2 < TRACE_FLOOR {
        return Err(CqError::StepSize(format!(
            "state norm² fell to {n2:.3e} before renormalization; reduce dt"
        )));
    }
    Ok(raw / Complex64::new(n2.sqrt(), 0.0))
}

/// One Euler–Maruyama step of the pure-state unravelling, followed by
/// explicit renormalization.
pub fn step_pure(model: &CqModel, s: &CqStatePure, dt: f64, dw: &PhaseVector) -> Result<CqStatePure> {
    check_step_inputs(model.n, dt, dw)?;
    let c = model.coefficients(&s.z)?;
    require_saturated(&c)?;
    let e = expectations_pure(&c, &s.psi);
    let w = noise_weights(&c, dw);
    let z = classical_update(&c, &s.z, &e, dt, dw)?;
    let psi = finish_pure(&s.psi + pure_increment(&c, &s.psi, &e, &w, dt))?;
    Ok(CqStatePure { t: s.t + dt, z, psi })
}

fn standard_drift(model: &StandardScModel, z: &PhaseVector, state: &QuantumState) -> Result<(PhaseVector, Operator)> {
    let c = model.coefficients(z)?;
    let mut drift = c.drift.clone();
    for (i, op) in c.couplings.iter().enumerate() {
        drift[i] += state.expectation(op).re;
    }
    Ok((drift, c.hamiltonian))
}

/// One deterministic mean-field step; ψ is renormalized.
pub fn step_standard(model: &StandardScModel, s: &CqStatePure, dt: f64) -> Result<CqStatePure> {
    if !(dt > 0.0) {
        return Err(CqError::Usage(format!("time step must be positive, got {dt}")));
    }
    let st = QuantumState::Pure(s.psi.clone());
    let (drift, h) = standard_drift(model, &s.z, &st)?;
    let z = &s.z + drift * dt;
    if !finite_vector(&z) {
        return Err(CqError::NonFinite("classical coordinates".into()));
    }
    let psi = finish_pure(&s.psi + h.apply(&s.psi) * (-I * dt))?;
    Ok(CqStatePure { t: s.t + dt, z, psi })
}

/// Mean-field step for a mixed quantum state: `ρ' = ρ − i[H, ρ] dt`.
pub fn step_standard_density(model: &StandardScModel, s: &CqStateDensity, dt: f64) -> Result<CqStateDensity> {
    if !(dt > 0.0) {
        return Err(CqError::Usage(format!("time step must be positive, got {dt}")));
    }
    let st = QuantumState::Density(s.rho.clone());
    let (drift, h) = standard_drift(model, &s.z, &st)?;
    let z = &s.z + drift * dt;
    if !finite_vector(&z) {
        return Err(CqError::NonFinite("classical coordinates".into()));
    }
    let comm = h.left_mul(&s.rho) - h.right_mul(&s.rho);
    let (rho, _) = finish_density(&s.rho + comm * (-I * dt))?;
    Ok(CqStateDensity { t: s.t + dt, z, rho })
}

/// Driver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    /// Noise stream; ensembles use the trajectory index.
    pub stream: u64,
    /// Keep every k-th state (the initial and final states are always kept).
    pub record_every: usize,
    /// Keep the Wiener increment of every step.
    pub record_noise: bool,
    pub max_steps: usize,
}

impl SimConfig {
    pub fn new(t_final: f64, dt: f64, seed: u64) -> Self {
        SimConfig {
            t_final,
            dt,
            seed,
            stream: 0,
            record_every: 1,
            record_noise: false,
            max_steps: 100_000_000,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_record_every(mut self, k: usize) -> Self {
        self.record_every = k.max(1);
        self
    }

    /// Keep only the initial and final states.
    pub fn endpoints_only(mut self) -> Self {
        self.record_every = usize::MAX;
        self
    }

    pub fn with_noise(mut self) -> Self {
        self.record_noise = true;
        self
    }

    /// `⌈T/dt⌉` (with a little slack for rounding in `T/dt`).
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CqError::Usage(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(CqError::Usage(format!("T must be non-negative, got {}", self.t_final)));
        }
        let raw = (self.t_final / self.dt - 1e-9).ceil().max(0.0);
        if raw > self.max_steps as f64 {
            return Err(CqError::Resource(format!(
                "T/dt = {raw} exceeds the step limit {}",
                self.max_steps
            )));
        }
        Ok(raw as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub step: usize,
    pub t: f64,
    pub z: PhaseVector,
    pub state: QuantumState,
    /// Log of the joint-mode weight; 0 in other modes.
    pub log_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The classical state left the model domain after `step`; the last
    /// sample holds the state at exit.
    DomainExit { step: usize, t: f64, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub mode: Mode,
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    pub samples: Vec<Sample>,
    /// Wiener increments, one per step, when requested.
    pub noise: Vec<PhaseVector>,
    pub termination: Termination,
    /// Smallest `Tr ρ²` seen at any step.
    pub min_purity: f64,
    /// Smallest eigenvalue of ρ over the recorded samples (density and
    /// joint modes).
    pub min_eigenvalue: Option<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("a trajectory always holds its initial sample")
    }

    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed
    }

    pub fn sample_at_step(&self, step: usize) -> Option<&Sample> {
        self.samples
            .binary_search_by_key(&step, |s| s.step)
            .ok()
            .map(|i| &self.samples[i])
    }
}

struct Current {
    z: PhaseVector,
    state: QuantumState,
    log_weight: f64,
}

fn drive(
    config: &SimConfig,
    mode: Mode,
    n: usize,
    domain: &dyn Fn(&PhaseVector) -> Option<String>,
    mut cur: Current,
    mut step: impl FnMut(&mut Current, f64, &PhaseVector) -> Result<()>,
) -> Result<Trajectory> {
    let steps = config.steps()?;
    if let Some(reason) = domain(&cur.z) {
        return Err(CqError::Usage(format!("initial condition outside the model domain: {reason}")));
    }
    let dt = config.dt;
    let every = config.record_every.max(1);
    let mut noise = NoiseStream::new(config.seed, config.stream);
    let tracks_eigen = matches!(cur.state, QuantumState::Density(_));
    let mut traj = Trajectory {
        mode,
        seed: config.seed,
        stream: config.stream,
        dt,
        samples: Vec::new(),
        noise: Vec::new(),
        termination: Termination::Completed,
        min_purity: cur.state.purity(),
        min_eigenvalue: None,
    };
    let record = |traj: &mut Trajectory, k: usize, cur: &Current| {
        if tracks_eigen {
            if let QuantumState::Density(r) = &cur.state {
                let lo = numlin::hermitian_eigenvalues(r).first().copied().unwrap_or(0.0);
                traj.min_eigenvalue = Some(traj.min_eigenvalue.map_or(lo, |m: f64| m.min(lo)));
                if lo < -100.0 * dt {
                    log::warn!("density matrix eigenvalue {lo:.3e} at step {k} is below -100·dt");
                }
            }
        }
        traj.samples.push(Sample {
            step: k,
            t: k as f64 * dt,
            z: cur.z.clone(),
            state: cur.state.clone(),
            log_weight: cur.log_weight,
        });
    };
    record(&mut traj, 0, &cur);
    let deterministic = mode == Mode::Standard;
    for k in 1..=steps {
        let dw = if deterministic {
            PhaseVector::zeros(n)
        } else {
            noise.increment((k - 1) as u64, n, dt)
        };
        step(&mut cur, dt, &dw).map_err(|e| e.at_step(k))?;
        if config.record_noise {
            traj.noise.push(dw);
        }
        traj.min_purity = traj.min_purity.min(cur.state.purity());
        if let Some(reason) = domain(&cur.z) {
            record(&mut traj, k, &cur);
            traj.termination = Termination::DomainExit {
                step: k,
                t: k as f64 * dt,
                reason,
            };
            return Ok(traj);
        }
        if k % every == 0 || k == steps {
            record(&mut traj, k, &cur);
        }
    }
    Ok(traj)
}

/// Integrates one trajectory of `model` from `(z0, init)`.
///
/// Noise for step `k` is drawn from the counter-based stream keyed on
/// `(config.seed, config.stream, k)`, so identical inputs give identical
/// trajectories regardless of what else runs in the process.
pub fn simulate(
    model: &CqModel,
    z0: &PhaseVector,
    init: &QuantumState,
    config: &SimConfig,
    mode: Mode,
) -> Result<Trajectory> {
    if init.dim() != model.d {
        return Err(CqError::Dimension(format!(
            "initial state has dimension {}, model expects {}",
            init.dim(),
            model.d
        )));
    }
    if z0.len() != model.n {
        return Err(CqError::Dimension(format!(
            "initial phase point has length {}, model expects {}",
            z0.len(),
            model.n
        )));
    }
    let domain = |z: &PhaseVector| model.domain_violation(z);
    let n = model.n;
    match mode {
        Mode::Density | Mode::Joint => {
            let rho0 = init.density();
            let tr = rho0.trace().re;
            let cur = Current {
                z: z0.clone(),
                state: QuantumState::Density(rho0 / Complex64::new(tr, 0.0)),
                log_weight: 0.0,
            };
            drive(config, mode, n, &domain, cur, |cur, dt, dw| {
                let QuantumState::Density(rho) = &cur.state else { unreachable!() };
                let s = CqStateDensity { t: 0.0, z: cur.z.clone(), rho: rho.clone() };
                if mode == Mode::Joint {
                    let (w, next) = step_joint(model, 1.0, &s, dt, dw)?;
                    cur.log_weight += w.ln();
                    cur.z = next.z;
                    cur.state = QuantumState::Density(next.rho);
                } else {
                    let next = step_density(model, &s, dt, dw)?;
                    cur.z = next.z;
                    cur.state = QuantumState::Density(next.rho);
                }
                Ok(())
            })
        }
        Mode::Pure => {
            let QuantumState::Pure(psi0) = init else {
                return Err(CqError::Usage("pure mode needs a state vector as initial state".into()));
            };
            let cur = Current {
                z: z0.clone(),
                state: QuantumState::Pure(psi0 / Complex64::new(psi0.norm(), 0.0)),
                log_weight: 0.0,
            };
            drive(config, mode, n, &domain, cur, |cur, dt, dw| {
                let QuantumState::Pure(psi) = &cur.state else { unreachable!() };
                let s = CqStatePure { t: 0.0, z: cur.z.clone(), psi: psi.clone() };
                let next = step_pure(model, &s, dt, dw)?;
                cur.z = next.z;
                cur.state = QuantumState::Pure(next.psi);
                Ok(())
            })
        }
        Mode::Standard => simulate_standard(&StandardScModel::from_model(model), z0, init, config),
    }
}

/// Integrates the deterministic mean-field dynamics. A state-vector initial
/// state stays a state vector; a density matrix evolves unitarily.
pub fn simulate_standard(
    model: &StandardScModel,
    z0: &PhaseVector,
    init: &QuantumState,
    config: &SimConfig,
) -> Result<Trajectory> {
    if init.dim() != model.d || z0.len() != model.n {
        return Err(CqError::Dimension(format!(
            "initial state ({}, {}) does not match model (n = {}, d = {})",
            z0.len(),
            init.dim(),
            model.n,
            model.d
        )));
    }
    let domain = |z: &PhaseVector| model.domain_violation(z);
    let cur = Current {
        z: z0.clone(),
        state: init.clone(),
        log_weight: 0.0,
    };
    drive(config, Mode::Standard, model.n, &domain, cur, |cur, dt, _| {
        match &cur.state {
            QuantumState::Pure(psi) => {
                let s = CqStatePure { t: 0.0, z: cur.z.clone(), psi: psi.clone() };
                let next = step_standard(model, &s, dt)?;
                cur.z = next.z;
                cur.state = QuantumState::Pure(next.psi);
            }
            QuantumState::Density(rho) => {
                let s = CqStateDensity { t: 0.0, z: cur.z.clone(), rho: rho.clone() };
                let next = step_standard_density(model, &s, dt)?;
                cur.z = next.z;
                cur.state = QuantumState::Density(next.rho);
            }
        }
        Ok(())
    })
}
