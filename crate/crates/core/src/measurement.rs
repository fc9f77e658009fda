//! The unravelling read as a continuous measurement with feedback.
//!
//! One step of length `dt` applies the Kraus operator
//! `Ω_J = I − iH dt − ½ D0_ab L_b† L_a dt + Σ_a w_a(J) L_a`, with
//! `w = D1† pinv(σσᵀ) J dt`, to the quantum state. The outcome `J` drives
//! the classical coordinates through `dZ = D1C dt + J dt`, and is Gaussian
//! with covariance `σσᵀ/dt` around `⟨D1 L† + D1* L⟩`. For a saturated model
//! `∫dμ₀ Ω_J†Ω_J = I + O(dt²)`; an unsaturated one is run as an inefficient
//! measurement by adding a Lindblad substep with the excess decoherence.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::{run_indexed, HermitianBasis};
use crate::error::{CqError, Result};
use crate::integrator::{
    expectations_density, finish_density, require_saturated, step_density, CqStateDensity,
};
use crate::model::{Coefficients, CqModel};
use crate::noise::NoiseStream;
use crate::numlin;
use crate::{CMatrix, PhaseVector, RMatrix};

/// Standard deviations at which the outcome measure is truncated.
pub const TRUNCATION_SD: f64 = 8.0;
/// Gauss–Hermite nodes per noisy direction; exact for polynomials of degree
/// up to 7, and every moment used here has degree at most 4.
pub const QUADRATURE_NODES: usize = 4;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug)]
pub struct KrausStepSpec<'a> {
    pub model: &'a CqModel,
    pub dt: f64,
    /// Allow an unsaturated model, treating the excess decoherence as
    /// undetected measurement back-action.
    pub inefficient: bool,
}

impl<'a> KrausStepSpec<'a> {
    pub fn new(model: &'a CqModel, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CqError::Usage(format!("dt must be positive, got {dt}")));
        }
        Ok(KrausStepSpec { model, dt, inefficient: false })
    }

    pub fn inefficient(model: &'a CqModel, dt: f64) -> Result<Self> {
        Ok(KrausStepSpec { inefficient: true, ..Self::new(model, dt)? })
    }

    fn coefficients(&self, z: &PhaseVector) -> Result<Coefficients> {
        let c = self.model.coefficients(z)?;
        if !self.inefficient {
            require_saturated(&c)?;
        }
        Ok(c)
    }
}

/// `Ω_J` from the measured part of the decoherence, `D1† pinv(σσᵀ) D1`.
fn kraus_from(c: &Coefficients, dt: f64, j: &PhaseVector) -> CMatrix {
    let d = c.hamiltonian.dim();
    let d0 = c.saturating_d0();
    let w = c.d1.adjoint() * (c.sigma_sigma_t_pinv() * j * dt).map(|x| Complex64::new(x, 0.0));
    let dense: Vec<CMatrix> = c.lindblad.iter().map(|l| l.to_dense()).collect();
    let mut omega = CMatrix::identity(d, d) - c.hamiltonian.to_dense() * (I * dt);
    for (a, la) in dense.iter().enumerate() {
        for (b, lb) in dense.iter().enumerate() {
            if d0[(a, b)] != Complex64::ZERO {
                omega -= lb.adjoint() * la * (d0[(a, b)] * 0.5 * dt);
            }
        }
        omega += la * w[a];
    }
    omega
}

/// `Ω_J` at `z` for outcome `j` (in units of `dZ/dt`).
pub fn kraus_operator(spec: &KrausStepSpec<'_>, z: &PhaseVector, j: &PhaseVector) -> Result<CMatrix> {
    if j.len() != spec.model.n {
        return Err(CqError::Dimension(format!("outcome has length {}, model has {} coordinates", j.len(), spec.model.n)));
    }
    Ok(kraus_from(&spec.coefficients(z)?, spec.dt, j))
}

/// Outcome mean `⟨D1_ia L_a† + D1_ia* L_a⟩`, per unit time.
pub fn outcome_mean(c: &Coefficients, rho: &CMatrix) -> PhaseVector {
    c.drift(&expectations_density(c, rho)) - &c.d1c
}

/// Nodes and weights of the `m`-point Gauss–Hermite rule for the standard
/// normal measure (weights sum to one), by Golub–Welsch.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = RMatrix::from_fn(m, m, |i, k| if i.abs_diff(k) == 1 { (i.max(k) as f64).sqrt() } else { 0.0 });
    let (nodes, vectors) = numlin::hermitian_eigen(&jacobi);
    let weights = (0..m).map(|k| vectors[(0, k)].powi(2)).collect();
    (nodes, weights)
}

/// Quadrature points `(J dt, weight)` for the Gaussian with covariance
/// `σσᵀ dt`, on a tensor grid over the noisy directions only.
fn outcome_quadrature(c: &Coefficients, dt: f64) -> Vec<(PhaseVector, f64)> {
    let n = c.sigma.nrows();
    let ss = &c.sigma * c.sigma.transpose();
    let (values, vectors) = numlin::hermitian_eigen(&ss);
    let top = values.iter().cloned().fold(0.0, f64::max);
    let axes: Vec<PhaseVector> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 1e-12 * top)
        .map(|(k, &v)| vectors.column(k) * (v * dt).sqrt())
        .collect();
    let (nodes, weights) = gauss_hermite(QUADRATURE_NODES);
    let m = nodes.len();
    let count = m.pow(axes.len() as u32);
    (0..count)
        .map(|mut idx| {
            let mut x = PhaseVector::zeros(n);
            let mut w = 1.0;
            for axis in &axes {
                let k = idx % m;
                idx /= m;
                x += axis * nodes[k];
                w *= weights[k];
            }
            (x, w)
        })
        .collect()
}

/// `‖∫dμ₀ Ω_J†Ω_J − I‖_max` by quadrature.
pub fn kraus_normalization_residual(spec: &KrausStepSpec<'_>, z: &PhaseVector) -> Result<f64> {
    let c = spec.coefficients(z)?;
    let d = spec.model.d;
    let mut acc = CMatrix::zeros(d, d);
    for (jdt, w) in outcome_quadrature(&c, spec.dt) {
        let omega = kraus_from(&c, spec.dt, &(jdt / spec.dt));
        acc += omega.adjoint() * omega * Complex64::new(w, 0.0);
    }
    Ok(numlin::max_abs(&(acc - CMatrix::identity(d, d))))
}

/// First and second moments of `J dt` under the state-dependent outcome
/// law `Tr[ρ Ω_J†Ω_J] dμ₀(J)`, by quadrature.
pub fn quadrature_outcome_moments(spec: &KrausStepSpec<'_>, z: &PhaseVector, rho: &CMatrix) -> Result<(PhaseVector, RMatrix)> {
    let c = spec.coefficients(z)?;
    let n = spec.model.n;
    let mut total = 0.0;
    let mut mean = PhaseVector::zeros(n);
    let mut second = RMatrix::zeros(n, n);
    for (jdt, w) in outcome_quadrature(&c, spec.dt) {
        let omega = kraus_from(&c, spec.dt, &(&jdt / spec.dt));
        let p = w * (rho * omega.adjoint() * omega).trace().re;
        total += p;
        mean += &jdt * p;
        second += &jdt * jdt.transpose() * p;
    }
    Ok((mean / total, second / total))
}

#[derive(Clone, Debug)]
pub struct MeasurementOutcome {
    /// The outcome `J`.
    pub j: PhaseVector,
    /// `D1C dt + J dt`.
    pub dz: PhaseVector,
    /// The updated, normalized state.
    pub rho: CMatrix,
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= TRUNCATION_SD {
            return x;
        }
    }
}

/// Draws an outcome and applies the state update
/// `ρ' = Ω_J ρ Ω_J† / Tr[Ω_J ρ Ω_J†]`. In the inefficient variant the
/// excess decoherence acts as one explicit Lindblad substep before the
/// normalization.
pub fn measure_and_update(
    spec: &KrausStepSpec<'_>,
    z: &PhaseVector,
    rho: &CMatrix,
    rng: &mut impl Rng,
) -> Result<MeasurementOutcome> {
    let c = spec.coefficients(z)?;
    let (n, dt) = (spec.model.n, spec.dt);
    if rho.shape() != (spec.model.d, spec.model.d) {
        return Err(CqError::Dimension(format!("state has shape {:?}, model dimension is {}", rho.shape(), spec.model.d)));
    }
    let xi = DVector::from_fn(n, |_, _| truncated_normal(rng));
    let jdt = outcome_mean(&c, rho) * dt + &c.sigma * xi * dt.sqrt();
    let j = &jdt / dt;
    let omega = kraus_from(&c, dt, &j);
    let mut raw = &omega * rho * omega.adjoint();
    if spec.inefficient {
        raw += lindblad(&c, &c.excess_decoherence(), &raw) * Complex64::new(dt, 0.0);
    }
    let (rho, _) = finish_density(raw)?;
    Ok(MeasurementOutcome { dz: &c.d1c * dt + &jdt, j, rho })
}

/// `Σ_ab M_ab (L_a ρ L_b† − ½{L_b† L_a, ρ})`.
fn lindblad(c: &Coefficients, m: &CMatrix, rho: &CMatrix) -> CMatrix {
    let d = rho.nrows();
    let dense: Vec<CMatrix> = c.lindblad.iter().map(|l| l.to_dense()).collect();
    let mut out = CMatrix::zeros(d, d);
    for (a, la) in dense.iter().enumerate() {
        for (b, lb) in dense.iter().enumerate() {
            let mab = m[(a, b)];
            if mab == Complex64::ZERO {
                continue;
            }
            let lbl = lb.adjoint() * la;
            out += (la * rho * lb.adjoint() - (&lbl * rho + rho * &lbl) * Complex64::new(0.5, 0.0)) * mab;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct MeasurementCheckConfig {
    pub dt: f64,
    pub samples: usize,
    pub seed: u64,
    pub inefficient: bool,
    pub workers: Option<usize>,
}

impl MeasurementCheckConfig {
    pub fn new(dt: f64, samples: usize, seed: u64) -> Self {
        MeasurementCheckConfig { dt, samples, seed, inefficient: false, workers: None }
    }
}

/// Largest standardized deviation among the entries of one moment.
#[derive(Clone, Debug, Serialize)]
pub struct MomentDeviation {
    pub max_deviation: f64,
    /// The entry attaining it.
    pub entry: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasurementReport {
    pub dt: f64,
    pub samples: usize,
    pub inefficient: bool,
    /// Sampled `E[J dt]` against `⟨D1 L† + D1* L⟩ dt`.
    pub outcome_mean: MomentDeviation,
    /// Sampled `Cov[J dt]` against `σσᵀ dt`.
    pub outcome_covariance: MomentDeviation,
    /// `max |∫ J dt Tr[ρΩ†Ω] dμ₀ − ⟨D1 L† + D1* L⟩ dt|` by quadrature.
    pub quadrature_mean_residual: f64,
    /// `max |∫ (J dt)(J dt)ᵀ Tr[ρΩ†Ω] dμ₀ − σσᵀ dt|` by quadrature.
    pub quadrature_second_moment_residual: f64,
    /// `‖∫dμ₀ Ω_J†Ω_J − I‖_max`.
    pub normalization_residual: f64,
    /// Mean of `(ΔZ, Δρ)` from the measurement step against one density
    /// step of the unravelling, as a two-sample comparison.
    pub step_mean: MomentDeviation,
    pub step_covariance: MomentDeviation,
}

impl MeasurementReport {
    /// All sampled comparisons within `k` standard errors and the
    /// normalization residual within `10 dt²`.
    pub fn passes(&self, k: f64) -> bool {
        [&self.outcome_mean, &self.outcome_covariance, &self.step_mean, &self.step_covariance]
            .iter()
            .all(|m| m.max_deviation <= k)
            && self.normalization_residual <= 10.0 * self.dt * self.dt
    }
}

/// Column means of a sample matrix (rows are samples).
fn column_means(xs: &[Vec<f64>]) -> Vec<f64> {
    let n = xs.len() as f64;
    let k = xs[0].len();
    (0..k).map(|c| xs.iter().map(|r| r[c]).sum::<f64>() / n).collect()
}

/// Sample mean and its standard error per column, and sample covariance
/// and its standard error per pair.
struct Moments {
    mean: Vec<f64>,
    mean_se: Vec<f64>,
    cov: Vec<Vec<f64>>,
    cov_se: Vec<Vec<f64>>,
}

fn moments(xs: &[Vec<f64>]) -> Moments {
    let n = xs.len() as f64;
    let k = xs[0].len();
    let mean = column_means(xs);
    let centered: Vec<Vec<f64>> = xs.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; k]; k];
    let mut cov_se = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let prods: Vec<f64> = centered.iter().map(|r| r[a] * r[b]).collect();
            let (m, se) = crate::ensemble::mean_stderr(&prods);
            cov[a][b] = m * n / (n - 1.0);
            cov[b][a] = cov[a][b];
            cov_se[a][b] = se;
            cov_se[b][a] = se;
        }
    }
    let mean_se = (0..k).map(|a| (cov[a][a] / n).sqrt()).collect();
    Moments { mean, mean_se, cov, cov_se }
}

/// `|a − b| / se`, treating differences at rounding level as agreement.
fn standardized(a: f64, b: f64, se: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-12 * (1.0 + a.abs().max(b.abs())) {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        f64::INFINITY
    }
}

fn worst(entries: impl Iterator<Item = (f64, String)>) -> MomentDeviation {
    entries.fold(MomentDeviation { max_deviation: 0.0, entry: String::new() }, |acc, (d, e)| {
        if d > acc.max_deviation || acc.entry.is_empty() {
            MomentDeviation { max_deviation: d, entry: e }
        } else {
            acc
        }
    })
}

fn one_sample(m: &Moments, mean: &[f64], cov: &[Vec<f64>], labels: &[String]) -> (MomentDeviation, MomentDeviation) {
    let k = labels.len();
    let mean_dev = worst((0..k).map(|a| (standardized(m.mean[a], mean[a], m.mean_se[a]), format!("mean {}", labels[a]))));
    let cov_dev = worst((0..k).flat_map(|a| (a..k).map(move |b| (a, b))).map(|(a, b)| {
        (standardized(m.cov[a][b], cov[a][b], m.cov_se[a][b]), format!("cov {},{}", labels[a], labels[b]))
    }));
    (mean_dev, cov_dev)
}

fn two_sample(x: &Moments, y: &Moments, labels: &[String]) -> (MomentDeviation, MomentDeviation) {
    let k = labels.len();
    let mean_dev = worst((0..k).map(|a| {
        (standardized(x.mean[a], y.mean[a], x.mean_se[a].hypot(y.mean_se[a])), format!("mean {}", labels[a]))
    }));
    let cov_dev = worst((0..k).flat_map(|a| (a..k).map(move |b| (a, b))).map(|(a, b)| {
        (
            standardized(x.cov[a][b], y.cov[a][b], x.cov_se[a][b].hypot(y.cov_se[a][b])),
            format!("cov {},{}", labels[a], labels[b]),
        )
    }));
    (mean_dev, cov_dev)
}

fn measure_sample(spec: &KrausStepSpec<'_>, z: &PhaseVector, rho: &CMatrix, seed: u64, k: usize) -> Result<MeasurementOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    measure_and_update(spec, z, rho, &mut rng)
}

/// `(ΔZ, Δρ)` as one row; the identity component of `Δρ` is dropped since
/// normalization fixes the trace.
fn step_row(basis: &HermitianBasis, base: &[f64], dz: &PhaseVector, rho: &CMatrix) -> Vec<f64> {
    let comps = basis.components(rho);
    dz.iter().copied().chain(comps.iter().zip(base).skip(1).map(|(a, b)| a - b)).collect()
}

fn step_labels(n: usize, basis: &HermitianBasis) -> Vec<String> {
    (0..n)
        .map(|i| format!("z[{i}]"))
        .chain(basis.labels().into_iter().skip(1).map(|l| format!("rho {l}")))
        .collect()
}

#[cfg(test)]
fn measured_rows(
    spec: &KrausStepSpec<'_>,
    z: &PhaseVector,
    rho: &CMatrix,
    cfg: &MeasurementCheckConfig,
    basis: &HermitianBasis,
) -> Result<Vec<Vec<f64>>> {
    let base = basis.components(rho);
    run_indexed(cfg.samples, cfg.workers, |k| {
        measure_sample(spec, z, rho, cfg.seed, k).map(|m| step_row(basis, &base, &m.dz, &m.rho))
    })
}

/// One `step_density` per sample on independent noise.
fn stepped_rows(
    model: &CqModel,
    z: &PhaseVector,
    rho: &CMatrix,
    cfg: &MeasurementCheckConfig,
    basis: &HermitianBasis,
) -> Result<Vec<Vec<f64>>> {
    let base = basis.components(rho);
    let state = CqStateDensity { t: 0.0, z: z.clone(), rho: rho.clone() };
    run_indexed(cfg.samples, cfg.workers, |k| {
        let dw = NoiseStream::new(cfg.seed ^ 0x6d65_6173_7572_6521, k as u64).increment(0, model.n, cfg.dt);
        let s = step_density(model, &state, cfg.dt, &dw)?;
        Ok(step_row(basis, &base, &(&s.z - z), &s.rho))
    })
}

/// Compares the measurement picture with the unravelling at one point:
/// outcome statistics against their closed forms, the Kraus normalization,
/// and the one-step moments of `(ΔZ, Δρ)` against `step_density` driven by
/// independent noise.
///
/// The two steps differ at `O(dt²)`. A component of `Δρ` whose fluctuation
/// vanishes at order `√dt` (the coherence of a measurement eigenbasis
/// superposition under pure Hamiltonian rotation, say) has a standard error
/// small enough to resolve that difference, so pick a state on which the
/// back-action acts in every direction.
pub fn measurement_check(model: &CqModel, z: &PhaseVector, rho: &CMatrix, cfg: &MeasurementCheckConfig) -> Result<MeasurementReport> {
    if cfg.samples < 2 {
        return Err(CqError::Usage("the moment check needs at least two samples".into()));
    }
    let spec = if cfg.inefficient {
        KrausStepSpec::inefficient(model, cfg.dt)?
    } else {
        KrausStepSpec::new(model, cfg.dt)?
    };
    let c = spec.coefficients(z)?;
    let dt = cfg.dt;
    let n = model.n;
    let basis = HermitianBasis::new(model.d);

    let measured = run_indexed(cfg.samples, cfg.workers, |k| measure_sample(&spec, z, rho, cfg.seed, k))?;
    let zl: Vec<String> = (0..n).map(|i| format!("z[{i}]")).collect();
    let expected_mean: Vec<f64> = (outcome_mean(&c, rho) * dt).iter().copied().collect();
    let ss = &c.sigma * c.sigma.transpose() * dt;
    let expected_cov: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| ss[(a, b)]).collect()).collect();
    let jdt: Vec<Vec<f64>> = measured.iter().map(|m| (&m.j * dt).iter().copied().collect()).collect();
    let (outcome_mean_dev, outcome_cov_dev) = one_sample(&moments(&jdt), &expected_mean, &expected_cov, &zl);

    let (qm, qs) = quadrature_outcome_moments(&spec, z, rho)?;
    let quadrature_mean_residual = (qm - PhaseVector::from_vec(expected_mean)).amax();
    let quadrature_second_moment_residual = (qs - ss).amax();
    let normalization_residual = kraus_normalization_residual(&spec, z)?;

    let base = basis.components(rho);
    let xs: Vec<Vec<f64>> = measured.iter().map(|m| step_row(&basis, &base, &m.dz, &m.rho)).collect();
    let ys = stepped_rows(model, z, rho, cfg, &basis)?;
    let labels = step_labels(n, &basis);
    let (step_mean, step_covariance) = two_sample(&moments(&xs), &moments(&ys), &labels);

    Ok(MeasurementReport {
        dt,
        samples: cfg.samples,
        inefficient: cfg.inefficient,
        outcome_mean: outcome_mean_dev,
        outcome_covariance: outcome_cov_dev,
        quadrature_mean_residual,
        quadrature_second_moment_residual,
        normalization_residual,
        step_mean,
        step_covariance,
    })
}
