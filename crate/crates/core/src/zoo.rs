//! Ready-made toy models with their customary default parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{CqError, Result};
use crate::model::{self, build_hamiltonian_model, CqModel, HamiltonianSpec};
use crate::operator::{pauli, Operator};
use crate::{PhaseVector, RMatrix, StateVector};

/// Largest lattice supported by `ghz_lattice` (Hilbert dimension 32).
pub const MAX_GHZ_SITES: usize = 5;

/// Exclusion radius around each source mass, as a fraction of `|d|`.
pub const MASS_EXCLUSION_FRACTION: f64 = 0.2;

fn require(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CqError::Usage(msg.to_string()))
    }
}

fn diag_sigma(n: usize, noisy_from: usize, sigma: f64) -> RMatrix {
    RMatrix::from_fn(n, n, |i, j| if i == j && i >= noisy_from { sigma } else { 0.0 })
}

/// Linear Stern–Gerlach coupling: `H = p²/2m + (2λq + φ) σ_z`, noise `σ` on
/// the momentum.
pub fn diosi_linear(m: f64, lambda: f64, phi: f64, sigma: f64) -> Result<HamiltonianSpec> {
    require(m > 0.0, "diosi: m must be positive")?;
    require(sigma >= 0.0, "diosi: sigma must be non-negative")?;
    let spec = HamiltonianSpec {
        name: "diosi".into(),
        n: 2,
        d: 2,
        h_c: Arc::new(move |z| z[1] * z[1] / (2.0 * m)),
        h_i: Arc::new(move |z| {
            let e = 2.0 * lambda * z[0] + phi;
            Operator::from_real_diagonal(&[e, -e])
        }),
        grad_c: Arc::new(move |z| PhaseVector::from_column_slice(&[0.0, z[1] / m])),
        grad_i: Arc::new(move |_| {
            vec![
                Operator::from_real_diagonal(&[2.0 * lambda, -2.0 * lambda]),
                Operator::zeros(2),
            ]
        }),
        sigma: Arc::new(move |_| diag_sigma(2, 1, sigma)),
        domain: None,
        reference_z: PhaseVector::zeros(2),
    };
    build_hamiltonian_model(&spec)?;
    Ok(spec)
}

/// Qubit-controlled well `H = p²/2m + λ√q σ_z` on `q > 0` with
/// position-dependent momentum noise `γ/√q`.
pub fn sqrt_well(m: f64, lambda: f64, gamma: f64) -> Result<HamiltonianSpec> {
    require(m > 0.0, "sqrt_well: m must be positive")?;
    require(gamma > 0.0, "sqrt_well: gamma must be positive")?;
    let spec = HamiltonianSpec {
        name: "sqrt_well".into(),
        n: 2,
        d: 2,
        h_c: Arc::new(move |z| z[1] * z[1] / (2.0 * m)),
        h_i: Arc::new(move |z| {
            let e = lambda * z[0].sqrt();
            Operator::from_real_diagonal(&[e, -e])
        }),
        grad_c: Arc::new(move |z| PhaseVector::from_column_slice(&[0.0, z[1] / m])),
        grad_i: Arc::new(move |z| {
            let g = lambda / (2.0 * z[0].sqrt());
            vec![Operator::from_real_diagonal(&[g, -g]), Operator::zeros(2)]
        }),
        sigma: Arc::new(move |z| diag_sigma(2, 1, gamma / z[0].sqrt())),
        domain: Some(Arc::new(|z: &PhaseVector| {
            (z[0].is_nan() || z[0] <= 0.0).then(|| format!("left the half-line q > 0 (q = {:.6})", z[0]))
        })),
        reference_z: PhaseVector::from_column_slice(&[1.0, -1.0]),
    };
    build_hamiltonian_model(&spec)?;
    Ok(spec)
}

/// Source-mass positions for the superposition model: `|L⟩` (σ_z = +1,
/// basis index 0) sits at `(−d, 0, 0)`, `|R⟩` at `(+d, 0, 0)`.
pub fn mass_positions(d: f64) -> [[f64; 3]; 2] {
    [[-d, 0.0, 0.0], [d, 0.0, 0.0]]
}

/// A test mass in the Newtonian field of a source in a superposition of
/// two places: `H = p²/2m − GMm/|r − σ_z d| + φ σ_z`, isotropic momentum
/// noise `σ`. Coordinates `(x, y, z, p_x, p_y, p_z)`.
pub fn mass_superposition(
    g: f64,
    big_m: f64,
    m: f64,
    sigma: f64,
    phi: f64,
    d: f64,
) -> Result<HamiltonianSpec> {
    require(g > 0.0 && big_m > 0.0 && m > 0.0, "mass_superposition: G, M, m must be positive")?;
    require(sigma > 0.0, "mass_superposition: sigma must be positive")?;
    require(d > 0.0, "mass_superposition: d must be positive")?;
    let k = g * big_m * m;
    let centers = mass_positions(d);
    let r_min = MASS_EXCLUSION_FRACTION * d;
    let dist = move |z: &PhaseVector, c: &[f64; 3]| {
        ((z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2) + (z[2] - c[2]).powi(2)).sqrt()
    };
    let spec = HamiltonianSpec {
        name: "mass_superposition".into(),
        n: 6,
        d: 2,
        h_c: Arc::new(move |z| (z[3] * z[3] + z[4] * z[4] + z[5] * z[5]) / (2.0 * m)),
        h_i: Arc::new(move |z| {
            Operator::from_real_diagonal(&[
                -k / dist(z, &centers[0]) + phi,
                -k / dist(z, &centers[1]) - phi,
            ])
        }),
        grad_c: Arc::new(move |z| {
            PhaseVector::from_column_slice(&[0.0, 0.0, 0.0, z[3] / m, z[4] / m, z[5] / m])
        }),
        grad_i: Arc::new(move |z| {
            let rl = dist(z, &centers[0]).powi(3);
            let rr = dist(z, &centers[1]).powi(3);
            let mut out: Vec<Operator> = (0..3)
                .map(|i| {
                    Operator::from_real_diagonal(&[
                        k * (z[i] - centers[0][i]) / rl,
                        k * (z[i] - centers[1][i]) / rr,
                    ])
                })
                .collect();
            out.extend((0..3).map(|_| Operator::zeros(2)));
            out
        }),
        sigma: Arc::new(move |_| diag_sigma(6, 3, sigma)),
        domain: Some(Arc::new(move |z: &PhaseVector| {
            for (c, label) in centers.iter().zip(["left", "right"]) {
                let r = dist(z, c);
                if r.is_nan() || r < r_min {
                    return Some(format!("entered the exclusion ball of the {label} mass (r = {r:.4})"));
                }
            }
            None
        })),
        reference_z: PhaseVector::from_column_slice(&[0.0, -0.5, 0.0, 0.0, 0.0, 0.0]),
    };
    build_hamiltonian_model(&spec)?;
    Ok(spec)
}

/// Lattice of qubits each coupled to a local classical field:
/// `H = λ Σ φ_i σ_z^i + Σ π_i²/2m`, independent noise `σ` on every `π_i`.
/// Coordinates `(φ_1..φ_n, π_1..π_n)`.
pub fn ghz_lattice(n_sites: usize, m: f64, lambda: f64, sigma: f64) -> Result<HamiltonianSpec> {
    require(n_sites >= 1, "ghz_lattice: need at least one site")?;
    if n_sites > MAX_GHZ_SITES {
        return Err(CqError::Resource(format!(
            "ghz_lattice: {n_sites} sites needs Hilbert dimension 2^{n_sites}; at most {MAX_GHZ_SITES} sites are supported"
        )));
    }
    require(m > 0.0, "ghz_lattice: m must be positive")?;
    require(sigma >= 0.0, "ghz_lattice: sigma must be non-negative")?;
    let ns = n_sites;
    let z_ops: Arc<Vec<Operator>> = Arc::new((0..ns).map(|i| pauli::sigma_z_site(i, ns)).collect());
    let zo = z_ops.clone();
    let h_i = move |z: &PhaseVector| {
        zo.iter()
            .enumerate()
            .fold(Operator::zeros(1 << ns), |acc, (i, op)| {
                acc.add(&op.scale(Complex64::new(lambda * z[i], 0.0)))
            })
    };
    let zo = z_ops.clone();
    let grad_i = move |_: &PhaseVector| {
        let mut out: Vec<Operator> = zo
            .iter()
            .map(|op| op.scale(Complex64::new(lambda, 0.0)))
            .collect();
        out.extend((0..ns).map(|_| Operator::zeros(1 << ns)));
        out
    };
    let spec = HamiltonianSpec {
        name: "ghz_lattice".into(),
        n: 2 * ns,
        d: 1 << ns,
        h_c: Arc::new(move |z| (ns..2 * ns).map(|i| z[i] * z[i]).sum::<f64>() / (2.0 * m)),
        h_i: Arc::new(h_i),
        grad_c: Arc::new(move |z| {
            PhaseVector::from_fn(2 * ns, |i, _| if i < ns { 0.0 } else { z[i] / m })
        }),
        grad_i: Arc::new(grad_i),
        sigma: Arc::new(move |_| diag_sigma(2 * ns, ns, sigma)),
        domain: None,
        reference_z: PhaseVector::zeros(2 * ns),
    };
    build_hamiltonian_model(&spec)?;
    Ok(spec)
}

/// `(|0⟩ + |1⟩)/√2`.
pub fn plus_state() -> StateVector {
    let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    StateVector::from_column_slice(&[a, a])
}

/// Computational basis state `|k⟩` in dimension `d`.
pub fn basis_state(d: usize, k: usize) -> StateVector {
    let mut v = StateVector::zeros(d);
    v[k] = Complex64::new(1.0, 0.0);
    v
}

/// `(|0…0⟩ + |1…1⟩)/√2` on `n` qubits.
pub fn ghz_state(n: usize) -> StateVector {
    let d = 1 << n;
    let mut v = StateVector::zeros(d);
    let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    v[0] = a;
    v[d - 1] = a;
    v
}

/// A model together with its default initial condition.
#[derive(Clone, Debug)]
pub struct Setup {
    pub name: String,
    pub model: CqModel,
    /// Present for Hamiltonian models; needed for the mean-field dynamics.
    pub spec: Option<HamiltonianSpec>,
    pub z0: PhaseVector,
    pub psi0: StateVector,
    /// Resolved parameters, defaults included.
    pub params: BTreeMap<String, f64>,
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 5] = [
    "diosi",
    "sqrt_well",
    "mass_superposition",
    "ghz_lattice",
    "monitored_qubit",
];

/// The four Hamiltonian toy models (excludes the generic monitored qubit).
pub const HAMILTONIAN_BUILTINS: [&str; 4] = ["diosi", "sqrt_well", "mass_superposition", "ghz_lattice"];

fn defaults(name: &str) -> Option<Vec<(&'static str, f64)>> {
    Some(match name {
        "diosi" => vec![("m", 1.0), ("lambda", 1.0), ("phi", 2.0), ("sigma", 1.0), ("q0", 0.0), ("p0", 0.0)],
        "sqrt_well" => vec![("m", 1.0), ("lambda", 1.0), ("gamma", 0.5), ("q0", 1.0), ("p0", -1.0)],
        "mass_superposition" => vec![
            ("G", 1.0),
            ("M", 10.0),
            ("m", 0.01),
            ("sigma", 0.02),
            ("phi", 5.0),
            ("d", 1.0),
            ("x0", 0.0),
            ("y0", -0.5),
            ("z0", 0.0),
        ],
        "ghz_lattice" => vec![("n_sites", 5.0), ("m", 1.0), ("lambda", 1.0), ("sigma", 1.0)],
        "monitored_qubit" => vec![("d1", 0.5), ("sigma", 1.0), ("epsilon", 0.0), ("phi", 2.0), ("z0", 0.0)],
        _ => return None,
    })
}

/// Builds a named model with parameter overrides. Unknown names or
/// parameter keys are usage errors.
pub fn builtin(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Setup> {
    let Some(defs) = defaults(name) else {
        return Err(CqError::Usage(format!(
            "unknown model '{name}'; expected one of {}",
            BUILTIN_NAMES.join(", ")
        )));
    };
    let mut params: BTreeMap<String, f64> = defs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        if !params.contains_key(k) {
            return Err(CqError::Usage(format!(
                "model '{name}' has no parameter '{k}'; known: {}",
                params.keys().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
        params.insert(k.clone(), *v);
    }
    let p = |k: &str| params[k];
    let (spec, model, z0, psi0) = match name {
        "diosi" => {
            let spec = diosi_linear(p("m"), p("lambda"), p("phi"), p("sigma"))?;
            let z0 = PhaseVector::from_column_slice(&[p("q0"), p("p0")]);
            (Some(spec), None, z0, plus_state())
        }
        "sqrt_well" => {
            let spec = sqrt_well(p("m"), p("lambda"), p("gamma"))?;
            let z0 = PhaseVector::from_column_slice(&[p("q0"), p("p0")]);
            (Some(spec), None, z0, plus_state())
        }
        "mass_superposition" => {
            let spec = mass_superposition(p("G"), p("M"), p("m"), p("sigma"), p("phi"), p("d"))?;
            let z0 = PhaseVector::from_column_slice(&[p("x0"), p("y0"), p("z0"), 0.0, 0.0, 0.0]);
            (Some(spec), None, z0, plus_state())
        }
        "ghz_lattice" => {
            let ns = p("n_sites");
            if ns < 1.0 || ns.fract() != 0.0 {
                return Err(CqError::Usage("ghz_lattice: n_sites must be a positive integer".into()));
            }
            let ns = ns as usize;
            let spec = ghz_lattice(ns, p("m"), p("lambda"), p("sigma"))?;
            (Some(spec), None, PhaseVector::zeros(2 * ns), ghz_state(ns))
        }
        "monitored_qubit" => {
            require(p("sigma") >= 0.0, "monitored_qubit: sigma must be non-negative")?;
            // Negative epsilon gives a model below the trade-off bound;
            // it is accepted so the positivity gate can be exercised.
            require(p("epsilon").is_finite(), "monitored_qubit: epsilon must be finite")?;
            let m = model::monitored_qubit(p("d1"), p("sigma"), p("epsilon"), p("phi"));
            (None, Some(m), PhaseVector::from_column_slice(&[p("z0")]), plus_state())
        }
        _ => unreachable!(),
    };
    let model = match (model, &spec) {
        (Some(m), _) => m,
        (None, Some(s)) => {
            let mut s = s.clone();
            s.reference_z = z0.clone();
            build_hamiltonian_model(&s)?
        }
        (None, None) => unreachable!(),
    };
    if let Some(reason) = model.domain_violation(&z0) {
        return Err(CqError::Usage(format!("initial condition outside the model domain: {reason}")));
    }
    Ok(Setup {
        name: name.to_string(),
        model,
        spec,
        z0,
        psi0,
        params,
    })
}

pub fn builtin_default(name: &str) -> Result<Setup> {
    builtin(name, &BTreeMap::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_probes, validate_many};

    #[test]
    fn every_builtin_validates_and_saturates_at_its_defaults() {
        for name in HAMILTONIAN_BUILTINS {
            let s = builtin_default(name).unwrap();
            let probes = default_probes(&s.model, &s.z0, 32);
            for r in validate_many(&s.model, &probes, 1e-10).unwrap() {
                assert!(r.valid && r.saturated, "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn unknown_names_and_parameters_are_usage_errors() {
        assert!(matches!(builtin_default("nope"), Err(CqError::Usage(_))));
        let mut o = BTreeMap::new();
        o.insert("bogus".to_string(), 1.0);
        assert!(matches!(builtin("diosi", &o), Err(CqError::Usage(_))));
    }

    #[test]
    fn ghz_lattice_size_limit() {
        assert!(matches!(ghz_lattice(6, 1.0, 1.0, 1.0), Err(CqError::Resource(_))));
        assert!(ghz_lattice(5, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn zero_coupling_diosi_is_decoupled() {
        let spec = diosi_linear(1.0, 0.0, 2.0, 0.0).unwrap();
        let m = build_hamiltonian_model(&spec).unwrap();
        let c = m.coefficients(&PhaseVector::zeros(2)).unwrap();
        assert!(c.lindblad.iter().all(Operator::is_zero));
    }

    #[test]
    fn sqrt_well_collapse_rate_is_position_independent() {
        let spec = sqrt_well(1.0, 1.0, 0.5).unwrap();
        let m = build_hamiltonian_model(&spec).unwrap();
        let rate = |q: f64| {
            let c = m.coefficients(&PhaseVector::from_column_slice(&[q, 0.0])).unwrap();
            let l = c.lindblad[1].to_dense()[(0, 0)].re;
            c.d0[(1, 1)].re * l * l
        };
        // D0·L² = (q/4γ²)·(λ²/4q) = λ²/16γ².
        for q in [0.3, 1.0, 7.0] {
            assert!((rate(q) - 1.0 / (16.0 * 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrt_well_domain_excludes_non_positive_q() {
        let s = builtin_default("sqrt_well").unwrap();
        assert!(s.model.domain_violation(&PhaseVector::from_column_slice(&[-0.1, 0.0])).is_some());
        assert!(s.model.domain_violation(&PhaseVector::from_column_slice(&[0.1, 0.0])).is_none());
    }

    #[test]
    fn left_state_pulls_toward_left_mass() {
        let s = builtin_default("mass_superposition").unwrap();
        let c = s.model.coefficients(&s.z0).unwrap();
        let left = basis_state(2, 0);
        let e: Vec<_> = c.lindblad.iter().map(|l| l.expectation_pure(&left)).collect();
        let f = c.drift(&e);
        // Force from (0, −0.5, 0) toward (−1, 0, 0): negative x, positive y.
        assert!(f[3] < 0.0 && f[4] > 0.0);
        let plus = plus_state();
        let e: Vec<_> = c.lindblad.iter().map(|l| l.expectation_pure(&plus)).collect();
        let f = c.drift(&e);
        // Mean-field force points at the midpoint.
        assert!(f[3].abs() < 1e-12 && f[4] > 0.0);
    }

    #[test]
    fn ghz_state_is_normalized() {
        for n in 1..=5 {
            assert!((ghz_state(n).norm() - 1.0).abs() < 1e-15);
        }
    }
}
