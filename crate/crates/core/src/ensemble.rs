//! Trajectory ensembles, their histogram estimate of the hybrid state
//! `ϱ(z, t)`, a finite-volume solver for the master equation, and the
//! statistical comparison between the two.
//!
//! Grid states store, per cell, the coordinates of `ϱ` in an orthonormal
//! Hermitian basis (`I/√d` first, then off-diagonal symmetric and
//! antisymmetric elements, then traceless diagonals; for a qubit this is
//! `I, σx, σy, σz` over `√2`). All fields are densities per unit resolved
//! phase-space volume.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CqError, Result};
use crate::integrator::{simulate, simulate_standard, Mode, QuantumState, SimConfig, Termination, Trajectory};
use crate::model::{CqModel, StandardScModel};
use crate::noise::NoiseStream;
use crate::numlin;
use crate::{CMatrix, PhaseVector, RMatrix, StateVector};

/// Resamples used for bootstrap error bars unless a caller asks otherwise.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Safety factor applied to every explicit-scheme stability limit.
pub const CFL_FACTOR: f64 = 0.4;

const INITIAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------- grid

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Axis {
    Resolved { min: f64, max: f64, cells: usize },
    /// Integrated over; contributes no factor to the cell volume.
    Marginal,
}

/// Rectangular grid over phase space. Cells are numbered row-major over the
/// resolved axes, last axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Axis>", into = "Vec<Axis>")]
pub struct PhaseGrid {
    axes: Vec<Axis>,
}

impl TryFrom<Vec<Axis>> for PhaseGrid {
    type Error = CqError;
    fn try_from(axes: Vec<Axis>) -> Result<Self> {
        PhaseGrid::new(axes)
    }
}

impl From<PhaseGrid> for Vec<Axis> {
    fn from(g: PhaseGrid) -> Self {
        g.axes
    }
}

impl PhaseGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(CqError::Usage("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if let Axis::Resolved { min, max, cells } = *a {
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return Err(CqError::Usage(format!("axis {i}: bounds [{min}, {max}] are not a finite interval")));
                }
                if cells < 2 {
                    return Err(CqError::Usage(format!("axis {i}: a resolved axis needs at least 2 cells")));
                }
            }
        }
        Ok(PhaseGrid { axes })
    }

    /// Grid with every axis resolved, from `(min, max, cells)` triples.
    pub fn resolved(bounds: &[(f64, f64, usize)]) -> Result<Self> {
        Self::new(
            bounds
                .iter()
                .map(|&(min, max, cells)| Axis::Resolved { min, max, cells })
                .collect(),
        )
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Phase-space dimension `n`.
    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn resolved_dims(&self) -> Vec<usize> {
        (0..self.axes.len())
            .filter(|&i| matches!(self.axes[i], Axis::Resolved { .. }))
            .collect()
    }

    pub fn fully_resolved(&self) -> bool {
        self.resolved_dims().len() == self.axes.len()
    }

    /// Cells per resolved axis.
    pub fn shape(&self) -> Vec<usize> {
        self.axes
            .iter()
            .filter_map(|a| match a {
                Axis::Resolved { cells, .. } => Some(*cells),
                Axis::Marginal => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, dim: usize) -> Option<f64> {
        match self.axes[dim] {
            Axis::Resolved { min, max, cells } => Some((max - min) / cells as f64),
            Axis::Marginal => None,
        }
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.axes.len()).filter_map(|i| self.spacing(i)).product()
    }

    /// Index of the cell containing `z`, or `None` outside the grid.
    pub fn cell_of(&self, z: &PhaseVector) -> Option<usize> {
        let mut idx = 0;
        for (i, a) in self.axes.iter().enumerate() {
            if let Axis::Resolved { min, max, cells } = *a {
                let x = z[i];
                if !(x >= min && x <= max) {
                    return None;
                }
                let k = (((x - min) / (max - min)) * cells as f64).floor() as usize;
                idx = idx * cells + k.min(cells - 1);
            }
        }
        Some(idx)
    }

    /// Multi-index over the resolved axes.
    pub fn unravel(&self, mut cell: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut out = vec![0; shape.len()];
        for (k, &s) in shape.iter().enumerate().rev() {
            out[k] = cell % s;
            cell /= s;
        }
        out
    }

    /// Cell center, resolved coordinates only.
    pub fn center(&self, cell: usize) -> Vec<f64> {
        let multi = self.unravel(cell);
        self.resolved_dims()
            .iter()
            .zip(multi)
            .map(|(&i, k)| {
                let Axis::Resolved { min, .. } = self.axes[i] else { unreachable!() };
                min + (k as f64 + 0.5) * self.spacing(i).unwrap_or(0.0)
            })
            .collect()
    }

    /// Cell center as a phase point; needs every axis resolved.
    pub fn point(&self, cell: usize) -> Option<PhaseVector> {
        self.fully_resolved()
            .then(|| PhaseVector::from_vec(self.center(cell)))
    }

    /// Whether `cell` touches the edge of the grid along any resolved axis.
    pub fn on_boundary(&self, cell: usize) -> bool {
        self.unravel(cell)
            .iter()
            .zip(self.shape())
            .any(|(&k, s)| k == 0 || k + 1 == s)
    }
}

// ---------------------------------------------------------------- basis

#[derive(Clone, Copy, Debug)]
enum Element {
    Identity,
    Sym(usize, usize),
    Anti(usize, usize),
    Diag(usize),
}

/// Orthonormal basis of `d × d` Hermitian matrices under `Tr(AB)`.
#[derive(Clone, Debug)]
pub struct HermitianBasis {
    d: usize,
    elements: Vec<Element>,
}

impl HermitianBasis {
    pub fn new(d: usize) -> Self {
        let mut elements = vec![Element::Identity];
        for j in 0..d {
            for k in j + 1..d {
                elements.push(Element::Sym(j, k));
                elements.push(Element::Anti(j, k));
            }
        }
        elements.extend((1..d).map(Element::Diag));
        HermitianBasis { d, elements }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        if self.d == 2 {
            return ["I", "X", "Y", "Z"].map(String::from).to_vec();
        }
        self.elements
            .iter()
            .map(|e| match *e {
                Element::Identity => "I".to_string(),
                Element::Sym(j, k) => format!("S{j}_{k}"),
                Element::Anti(j, k) => format!("A{j}_{k}"),
                Element::Diag(l) => format!("D{l}"),
            })
            .collect()
    }

    /// Coordinates `Tr(B_k ρ)` (real part).
    pub fn components(&self, rho: &CMatrix) -> Vec<f64> {
        let r2 = std::f64::consts::SQRT_2;
        self.elements
            .iter()
            .map(|e| match *e {
                Element::Identity => rho.trace().re / (self.d as f64).sqrt(),
                Element::Sym(j, k) => r2 * 0.5 * (rho[(j, k)].re + rho[(k, j)].re),
                Element::Anti(j, k) => -r2 * 0.5 * (rho[(j, k)].im - rho[(k, j)].im),
                Element::Diag(l) => {
                    let head: f64 = (0..l).map(|m| rho[(m, m)].re).sum();
                    (head - l as f64 * rho[(l, l)].re) / ((l * (l + 1)) as f64).sqrt()
                }
            })
            .collect()
    }

    /// `Σ c_k B_k`.
    pub fn matrix(&self, c: &[f64]) -> CMatrix {
        let d = self.d;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut m = CMatrix::zeros(d, d);
        for (e, &x) in self.elements.iter().zip(c) {
            match *e {
                Element::Identity => {
                    for i in 0..d {
                        m[(i, i)].re += x / (d as f64).sqrt();
                    }
                }
                Element::Sym(j, k) => {
                    m[(j, k)].re += x * s;
                    m[(k, j)].re += x * s;
                }
                Element::Anti(j, k) => {
                    m[(j, k)].im -= x * s;
                    m[(k, j)].im += x * s;
                }
                Element::Diag(l) => {
                    let norm = ((l * (l + 1)) as f64).sqrt();
                    for i in 0..l {
                        m[(i, i)].re += x / norm;
                    }
                    m[(l, l)].re -= x * l as f64 / norm;
                }
            }
        }
        m
    }

    pub fn element(&self, k: usize) -> CMatrix {
        let mut c = vec![0.0; self.len()];
        c[k] = 1.0;
        self.matrix(&c)
    }

    /// Real matrix of a Hermiticity-preserving linear map in this basis.
    pub fn superoperator(&self, f: impl Fn(&CMatrix) -> CMatrix) -> RMatrix {
        let n = self.len();
        let mut s = RMatrix::zeros(n, n);
        for l in 0..n {
            let img = self.components(&f(&self.element(l)));
            for (k, v) in img.into_iter().enumerate() {
                s[(k, l)] = v;
            }
        }
        s
    }
}

// ---------------------------------------------------------------- grid state

/// Hermitian-matrix-valued density on a [`PhaseGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct CQGridState {
    pub grid: PhaseGrid,
    pub d: usize,
    values: Vec<f64>,
}

impl CQGridState {
    pub fn zeros(grid: PhaseGrid, d: usize) -> Self {
        let len = grid.len() * d * d;
        CQGridState { grid, d, values: vec![0.0; len] }
    }

    /// Mass `ρ/Tr ρ` concentrated in the cell containing `z`.
    pub fn point_mass(grid: PhaseGrid, z: &PhaseVector, rho: &CMatrix) -> Result<Self> {
        if z.len() != grid.dims() {
            return Err(CqError::Dimension(format!("point has length {}, grid has {} axes", z.len(), grid.dims())));
        }
        let cell = grid
            .cell_of(z)
            .ok_or_else(|| CqError::Usage(format!("point {:?} lies outside the grid", z.as_slice())))?;
        let d = rho.nrows();
        let tr = rho.trace().re;
        let basis = HermitianBasis::new(d);
        let vol = grid.cell_volume();
        let mut out = CQGridState::zeros(grid, d);
        let c = basis.components(&(rho / Complex64::new(tr * vol, 0.0)));
        out.cell_mut(cell).copy_from_slice(&c);
        Ok(out)
    }

    /// Samples `f` at cell centers (resolved coordinates) and normalizes.
    pub fn from_fn(grid: PhaseGrid, d: usize, f: impl Fn(&[f64]) -> CMatrix) -> Result<Self> {
        let basis = HermitianBasis::new(d);
        let mut out = CQGridState::zeros(grid, d);
        for cell in 0..out.grid.len() {
            let c = basis.components(&f(&out.grid.center(cell)));
            out.cell_mut(cell).copy_from_slice(&c);
        }
        out.normalize()?;
        Ok(out)
    }

    /// `p·a + (1 − p)·b`.
    pub fn mixture(a: &CQGridState, b: &CQGridState, p: f64) -> Result<Self> {
        a.require_compatible(b)?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| p * x + (1.0 - p) * y).collect();
        Ok(CQGridState { grid: a.grid.clone(), d: a.d, values })
    }

    pub fn basis(&self) -> HermitianBasis {
        HermitianBasis::new(self.d)
    }

    fn width(&self) -> usize {
        self.d * self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        let w = self.width();
        &self.values[cell * w..(cell + 1) * w]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.values[cell * w..(cell + 1) * w]
    }

    pub fn cell_matrix(&self, cell: usize) -> CMatrix {
        self.basis().matrix(self.cell(cell))
    }

    /// `Tr ϱ` in a cell (a probability density).
    pub fn trace_density(&self, cell: usize) -> f64 {
        self.cell(cell)[0] * (self.d as f64).sqrt()
    }

    /// Classical marginal `Tr ϱ` per cell.
    pub fn marginal(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|c| self.trace_density(c)).collect()
    }

    /// `Σ Tr ϱ · vol`.
    pub fn total_trace(&self) -> f64 {
        self.marginal().iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `Σ ϱ · vol`, the quantum state averaged over phase space.
    pub fn integrated(&self) -> CMatrix {
        let w = self.width();
        let mut acc = vec![0.0; w];
        for cell in 0..self.grid.len() {
            for (a, x) in acc.iter_mut().zip(self.cell(cell)) {
                *a += x;
            }
        }
        let vol = self.grid.cell_volume();
        self.basis().matrix(&acc.iter().map(|x| x * vol).collect::<Vec<_>>())
    }

    /// Integral of `z_dim` against `Tr ϱ`.
    pub fn first_moment(&self, dim: usize) -> Option<f64> {
        let pos = self.grid.resolved_dims().iter().position(|&i| i == dim)?;
        let vol = self.grid.cell_volume();
        Some(
            (0..self.grid.len())
                .map(|c| self.grid.center(c)[pos] * self.trace_density(c) * vol)
                .sum(),
        )
    }

    /// Smallest eigenvalue over all cell matrices, relative to the largest
    /// cell trace.
    pub fn min_relative_eigenvalue(&self) -> f64 {
        let peak = self.marginal().into_iter().fold(0.0_f64, f64::max);
        if peak <= 0.0 {
            return 0.0;
        }
        let basis = self.basis();
        (0..self.grid.len())
            .map(|c| {
                let m = basis.matrix(self.cell(c));
                numlin::hermitian_eigenvalues(&m).first().copied().unwrap_or(0.0)
            })
            .fold(f64::INFINITY, f64::min)
            / peak
    }

    /// Trace mass in cells on the grid edge.
    pub fn boundary_mass(&self) -> f64 {
        let vol = self.grid.cell_volume();
        (0..self.grid.len())
            .filter(|&c| self.grid.on_boundary(c))
            .map(|c| self.trace_density(c) * vol)
            .sum()
    }

    /// Rescales to unit total trace.
    pub fn normalize(&mut self) -> Result<()> {
        let tr = self.total_trace();
        if !(tr > 0.0) {
            return Err(CqError::Usage("grid state has no positive mass to normalize".into()));
        }
        self.values.iter_mut().for_each(|x| *x /= tr);
        Ok(())
    }

    pub fn require_compatible(&self, other: &CQGridState) -> Result<()> {
        if self.grid != other.grid || self.d != other.d {
            return Err(CqError::Usage("grid states live on different grids or Hilbert spaces".into()));
        }
        Ok(())
    }

    /// `Σ |Tr ϱ_a − Tr ϱ_b| · vol`.
    pub fn marginal_l1(&self, other: &CQGridState) -> Result<f64> {
        self.require_compatible(other)?;
        Ok(l1_marginal(&self.values, &other.values, self.width(), self.d, self.grid.cell_volume()))
    }

    /// Per-component `Σ |c_k,a − c_k,b| · vol`.
    pub fn component_l1(&self, other: &CQGridState) -> Result<Vec<f64>> {
        self.require_compatible(other)?;
        Ok(l1_components(&self.values, &other.values, self.width(), self.grid.cell_volume()))
    }
}

fn l1_marginal(a: &[f64], b: &[f64], w: usize, d: usize, vol: f64) -> f64 {
    let s = (d as f64).sqrt();
    a.chunks(w).zip(b.chunks(w)).map(|(x, y)| (x[0] - y[0]).abs()).sum::<f64>() * s * vol
}

fn l1_components(a: &[f64], b: &[f64], w: usize, vol: f64) -> Vec<f64> {
    let mut out = vec![0.0; w];
    for (x, y) in a.chunks(w).zip(b.chunks(w)) {
        for k in 0..w {
            out[k] += (x[k] - y[k]).abs();
        }
    }
    out.iter_mut().for_each(|v| *v *= vol);
    out
}

// ---------------------------------------------------------------- ensembles

/// Where trajectories start.
#[derive(Clone, Debug)]
pub enum Initial {
    Point { z: PhaseVector, state: QuantumState },
    /// Each trajectory draws its cell with probability `Tr ϱ · vol`, a point
    /// uniformly inside it, and the normalized cell matrix as its state.
    Grid(CQGridState),
}

/// Draws initial conditions from a grid state.
pub struct GridSampler {
    grid: PhaseGrid,
    matrices: Vec<CMatrix>,
    cells: Vec<usize>,
    cdf: Vec<f64>,
}

impl GridSampler {
    pub fn new(state: &CQGridState) -> Result<Self> {
        if !state.grid.fully_resolved() {
            return Err(CqError::Usage("sampling initial conditions needs every grid axis resolved".into()));
        }
        let mut cells = Vec::new();
        let mut cdf = Vec::new();
        let mut matrices = Vec::new();
        let mut acc = 0.0;
        for c in 0..state.grid.len() {
            let tr = state.trace_density(c);
            if tr > 0.0 {
                acc += tr;
                cells.push(c);
                cdf.push(acc);
                let m = state.cell_matrix(c);
                matrices.push(&m / Complex64::new(tr, 0.0));
            }
        }
        if cells.is_empty() {
            return Err(CqError::Usage("initial grid state has no positive mass".into()));
        }
        cdf.iter_mut().for_each(|x| *x /= acc);
        Ok(GridSampler { grid: state.grid.clone(), matrices, cells, cdf })
    }

    /// Initial condition `index` for base seed `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> (PhaseVector, CMatrix) {
        let n = self.grid.dims();
        let u = NoiseStream::new(seed ^ INITIAL_SALT, index).uniforms(0, n + 1);
        let j = self.cdf.partition_point(|&c| c <= u[0]).min(self.cells.len() - 1);
        let center = self.grid.center(self.cells[j]);
        let z = PhaseVector::from_fn(n, |i, _| {
            let h = self.grid.spacing(i).unwrap_or(0.0);
            center[i] + (u[i + 1] - 0.5) * h
        });
        (z, self.matrices[j].clone())
    }
}

fn initial_state(rho: CMatrix, mode: Mode) -> Result<QuantumState> {
    if mode != Mode::Pure {
        return Ok(QuantumState::Density(rho));
    }
    let (vals, vecs) = numlin::hermitian_eigen(&rho);
    let top = vals.last().copied().unwrap_or(0.0);
    if top < 1.0 - 1e-9 {
        return Err(CqError::Usage(format!(
            "pure mode needs pure initial cell states; largest eigenvalue is {top}"
        )));
    }
    let psi: StateVector = vecs.column(vals.len() - 1).into_owned();
    Ok(QuantumState::Pure(psi))
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub sim: SimConfig,
    pub trajectories: usize,
    pub mode: Mode,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl EnsembleConfig {
    pub fn new(sim: SimConfig, trajectories: usize, mode: Mode) -> Self {
        EnsembleConfig { sim, trajectories, mode, workers: None }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }
}

/// Runs `f(k)` for `k < count` on `workers` threads, keeping index order.
pub fn run_indexed<T: Send>(
    count: usize,
    workers: Option<usize>,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let go = || (0..count).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match workers {
        None => go(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CqError::Resource(format!("thread pool: {e}")))?
            .install(go),
    }
}

fn start(initial: &Initial, sampler: Option<&GridSampler>, seed: u64, k: usize, mode: Mode) -> Result<(PhaseVector, QuantumState)> {
    match (initial, sampler) {
        (Initial::Point { z, state }, _) => Ok((z.clone(), state.clone())),
        (Initial::Grid(_), Some(s)) => {
            let (z, rho) = s.sample(seed, k as u64);
            Ok((z, initial_state(rho, mode)?))
        }
        (Initial::Grid(_), None) => unreachable!("sampler built for grid initial states"),
    }
}

/// Trajectory `k` runs on noise stream `sim.stream + k`, so results do not
/// depend on the number of workers or their scheduling.
pub fn run_ensemble(model: &CqModel, initial: &Initial, cfg: &EnsembleConfig) -> Result<Vec<Trajectory>> {
    if cfg.trajectories == 0 {
        return Err(CqError::Usage("an ensemble needs at least one trajectory".into()));
    }
    let sampler = match initial {
        Initial::Grid(g) => Some(GridSampler::new(g)?),
        Initial::Point { .. } => None,
    };
    let standard = (cfg.mode == Mode::Standard).then(|| StandardScModel::from_model(model));
    run_indexed(cfg.trajectories, cfg.workers, |k| {
        let sim = cfg.sim.clone().with_stream(cfg.sim.stream + k as u64);
        let (z, state) = start(initial, sampler.as_ref(), cfg.sim.seed, k, cfg.mode)?;
        match &standard {
            Some(sm) => simulate_standard(sm, &z, &state, &sim),
            None => simulate(model, &z, &state, &sim, cfg.mode),
        }
    })
}

/// Ensemble of the deterministic mean-field dynamics.
pub fn run_standard_ensemble(
    model: &StandardScModel,
    initial: &Initial,
    sim: &SimConfig,
    trajectories: usize,
    workers: Option<usize>,
) -> Result<Vec<Trajectory>> {
    if trajectories == 0 {
        return Err(CqError::Usage("an ensemble needs at least one trajectory".into()));
    }
    let sampler = match initial {
        Initial::Grid(g) => Some(GridSampler::new(g)?),
        Initial::Point { .. } => None,
    };
    run_indexed(trajectories, workers, |k| {
        let cfg = sim.clone().with_stream(sim.stream + k as u64);
        let (z, state) = start(initial, sampler.as_ref(), sim.seed, k, Mode::Density)?;
        simulate_standard(model, &z, &state, &cfg)
    })
}

// ---------------------------------------------------------------- estimation

/// One trajectory's share of a histogram estimate.
#[derive(Clone, Debug)]
pub struct Contribution {
    /// `None` when the trajectory is off the grid or left the model domain.
    pub cell: Option<usize>,
    /// Hermitian-basis coordinates of `w·ρ`, `w` being the joint-mode weight
    /// (1 otherwise).
    pub components: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct McEstimate {
    pub state: CQGridState,
    pub contributions: Vec<Contribution>,
}

impl McEstimate {
    /// Fraction of trajectories that did not land in a cell.
    pub fn outside_fraction(&self) -> f64 {
        let out = self.contributions.iter().filter(|c| c.cell.is_none()).count();
        out as f64 / self.contributions.len() as f64
    }

    fn histogram(&self, indices: impl Iterator<Item = usize>) -> Vec<f64> {
        let grid = &self.state.grid;
        let w = self.state.d * self.state.d;
        let norm = 1.0 / (self.contributions.len() as f64 * grid.cell_volume());
        let mut out = vec![0.0; grid.len() * w];
        for i in indices {
            let c = &self.contributions[i];
            if let Some(cell) = c.cell {
                for (o, x) in out[cell * w..(cell + 1) * w].iter_mut().zip(&c.components) {
                    *o += x * norm;
                }
            }
        }
        out
    }

    /// RMS L1 distance between bootstrap resamples and the estimate itself:
    /// the sampling-noise floor of any L1 distance involving this estimate.
    pub fn noise_floor(&self, resamples: usize, seed: u64) -> NoiseFloor {
        let n = self.contributions.len();
        let w = self.state.d * self.state.d;
        let vol = self.state.grid.cell_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m2 = 0.0;
        let mut t2 = 0.0;
        let mut c2 = vec![0.0; w];
        for _ in 0..resamples {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let h = self.histogram(idx.into_iter());
            let dm = l1_marginal(&h, &self.state.values, w, self.state.d, vol);
            m2 += dm * dm;
            let dc = l1_components(&h, &self.state.values, w, vol);
            let total: f64 = dc.iter().sum();
            t2 += total * total;
            for (a, x) in c2.iter_mut().zip(dc) {
                *a += x * x;
            }
        }
        let r = resamples.max(1) as f64;
        NoiseFloor {
            marginal: (m2 / r).sqrt(),
            components: c2.into_iter().map(|x| (x / r).sqrt()).collect(),
            total: (t2 / r).sqrt(),
        }
    }
}

/// Bootstrap noise floors of an estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFloor {
    pub marginal: f64,
    pub components: Vec<f64>,
    /// Floor of the component distances summed.
    pub total: f64,
}

fn sample_at_time(tr: &Trajectory, t: f64) -> Result<Option<&crate::integrator::Sample>> {
    let step = (t / tr.dt).round();
    if (step * tr.dt - t).abs() > 1e-6 * tr.dt {
        return Err(CqError::Usage(format!("time {t} is not a multiple of the step {}", tr.dt)));
    }
    let step = step as usize;
    if let Some(s) = tr.sample_at_step(step) {
        return Ok(Some(s));
    }
    match &tr.termination {
        Termination::DomainExit { step: k, .. } if *k < step => Ok(None),
        _ => Err(CqError::Usage(format!("trajectory {} has no sample at t = {t}", tr.stream))),
    }
}

/// Histogram estimate `ϱ(z, t) ≈ Σ_k w_k ρ_k δ(z − Z_k) / N` on `grid`.
/// Trajectories that left the model domain before `t` count towards `N`
/// but land in no cell.
pub fn estimate_cq_state(trajectories: &[Trajectory], t: f64, grid: &PhaseGrid) -> Result<McEstimate> {
    let first = trajectories
        .first()
        .ok_or_else(|| CqError::Usage("cannot estimate a state from an empty ensemble".into()))?;
    let d = first.samples[0].state.dim();
    let basis = HermitianBasis::new(d);
    let mut contributions = Vec::with_capacity(trajectories.len());
    for tr in trajectories {
        let Some(s) = sample_at_time(tr, t)? else {
            contributions.push(Contribution { cell: None, components: vec![0.0; d * d] });
            continue;
        };
        if s.z.len() != grid.dims() {
            return Err(CqError::Dimension(format!("trajectory has {} coordinates, grid has {}", s.z.len(), grid.dims())));
        }
        let weight = if tr.mode == Mode::Joint { s.log_weight.exp() } else { 1.0 };
        let mut components = basis.components(&s.state.density());
        components.iter_mut().for_each(|x| *x *= weight);
        contributions.push(Contribution { cell: grid.cell_of(&s.z), components });
    }
    let mut est = McEstimate {
        state: CQGridState::zeros(grid.clone(), d),
        contributions,
    };
    est.state.values = est.histogram(0..trajectories.len());
    let outside = est.outside_fraction();
    if outside > 0.01 {
        log::warn!("{:.2}% of trajectories fall outside the grid at t = {t}", 100.0 * outside);
    }
    Ok(est)
}

/// L1 distances between two grid states with sampling-noise floors.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub marginal_l1: f64,
    pub marginal_err: f64,
    pub labels: Vec<String>,
    pub component_l1: Vec<f64>,
    pub component_err: Vec<f64>,
    pub resamples: usize,
    pub outside_fraction: f64,
}

impl ComparisonReport {
    /// Every distance is at most `max(floor, k · err)`.
    pub fn passes(&self, floor: f64, k: f64) -> bool {
        let ok = |d: f64, e: f64| d <= floor.max(k * e) + 1e-12;
        ok(self.marginal_l1, self.marginal_err)
            && self.component_l1.iter().zip(&self.component_err).all(|(&d, &e)| ok(d, e))
    }
}

/// Compares a Monte Carlo estimate with a deterministic grid state (the
/// master-equation solution). Errors are bootstrap noise floors of the
/// estimate over `resamples` resamples of its trajectories.
pub fn compare(mc: &McEstimate, pde: &CQGridState, resamples: usize, seed: u64) -> Result<ComparisonReport> {
    let marginal_l1 = mc.state.marginal_l1(pde)?;
    let component_l1 = mc.state.component_l1(pde)?;
    let floor = mc.noise_floor(resamples, seed);
    Ok(ComparisonReport {
        marginal_l1,
        marginal_err: floor.marginal,
        labels: mc.state.basis().labels(),
        component_l1,
        component_err: floor.components,
        resamples,
        outside_fraction: mc.outside_fraction(),
    })
}

/// Compares two independent Monte Carlo estimates; floors add in quadrature.
pub fn compare_estimates(a: &McEstimate, b: &McEstimate, resamples: usize, seed: u64) -> Result<ComparisonReport> {
    let marginal_l1 = a.state.marginal_l1(&b.state)?;
    let component_l1 = a.state.component_l1(&b.state)?;
    let fa = a.noise_floor(resamples, seed);
    let fb = b.noise_floor(resamples, seed.wrapping_add(1));
    Ok(ComparisonReport {
        marginal_l1,
        marginal_err: fa.marginal.hypot(fb.marginal),
        labels: a.state.basis().labels(),
        component_l1,
        component_err: fa.components.iter().zip(&fb.components).map(|(x, y)| x.hypot(*y)).collect(),
        resamples,
        outside_fraction: a.outside_fraction().max(b.outside_fraction()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Mean and standard error of `Re Tr{A(Z_t) ρ_t}` at every recorded step of
/// the first trajectory. Joint-mode samples are weighted.
pub fn expectation_series(
    trajectories: &[Trajectory],
    observable: impl Fn(&PhaseVector) -> CMatrix,
) -> Result<Vec<SeriesPoint>> {
    let first = trajectories
        .first()
        .ok_or_else(|| CqError::Usage("expectation over an empty ensemble".into()))?;
    let mut out = Vec::with_capacity(first.samples.len());
    for s0 in &first.samples {
        let vals: Vec<f64> = trajectories
            .iter()
            .filter_map(|tr| tr.sample_at_step(s0.step).map(|s| (tr.mode, s)))
            .map(|(mode, s)| {
                let w = if mode == Mode::Joint { s.log_weight.exp() } else { 1.0 };
                w * s.state.expectation_matrix(&observable(&s.z)).re
            })
            .collect();
        let (mean, stderr) = mean_stderr(&vals);
        out.push(SeriesPoint { step: s0.step, t: s0.t, mean, stderr, count: vals.len() });
    }
    Ok(out)
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------- master equation

/// Time-step limits of the explicit solver, each already scaled by
/// [`CFL_FACTOR`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityBound {
    /// `Δz_i² / (2 max D2_ii)`, smallest over axes.
    pub diffusive: f64,
    /// `Δz / max |drift|`, the drift speeds being the eigenvalues of the
    /// matrix-valued flux.
    pub advective: f64,
    /// `1 / ‖local generator‖` from the Hamiltonian and Lindblad terms.
    pub local: f64,
}

impl StabilityBound {
    pub fn limit(&self) -> f64 {
        self.diffusive.min(self.advective).min(self.local)
    }
}

#[derive(Clone, Debug)]
pub struct PdeSolution {
    pub state: CQGridState,
    pub steps: usize,
    pub dt: f64,
    pub bound: StabilityBound,
    /// `|ΔΣ Tr ϱ vol| / T`.
    pub trace_drift: f64,
    pub min_relative_eigenvalue: f64,
    pub boundary_mass: f64,
}

enum FaceFlux {
    /// Symmetric flux matrix `A = R Λ Rᵀ`: upwinding per characteristic.
    Characteristic { r: Vec<f64>, lambda: Vec<f64> },
    /// General flux matrix: local Lax–Friedrichs with speed bound `alpha`.
    Rusanov { a: Vec<f64>, alpha: f64 },
}

struct Discretization {
    grid: PhaseGrid,
    shape: Vec<usize>,
    strides: Vec<usize>,
    h: Vec<f64>,
    w: usize,
    /// Local generator per cell, row-major `w × w`.
    local: Vec<Vec<f64>>,
    /// `D2` per cell, row-major `n × n`.
    d2: Vec<Vec<f64>>,
    /// `faces[i][cell]`: flux across the upper face of `cell` along axis `i`.
    faces: Vec<Vec<Option<FaceFlux>>>,
    bound: StabilityBound,
}

fn flat(m: &RMatrix) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

fn spectral_norm(m: &RMatrix) -> f64 {
    let g = m.transpose() * m;
    numlin::hermitian_eigenvalues(&g).last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

impl Discretization {
    fn new(model: &CqModel, grid: &PhaseGrid) -> Result<Self> {
        if !grid.fully_resolved() || grid.dims() > 2 {
            return Err(CqError::Unsupported(format!(
                "the master-equation solver handles at most 2 classical dimensions, all resolved (got {})",
                grid.dims()
            )));
        }
        if grid.dims() != model.n {
            return Err(CqError::Dimension(format!("grid has {} axes, model has n = {}", grid.dims(), model.n)));
        }
        let n = model.n;
        let shape = grid.shape();
        let mut strides = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let h: Vec<f64> = (0..n).map(|i| grid.spacing(i).unwrap_or(1.0)).collect();
        let basis = HermitianBasis::new(model.d);
        let w = basis.len();
        let cells = grid.len();
        let in_domain = |z: &PhaseVector| -> Result<()> {
            match model.domain_violation(z) {
                Some(reason) => Err(CqError::Usage(format!(
                    "grid point {:?} is outside the model domain: {reason}",
                    z.as_slice()
                ))),
                None => Ok(()),
            }
        };

        let mut local = Vec::with_capacity(cells);
        let mut d2 = Vec::with_capacity(cells);
        let mut max_d2 = vec![0.0_f64; n];
        let mut max_local: f64 = 0.0;
        for cell in 0..cells {
            let z = grid.point(cell).expect("fully resolved");
            in_domain(&z)?;
            let c = model.coefficients(&z)?;
            let g = basis.superoperator(|x| local_generator(&c, x));
            max_local = max_local.max(spectral_norm(&g));
            local.push(flat(&g));
            let dd = c.d2();
            for i in 0..n {
                max_d2[i] = max_d2[i].max(dd[(i, i)]);
            }
            d2.push(flat(&dd));
        }

        let mut faces = Vec::with_capacity(n);
        let mut adv = f64::INFINITY;
        for i in 0..n {
            let mut row = Vec::with_capacity(cells);
            let mut axis_speed: f64 = 0.0;
            for cell in 0..cells {
                let k = (cell / strides[i]) % shape[i];
                if k + 1 == shape[i] {
                    row.push(None);
                    continue;
                }
                let mut z = grid.point(cell).expect("fully resolved");
                z[i] += 0.5 * h[i];
                in_domain(&z)?;
                let c = model.coefficients(&z)?;
                let a = basis.superoperator(|x| flux_map(&c, i, x));
                let asym = (&a - a.transpose()).abs().max();
                let face = if asym <= 1e-12 * a.abs().max().max(1.0) {
                    let sym = (&a + a.transpose()) * 0.5;
                    let eig = nalgebra::SymmetricEigen::new(sym);
                    let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                    axis_speed = lambda.iter().fold(axis_speed, |m, l| m.max(l.abs()));
                    FaceFlux::Characteristic { r: flat(&eig.eigenvectors), lambda }
                } else {
                    let alpha = spectral_norm(&a);
                    axis_speed = axis_speed.max(alpha);
                    FaceFlux::Rusanov { a: flat(&a), alpha }
                };
                row.push(Some(face));
            }
            if axis_speed > 0.0 {
                adv = adv.min(h[i] / axis_speed);
            }
            faces.push(row);
        }
        let diffusive = (0..n)
            .filter(|&i| max_d2[i] > 0.0)
            .map(|i| CFL_FACTOR * h[i] * h[i] / (2.0 * max_d2[i]))
            .fold(f64::INFINITY, f64::min);
        let bound = StabilityBound {
            diffusive,
            advective: CFL_FACTOR * adv,
            local: if max_local > 0.0 { CFL_FACTOR / max_local } else { f64::INFINITY },
        };
        Ok(Discretization { grid: grid.clone(), shape, strides, h, w, local, d2, faces, bound })
    }

    fn neighbor(&self, cell: usize, axis: usize, offset: isize) -> Option<usize> {
        let k = ((cell / self.strides[axis]) % self.shape[axis]) as isize + offset;
        if k < 0 || k >= self.shape[axis] as isize {
            return None;
        }
        Some((cell as isize + offset * self.strides[axis] as isize) as usize)
    }

    /// Time derivative of the state `u` (flattened, `w` values per cell).
    fn rhs(&self, u: &[f64], du: &mut [f64]) {
        let w = self.w;
        let n = self.shape.len();
        let cells = self.grid.len();
        du.iter_mut().for_each(|x| *x = 0.0);
        for cell in 0..cells {
            let g = &self.local[cell];
            let uc = &u[cell * w..(cell + 1) * w];
            let out = &mut du[cell * w..(cell + 1) * w];
            for r in 0..w {
                out[r] += (0..w).map(|c| g[r * w + c] * uc[c]).sum::<f64>();
            }
        }
        let mut flux = vec![0.0; w];
        let mut scratch = Scratch::new(w);
        for i in 0..n {
            for cell in 0..cells {
                let Some(face) = &self.faces[i][cell] else { continue };
                let right = cell + self.strides[i];
                flux.iter_mut().for_each(|x| *x = 0.0);
                self.advective_flux(face, u, cell, right, i, &mut flux, &mut scratch);
                self.diffusive_flux(u, cell, right, i, &mut flux);
                for k in 0..w {
                    let f = flux[k] / self.h[i];
                    du[cell * w + k] -= f;
                    du[right * w + k] += f;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn advective_flux(&self, face: &FaceFlux, u: &[f64], a: usize, b: usize, axis: usize, flux: &mut [f64], s: &mut Scratch) {
        let w = self.w;
        let cell = |c: usize| &u[c * w..(c + 1) * w];
        let lo = self.neighbor(a, axis, -1);
        let hi = self.neighbor(b, axis, 1);
        match face {
            FaceFlux::Characteristic { r, lambda } => {
                // Characteristic coordinates v_k = r_kᵀ u at the stencil points.
                let proj = |x: &[f64], out: &mut Vec<f64>| {
                    for k in 0..w {
                        out[k] = (0..w).map(|m| r[m * w + k] * x[m]).sum();
                    }
                };
                proj(cell(a), &mut s.va);
                proj(cell(b), &mut s.vb);
                if let Some(l) = lo {
                    proj(cell(l), &mut s.vlo);
                }
                if let Some(h) = hi {
                    proj(cell(h), &mut s.vhi);
                }
                for k in 0..w {
                    let lam = lambda[k];
                    if lam == 0.0 {
                        continue;
                    }
                    let v = if lam > 0.0 {
                        let slope = lo.map_or(0.0, |_| minmod(s.va[k] - s.vlo[k], s.vb[k] - s.va[k]));
                        s.va[k] + 0.5 * slope
                    } else {
                        let slope = hi.map_or(0.0, |_| minmod(s.vb[k] - s.va[k], s.vhi[k] - s.vb[k]));
                        s.vb[k] - 0.5 * slope
                    };
                    for m in 0..w {
                        flux[m] += r[m * w + k] * lam * v;
                    }
                }
            }
            FaceFlux::Rusanov { a: mat, alpha } => {
                for k in 0..w {
                    let ua = cell(a)[k];
                    let ub = cell(b)[k];
                    let sl = lo.map_or(0.0, |l| minmod(ua - cell(l)[k], ub - ua));
                    let sr = hi.map_or(0.0, |h| minmod(ub - ua, cell(h)[k] - ub));
                    s.va[k] = ua + 0.5 * sl;
                    s.vb[k] = ub - 0.5 * sr;
                }
                for m in 0..w {
                    let mut f = 0.0;
                    for k in 0..w {
                        f += 0.5 * mat[m * w + k] * (s.va[k] + s.vb[k]);
                    }
                    flux[m] += f - 0.5 * alpha * (s.vb[m] - s.va[m]);
                }
            }
        }
    }

    /// Flux of `−∂_j (D2_ij u)` summed over `j` across the face between `a`
    /// and `b` along axis `i`.
    fn diffusive_flux(&self, u: &[f64], a: usize, b: usize, i: usize, flux: &mut [f64]) {
        let w = self.w;
        let n = self.shape.len();
        let dterm = |c: usize, j: usize| self.d2[c][i * n + j];
        let dii_a = dterm(a, i);
        let dii_b = dterm(b, i);
        if dii_a != 0.0 || dii_b != 0.0 {
            for k in 0..w {
                flux[k] -= (dii_b * u[b * w + k] - dii_a * u[a * w + k]) / self.h[i];
            }
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            for &c in &[a, b] {
                let up = self.neighbor(c, j, 1);
                let dn = self.neighbor(c, j, -1);
                let (p, q, span) = match (up, dn) {
                    (Some(p), Some(q)) => (p, q, 2.0),
                    (Some(p), None) => (p, c, 1.0),
                    (None, Some(q)) => (c, q, 1.0),
                    (None, None) => continue,
                };
                let (dp, dq) = (dterm(p, j), dterm(q, j));
                if dp == 0.0 && dq == 0.0 {
                    continue;
                }
                for k in 0..w {
                    let grad = (dp * u[p * w + k] - dq * u[q * w + k]) / (span * self.h[j]);
                    flux[k] -= 0.5 * grad;
                }
            }
        }
    }
}

struct Scratch {
    va: Vec<f64>,
    vb: Vec<f64>,
    vlo: Vec<f64>,
    vhi: Vec<f64>,
}

impl Scratch {
    fn new(w: usize) -> Self {
        Scratch { va: vec![0.0; w], vb: vec![0.0; w], vlo: vec![0.0; w], vhi: vec![0.0; w] }
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// `−i[H, X] + Σ D0_ab (L_a X L_b† − ½{L_b† L_a, X})`.
fn local_generator(c: &crate::Coefficients, x: &CMatrix) -> CMatrix {
    let i = Complex64::new(0.0, 1.0);
    let h = c.hamiltonian.to_dense();
    let mut out = (&h * x - x * &h) * (-i);
    let dense: Vec<CMatrix> = c.lindblad.iter().map(|l| l.to_dense()).collect();
    for (a, la) in dense.iter().enumerate() {
        for (b, lb) in dense.iter().enumerate() {
            let dab = c.d0[(a, b)];
            if dab == Complex64::new(0.0, 0.0) {
                continue;
            }
            let lbd = lb.adjoint();
            let k = &lbd * la;
            out += (la * x * &lbd - (&k * x + x * &k) * Complex64::new(0.5, 0.0)) * dab;
        }
    }
    out
}

/// Matrix-valued drift flux along axis `i`:
/// `D1C_i X + Σ_a (D1_ia X L_a† + conj(D1_ia) L_a X)`.
fn flux_map(c: &crate::Coefficients, i: usize, x: &CMatrix) -> CMatrix {
    let mut out = x * Complex64::new(c.d1c[i], 0.0);
    for (a, l) in c.lindblad.iter().enumerate() {
        let g = c.d1[(i, a)];
        if g == Complex64::new(0.0, 0.0) {
            continue;
        }
        let ld = l.to_dense();
        out += x * ld.adjoint() * g + &ld * x * g.conj();
    }
    out
}

/// Stability limits of [`solve_master_equation`] for `model` on `grid`.
pub fn stability_bound(model: &CqModel, grid: &PhaseGrid) -> Result<StabilityBound> {
    Ok(Discretization::new(model, grid)?.bound)
}

/// Integrates the master equation from `initial` to time `t_final`.
///
/// Finite volumes on the grid: drift fluxes are upwinded per characteristic
/// of the matrix-valued flux with minmod-limited reconstruction, diffusion
/// uses central differences of `D2 ϱ`, Hamiltonian and Lindblad terms act
/// pointwise, and boundaries carry no flux. Time stepping is Heun's method
/// with the largest uniform step not exceeding `dt`.
pub fn solve_master_equation(model: &CqModel, initial: &CQGridState, t_final: f64, dt: f64) -> Result<PdeSolution> {
    if initial.d != model.d {
        return Err(CqError::Dimension(format!("grid state has d = {}, model has d = {}", initial.d, model.d)));
    }
    if !(t_final >= 0.0 && dt > 0.0) {
        return Err(CqError::Usage(format!("need t_final ≥ 0 and dt > 0 (got {t_final}, {dt})")));
    }
    let disc = Discretization::new(model, &initial.grid)?;
    let limit = disc.bound.limit();
    if dt > limit {
        return Err(CqError::StepSize(format!(
            "dt = {dt:.3e} exceeds the stability bound {limit:.3e} (diffusive {:.3e}, advective {:.3e}, local {:.3e})",
            disc.bound.diffusive, disc.bound.advective, disc.bound.local
        )));
    }
    let steps = (t_final / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if steps > 0 { t_final / steps as f64 } else { 0.0 };
    let mut u = initial.values.clone();
    let mut k1 = vec![0.0; u.len()];
    let mut k2 = vec![0.0; u.len()];
    let mut mid = vec![0.0; u.len()];
    let start = initial.total_trace();
    for _ in 0..steps {
        disc.rhs(&u, &mut k1);
        for ((m, x), k) in mid.iter_mut().zip(&u).zip(&k1) {
            *m = x + h * k;
        }
        disc.rhs(&mid, &mut k2);
        for ((x, a), b) in u.iter_mut().zip(&k1).zip(&k2) {
            *x += 0.5 * h * (a + b);
        }
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(CqError::NonFinite("master-equation solution".into()));
    }
    let state = CQGridState { grid: initial.grid.clone(), d: initial.d, values: u };
    let end = state.total_trace();
    Ok(PdeSolution {
        trace_drift: if t_final > 0.0 { (end - start).abs() / t_final } else { 0.0 },
        min_relative_eigenvalue: state.min_relative_eigenvalue(),
        boundary_mass: state.boundary_mass(),
        state,
        steps,
        dt: h,
        bound: disc.bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{explicit_qubit_model, Coefficients};
    use crate::operator::{pauli, Operator};
    use crate::zoo;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn pv(x: &[f64]) -> PhaseVector {
        PhaseVector::from_column_slice(x)
    }

    #[test]
    fn basis_is_orthonormal_and_round_trips() {
        for d in [1, 2, 3, 4] {
            let b = HermitianBasis::new(d);
            assert_eq!(b.len(), d * d);
            for k in 0..b.len() {
                let ek = b.element(k);
                assert!(numlin::hermiticity_residual(&ek) < 1e-15);
                for l in 0..b.len() {
                    let ip = (&ek * b.element(l)).trace();
                    let want = if k == l { 1.0 } else { 0.0 };
                    assert!((ip - c(want)).norm() < 1e-14, "d {d} ({k}, {l})");
                }
            }
            let m = CMatrix::from_fn(d, d, |i, j| Complex64::new((i + 2 * j) as f64, i as f64 - j as f64));
            let herm = (&m + m.adjoint()) * c(0.5);
            assert!((b.matrix(&b.components(&herm)) - &herm).norm() < 1e-13);
        }
    }

    #[test]
    fn qubit_basis_is_pauli_over_root_two() {
        let b = HermitianBasis::new(2);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.element(1) - pauli::sigma_x() * c(s)).norm() < 1e-15);
        assert!((b.element(2) - pauli::sigma_y() * c(s)).norm() < 1e-15);
        assert!((b.element(3) - pauli::sigma_z().to_dense() * c(s)).norm() < 1e-15);
        assert_eq!(b.labels(), vec!["I", "X", "Y", "Z"]);
    }

    #[test]
    fn grid_indexing() {
        let g = PhaseGrid::resolved(&[(0.0, 1.0, 4), (-1.0, 1.0, 2)]).unwrap();
        assert_eq!(g.len(), 8);
        assert!((g.cell_volume() - 0.25 * 1.0).abs() < 1e-15);
        let cell = g.cell_of(&pv(&[0.3, 0.5])).unwrap();
        assert_eq!(g.unravel(cell), vec![1, 1]);
        assert_eq!(g.center(cell), vec![0.375, 0.5]);
        assert_eq!(g.cell_of(&pv(&[1.0, 1.0])), Some(7));
        assert_eq!(g.cell_of(&pv(&[1.1, 0.0])), None);
        assert!(g.on_boundary(0));
        assert!(PhaseGrid::resolved(&[(0.0, 1.0, 1)]).is_err());
        assert!(PhaseGrid::resolved(&[(1.0, 0.0, 4)]).is_err());
        let m = PhaseGrid::new(vec![Axis::Marginal, Axis::Resolved { min: 0.0, max: 1.0, cells: 2 }]).unwrap();
        assert_eq!(m.cell_of(&pv(&[1e9, 0.7])), Some(1));
        assert!(m.point(0).is_none());
    }

    #[test]
    fn grid_serializes_as_axis_list() {
        let g = PhaseGrid::new(vec![Axis::Resolved { min: -1.0, max: 1.0, cells: 8 }, Axis::Marginal]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: PhaseGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad = r#"[{"kind":"resolved","min":0.0,"max":1.0,"cells":1}]"#;
        assert!(serde_json::from_str::<PhaseGrid>(bad).is_err());
    }

    fn diosi() -> CqModel {
        zoo::builtin_default("diosi").unwrap().model
    }

    #[test]
    fn single_trajectory_puts_rho_over_volume_in_its_cell() {
        let m = diosi();
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 4), (-3.0, 3.0, 6)]).unwrap();
        let cfg = SimConfig::new(0.1, 1e-3, 5).endpoints_only();
        let tr = simulate(&m, &pv(&[0.0, 0.0]), &QuantumState::Pure(zoo::plus_state()), &cfg, Mode::Pure).unwrap();
        let est = estimate_cq_state(std::slice::from_ref(&tr), 0.1, &grid).unwrap();
        let cell = grid.cell_of(&tr.last().z).unwrap();
        let want = tr.last().state.density() / c(grid.cell_volume());
        assert!((est.state.cell_matrix(cell) - want).norm() < 1e-12);
        for other in (0..grid.len()).filter(|&k| k != cell) {
            assert!(est.state.cell(other).iter().all(|&x| x == 0.0));
        }
        assert!((est.state.total_trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ensemble_is_a_usage_error() {
        let grid = PhaseGrid::resolved(&[(0.0, 1.0, 2)]).unwrap();
        assert!(matches!(estimate_cq_state(&[], 0.0, &grid), Err(CqError::Usage(_))));
        assert!(expectation_series(&[], |_| CMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn ensembles_do_not_depend_on_worker_count() {
        let m = diosi();
        let init = Initial::Point { z: pv(&[0.0, 0.0]), state: QuantumState::Pure(zoo::plus_state()) };
        let sim = SimConfig::new(0.05, 1e-3, 17).endpoints_only();
        let a = run_ensemble(&m, &init, &EnsembleConfig::new(sim.clone(), 12, Mode::Pure).with_workers(1)).unwrap();
        let b = run_ensemble(&m, &init, &EnsembleConfig::new(sim, 12, Mode::Pure).with_workers(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].last().z, a[1].last().z);
    }

    #[test]
    fn integrated_grid_matches_raw_ensemble_mean() {
        let m = diosi();
        let init = Initial::Point { z: pv(&[0.0, 0.0]), state: QuantumState::Pure(zoo::plus_state()) };
        let sim = SimConfig::new(0.2, 1e-3, 3).endpoints_only();
        let trs = run_ensemble(&m, &init, &EnsembleConfig::new(sim, 200, Mode::Density)).unwrap();
        let grid = PhaseGrid::resolved(&[(-5.0, 5.0, 16), (-10.0, 10.0, 16)]).unwrap();
        let est = estimate_cq_state(&trs, 0.2, &grid).unwrap();
        let raw = trs.iter().fold(CMatrix::zeros(2, 2), |acc, t| acc + t.last().state.density()) / c(trs.len() as f64);
        assert!((est.state.integrated() - raw).norm() < 1e-12);
    }

    #[test]
    fn identity_expectation_is_one_and_sigma_z_is_a_martingale() {
        let m = diosi();
        let init = Initial::Point { z: pv(&[0.0, 0.0]), state: QuantumState::Pure(zoo::plus_state()) };
        let sim = SimConfig::new(0.5, 1e-3, 8).with_record_every(100);
        let trs = run_ensemble(&m, &init, &EnsembleConfig::new(sim, 400, Mode::Pure)).unwrap();
        let ones = expectation_series(&trs, |_| CMatrix::identity(2, 2)).unwrap();
        assert!(ones.iter().all(|p| (p.mean - 1.0).abs() < 1e-12));
        let sz = expectation_series(&trs, |_| pauli::sigma_z().to_dense()).unwrap();
        assert_eq!(sz.len(), 6);
        for p in &sz[1..] {
            assert!(p.mean.abs() < 3.0 * p.stderr + 1e-12, "{p:?}");
        }
    }

    #[test]
    fn grid_sampler_respects_cells_and_states() {
        let grid = PhaseGrid::resolved(&[(0.0, 1.0, 2), (0.0, 1.0, 2)]).unwrap();
        let mut s = CQGridState::zeros(grid.clone(), 2);
        let b = HermitianBasis::new(2);
        let up = CMatrix::from_diagonal(&nalgebra::dvector![c(1.0), c(0.0)]);
        let dn = CMatrix::from_diagonal(&nalgebra::dvector![c(0.0), c(1.0)]);
        s.cell_mut(0).copy_from_slice(&b.components(&(&up * c(1.0))));
        s.cell_mut(3).copy_from_slice(&b.components(&(&dn * c(3.0))));
        s.normalize().unwrap();
        let sampler = GridSampler::new(&s).unwrap();
        let mut in3 = 0;
        for k in 0..4000 {
            let (z, rho) = sampler.sample(1, k);
            let cell = grid.cell_of(&z).unwrap();
            if cell == 3 {
                in3 += 1;
                assert!((rho - &dn).norm() < 1e-12);
            } else {
                assert_eq!(cell, 0);
                assert!((rho - &up).norm() < 1e-12);
            }
        }
        let frac = in3 as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 4.0 * (0.75 * 0.25 / 4000.0f64).sqrt());
    }

    #[test]
    fn identical_estimates_compare_to_zero() {
        let m = diosi();
        let init = Initial::Point { z: pv(&[0.0, 0.0]), state: QuantumState::Pure(zoo::plus_state()) };
        let sim = SimConfig::new(0.1, 1e-3, 3).endpoints_only();
        let trs = run_ensemble(&m, &init, &EnsembleConfig::new(sim, 300, Mode::Pure)).unwrap();
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 16), (-3.0, 3.0, 16)]).unwrap();
        let est = estimate_cq_state(&trs, 0.1, &grid).unwrap();
        let r = compare(&est, &est.state, 50, 0).unwrap();
        assert_eq!(r.marginal_l1, 0.0);
        assert!(r.component_l1.iter().all(|&x| x == 0.0));
        assert!(r.marginal_err > 0.0);
        assert!(r.passes(0.0, 3.0));
        let other = CQGridState::zeros(PhaseGrid::resolved(&[(0.0, 1.0, 2), (0.0, 1.0, 2)]).unwrap(), 2);
        assert!(matches!(compare(&est, &other, 10, 0), Err(CqError::Usage(_))));
    }

    #[test]
    fn independent_ensembles_agree_within_noise() {
        let m = diosi();
        let init = Initial::Point { z: pv(&[0.0, 0.0]), state: QuantumState::Pure(zoo::plus_state()) };
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 12), (-3.0, 3.0, 12)]).unwrap();
        let run = |seed| {
            let sim = SimConfig::new(0.2, 1e-3, seed).endpoints_only();
            let trs = run_ensemble(&m, &init, &EnsembleConfig::new(sim, 2000, Mode::Pure)).unwrap();
            estimate_cq_state(&trs, 0.2, &grid).unwrap()
        };
        let r = compare_estimates(&run(1), &run(2), 100, 9).unwrap();
        assert!(r.passes(0.0, 3.0), "{r:?}");
    }

    fn decoupled(sigma: f64, drift: f64) -> CqModel {
        CqModel::new("decoupled", 1, 2, 1, move |_| Coefficients {
            lindblad: vec![Operator::zeros(2)],
            d0: CMatrix::zeros(1, 1),
            d1: CMatrix::zeros(1, 1),
            d1c: pv(&[drift]),
            sigma: crate::RMatrix::from_element(1, 1, sigma),
            hamiltonian: Operator::zeros(2),
        })
    }

    fn gaussian_cells(grid: &PhaseGrid, mean: f64, var: f64) -> Vec<f64> {
        // Exact cell averages of the normal density.
        let Axis::Resolved { min, .. } = grid.axes()[0] else { unreachable!() };
        let h = grid.spacing(0).unwrap();
        (0..grid.len())
            .map(|k| {
                let a = (min + k as f64 * h - mean) / (2.0 * var).sqrt();
                let b = (min + (k + 1) as f64 * h - mean) / (2.0 * var).sqrt();
                0.5 * (erf(b) - erf(a)) / h
            })
            .collect()
    }

    // Abramowitz–Stegun 7.1.26 is too coarse for an oracle; use the series
    // and continued fraction split instead.
    fn erf(x: f64) -> f64 {
        if x < 0.0 {
            return -erf(-x);
        }
        if x < 3.0 {
            let mut term = x;
            let mut sum = x;
            let mut k = 0.0;
            while term.abs() > 1e-17 * sum.abs() {
                k += 1.0;
                term *= -x * x / k;
                sum += term / (2.0 * k + 1.0);
            }
            return 2.0 / std::f64::consts::PI.sqrt() * sum;
        }
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = k as f64 * 0.5 / (x + f);
        }
        1.0 - (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
    }

    #[test]
    fn erf_oracle_sanity() {
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(3.5) - 0.999_999_256_901_627_7).abs() < 1e-15);
    }

    fn heat_kernel_error(cells: usize) -> f64 {
        let sigma = 1.0;
        let var0 = 0.05;
        let t = 0.2;
        let grid = PhaseGrid::resolved(&[(-3.0, 3.0, cells)]).unwrap();
        let model = decoupled(sigma, 0.0);
        let init = gaussian_cells(&grid, 0.0, var0);
        let rho = CMatrix::identity(2, 2) * c(0.5);
        let b = HermitianBasis::new(2);
        let mut s0 = CQGridState::zeros(grid.clone(), 2);
        for (k, p) in init.iter().enumerate() {
            s0.cell_mut(k).copy_from_slice(&b.components(&(&rho * c(*p))));
        }
        let bound = stability_bound(&model, &grid).unwrap();
        let sol = solve_master_equation(&model, &s0, t, bound.limit()).unwrap();
        // D2 = σ²/2, so the variance grows by σ² t.
        let want = gaussian_cells(&grid, 0.0, var0 + sigma * sigma * t);
        let h = grid.spacing(0).unwrap();
        sol.state.marginal().iter().zip(&want).map(|(a, b)| (a - b).abs() * h).sum()
    }

    #[test]
    fn pure_diffusion_matches_the_heat_kernel_and_refines() {
        let coarse = heat_kernel_error(60);
        let fine = heat_kernel_error(120);
        assert!(coarse < 0.02, "{coarse}");
        assert!(coarse / fine >= 1.5, "{coarse} vs {fine}");
    }

    #[test]
    fn drift_moves_the_mean_and_conserves_trace() {
        let grid = PhaseGrid::resolved(&[(-2.0, 2.0, 200)]).unwrap();
        let model = decoupled(0.3, 1.5);
        let s0 = CQGridState::point_mass(grid.clone(), &pv(&[-0.5]), &(CMatrix::identity(2, 2) * c(0.5))).unwrap();
        let start_mean = s0.first_moment(0).unwrap();
        let dt = stability_bound(&model, &grid).unwrap().limit();
        let sol = solve_master_equation(&model, &s0, 0.4, dt).unwrap();
        assert!(sol.trace_drift < 1e-8);
        let moved = sol.state.first_moment(0).unwrap() - start_mean;
        assert!((moved - 0.6).abs() < 1e-3, "{moved}");
    }

    #[test]
    fn lindblad_only_cells_follow_the_lindblad_ode() {
        // σ = 0, D1 = 0: each cell decoheres independently.
        let gamma = 0.7;
        let model = explicit_qubit_model("dephasing", gamma, 0.0, 0.0, 1.3);
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 4)]).unwrap();
        let plus = zoo::plus_state();
        let s0 = CQGridState::from_fn(grid.clone(), 2, |x| {
            (&plus * plus.adjoint()) * c(1.0 + x[0] * x[0])
        })
        .unwrap();
        let t = 0.5;
        let sol = solve_master_equation(&model, &s0, t, 1e-3).unwrap();
        // Coherence decays at 2γ and rotates at 2φ.
        for cell in 0..grid.len() {
            let r0 = s0.cell_matrix(cell);
            let r = sol.state.cell_matrix(cell);
            let want = r0[(0, 1)] * Complex64::new(-2.0 * gamma * t, -2.0 * 1.3 * t).exp();
            assert!((r[(0, 1)] - want).norm() < 1e-6, "{}", (r[(0, 1)] - want).norm());
            assert!((r[(0, 0)] - r0[(0, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn step_above_the_bound_is_rejected() {
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 100)]).unwrap();
        let model = decoupled(1.0, 0.0);
        let s0 = CQGridState::point_mass(grid.clone(), &pv(&[0.0]), &CMatrix::identity(2, 2)).unwrap();
        let b = stability_bound(&model, &grid).unwrap();
        assert!((b.diffusive - 0.4 * 0.02f64.powi(2) / 1.0).abs() < 1e-15);
        assert!(matches!(
            solve_master_equation(&model, &s0, 0.1, 2.0 * b.limit()),
            Err(CqError::StepSize(_))
        ));
    }

    #[test]
    fn solver_rejects_unresolved_or_high_dimensional_grids() {
        let s = zoo::builtin_default("mass_superposition").unwrap();
        let grid = PhaseGrid::resolved(&[(-1.0, 1.0, 2); 6]).unwrap();
        let st = CQGridState::zeros(grid, 2);
        assert!(matches!(solve_master_equation(&s.model, &st, 0.1, 1e-3), Err(CqError::Unsupported(_))));
    }

    #[test]
    fn diosi_grid_decoheres_into_two_drifting_lobes() {
        let m = diosi();
        let grid = PhaseGrid::resolved(&[(-0.5, 0.5, 24), (-3.0, 3.0, 48)]).unwrap();
        let plus = zoo::plus_state();
        let s0 = CQGridState::point_mass(grid.clone(), &pv(&[0.01, 0.01]), &(&plus * plus.adjoint())).unwrap();
        let dt = stability_bound(&m, &grid).unwrap().limit();
        let sol = solve_master_equation(&m, &s0, 0.5, dt).unwrap();
        assert!(sol.trace_drift < 1e-8);
        assert!(sol.min_relative_eigenvalue > -1e-2, "{}", sol.min_relative_eigenvalue);
        // |0⟩ population sits at negative momentum, |1⟩ at positive.
        let vol = grid.cell_volume();
        let (mut p0, mut p1, mut w0, mut w1) = (0.0, 0.0, 0.0, 0.0);
        for cell in 0..grid.len() {
            let p = grid.center(cell)[1];
            let r = sol.state.cell_matrix(cell);
            p0 += p * r[(0, 0)].re * vol;
            w0 += r[(0, 0)].re * vol;
            p1 += p * r[(1, 1)].re * vol;
            w1 += r[(1, 1)].re * vol;
        }
        assert!((w0 - 0.5).abs() < 1e-6 && (w1 - 0.5).abs() < 1e-6);
        // Mean momentum conditioned on the branch moves by ∓2λ t from the
        // initial cell center.
        let p_init = s0.first_moment(1).unwrap();
        assert!((p0 / w0 - p_init + 1.0).abs() < 0.01, "{}", p0 / w0);
        assert!((p1 / w1 - p_init - 1.0).abs() < 0.01, "{}", p1 / w1);
        // Coherence between the branches is suppressed.
        let coh: f64 = (0..grid.len()).map(|k| sol.state.cell_matrix(k)[(0, 1)].norm() * vol).sum();
        assert!(coh < 0.5 * 0.5, "{coh}");
    }
}
