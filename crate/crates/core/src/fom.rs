//! Finite-difference full-order solvers, parameter-grid dataset generation and
//! the `stf-1` snapshot directory format.
//!
//! Nodes of a structured `(nx + 1) x (ny + 1)` grid are numbered `j * (nx + 1) + i`
//! with `i` along x. Dirichlet nodes stay in the state vector so the spatial
//! dimension is fixed across parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{DenseTensor3, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::Argument(format!("grid needs at least 4 cells per side, got {nx}x{ny}")));
        }
        if !(x[1] > x[0]) || !(y[1] > y[0]) {
            return Err(Error::Argument("grid bounds must be increasing".into()));
        }
        Ok(Self { nx, ny, x_min: x[0], x_max: x[1], y_min: y[0], y_max: y[1] })
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.hx()
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_min + j as f64 * self.hy()
    }

    /// Node coordinates in node order.
    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.n_nodes());
        for j in 0..=self.ny {
            for i in 0..=self.nx {
                out.push([self.x(i), self.y(j)]);
            }
        }
        out
    }
}

/// Square band matrix with equal lower and upper bandwidth, factored in place
/// without pivoting. Every operator assembled here is diagonally dominant.
struct BandMatrix {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, k: usize) -> Self {
        Self { n, k, data: vec![0.0; n * (2 * k + 1)] }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.k);
        i * (2 * self.k + 1) + (j + self.k - i)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.slot(i, j)]
    }

    /// Doolittle LU; fails with the row of a vanishing pivot.
    fn factor(&mut self) -> std::result::Result<(), usize> {
        let (n, k) = (self.n, self.k);
        for p in 0..n {
            let pivot = self.get(p, p);
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(p);
            }
            for i in p + 1..(p + k + 1).min(n) {
                let s = self.slot(i, p);
                let l = self.data[s] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[s] = l;
                for j in p + 1..(p + k + 1).min(n) {
                    let upper = self.get(p, j);
                    let t = self.slot(i, j);
                    self.data[t] -= l * upper;
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, k) = (self.n, self.k);
        for i in 0..n {
            let lo = i.saturating_sub(k);
            let mut acc = b[i];
            for j in lo..i {
                acc -= self.get(i, j) * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + k + 1).min(n);
            let mut acc = b[i];
            for j in i + 1..hi {
                acc -= self.get(i, j) * b[j];
            }
            b[i] = acc / self.get(i, i);
        }
    }
}

/// Uniform time grid with `round(t_final / dt)` steps after `t = 0`.
fn step_count(dt: f64, t_final: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_final > 0.0) {
        return Err(Error::Config(format!("dt and t_final must be positive, got dt={dt}, t_final={t_final}")));
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::Config(format!("t_final={t_final} is not a multiple of dt={dt}")));
    }
    Ok(n as usize)
}

fn heat_conductivity(mu0: f64, x: f64, y: f64) -> f64 {
    if x * x + y * y < 0.25 { mu0 } else { 1.0 }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Rows of the semi-discrete heat operator `du/dt = L u + q` for every node
/// that is not on the Dirichlet top edge, plus the boundary flux vector `q`.
struct HeatOperator {
    rows: Vec<Option<Vec<(usize, f64)>>>,
    flux: Vec<f64>,
}

fn heat_operator(mu1: f64, grid: &GridSpec, kappa: &dyn Fn(f64, f64) -> f64) -> HeatOperator {
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx2, hy2) = (grid.hx().powi(2), grid.hy().powi(2));
    let k_node = |i: usize, j: usize| kappa(grid.x(i), grid.y(j));
    let mut rows = Vec::with_capacity(grid.n_nodes());
    let mut flux = vec![0.0; grid.n_nodes()];
    for j in 0..=ny {
        for i in 0..=nx {
            if j == ny {
                rows.push(None);
                continue;
            }
            let me = grid.index(i, j);
            let k0 = k_node(i, j);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(5);
            let mut diag = 0.0;
            let mut couple = |nb: usize, w: f64, entries: &mut Vec<(usize, f64)>| {
                entries.push((nb, w));
                diag -= w;
            };
            // x direction, mirrored ghosts on the insulated sides
            if i == 0 {
                couple(grid.index(1, j), 2.0 * harmonic(k0, k_node(1, j)) / hx2, &mut entries);
            } else if i == nx {
                couple(grid.index(nx - 1, j), 2.0 * harmonic(k0, k_node(nx - 1, j)) / hx2, &mut entries);
            } else {
                couple(grid.index(i - 1, j), harmonic(k0, k_node(i - 1, j)) / hx2, &mut entries);
                couple(grid.index(i + 1, j), harmonic(k0, k_node(i + 1, j)) / hx2, &mut entries);
            }
            // y direction, flux ghost at the base
            if j == 0 {
                couple(grid.index(i, 1), 2.0 * harmonic(k0, k_node(i, 1)) / hy2, &mut entries);
                flux[me] = 2.0 * mu1 / grid.hy();
            } else {
                couple(grid.index(i, j - 1), harmonic(k0, k_node(i, j - 1)) / hy2, &mut entries);
                couple(grid.index(i, j + 1), harmonic(k0, k_node(i, j + 1)) / hy2, &mut entries);
            }
            entries.push((me, diag));
            rows.push(Some(entries));
        }
    }
    HeatOperator { rows, flux }
}

pub type SourceFn<'a> = &'a (dyn Fn(f64, f64, f64) -> f64 + Sync);
pub type FieldFn<'a> = &'a (dyn Fn(f64, f64) -> f64 + Sync);

/// Heat equation with an optional volumetric source `f(x, y, t)`, optional
/// initial field and optional conductivity override. Backward Euler; returns
/// the `(n_steps + 1) x N_h` trajectory including `t = 0`.
pub fn solve_heat_forced(
    mu0: f64,
    mu1: f64,
    grid: &GridSpec,
    dt: f64,
    t_final: f64,
    source: Option<SourceFn<'_>>,
    initial: Option<FieldFn<'_>>,
    conductivity: Option<FieldFn<'_>>,
) -> Result<Matrix> {
    let steps = step_count(dt, t_final)?;
    let default_kappa = move |x: f64, y: f64| heat_conductivity(mu0, x, y);
    let kappa: &dyn Fn(f64, f64) -> f64 = match conductivity {
        Some(k) => k,
        None => &default_kappa,
    };
    let op = heat_operator(mu1, grid, kappa);
    let n = grid.n_nodes();
    let mut band = BandMatrix::zeros(n, grid.nx + 1);
    for (r, row) in op.rows.iter().enumerate() {
        match row {
            None => band.add(r, r, 1.0),
            Some(entries) => {
                band.add(r, r, 1.0);
                for &(c, w) in entries {
                    band.add(r, c, -dt * w);
                }
            }
        }
    }
    band.factor().map_err(|row| Error::Solver { step: 0, msg: format!("zero pivot in row {row}") })?;

    let coords = grid.coordinates();
    let mut u: Vec<f64> = match initial {
        Some(f) => coords.iter().map(|p| f(p[0], p[1])).collect(),
        None => vec![0.0; n],
    };
    for (r, row) in op.rows.iter().enumerate() {
        if row.is_none() {
            u[r] = 0.0;
        }
    }
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend_from_slice(&u);
    for step in 1..=steps {
        let t = step as f64 * dt;
        for r in 0..n {
            if op.rows[r].is_none() {
                u[r] = 0.0;
                continue;
            }
            let mut forcing = op.flux[r];
            if let Some(f) = source {
                forcing += f(coords[r][0], coords[r][1], t);
            }
            u[r] += dt * forcing;
        }
        band.solve(&mut u);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { step, msg: "non-finite heat state".into() });
        }
        out.extend_from_slice(&u);
    }
    Matrix::new(steps + 1, n, out)
}

fn warn_range(name: &str, v: f64, lo: f64, hi: f64) {
    if v < lo || v > hi {
        eprintln!("warning: {name}={v} outside [{lo}, {hi}]");
    }
}

/// Thermal block: conductivity `mu0` inside the disk of radius 0.5, unit
/// outside; inward flux `mu1` through the base; `u = 0` on the top edge.
pub fn solve_heat(mu0: f64, mu1: f64, grid: &GridSpec, dt: f64, t_final: f64) -> Result<Matrix> {
    warn_range("mu0", mu0, 0.1, 10.0);
    warn_range("mu1", mu1, -1.0, 1.0);
    if !(mu0 > 0.0) {
        return Err(Error::Argument(format!("conductivity must be positive, got {mu0}")));
    }
    solve_heat_forced(mu0, mu1, grid, dt, t_final, None, None, None)
}

/// Steady state of the thermal block by a dense direct solve.
pub fn solve_heat_steady(mu0: f64, mu1: f64, grid: &GridSpec) -> Result<Vec<f64>> {
    let kappa = move |x: f64, y: f64| heat_conductivity(mu0, x, y);
    let op = heat_operator(mu1, grid, &kappa);
    let n = grid.n_nodes();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for (r, row) in op.rows.iter().enumerate() {
        match row {
            None => a[(r, r)] = 1.0,
            Some(entries) => {
                for &(c, w) in entries {
                    a[(r, c)] -= w;
                }
                b[r] = op.flux[r];
            }
        }
    }
    let x = a.lu().solve(&b).ok_or_else(|| Error::Solver { step: 0, msg: "singular steady operator".into() })?;
    Ok(x.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// `b(t) = (1 - t, 1 - t)`.
    #[default]
    Decaying,
    Zero,
    Constant([f64; 2]),
}

impl Advection {
    pub fn at(&self, t: f64) -> [f64; 2] {
        match self {
            Advection::Decaying => [1.0 - t, 1.0 - t],
            Advection::Zero => [0.0, 0.0],
            Advection::Constant(b) => *b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvDiffPhysics {
    pub diffusivity: f64,
    pub advection: Advection,
}

impl Default for AdvDiffPhysics {
    fn default() -> Self {
        Self { diffusivity: 0.1, advection: Advection::Decaying }
    }
}

pub const OBSTACLE_SIDE: f64 = 0.3;

pub fn advdiff_boundary(x: f64, y: f64) -> f64 {
    (x - 1.0).powi(2) + (y - 1.0).powi(2)
}

/// Nodes held at the boundary function: the outer boundary and every node
/// covered by the closed obstacle square.
pub fn advdiff_dirichlet_mask(mu0: f64, mu1: f64, grid: &GridSpec) -> Vec<bool> {
    let tol = 1e-12;
    let mut mask = Vec::with_capacity(grid.n_nodes());
    for j in 0..=grid.ny {
        for i in 0..=grid.nx {
            let (x, y) = (grid.x(i), grid.y(j));
            let outer = i == 0 || j == 0 || i == grid.nx || j == grid.ny;
            let inside = x >= mu0 - tol && x <= mu0 + OBSTACLE_SIDE + tol && y >= mu1 - tol && y <= mu1 + OBSTACLE_SIDE + tol;
            mask.push(outer || inside);
        }
    }
    mask
}

/// Advection-diffusion around a square obstacle with lower-left corner
/// `(mu0, mu1)`. Backward Euler, first-order upwind advection.
pub fn solve_advdiff(mu0: f64, mu1: f64, grid: &GridSpec, dt: f64, t_final: f64, physics: &AdvDiffPhysics) -> Result<Matrix> {
    let (lo, hi) = (grid.x_min.max(grid.y_min), grid.x_max.min(grid.y_max));
    if !(mu0 >= lo && mu1 >= lo && mu0 + OBSTACLE_SIDE <= hi + 1e-12 && mu1 + OBSTACLE_SIDE <= hi + 1e-12) {
        return Err(Error::Argument(format!("obstacle at ({mu0}, {mu1}) leaves the domain")));
    }
    if !(physics.diffusivity >= 0.0) {
        return Err(Error::Argument(format!("diffusivity must be nonnegative, got {}", physics.diffusivity)));
    }
    let steps = step_count(dt, t_final)?;
    let n = grid.n_nodes();
    let mask = advdiff_dirichlet_mask(mu0, mu1, grid);
    let coords = grid.coordinates();
    let g: Vec<f64> = coords.iter().map(|p| advdiff_boundary(p[0], p[1])).collect();
    let (hx, hy) = (grid.hx(), grid.hy());
    let d = physics.diffusivity;

    let mut u = g.clone();
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend_from_slice(&u);
    for step in 1..=steps {
        let t = step as f64 * dt;
        let [bx, by] = physics.advection.at(t);
        let mut band = BandMatrix::zeros(n, grid.nx + 1);
        for j in 0..=grid.ny {
            for i in 0..=grid.nx {
                let r = grid.index(i, j);
                if mask[r] {
                    band.add(r, r, 1.0);
                    continue;
                }
                let (west, east) = (grid.index(i - 1, j), grid.index(i + 1, j));
                let (south, north) = (grid.index(i, j - 1), grid.index(i, j + 1));
                let mut w_west = d / (hx * hx);
                let mut w_east = d / (hx * hx);
                let mut w_south = d / (hy * hy);
                let mut w_north = d / (hy * hy);
                if bx > 0.0 {
                    w_west += bx / hx;
                } else {
                    w_east -= bx / hx;
                }
                if by > 0.0 {
                    w_south += by / hy;
                } else {
                    w_north -= by / hy;
                }
                band.add(r, r, 1.0 + dt * (w_west + w_east + w_south + w_north));
                band.add(r, west, -dt * w_west);
                band.add(r, east, -dt * w_east);
                band.add(r, south, -dt * w_south);
                band.add(r, north, -dt * w_north);
            }
        }
        band.factor().map_err(|row| Error::Solver { step, msg: format!("zero pivot in row {row}") })?;
        for r in 0..n {
            if mask[r] {
                u[r] = g[r];
            }
        }
        band.solve(&mut u);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { step, msg: "non-finite advection-diffusion state".into() });
        }
        out.extend_from_slice(&u);
    }
    Matrix::new(steps + 1, n, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Heat,
    Advdiff,
    /// Data produced elsewhere and imported through the dataset format.
    External,
}

/// Dataset generation settings. Unset fields take the per-problem defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomConfig {
    pub problem: Problem,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub ny: Option<usize>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_final: Option<f64>,
    #[serde(default)]
    pub include_t0: Option<bool>,
    #[serde(default)]
    pub param_ranges: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub param_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub diffusivity: Option<f64>,
    #[serde(default)]
    pub advection: Option<Advection>,
}

/// A [`FomConfig`] with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FomSettings {
    pub problem: Problem,
    pub grid: GridSpec,
    pub dt: f64,
    pub t_final: f64,
    pub include_t0: bool,
    pub param_ranges: Vec<[f64; 2]>,
    pub param_counts: Vec<usize>,
    pub n_train: usize,
    pub physics: AdvDiffPhysics,
}

impl FomConfig {
    pub fn heat() -> Self {
        Self::bare(Problem::Heat)
    }

    pub fn advdiff() -> Self {
        Self::bare(Problem::Advdiff)
    }

    fn bare(problem: Problem) -> Self {
        Self {
            problem,
            nx: None,
            ny: None,
            dt: None,
            t_final: None,
            include_t0: None,
            param_ranges: None,
            param_counts: None,
            n_train: None,
            diffusivity: None,
            advection: None,
        }
    }

    pub fn settings(&self) -> Result<FomSettings> {
        let (cells, domain, dt, t_final, ranges, n_train) = match self.problem {
            Problem::Heat => (20, [-1.0, 1.0], 0.05, 3.0, vec![[0.1, 10.0], [-1.0, 1.0]], 50),
            Problem::Advdiff => (24, [0.0, 1.0], 0.02, 2.0, vec![[0.1, 0.6], [0.1, 0.6]], 30),
            Problem::External => return Err(Error::Config("external datasets are imported, not generated".into())),
        };
        let nx = self.nx.unwrap_or(cells);
        let grid = GridSpec::new(nx, self.ny.unwrap_or(nx), domain, domain).map_err(|e| Error::Config(e.to_string()))?;
        let param_ranges = self.param_ranges.clone().unwrap_or(ranges);
        let param_counts = self.param_counts.clone().unwrap_or(vec![10, 10]);
        if param_ranges.len() != 2 || param_counts.len() != 2 {
            return Err(Error::Config("both problems take exactly two parameters".into()));
        }
        if param_counts.contains(&0) {
            return Err(Error::Config("parameter counts must be positive".into()));
        }
        for r in &param_ranges {
            if !(r[1] >= r[0]) {
                return Err(Error::Config(format!("invalid parameter range {r:?}")));
            }
        }
        let total: usize = param_counts.iter().product();
        let n_train = self.n_train.unwrap_or(n_train);
        if n_train == 0 || n_train > total {
            return Err(Error::Config(format!("n_train={n_train} must lie in 1..={total}")));
        }
        let s = FomSettings {
            problem: self.problem,
            grid,
            dt: self.dt.unwrap_or(dt),
            t_final: self.t_final.unwrap_or(t_final),
            include_t0: self.include_t0.unwrap_or(true),
            param_ranges,
            param_counts,
            n_train,
            physics: AdvDiffPhysics {
                diffusivity: self.diffusivity.unwrap_or(0.1),
                advection: self.advection.unwrap_or_default(),
            },
        };
        step_count(s.dt, s.t_final)?;
        Ok(s)
    }
}

impl FomSettings {
    /// Full trajectory `(steps + 1) x N_h` for one parameter point, `t = 0` included.
    pub fn solve(&self, mu: &[f64]) -> Result<Matrix> {
        if mu.len() != 2 {
            return Err(Error::Argument(format!("expected 2 parameters, got {}", mu.len())));
        }
        match self.problem {
            Problem::Heat => solve_heat(mu[0], mu[1], &self.grid, self.dt, self.t_final),
            Problem::Advdiff => solve_advdiff(mu[0], mu[1], &self.grid, self.dt, self.t_final, &self.physics),
            Problem::External => Err(Error::Config("external datasets have no solver".into())),
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub problem: Problem,
    pub params: Matrix,
    pub param_bounds: Vec<[f64; 2]>,
    pub t_first: f64,
    pub dt: f64,
    /// `N_mu x N_h x N_t`.
    pub snapshots: DenseTensor3,
    pub grid: Option<GridSpec>,
    pub split_seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SnapshotDataset {
    pub fn validate(&self) -> Result<()> {
        let [n_mu, _, n_t] = self.snapshots.dims();
        if self.params.rows() != n_mu {
            return Err(Error::Data(format!("{} parameter rows for {n_mu} snapshot sets", self.params.rows())));
        }
        if self.param_bounds.len() != self.params.cols() {
            return Err(Error::Data("one bound pair per parameter is required".into()));
        }
        if !(self.dt > 0.0) || n_t == 0 {
            return Err(Error::Data("time grid needs dt > 0 and at least one instant".into()));
        }
        if let Some(pos) = self.snapshots.data().iter().position(|v| !v.is_finite()) {
            let [_, n_h, _] = self.snapshots.dims();
            let (i, rest) = (pos / (n_h * n_t), pos % (n_h * n_t));
            return Err(Error::Data(format!(
                "non-finite snapshot value at parameter {i}, node {}, time {}",
                rest / n_t,
                rest % n_t
            )));
        }
        let mut seen = vec![0u8; n_mu];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n_mu {
                return Err(Error::Data(format!("split index {i} out of range for {n_mu} parameters")));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Data(format!(
                "parameter {i} appears {} times across train and test",
                seen[i]
            )));
        }
        if let Some(g) = &self.grid {
            if g.n_nodes() != self.n_space() {
                return Err(Error::Data(format!("grid has {} nodes, tensor has {}", g.n_nodes(), self.n_space())));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.snapshots.dims()[0]
    }

    pub fn n_space(&self) -> usize {
        self.snapshots.dims()[1]
    }

    pub fn n_times(&self) -> usize {
        self.snapshots.dims()[2]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_first + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times()).map(|k| self.time(k)).collect()
    }

    pub fn t_last(&self) -> f64 {
        self.time(self.n_times() - 1)
    }

    /// Index of `t` on the stored grid, matched within `1e-12` absolute.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t_first) / self.dt).round();
        if k < 0.0 || k as usize >= self.n_times() {
            return None;
        }
        ((self.time(k as usize) - t).abs() <= 1e-12).then_some(k as usize)
    }

    /// Number of grid instants in `[t_first, t_end]`, with a round-off allowance.
    pub fn count_until(&self, t_end: f64) -> usize {
        let k = ((t_end - self.t_first) / self.dt + 1e-9).floor();
        if k < 0.0 { 0 } else { (k as usize + 1).min(self.n_times()) }
    }

    /// The same dataset with the first `start` instants dropped.
    pub fn drop_leading(&self, start: usize) -> Result<Self> {
        let n_t = self.n_times();
        if start >= n_t {
            return Err(Error::Argument(format!("cannot drop {start} of {n_t} instants")));
        }
        let all: Vec<usize> = (0..self.params.rows()).collect();
        Ok(Self {
            snapshots: self.snapshots.select(&all, start..n_t)?,
            t_first: self.time(start),
            ..self.clone()
        })
    }

    pub fn field(&self, param: usize, time: usize) -> Vec<f64> {
        let [_, n_h, _] = self.snapshots.dims();
        (0..n_h).map(|n| self.snapshots.get(param, n, time)).collect()
    }

    pub fn param(&self, i: usize) -> &[f64] {
        self.params.row(i)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        io::ensure_dir(dir)?;
        let meta = DatasetMeta {
            format: FORMAT.into(),
            problem: self.problem,
            dims: self.snapshots.dims(),
            t_first: self.t_first,
            dt: self.dt,
            params: (0..self.params.rows()).map(|i| self.params.row(i).to_vec()).collect(),
            param_bounds: self.param_bounds.clone(),
            grid: self.grid,
            split_seed: self.split_seed,
            train: self.train.clone(),
            test: self.test.clone(),
        };
        io::write_json(&dir.join("meta.json"), &meta)?;
        io::write_f64s(&dir.join("snapshots.f64"), self.snapshots.data())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let meta: DatasetMeta = io::read_json(&path)?;
        let fmt_err = |msg: String| Error::Format { path: path.clone(), msg };
        if meta.format != FORMAT {
            return Err(fmt_err(format!("unsupported format {:?}, expected {FORMAT:?}", meta.format)));
        }
        let [n_mu, n_h, n_t] = meta.dims;
        if meta.params.len() != n_mu {
            return Err(fmt_err(format!("{} parameter rows but dims say {n_mu}", meta.params.len())));
        }
        let params = Matrix::from_rows(&meta.params).map_err(|e| fmt_err(e.to_string()))?;
        let data = io::read_f64s(&dir.join("snapshots.f64"), n_mu * n_h * n_t)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (i, n, k) = (pos / (n_h * n_t), pos / n_t % n_h, pos % n_t);
            return Err(Error::Data(format!("non-finite snapshot value at parameter {i}, node {n}, time {k}")));
        }
        let snapshots = DenseTensor3::new(meta.dims, data).map_err(|e| fmt_err(e.to_string()))?;
        let ds = Self {
            problem: meta.problem,
            params,
            param_bounds: meta.param_bounds,
            t_first: meta.t_first,
            dt: meta.dt,
            snapshots,
            grid: meta.grid,
            split_seed: meta.split_seed,
            train: meta.train,
            test: meta.test,
        };
        ds.validate().map_err(|e| fmt_err(e.to_string()))?;
        Ok(ds)
    }
}

pub const FORMAT: &str = "stf-1";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    problem: Problem,
    dims: [usize; 3],
    t_first: f64,
    dt: f64,
    params: Vec<Vec<f64>>,
    param_bounds: Vec<[f64; 2]>,
    #[serde(default)]
    grid: Option<GridSpec>,
    split_seed: u64,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `n_train` become the sorted training set.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Solves every point of the tensor-product parameter grid (first parameter
/// slowest) in parallel and draws the train/test split from `seed`.
pub fn generate_dataset(cfg: &FomConfig, seed: u64) -> Result<SnapshotDataset> {
    let s = cfg.settings()?;
    let axes: Vec<Vec<f64>> = s.param_ranges.iter().zip(&s.param_counts).map(|(r, &n)| linspace(r[0], r[1], n)).collect();
    let mut rows = Vec::new();
    for a in &axes[0] {
        for b in &axes[1] {
            rows.push(vec![*a, *b]);
        }
    }
    let params = Matrix::from_rows(&rows)?;
    let trajectories: Vec<Matrix> = rows
        .par_iter()
        .enumerate()
        .map(|(k, mu)| {
            s.solve(mu).map_err(|e| e.context(format!("parameter {k} ({}, {})", mu[0], mu[1])))
        })
        .collect::<Result<_>>()?;
    let skip = usize::from(!s.include_t0);
    let n_t = trajectories[0].rows() - skip;
    let n_h = s.grid.n_nodes();
    let mut data = Vec::with_capacity(rows.len() * n_h * n_t);
    for traj in &trajectories {
        for node in 0..n_h {
            for k in skip..traj.rows() {
                data.push(traj.get(k, node));
            }
        }
    }
    let snapshots = DenseTensor3::new([rows.len(), n_h, n_t], data)?;
    let (train, test) = split_indices(rows.len(), s.n_train, seed);
    let ds = SnapshotDataset {
        problem: s.problem,
        params,
        param_bounds: s.param_ranges.clone(),
        t_first: skip as f64 * s.dt,
        dt: s.dt,
        snapshots,
        grid: Some(s.grid),
        split_seed: seed,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}
