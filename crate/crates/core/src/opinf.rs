//! Operator inference: learn `dg/dt = c + A1 g + A2 (g ⊗ g) + B u` from a
//! sampled trajectory, then integrate it forward.
//!
//! The quadratic term uses the `r(r+1)/2` unique monomials `g_i g_j`,
//! `i <= j`, in lexicographic order. Operators are fitted jointly by one
//! Tikhonov least-squares solve with a uniform `lambda^2 ||O||_F^2` penalty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{dot, LeastSquares, Matrix};

/// Evenly sampled states, row `k` at `t0 + k dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Matrix,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, states: Matrix) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Argument(format!("time step must be positive, got {dt}")));
        }
        if states.rows() < 2 {
            return Err(Error::Data(format!("a trajectory needs at least 2 states, got {}", states.rows())));
        }
        Ok(Self { t0, dt, states })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    /// Rows `start..end` as a trajectory of its own.
    pub fn segment(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        Self::new(self.time(start), self.dt, self.states.select_rows(&idx))
    }
}

pub fn n_quadratic(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Unique degree-two monomials `g_i g_j`, `i <= j`, lexicographic in `(i, j)`.
pub fn quadratic_features(g: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_quadratic(g.len()));
    for i in 0..g.len() {
        for j in i..g.len() {
            out.push(g[i] * g[j]);
        }
    }
    out
}

/// Second-order time derivatives: central differences inside, three-point
/// one-sided formulas at both ends.
pub fn finite_diff_derivatives(traj: &Trajectory) -> Result<Matrix> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::Data(format!("finite differences need at least 3 states, got {n}")));
    }
    let r = traj.dim();
    let s = &traj.states;
    let h = traj.dt;
    let mut out = Matrix::zeros(n, r);
    for j in 0..r {
        out.set(0, j, (-3.0 * s.get(0, j) + 4.0 * s.get(1, j) - s.get(2, j)) / (2.0 * h));
        for k in 1..n - 1 {
            out.set(k, j, (s.get(k + 1, j) - s.get(k - 1, j)) / (2.0 * h));
        }
        out.set(n - 1, j, (3.0 * s.get(n - 1, j) - 4.0 * s.get(n - 2, j) + s.get(n - 3, j)) / (2.0 * h));
    }
    Ok(out)
}

fn check_order(order: usize) -> Result<()> {
    if order != 1 && order != 2 {
        return Err(Error::Argument(format!("polynomial order must be 1 or 2, got {order}")));
    }
    Ok(())
}

/// Data matrix with column blocks `[1 | g | quadratic(g) if order 2 | u]`.
pub fn assemble_data_matrix(traj: &Trajectory, inputs: Option<&Matrix>, order: usize) -> Result<Matrix> {
    check_order(order)?;
    let n = traj.len();
    let r = traj.dim();
    if let Some(u) = inputs {
        if u.rows() != n {
            return Err(Error::Argument(format!("inputs have {} rows, trajectory has {n}", u.rows())));
        }
    }
    let p = inputs.map_or(0, Matrix::cols);
    let nq = if order == 2 { n_quadratic(r) } else { 0 };
    let width = 1 + r + nq + p;
    let mut data = Vec::with_capacity(n * width);
    for k in 0..n {
        let g = traj.states.row(k);
        data.push(1.0);
        data.extend_from_slice(g);
        if order == 2 {
            data.extend(quadratic_features(g));
        }
        if let Some(u) = inputs {
            data.extend_from_slice(u.row(k));
        }
    }
    Matrix::new(n, width, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpInfModel {
    order: usize,
    c: Vec<f64>,
    a1: Matrix,
    a2: Option<Matrix>,
    b: Option<Matrix>,
    lambda: f64,
    dt_train: f64,
}

impl OpInfModel {
    pub fn new(c: Vec<f64>, a1: Matrix, a2: Option<Matrix>, b: Option<Matrix>, lambda: f64, dt_train: f64) -> Result<Self> {
        let r = c.len();
        if a1.shape() != (r, r) {
            return Err(Error::Argument(format!("A1 must be {r}x{r}, got {:?}", a1.shape())));
        }
        if let Some(a2) = &a2 {
            if a2.shape() != (r, n_quadratic(r)) {
                return Err(Error::Argument(format!("A2 must be {r}x{}, got {:?}", n_quadratic(r), a2.shape())));
            }
        }
        if let Some(b) = &b {
            if b.rows() != r {
                return Err(Error::Argument(format!("B must have {r} rows, got {}", b.rows())));
            }
        }
        let all_finite = c.iter().chain(a1.data()).chain(a2.iter().flat_map(|m| m.data())).chain(b.iter().flat_map(|m| m.data()));
        if all_finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("operator inference produced non-finite operators".into()));
        }
        let order = if a2.is_some() { 2 } else { 1 };
        Ok(Self { order, c, a1, a2, b, lambda, dt_train })
    }

    /// The null model `dg/dt = 0`.
    pub fn zero(r: usize, dt_train: f64) -> Self {
        Self {
            order: 1,
            c: vec![0.0; r],
            a1: Matrix::zeros(r, r),
            a2: None,
            b: None,
            lambda: 0.0,
            dt_train,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_inputs(&self) -> usize {
        self.b.as_ref().map_or(0, Matrix::cols)
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn a1(&self) -> &Matrix {
        &self.a1
    }

    pub fn a2(&self) -> Option<&Matrix> {
        self.a2.as_ref()
    }

    pub fn b(&self) -> Option<&Matrix> {
        self.b.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dt_train(&self) -> f64 {
        self.dt_train
    }

    /// Right-hand side at state `g` with input `u` (empty when `p = 0`).
    pub fn rhs(&self, g: &[f64], u: &[f64]) -> Vec<f64> {
        let r = self.dim();
        let q = self.a2.as_ref().map(|_| quadratic_features(g));
        (0..r)
            .map(|i| {
                let mut v = self.c[i] + dot(self.a1.row(i), g);
                if let (Some(a2), Some(q)) = (&self.a2, &q) {
                    v += dot(a2.row(i), q);
                }
                if let Some(b) = &self.b {
                    v += dot(b.row(i), u);
                }
                v
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = OpInfMeta {
            r: self.dim(),
            order: self.order,
            p: self.n_inputs(),
            lambda: self.lambda,
            dt_train: self.dt_train,
        };
        io::write_json(&dir.join("opinf.json"), &meta)?;
        io::write_f64s(&dir.join("c.f64"), &self.c)?;
        io::write_f64s(&dir.join("A1.f64"), self.a1.data())?;
        if let Some(a2) = &self.a2 {
            io::write_f64s(&dir.join("A2.f64"), a2.data())?;
        }
        if let Some(b) = &self.b {
            io::write_f64s(&dir.join("B.f64"), b.data())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: OpInfMeta = io::read_json(&dir.join("opinf.json"))?;
        check_order(meta.order)?;
        let r = meta.r;
        let c = io::read_f64s(&dir.join("c.f64"), r)?;
        let a1 = Matrix::new(r, r, io::read_f64s(&dir.join("A1.f64"), r * r)?)?;
        let a2 = if meta.order == 2 {
            let nq = n_quadratic(r);
            Some(Matrix::new(r, nq, io::read_f64s(&dir.join("A2.f64"), r * nq)?)?)
        } else {
            None
        };
        let b = if meta.p > 0 {
            Some(Matrix::new(r, meta.p, io::read_f64s(&dir.join("B.f64"), r * meta.p)?)?)
        } else {
            None
        };
        Self::new(c, a1, a2, b, meta.lambda, meta.dt_train)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OpInfMeta {
    r: usize,
    order: usize,
    p: usize,
    lambda: f64,
    dt_train: f64,
}

/// Fits the operators against supplied derivative data.
pub fn fit_opinf_with_derivatives(
    traj: &Trajectory,
    derivatives: &Matrix,
    inputs: Option<&Matrix>,
    order: usize,
    lambda: f64,
) -> Result<OpInfModel> {
    if derivatives.shape() != traj.states.shape() {
        return Err(Error::Argument(format!(
            "derivatives {:?} do not match states {:?}",
            derivatives.shape(),
            traj.states.shape()
        )));
    }
    let d = assemble_data_matrix(traj, inputs, order)?;
    let o = LeastSquares::factor(&d, lambda)?.solve(derivatives)?;
    // O is n_bar x r; each block of rows transposed is one operator.
    let r = traj.dim();
    let block = |start: usize, len: usize| Matrix::from_fn(r, len, |i, j| o.get(start + j, i));
    let c = (0..r).map(|i| o.get(0, i)).collect();
    let a1 = block(1, r);
    let mut next = 1 + r;
    let a2 = if order == 2 {
        let nq = n_quadratic(r);
        let m = block(next, nq);
        next += nq;
        Some(m)
    } else {
        None
    };
    let b = inputs.map(|u| block(next, u.cols()));
    OpInfModel::new(c, a1, a2, b, lambda, traj.dt)
}

/// Fits against second-order finite-difference derivatives of `traj`.
pub fn fit_opinf(traj: &Trajectory, inputs: Option<&Matrix>, order: usize, lambda: f64) -> Result<OpInfModel> {
    let r = finite_diff_derivatives(traj)?;
    fit_opinf_with_derivatives(traj, &r, inputs, order, lambda)
}

/// Integrated trajectory with stored right-hand sides for Hermite queries.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory,
    rhs: Matrix,
}

impl Simulation {
    pub fn t0(&self) -> f64 {
        self.trajectory.t0
    }

    pub fn t_end(&self) -> f64 {
        self.trajectory.t_end()
    }

    /// State at `t`: stored values on the grid, cubic Hermite between.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let traj = &self.trajectory;
        let pos = (t - traj.t0) / traj.dt;
        let last = (traj.len() - 1) as f64;
        let slack = 1e-9;
        if !pos.is_finite() || pos < -slack || pos > last + slack {
            return Err(Error::Argument(format!(
                "query time {t} outside the simulated window [{}, {}]",
                traj.t0,
                traj.t_end()
            )));
        }
        let nearest = pos.round();
        if (pos - nearest).abs() <= slack {
            return Ok(traj.states.row(nearest as usize).to_vec());
        }
        let k = (pos.floor() as usize).min(traj.len() - 2);
        let s = pos - k as f64;
        let h = traj.dt;
        let (h00, h10, h01, h11) = (
            2.0 * s.powi(3) - 3.0 * s * s + 1.0,
            s.powi(3) - 2.0 * s * s + s,
            -2.0 * s.powi(3) + 3.0 * s * s,
            s.powi(3) - s * s,
        );
        let (y0, y1) = (traj.states.row(k), traj.states.row(k + 1));
        let (f0, f1) = (self.rhs.row(k), self.rhs.row(k + 1));
        Ok((0..traj.dim())
            .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
            .collect())
    }
}

pub type InputFn<'a> = &'a dyn Fn(f64) -> Vec<f64>;

/// Fixed-step classical RK4 from `t0` until at least `t_end`.
pub fn simulate(model: &OpInfModel, g0: &[f64], t0: f64, t_end: f64, dt_int: f64, input: Option<InputFn<'_>>) -> Result<Simulation> {
    if !(dt_int > 0.0) {
        return Err(Error::Argument(format!("integration step must be positive, got {dt_int}")));
    }
    if !(t_end > t0) {
        return Err(Error::Argument(format!("t_end = {t_end} must exceed t0 = {t0}")));
    }
    let r = model.dim();
    if g0.len() != r {
        return Err(Error::Argument(format!("initial state has length {}, model dimension is {r}", g0.len())));
    }
    if model.n_inputs() > 0 && input.is_none() {
        return Err(Error::Argument("model has an input operator but no input signal was given".into()));
    }
    let u_at = |t: f64| input.map_or_else(Vec::new, |f| f(t));
    let ratio = (t_end - t0) / dt_int;
    let steps = if (ratio - ratio.round()).abs() < 1e-9 { ratio.round() } else { ratio.ceil() } as usize;

    let mut states = Vec::with_capacity((steps + 1) * r);
    let mut rhs = Vec::with_capacity((steps + 1) * r);
    let mut g = g0.to_vec();
    states.extend_from_slice(&g);
    for step in 0..steps {
        let t = t0 + step as f64 * dt_int;
        let k1 = model.rhs(&g, &u_at(t));
        rhs.extend_from_slice(&k1);
        let shifted = |k: &[f64], a: f64| -> Vec<f64> { g.iter().zip(k).map(|(x, d)| x + a * d).collect() };
        let k2 = model.rhs(&shifted(&k1, 0.5 * dt_int), &u_at(t + 0.5 * dt_int));
        let k3 = model.rhs(&shifted(&k2, 0.5 * dt_int), &u_at(t + 0.5 * dt_int));
        let k4 = model.rhs(&shifted(&k3, dt_int), &u_at(t + dt_int));
        for i in 0..r {
            g[i] += dt_int / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: step + 1, t: t + dt_int });
        }
        states.extend_from_slice(&g);
    }
    let t_last = t0 + steps as f64 * dt_int;
    let last_rhs = model.rhs(&g, &u_at(t_last));
    if last_rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: steps, t: t_last });
    }
    rhs.extend_from_slice(&last_rhs);
    Ok(Simulation {
        trajectory: Trajectory::new(t0, dt_int, Matrix::new(steps + 1, r, states)?)?,
        rhs: Matrix::new(steps + 1, r, rhs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    /// Held-out relative state error, `None` when the fit or simulation failed.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub candidates: Vec<LambdaCandidate>,
}

/// Errors closer than this are treated as tied.
pub const LAMBDA_TIE_TOL: f64 = 1e-9;

/// Picks the regularization weight by forecasting a held-out tail.
///
/// The last 10% of rows (at least one) are held out, each candidate is fitted
/// on the rest, and the fitted model is integrated from the last retained
/// state across the held-out window. The smallest relative error wins; ties
/// go to the larger weight.
pub fn select_lambda(traj: &Trajectory, order: usize, grid: &[f64]) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Argument("lambda grid is empty".into()));
    }
    if grid.len() == 1 {
        return Ok(LambdaSelection {
            lambda: grid[0],
            candidates: vec![LambdaCandidate { lambda: grid[0], error: None }],
        });
    }
    let n = traj.len();
    let hold = ((0.1 * n as f64).round() as usize).max(1);
    let keep = n - hold;
    if keep < 3 {
        return Err(Error::Data(format!("trajectory of {n} states is too short to hold out {hold}")));
    }
    let fit_part = traj.segment(0, keep)?;
    let truth = traj.segment(keep - 1, n)?;
    let truth_norm = truth.states.frobenius_norm();

    let candidates: Vec<LambdaCandidate> = grid
        .iter()
        .map(|&lambda| {
            let error = (|| -> Result<f64> {
                let model = fit_opinf(&fit_part, None, order, lambda)?;
                let sim = simulate(&model, fit_part.states.row(keep - 1), truth.t0, truth.t_end(), traj.dt, None)?;
                let pred = &sim.trajectory.states;
                let mut diff = 0.0;
                for k in 0..truth.len() {
                    for (a, b) in pred.row(k).iter().zip(truth.states.row(k)) {
                        diff += (a - b) * (a - b);
                    }
                }
                Ok(diff.sqrt() / truth_norm.max(f64::MIN_POSITIVE))
            })();
            LambdaCandidate { lambda, error: error.ok().filter(|e| e.is_finite()) }
        })
        .collect();

    let best = candidates
        .iter()
        .filter_map(|c| c.error)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        let tried: Vec<String> = candidates.iter().map(|c| format!("{:e}", c.lambda)).collect();
        return Err(Error::Data(format!(
            "every regularization candidate failed on the held-out window (tried {})",
            tried.join(", ")
        )));
    }
    let lambda = candidates
        .iter()
        .filter(|c| matches!(c.error, Some(e) if e <= best + LAMBDA_TIE_TOL))
        .map(|c| c.lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LambdaSelection { lambda, candidates })
}
