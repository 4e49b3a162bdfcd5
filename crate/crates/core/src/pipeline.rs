//! Low-fidelity (tensor train + operator inference + slice surrogates) and
//! multi-fidelity (low-fidelity plus a branch-network correction) pipelines.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::fom::SnapshotDataset;
use crate::io;
use crate::linalg::{dot, LeastSquares, Matrix};
#[cfg(test)]
use crate::linalg::norm2;
use crate::nn::{self, InputScaling, Mlp, Objective, TrainConfig};
use crate::opinf::{fit_opinf, select_lambda, simulate, LambdaSelection, OpInfModel, Simulation, Trajectory};
use crate::surrogate::{fit_rbf_slice, fit_slice, load_slice, SliceConfig, SliceKind, SliceSurrogate};
use crate::tt::{tt_eval, tt_svd, TtCores};

fn default_eps_tt() -> f64 {
    1e-8
}

fn default_order() -> usize {
    1
}

/// Zero plus every decade from `1e-8` to `1`.
fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-8..=0).map(|e| 10f64.powi(e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfConfig {
    /// Slice times; each must be a training-grid instant.
    pub t_gca: Vec<f64>,
    /// End of the training window (inclusive).
    pub train_end: f64,
    /// End of the integrated core trajectory; defaults to the last dataset time.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_eps_tt")]
    pub eps_tt: f64,
    #[serde(default = "default_order")]
    pub opinf_order: usize,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Integration step; defaults to the dataset step.
    #[serde(default)]
    pub dt_int: Option<f64>,
    #[serde(default)]
    pub slice: SliceConfig,
}

impl LfConfig {
    pub fn new(t_gca: Vec<f64>, train_end: f64) -> Self {
        Self {
            t_gca,
            train_end,
            horizon: None,
            eps_tt: default_eps_tt(),
            opinf_order: default_order(),
            lambda_grid: default_lambda_grid(),
            dt_int: None,
            slice: SliceConfig::default(),
        }
    }
}

/// Trained low-fidelity pipeline.
#[derive(Debug)]
pub struct LfModel {
    pub cores: TtCores,
    pub slices: Vec<Box<dyn SliceSurrogate>>,
    pub t_gca: Vec<f64>,
    /// Positions of `t_gca` in the training grid.
    pub gca_indices: Vec<usize>,
    pub opinf: OpInfModel,
    pub lambda: LambdaSelection,
    /// Core trajectory integrated once from the first training column.
    pub simulation: Simulation,
    pub t_first: f64,
    pub dt: f64,
    pub n_train_times: usize,
    pub train_params: Matrix,
    pub param_bounds: Vec<[f64; 2]>,
    /// `(N_gca N_h) x r1`, row `j N_h + n`.
    /// Wall-clock seconds of the offline phases; zero for loaded models.
    pub timings: LfTimings,
    gca_operator: Matrix,
    gca_solver: LeastSquares,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LfTimings {
    pub decompose: f64,
    pub slices: f64,
    pub opinf: f64,
}

/// Parameter-core estimate for one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreEstimate {
    pub g1: Vec<f64>,
    /// `||A g1 - b||_2` of the stacked slice system.
    pub residual_norm: f64,
}

fn training_window(ds: &SnapshotDataset, train: &[usize], train_end: f64) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::Config("empty training parameter set".into()));
    }
    let n = ds.count_until(train_end);
    if n < 3 {
        return Err(Error::Config(format!("training window ending at {train_end} holds only {n} instants")));
    }
    if ds.time_index(train_end).is_none() {
        return Err(Error::Config(format!("training window end {train_end} is not a grid instant")));
    }
    Ok(n)
}

fn gca_operator(cores: &TtCores, gca_indices: &[usize]) -> Result<Matrix> {
    let nh = cores.n_space();
    let (r1, _) = cores.ranks();
    let mut a = Matrix::zeros(gca_indices.len() * nh, r1);
    for (j, &k) in gca_indices.iter().enumerate() {
        let m = cores.space_basis(&cores.g3().column(k))?;
        for n in 0..nh {
            a.row_mut(j * nh + n).copy_from_slice(m.row(n));
        }
    }
    Ok(a)
}

/// Offline stage: TT decomposition of the training window, one slice
/// surrogate per `t_gca`, and an operator-inference model of the time core.
pub fn lf_offline(ds: &SnapshotDataset, train: &[usize], cfg: &LfConfig) -> Result<LfModel> {
    let n_t = training_window(ds, train, cfg.train_end)?;
    if cfg.t_gca.is_empty() {
        return Err(Error::Config("T_gca is empty".into()));
    }
    let mut gca_indices = Vec::with_capacity(cfg.t_gca.len());
    for &t in &cfg.t_gca {
        match ds.time_index(t) {
            Some(k) if k < n_t => gca_indices.push(k),
            _ => return Err(Error::Config(format!("T_gca entry {t} is not on the training grid"))),
        }
    }
    let clock = Instant::now();
    let window = ds.snapshots.select(train, 0..n_t)?;
    let cores = tt_svd(&window, cfg.eps_tt).context("tensor-train decomposition")?;
    let (r1, _) = cores.ranks();
    if cfg.t_gca.len() * ds.n_space() < r1 {
        return Err(Error::Config(format!(
            "N_gca * N_h = {} is smaller than r1 = {r1}; the parametric core is underdetermined",
            cfg.t_gca.len() * ds.n_space()
        )));
    }

    let decompose = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let train_params = ds.params.select_rows(train);
    let slices: Vec<Box<dyn SliceSurrogate>> = gca_indices
        .par_iter()
        .zip(&cfg.t_gca)
        .map(|(&k, &t)| {
            let fields = Matrix::from_rows(&train.iter().map(|&i| ds.field(i, k)).collect::<Vec<_>>())?;
            fit_slice(&cfg.slice, &train_params, &fields, t).context(format!("slice surrogate at t = {t}"))
        })
        .collect::<Result<_>>()?;

    let slices_time = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let states = cores.g3().transpose();
    let traj = Trajectory::new(ds.t_first, ds.dt, states)?;
    let lambda = select_lambda(&traj, cfg.opinf_order, &cfg.lambda_grid).context("regularization selection")?;
    let opinf = fit_opinf(&traj, None, cfg.opinf_order, lambda.lambda).context("operator inference")?;
    let horizon = cfg.horizon.unwrap_or(ds.t_last());
    let dt_int = cfg.dt_int.unwrap_or(ds.dt);
    let simulation = simulate(&opinf, traj.states.row(0), ds.t_first, horizon, dt_int, None).context("core integration")?;
    let a = gca_operator(&cores, &gca_indices)?;
    let gca_solver = LeastSquares::factor(&a, 0.0)?;
    let timings = LfTimings { decompose, slices: slices_time, opinf: clock.elapsed().as_secs_f64() };
    Ok(LfModel {
        cores,
        slices,
        t_gca: cfg.t_gca.clone(),
        gca_indices,
        opinf,
        lambda,
        simulation,
        t_first: ds.t_first,
        dt: ds.dt,
        n_train_times: n_t,
        train_params,
        param_bounds: ds.param_bounds.clone(),
        timings,
        gca_operator: a,
        gca_solver,
    })
}

impl LfModel {
    pub fn n_params(&self) -> usize {
        self.train_params.cols()
    }

    pub fn rank1(&self) -> usize {
        self.cores.ranks().0
    }

    pub fn gca_operator(&self) -> &Matrix {
        &self.gca_operator
    }

    /// Stacked slice predictions `b` at `mu`, row `j N_h + n`.
    pub fn slice_data(&self, mu: &[f64]) -> Result<Vec<f64>> {
        let mut b = Vec::with_capacity(self.gca_operator.rows());
        for (j, s) in self.slices.iter().enumerate() {
            b.extend(s.predict(mu).context(format!("slice {j}"))?);
        }
        Ok(b)
    }

    /// Parameter core from a given stacked slice vector.
    pub fn core_from_slices(&self, b: &[f64]) -> Result<CoreEstimate> {
        let g1 = self.gca_solver.solve_vec(b)?;
        let ag = self.gca_operator.matvec(&g1)?;
        let residual_norm = ag.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        Ok(CoreEstimate { g1, residual_norm })
    }

    /// Core trajectory value at `t`.
    pub fn time_core(&self, t: f64) -> Result<Vec<f64>> {
        self.simulation.at(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = LfMeta {
            kind: "lf".into(),
            t_gca: self.t_gca.clone(),
            gca_indices: self.gca_indices.clone(),
            t_first: self.t_first,
            dt: self.dt,
            n_train_times: self.n_train_times,
            horizon: self.simulation.t_end(),
            dt_int: self.simulation.trajectory.dt,
            lambda: self.lambda.clone(),
            n_params: self.n_params(),
            n_train: self.train_params.rows(),
            param_bounds: self.param_bounds.clone(),
        };
        io::write_json(&dir.join("pipeline_meta.json"), &meta)?;
        io::write_f64s(&dir.join("train_params.f64"), self.train_params.data())?;
        self.cores.save(&dir.join("tt"))?;
        self.opinf.save(&dir.join("opinf"))?;
        for (j, s) in self.slices.iter().enumerate() {
            s.save(&dir.join(format!("slice_{j:02}")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pipeline_meta.json");
        let meta: LfMeta = io::read_json(&path)?;
        if meta.kind != "lf" {
            return Err(Error::Format { path, msg: format!("expected an lf pipeline, found {:?}", meta.kind) });
        }
        let cores = TtCores::load(&dir.join("tt"))?;
        let opinf = OpInfModel::load(&dir.join("opinf"))?;
        let slices = (0..meta.t_gca.len())
            .map(|j| load_slice(&dir.join(format!("slice_{j:02}"))))
            .collect::<Result<Vec<_>>>()?;
        let train_params = Matrix::new(
            meta.n_train,
            meta.n_params,
            io::read_f64s(&dir.join("train_params.f64"), meta.n_train * meta.n_params)?,
        )?;
        let g0 = cores.g3().column(0);
        let simulation = simulate(&opinf, &g0, meta.t_first, meta.horizon, meta.dt_int, None)?;
        let a = gca_operator(&cores, &meta.gca_indices)?;
        let gca_solver = LeastSquares::factor(&a, 0.0)?;
        Ok(Self {
            cores,
            slices,
            t_gca: meta.t_gca,
            gca_indices: meta.gca_indices,
            opinf,
            lambda: meta.lambda,
            simulation,
            t_first: meta.t_first,
            dt: meta.dt,
            n_train_times: meta.n_train_times,
            train_params,
            param_bounds: meta.param_bounds,
            timings: LfTimings::default(),
            gca_operator: a,
            gca_solver,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LfMeta {
    kind: String,
    t_gca: Vec<f64>,
    gca_indices: Vec<usize>,
    t_first: f64,
    dt: f64,
    n_train_times: usize,
    horizon: f64,
    dt_int: f64,
    lambda: LambdaSelection,
    n_params: usize,
    n_train: usize,
    param_bounds: Vec<[f64; 2]>,
}

/// Least-squares parameter core from the slice surrogates at `mu`.
pub fn lf_parametric_core(model: &LfModel, mu: &[f64]) -> Result<CoreEstimate> {
    model.core_from_slices(&model.slice_data(mu)?)
}

pub fn lf_predict(model: &LfModel, mu: &[f64], t: f64) -> Result<Vec<f64>> {
    let g1 = lf_parametric_core(model, mu)?.g1;
    tt_eval(&g1, &model.cores, &model.time_core(t)?)
}

fn default_pretrain_count() -> usize {
    50
}

fn default_branch_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfConfig {
    #[serde(default = "default_pretrain_count")]
    pub pretrain_count: usize,
    #[serde(default)]
    pub pretrain_seed: u64,
    #[serde(default = "default_branch_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    /// Share of the training parameters held out to pick the fine-tuning
    /// iterate; zero keeps the lowest-training-loss iterate.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Feed the fine-tuning stage leave-one-out LF cores at the training
    /// parameters. RBF slices only; an interpolating slice reproduces the
    /// training fields, so its in-sample core carries none of its test error.
    #[serde(default = "default_leave_one_out")]
    pub leave_one_out: bool,
}

fn default_leave_one_out() -> bool {
    true
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            pretrain_count: default_pretrain_count(),
            pretrain_seed: 0,
            hidden: default_branch_hidden(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            validation_fraction: default_validation_fraction(),
            leave_one_out: default_leave_one_out(),
        }
    }
}

/// Low-fidelity model plus a correction of the parameter core.
#[derive(Debug)]
pub struct MfModel {
    pub lf: LfModel,
    /// `(mu, g1_LF(mu)) -> correction`, input scaled to `[-1, 1]`.
    pub branch: Mlp,
    pub pretrain_params: Matrix,
    pub pretrain_seed: u64,
    /// Fine-tuning loss before and after training.
    pub finetune_loss: (f64, f64),
}

/// Latin-hypercube sample of `n` points in the box `bounds`.
pub fn latin_hypercube(n: usize, bounds: &[[f64; 2]], seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, bounds.len());
    for (d, b) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            m.set(i, d, b[0] + (b[1] - b[0]) * (s as f64 + u) / n as f64);
        }
    }
    m
}

/// Relative quadratic-form loss per sample:
/// `(g^T H g - 2 b_i^T g + c_i) / c_i` with `g = base_i + y`.
struct QuadraticObjective {
    inputs: Matrix,
    base: Matrix,
    h: Matrix,
    b: Matrix,
    c: Vec<f64>,
}

impl QuadraticObjective {
    fn new(inputs: Matrix, base: Matrix, h: Matrix, b: Matrix, c: Vec<f64>) -> Self {
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let floor = (1e-12 * mean).max(f64::MIN_POSITIVE);
        let c = c.into_iter().map(|v| v.max(floor)).collect();
        Self { inputs, base, h, b, c }
    }
}

impl Objective for QuadraticObjective {
    fn len(&self) -> usize {
        self.inputs.rows()
    }

    fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    fn loss_and_grad(&self, i: usize, y: &[f64]) -> (f64, Vec<f64>) {
        let g: Vec<f64> = self.base.row(i).iter().zip(y).map(|(a, b)| a + b).collect();
        let hg = self.h.matvec(&g).expect("shapes fixed at construction");
        let bi = self.b.row(i);
        let c = self.c[i];
        let loss = (dot(&g, &hg) - 2.0 * dot(bi, &g) + c) / c;
        let grad = hg.iter().zip(bi).map(|(h, b)| 2.0 * (h - b) / c).collect();
        (loss.max(0.0), grad)
    }
}

fn branch_input(mu: &[f64], g1: &[f64]) -> Vec<f64> {
    mu.iter().chain(g1).copied().collect()
}

/// Two-stage branch training: pretraining against slice-surrogate fields at
/// the GCA times for a Latin-hypercube sample, then fine-tuning against the
/// high-fidelity training snapshots over the whole training window.
pub fn mf_offline(lf: LfModel, ds: &SnapshotDataset, train: &[usize], cfg: &MfConfig) -> Result<MfModel> {
    let r1 = lf.rank1();
    let p = lf.n_params();
    if cfg.pretrain_count == 0 {
        return Err(Error::Config("pretrain_count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config(format!("validation_fraction must lie in [0, 1), got {}", cfg.validation_fraction)));
    }
    let pre_params = latin_hypercube(cfg.pretrain_count, &lf.param_bounds, cfg.pretrain_seed);

    // Stage 1 data: slice predictions and their least-squares core.
    let a = lf.gca_operator();
    let h1 = a.transpose().matmul(a)?;
    let pre: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> = (0..pre_params.rows())
        .into_par_iter()
        .map(|s| {
            let mu = pre_params.row(s);
            let b = lf.slice_data(mu)?;
            let g1 = lf.core_from_slices(&b)?.g1;
            let atb = (0..r1).map(|c| (0..a.rows()).map(|r| a.get(r, c) * b[r]).sum()).collect();
            Ok((branch_input(mu, &g1), g1, atb, dot(&b, &b)))
        })
        .collect::<Result<_>>()?;

    // Stage 2 data: H = sum_t M_t^T M_t on the simulated core, b_i, c_i.
    let times: Vec<f64> = (0..lf.n_train_times).map(|k| ds.time(k)).collect();
    let bases: Vec<Matrix> = times
        .iter()
        .map(|&t| lf.cores.space_basis(&lf.time_core(t)?))
        .collect::<Result<_>>()?;
    let mut h2 = Matrix::zeros(r1, r1);
    for m in &bases {
        let mtm = m.transpose().matmul(m)?;
        for i in 0..r1 {
            for (x, y) in h2.row_mut(i).iter_mut().zip(mtm.row(i)) {
                *x += y;
            }
        }
    }
    let held_out = cfg.leave_one_out && train.len() > 2 && lf.slices.iter().all(|s| s.kind() == SliceKind::Rbf);
    let hf: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> = train
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mu = ds.param(i);
            let g1 = if held_out { held_out_core(&lf, ds, train, pos)? } else { lf_parametric_core(&lf, mu)?.g1 };
            let mut b = vec![0.0; r1];
            let mut c = 0.0;
            for (k, m) in bases.iter().enumerate() {
                let u = ds.field(i, k);
                c += dot(&u, &u);
                for (a, bv) in b.iter_mut().enumerate() {
                    *bv += (0..u.len()).map(|n| m.get(n, a) * u[n]).sum::<f64>();
                }
            }
            Ok((branch_input(mu, &g1), g1, b, c))
        })
        .collect::<Result<_>>()?;

    let all_inputs: Vec<&[f64]> = pre.iter().chain(&hf).map(|s| s.0.as_slice()).collect();
    let scaling = InputScaling::from_rows(all_inputs)?;
    let mut sizes = vec![p + r1];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(r1);
    let branch = Mlp::new(&sizes, cfg.pretrain.seed)?.with_scaling(scaling)?.zero_output_layer();
    let identity = branch.clone();

    let pack = |set: &[(Vec<f64>, Vec<f64>, Vec<f64>, f64)]| -> Result<(Matrix, Matrix, Matrix, Vec<f64>)> {
        Ok((
            Matrix::from_rows(&set.iter().map(|s| s.0.clone()).collect::<Vec<_>>())?,
            Matrix::from_rows(&set.iter().map(|s| s.1.clone()).collect::<Vec<_>>())?,
            Matrix::from_rows(&set.iter().map(|s| s.2.clone()).collect::<Vec<_>>())?,
            set.iter().map(|s| s.3).collect(),
        ))
    };
    let (x1, g1, b1, c1) = pack(&pre)?;
    let stage1 = QuadraticObjective::new(x1, g1, h1, b1, c1);
    let branch = nn::train(branch, &stage1, &cfg.pretrain).context("pretraining")?.net;

    let n_val = match (cfg.validation_fraction * hf.len() as f64).round() as usize {
        0 if cfg.validation_fraction > 0.0 && hf.len() > 1 => 1,
        k => k.min(hf.len() - 1),
    };
    let mut order: Vec<usize> = (0..hf.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.pretrain_seed ^ 0x5eed));
    let (val_idx, fit_idx) = order.split_at(n_val);
    let subset = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| hf[i].clone()).collect::<Vec<_>>()
    };
    let (x2, g2, b2, c2) = pack(&subset(fit_idx))?;
    let stage2 = QuadraticObjective::new(x2, g2, h2.clone(), b2, c2);
    let (net, finetune_loss) = if val_idx.is_empty() {
        let out = nn::train(branch, &stage2, &cfg.finetune).context("fine-tuning")?;
        (out.net, (out.initial_loss, out.best_loss))
    } else {
        let (xv, gv, bv, cv) = pack(&subset(val_idx))?;
        let val = QuadraticObjective::new(xv, gv, h2, bv, cv);
        let out = nn::train_with_validation(branch, &stage2, Some(&val), &cfg.finetune).context("fine-tuning")?;
        // The uncorrected core competes on the held-out parameters too.
        let best = out.best_validation.unwrap_or(f64::INFINITY);
        if nn::mean_loss(&identity, &val) <= best {
            let loss = nn::mean_loss(&identity, &stage2);
            (identity, (out.initial_loss, loss))
        } else {
            (out.net, (out.initial_loss, out.best_loss))
        }
    };
    Ok(MfModel { lf, branch: net, pretrain_params: pre_params, pretrain_seed: cfg.pretrain_seed, finetune_loss })
}

/// LF parametric core at `train[pos]` from RBF slices refitted without it.
fn held_out_core(lf: &LfModel, ds: &SnapshotDataset, train: &[usize], pos: usize) -> Result<Vec<f64>> {
    let rest: Vec<usize> = train.iter().enumerate().filter(|&(q, _)| q != pos).map(|(_, &i)| i).collect();
    let params = ds.params.select_rows(&rest);
    let mut b = Vec::with_capacity(lf.gca_operator.rows());
    for (&k, &t) in lf.gca_indices.iter().zip(&lf.t_gca) {
        let fields = Matrix::from_rows(&rest.iter().map(|&i| ds.field(i, k)).collect::<Vec<_>>())?;
        b.extend(fit_rbf_slice(&params, &fields, t)?.predict(ds.param(train[pos]))?);
    }
    Ok(lf.core_from_slices(&b)?.g1)
}

impl MfModel {
    /// Corrected parameter core.
    pub fn core(&self, mu: &[f64]) -> Result<Vec<f64>> {
        let g1 = lf_parametric_core(&self.lf, mu)?.g1;
        let corr = self.branch.forward(&branch_input(mu, &g1))?;
        Ok(g1.iter().zip(&corr).map(|(a, b)| a + b).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = MfMeta {
            kind: "mf".into(),
            pretrain_seed: self.pretrain_seed,
            pretrain_count: self.pretrain_params.rows(),
            finetune_loss: [self.finetune_loss.0, self.finetune_loss.1],
        };
        io::write_json(&dir.join("pipeline_meta.json"), &meta)?;
        io::write_f64s(&dir.join("pretrain_params.f64"), self.pretrain_params.data())?;
        self.lf.save(&dir.join("lf"))?;
        self.branch.save(&dir.join("branch"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pipeline_meta.json");
        let meta: MfMeta = io::read_json(&path)?;
        if meta.kind != "mf" {
            return Err(Error::Format { path, msg: format!("expected an mf pipeline, found {:?}", meta.kind) });
        }
        let lf = LfModel::load(&dir.join("lf"))?;
        let p = lf.n_params();
        let pretrain_params = Matrix::new(
            meta.pretrain_count,
            p,
            io::read_f64s(&dir.join("pretrain_params.f64"), meta.pretrain_count * p)?,
        )?;
        let branch = Mlp::load(&dir.join("branch"))?;
        if branch.input_dim() != p + lf.rank1() || branch.output_dim() != lf.rank1() {
            return Err(Error::Format { path, msg: "branch network does not match the parameter core".into() });
        }
        Ok(Self {
            lf,
            branch,
            pretrain_params,
            pretrain_seed: meta.pretrain_seed,
            finetune_loss: (meta.finetune_loss[0], meta.finetune_loss[1]),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MfMeta {
    kind: String,
    pretrain_seed: u64,
    pretrain_count: usize,
    finetune_loss: [f64; 2],
}

pub fn mf_predict(model: &MfModel, mu: &[f64], t: f64) -> Result<Vec<f64>> {
    tt_eval(&model.core(mu)?, &model.lf.cores, &model.lf.time_core(t)?)
}

/// A stored LF or MF pipeline, told apart by its metadata.
#[derive(Debug)]
pub enum Pipeline {
    Lf(LfModel),
    Mf(MfModel),
}

impl Pipeline {
    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Kind {
            kind: String,
        }
        let path = dir.join("pipeline_meta.json");
        let k: Kind = io::read_json(&path)?;
        match k.kind.as_str() {
            "lf" => Ok(Pipeline::Lf(LfModel::load(dir)?)),
            "mf" => Ok(Pipeline::Mf(MfModel::load(dir)?)),
            other => Err(Error::Format { path, msg: format!("unknown pipeline kind {other:?}") }),
        }
    }

    pub fn predict(&self, mu: &[f64], t: f64) -> Result<Vec<f64>> {
        let n_params = match self {
            Pipeline::Lf(m) => m.n_params(),
            Pipeline::Mf(m) => m.lf.n_params(),
        };
        if mu.len() != n_params {
            return Err(Error::Argument(format!("expected {n_params} parameters, got {}", mu.len())));
        }
        match self {
            Pipeline::Lf(m) => lf_predict(m, mu, t),
            Pipeline::Mf(m) => mf_predict(m, mu, t),
        }
    }
}

/// Relative two-norm distance used by the pipeline tests.
#[cfg(test)]
fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / norm2(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::Problem;
    use crate::linalg::DenseTensor3;

    /// `u(mu, x, t) = a(mu) v(x) e^{-t}` on a 6 x 6 parameter grid.
    fn separable(n_x: usize, t_end: f64, dt: f64) -> SnapshotDataset {
        let pts: Vec<Vec<f64>> = (0..6).flat_map(|i| (0..6).map(move |j| vec![i as f64 * 0.2, j as f64 * 0.2])).collect();
        let n_t = (t_end / dt).round() as usize + 1;
        let a = |mu: &[f64]| 1.0 + mu[0] + 0.5 * mu[1] * mu[1];
        let v = |n: usize| ((n as f64 + 1.0) * 0.3).sin();
        let s = DenseTensor3::from_fn([pts.len(), n_x, n_t], |i, n, k| a(&pts[i]) * v(n) * (-(k as f64) * dt).exp()).unwrap();
        let train: Vec<usize> = (0..36).filter(|i| i % 3 != 1).collect();
        let test: Vec<usize> = (0..36).filter(|i| i % 3 == 1).collect();
        SnapshotDataset {
            problem: Problem::External,
            params: Matrix::from_rows(&pts).unwrap(),
            param_bounds: vec![[0.0, 1.0], [0.0, 1.0]],
            t_first: 0.0,
            dt,
            snapshots: s,
            grid: None,
            split_seed: 0,
            train,
            test,
        }
    }

    fn sep_cfg() -> LfConfig {
        LfConfig { lambda_grid: vec![0.0], ..LfConfig::new(vec![0.2, 0.6, 1.0], 1.0) }
    }

    fn separable_truth(mu: &[f64], t: f64) -> Vec<f64> {
        let a = 1.0 + mu[0] + 0.5 * mu[1] * mu[1];
        (0..8).map(|n| a * ((n as f64 + 1.0) * 0.3).sin() * (-t).exp()).collect()
    }

    #[test]
    fn separable_data_has_rank_one_cores_and_predicts() {
        let ds = separable(8, 2.0, 0.05);
        let lf = lf_offline(&ds, &ds.train, &sep_cfg()).unwrap();
        assert_eq!(lf.cores.ranks(), (1, 1));
        let g0 = lf.cores.g3().get(0, 0);
        for t in [0.33f64, 1.0, 1.7, 2.0] {
            let ratio = lf.time_core(t).unwrap()[0] / g0;
            assert!((ratio - (-t).exp()).abs() <= 2e-3 * (-t).exp(), "t {t}: {ratio}");
        }
        for &i in ds.train.iter().take(5) {
            let err = rel(&lf_predict(&lf, ds.param(i), 1.7).unwrap(), &separable_truth(ds.param(i), 1.7));
            assert!(err <= 1e-3, "train mu {:?}: {err}", ds.param(i));
        }
        for &i in &ds.test {
            for t in [0.33, 1.0, 1.7] {
                let err = rel(&lf_predict(&lf, ds.param(i), t).unwrap(), &separable_truth(ds.param(i), t));
                assert!(err <= 2e-2, "mu {:?} t {t}: {err}", ds.param(i));
            }
        }
    }

    #[test]
    fn training_rows_recover_g1() {
        let ds = separable(8, 2.0, 0.05);
        let lf = lf_offline(&ds, &ds.train, &sep_cfg()).unwrap();
        for (row, &i) in ds.train.iter().enumerate() {
            let est = lf_parametric_core(&lf, ds.param(i)).unwrap();
            let want = lf.cores.g1().row(row);
            assert!(rel(&est.g1, want) <= 1e-4);
        }
    }

    #[test]
    fn core_is_linear_in_slice_data() {
        let ds = separable(8, 2.0, 0.05);
        let lf = lf_offline(&ds, &ds.train, &sep_cfg()).unwrap();
        let b = lf.slice_data(&[0.3, 0.7]).unwrap();
        let g = lf.core_from_slices(&b).unwrap();
        let doubled: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        let g2 = lf.core_from_slices(&doubled).unwrap();
        for (x, y) in g.g1.iter().zip(&g2.g1) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1e-300));
        }
        assert_eq!(lf.core_from_slices(&vec![0.0; b.len()]).unwrap().g1, vec![0.0; lf.rank1()]);
        let ag = lf.gca_operator().matvec(&g.g1).unwrap();
        let r = ag.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((r - g.residual_norm).abs() <= 1e-12 * norm2(&b));
    }

    #[test]
    fn gca_times_must_lie_on_training_grid() {
        let ds = separable(8, 2.0, 0.05);
        let off = LfConfig { t_gca: vec![0.21], ..sep_cfg() };
        assert!(matches!(lf_offline(&ds, &ds.train, &off), Err(Error::Config(_))));
        let beyond = LfConfig { t_gca: vec![1.5], ..sep_cfg() };
        assert!(matches!(lf_offline(&ds, &ds.train, &beyond), Err(Error::Config(_))));
    }

    #[test]
    fn underdetermined_core_is_rejected() {
        // N_h = 1 with a rank-2 parameter core and a single slice.
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let s = DenseTensor3::from_fn([8, 1, 21], |i, _, k| {
            let t = k as f64 * 0.05;
            (i as f64).sin() * (-t).exp() + (i as f64 * 0.7).cos() * (-3.0 * t).exp()
        })
        .unwrap();
        let ds = SnapshotDataset {
            problem: Problem::External,
            params: Matrix::from_rows(&pts).unwrap(),
            param_bounds: vec![[0.0, 7.0]],
            t_first: 0.0,
            dt: 0.05,
            snapshots: s,
            grid: None,
            split_seed: 0,
            train: (0..8).collect(),
            test: vec![],
        };
        let cfg = LfConfig { lambda_grid: vec![0.0], ..LfConfig::new(vec![0.5], 1.0) };
        match lf_offline(&ds, &ds.train, &cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("r1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn quick_mf() -> MfConfig {
        let short = TrainConfig { epochs: 200, ..TrainConfig::default() };
        MfConfig { pretrain_count: 10, hidden: vec![8, 8], pretrain: short.clone(), finetune: short, ..MfConfig::default() }
    }

    #[test]
    fn zero_branch_equals_lf_bitwise() {
        let ds = separable(8, 2.0, 0.05);
        let lf = lf_offline(&ds, &ds.train, &sep_cfg()).unwrap();
        let cfg = MfConfig { pretrain: TrainConfig { epochs: 1, learning_rate: 1e-300, ..TrainConfig::default() }, ..quick_mf() };
        let mf = mf_offline(lf, &ds, &ds.train, &cfg).unwrap();
        let zeroed = MfModel { branch: mf.branch.clone().zero_output_layer(), ..mf };
        for mu in [[0.1, 0.9], [0.5, 0.5]] {
            for t in [0.0, 0.77, 2.0] {
                assert_eq!(mf_predict(&zeroed, &mu, t).unwrap(), lf_predict(&zeroed.lf, &mu, t).unwrap());
            }
        }
    }

    #[test]
    fn mf_training_does_not_increase_loss_and_round_trips() {
        let ds = separable(8, 2.0, 0.05);
        let lf = lf_offline(&ds, &ds.train, &sep_cfg()).unwrap();
        let mf = mf_offline(lf, &ds, &ds.train, &quick_mf()).unwrap();
        assert!(mf.finetune_loss.1 <= mf.finetune_loss.0);
        let dir = tempfile::tempdir().unwrap();
        mf.save(dir.path()).unwrap();
        let back = Pipeline::load(dir.path()).unwrap();
        assert_eq!(back.predict(&[0.3, 0.4], 1.9).unwrap(), mf_predict(&mf, &[0.3, 0.4], 1.9).unwrap());
        assert!(matches!(back.predict(&[0.3], 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn latin_hypercube_strata() {
        let m = latin_hypercube(10, &[[0.0, 1.0], [-2.0, 2.0]], 3);
        for d in 0..2 {
            let mut cells: Vec<usize> = (0..10)
                .map(|i| {
                    let (lo, hi) = if d == 0 { (0.0, 1.0) } else { (-2.0, 2.0) };
                    ((m.get(i, d) - lo) / (hi - lo) * 10.0).floor() as usize
                })
                .collect();
            cells.sort_unstable();
            assert_eq!(cells, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(m, latin_hypercube(10, &[[0.0, 1.0], [-2.0, 2.0]], 3));
    }
}
