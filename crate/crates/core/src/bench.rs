//! Error metrics, experiment orchestration and report files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::fom::{generate_dataset, FomConfig, FomSettings, Problem, SnapshotDataset};
use crate::io;
use crate::linalg::{norm2, Matrix};
use crate::opinf::LambdaSelection;
use crate::pipeline::{lf_offline, lf_predict, mf_offline, mf_predict, LfConfig, MfConfig};
use crate::surrogate::{fit_podnn, pod_basis, PodNnConfig, PodNnData, SliceConfig, SliceKind};

/// First line of every `report.csv`.
pub const REPORT_HEADER: &str = "# romtt-report v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LF-TTOI")]
    LfTtoi,
    #[serde(rename = "MF-TTOI")]
    MfTtoi,
    #[serde(rename = "POD-Proj")]
    PodProj,
    #[serde(rename = "POD-NN")]
    PodNn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::LfTtoi, Method::MfTtoi, Method::PodProj, Method::PodNn];

    pub fn tag(self) -> &'static str {
        match self {
            Method::LfTtoi => "LF-TTOI",
            Method::MfTtoi => "MF-TTOI",
            Method::PodProj => "POD-Proj",
            Method::PodNn => "POD-NN",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Model directory name under `models/`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Method::LfTtoi => "lf_ttoi",
            Method::MfTtoi => "mf_ttoi",
            Method::PodProj => "pod_proj",
            Method::PodNn => "pod_nn",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeError {
    pub value: f64,
    /// The reference field is zero and `value` is the absolute norm of the prediction.
    pub absolute: bool,
}

/// `||u_true - u_pred|| / ||u_true||`, or `||u_pred||` when the reference is zero.
pub fn relative_error(u_true: &[f64], u_pred: &[f64]) -> Result<RelativeError> {
    if u_true.len() != u_pred.len() {
        return Err(Error::Argument(format!("field lengths differ: {} vs {}", u_true.len(), u_pred.len())));
    }
    let diff: f64 = u_true.iter().zip(u_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let n = norm2(u_true);
    if n == 0.0 {
        Ok(RelativeError { value: norm2(u_pred), absolute: true })
    } else {
        Ok(RelativeError { value: diff / n, absolute: false })
    }
}

/// Per-point errors of one method over a parameter set and a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub method: String,
    pub params: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    /// Parameter-major, `None` for cells never filled.
    cells: Vec<Option<f64>>,
}

impl ErrorTable {
    pub fn new(method: impl Into<String>, params: Vec<Vec<f64>>, times: Vec<f64>) -> Self {
        let n = params.len() * times.len();
        Self { method: method.into(), params, times, cells: vec![None; n] }
    }

    pub fn set(&mut self, param: usize, time: usize, value: f64) {
        let n_t = self.times.len();
        self.cells[param * n_t + time] = Some(value);
    }

    pub fn get(&self, param: usize, time: usize) -> Option<f64> {
        self.cells[param * self.times.len() + time]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean over parameters at each time.
    pub per_time: Vec<f64>,
    /// Mean over times for each parameter.
    pub per_param: Vec<f64>,
    /// Time-mean of `per_time`.
    pub global: f64,
}

pub fn aggregate_errors(table: &ErrorTable) -> Result<Aggregates> {
    let (n_mu, n_t) = (table.n_params(), table.n_times());
    if n_mu == 0 || n_t == 0 {
        return Err(Error::Data("error table is empty".into()));
    }
    let missing: Vec<String> = (0..n_mu)
        .flat_map(|i| (0..n_t).map(move |k| (i, k)))
        .filter(|&(i, k)| table.get(i, k).is_none())
        .map(|(i, k)| format!("({i}, {k})"))
        .collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        let more = if missing.len() > 10 { format!(" and {} more", missing.len() - 10) } else { String::new() };
        return Err(Error::Data(format!("{}: missing cells (param, time) {shown}{more}", table.method)));
    }
    let v = |i: usize, k: usize| table.get(i, k).unwrap_or(f64::NAN);
    let per_time: Vec<f64> = (0..n_t).map(|k| (0..n_mu).map(|i| v(i, k)).sum::<f64>() / n_mu as f64).collect();
    let per_param: Vec<f64> = (0..n_mu).map(|i| (0..n_t).map(|k| v(i, k)).sum::<f64>() / n_t as f64).collect();
    let global = per_time.iter().sum::<f64>() / n_t as f64;
    Ok(Aggregates { per_time, per_param, global })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate(FomConfig),
    Load(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub mu: Vec<f64>,
    pub t: f64,
}

fn default_eps_tt() -> f64 {
    1e-8
}

fn default_order() -> usize {
    1
}

fn default_pod_tol() -> f64 {
    1e-8
}

fn default_lambda_grid() -> Vec<f64> {
    LfConfig::new(vec![], 0.0).lambda_grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub methods: Vec<Method>,
    pub t_gca: Vec<f64>,
    /// First instant of both windows; earlier stored instants are dropped
    /// before anything is fitted or scored. Defaults to the dataset's first instant.
    #[serde(default)]
    pub window_start: Option<f64>,
    /// Training window is `[window_start, train_end]`.
    pub train_end: f64,
    /// Test window is `[window_start, test_end]`; defaults to the whole dataset.
    #[serde(default)]
    pub test_end: Option<f64>,
    #[serde(default = "default_eps_tt")]
    pub eps_tt: f64,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_order")]
    pub opinf_order: usize,
    #[serde(default)]
    pub dt_int: Option<f64>,
    #[serde(default)]
    pub slice: SliceConfig,
    #[serde(default)]
    pub mf: MfConfig,
    #[serde(default)]
    pub podnn: PodNnConfig,
    /// Energy tolerance of the POD-Proj basis.
    #[serde(default = "default_pod_tol")]
    pub pod_energy_tol: f64,
    /// Drives the train/test split of generated data and every network seed.
    #[serde(default)]
    pub seed: u64,
    /// Extra `(mu, t)` points solved with the full-order model and reported in `summary.json`.
    #[serde(default)]
    pub probes: Vec<Probe>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk heat benchmark: train on [0, 1], test on [0, 3]. The windows start
    /// one step after the zero initial state. Both desk presets use learned
    /// POD-NN slices.
    pub fn heat() -> Self {
        let mut cfg =
            Self::with_dataset(DatasetSource::Generate(FomConfig::heat()), vec![0.05, 0.2, 0.4, 0.6, 0.8, 1.0], 1.0);
        cfg.window_start = Some(0.05);
        cfg.slice.kind = SliceKind::PodNn;
        cfg.probes = vec![Probe { mu: vec![1.2, -0.1], t: 3.0 }];
        cfg
    }

    /// Desk advection-diffusion benchmark: train on [0, 1.5], test on [0, 2].
    pub fn advdiff() -> Self {
        let mut cfg =
            Self::with_dataset(DatasetSource::Generate(FomConfig::advdiff()), vec![0.02, 0.38, 0.76, 1.12, 1.5], 1.5);
        cfg.window_start = Some(0.02);
        cfg.slice.kind = SliceKind::PodNn;
        cfg
    }

    pub fn with_dataset(dataset: DatasetSource, t_gca: Vec<f64>, train_end: f64) -> Self {
        Self {
            dataset,
            methods: Method::ALL.to_vec(),
            t_gca,
            window_start: None,
            train_end,
            test_end: None,
            eps_tt: default_eps_tt(),
            lambda_grid: default_lambda_grid(),
            opinf_order: default_order(),
            dt_int: None,
            slice: SliceConfig::default(),
            mf: MfConfig::default(),
            podnn: PodNnConfig::default(),
            pod_energy_tol: default_pod_tol(),
            seed: 0,
            probes: vec![],
            output: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("method list contains duplicates".into()));
        }
        if let Some(ws) = self.window_start {
            if ws >= self.train_end {
                return Err(Error::Config(format!("window start {ws} is not before the training window end {}", self.train_end)));
            }
        }
        if let Some(te) = self.test_end {
            if te < self.train_end {
                return Err(Error::Config(format!("test window end {te} precedes training window end {}", self.train_end)));
            }
        }
        if !self.probes.is_empty() && !matches!(self.dataset, DatasetSource::Generate(_)) {
            return Err(Error::Config("probes need a generated dataset".into()));
        }
        Ok(())
    }

    fn lf_config(&self) -> LfConfig {
        LfConfig {
            t_gca: self.t_gca.clone(),
            train_end: self.train_end,
            horizon: self.test_end,
            eps_tt: self.eps_tt,
            opinf_order: self.opinf_order,
            lambda_grid: self.lambda_grid.clone(),
            dt_int: self.dt_int,
            slice: self.slice.clone(),
        }
    }

    /// Copies `seed` into every stochastic component.
    fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.slice.train.seed = self.seed;
        c.mf.pretrain_seed = self.seed;
        c.mf.pretrain.seed = self.seed.wrapping_add(1);
        c.mf.finetune.seed = self.seed.wrapping_add(2);
        c.podnn.train.seed = self.seed.wrapping_add(3);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub decompose: f64,
    pub train: f64,
    pub predict: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranks: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_pod: Option<usize>,
    /// MF fine-tuning loss before and after training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_loss: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_fit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub aggregates: Aggregates,
    /// Cells whose reference field is zero (absolute error reported).
    pub zero_reference_cells: usize,
    pub info: MethodInfo,
    pub timings: Timings,
    pub model_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: Method,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mu: Vec<f64>,
    pub t: f64,
    pub errors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorWindow {
    pub train: [f64; 2],
    pub test: [f64; 2],
    pub averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub format: String,
    pub seed: u64,
    pub problem: Problem,
    pub window: ErrorWindow,
    pub test_params: Vec<Vec<f64>>,
    pub test_times: Vec<f64>,
    pub generate_seconds: f64,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<Failure>,
    pub probes: Vec<ProbeResult>,
}

impl ExperimentSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn global(&self, m: Method) -> Option<f64> {
        self.method(m).map(|s| s.aggregates.global)
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub tables: Vec<ErrorTable>,
}

/// Loads or generates the dataset named by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SnapshotDataset> {
    match &cfg.dataset {
        DatasetSource::Generate(fom) => generate_dataset(fom, cfg.seed).context("dataset generation"),
        DatasetSource::Load(path) => SnapshotDataset::load(path),
    }
}

struct MethodRun {
    table: ErrorTable,
    zero_cells: usize,
    info: MethodInfo,
    timings: Timings,
}

fn evaluate(
    method: Method,
    ds: &SnapshotDataset,
    n_test_t: usize,
    predict: &(dyn Fn(&[f64], usize) -> Result<Vec<f64>> + Sync),
) -> Result<(ErrorTable, usize)> {
    let params: Vec<Vec<f64>> = ds.test.iter().map(|&i| ds.param(i).to_vec()).collect();
    let times: Vec<f64> = (0..n_test_t).map(|k| ds.time(k)).collect();
    let rows: Vec<Vec<RelativeError>> = ds
        .test
        .par_iter()
        .map(|&i| {
            (0..n_test_t)
                .map(|k| relative_error(&ds.field(i, k), &predict(ds.param(i), k)?))
                .collect::<Result<Vec<_>>>()
                .context(format!("prediction for parameter {i}"))
        })
        .collect::<Result<_>>()?;
    let mut table = ErrorTable::new(method.tag(), params, times);
    let mut zero = 0;
    for (pi, row) in rows.iter().enumerate() {
        for (k, e) in row.iter().enumerate() {
            table.set(pi, k, e.value);
            zero += usize::from(e.absolute);
        }
    }
    Ok((table, zero))
}

/// Runs every configured method on the dataset and writes `report.csv`,
/// `summary.json` and the model directories under `out`. Method failures are
/// recorded in the summary; the remaining methods still run.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let clock = Instant::now();
    let mut ds = load_dataset(&cfg)?;
    let generate_seconds = clock.elapsed().as_secs_f64();
    if let Some(ws) = cfg.window_start {
        let k = ds.time_index(ws).ok_or_else(|| Error::Config(format!("window start {ws} is not a dataset instant")))?;
        ds = ds.drop_leading(k)?;
    }
    let test_end = cfg.test_end.unwrap_or(ds.t_last());
    if test_end > ds.t_last() + 1e-12 {
        return Err(Error::Config(format!("test window end {test_end} exceeds the dataset's last time {}", ds.t_last())));
    }
    if ds.test.is_empty() {
        return Err(Error::Config("dataset has no test parameters".into()));
    }
    let n_test_t = ds.count_until(test_end);
    let n_train_t = ds.count_until(cfg.train_end);
    if n_train_t == 0 {
        return Err(Error::Config(format!("training window ending at {} is empty", cfg.train_end)));
    }
    let models = out.join("models");
    io::ensure_dir(&models)?;

    let mut runs: Vec<(Method, MethodRun)> = Vec::new();
    let mut failures = Vec::new();
    let mut fail = |method: Method, stage: &str, message: String| {
        failures.push(Failure { method, stage: stage.to_string(), message });
    };

    let wants = |m: Method| cfg.methods.contains(&m);
    let mut probe_models: Vec<ProbeModel> = Vec::new();

    if wants(Method::LfTtoi) || wants(Method::MfTtoi) {
        let clock = Instant::now();
        match lf_offline(&ds, &ds.train, &cfg.lf_config()) {
            Err(e) => {
                for m in [Method::LfTtoi, Method::MfTtoi].into_iter().filter(|&m| wants(m)) {
                    fail(m, "offline", e.to_string());
                }
            }
            Ok(lf) => {
                let lf_train = clock.elapsed().as_secs_f64();
                let (r1, r2) = lf.cores.ranks();
                let info = MethodInfo { ranks: Some([r1, r2]), lambda: Some(lf.lambda.clone()), ..MethodInfo::default() };
                let timings = Timings { decompose: lf.timings.decompose, train: lf_train - lf.timings.decompose, predict: 0.0 };
                if wants(Method::LfTtoi) {
                    let clock = Instant::now();
                    match evaluate(Method::LfTtoi, &ds, n_test_t, &|mu, k| lf_predict(&lf, mu, ds.time(k))) {
                        Ok((table, zero_cells)) => {
                            let timings = Timings { predict: clock.elapsed().as_secs_f64(), ..timings.clone() };
                            match lf.save(&models.join(Method::LfTtoi.dir_name())) {
                                Ok(()) => runs.push((Method::LfTtoi, MethodRun { table, zero_cells, info: info.clone(), timings })),
                                Err(e) => fail(Method::LfTtoi, "save", e.to_string()),
                            }
                        }
                        Err(e) => fail(Method::LfTtoi, "predict", e.to_string()),
                    }
                }
                if wants(Method::MfTtoi) {
                    let clock = Instant::now();
                    match mf_offline(lf, &ds, &ds.train, &cfg.mf) {
                        Err(e) => fail(Method::MfTtoi, "offline", e.to_string()),
                        Ok(mf) => {
                            let mf_train = clock.elapsed().as_secs_f64();
                            let clock = Instant::now();
                            match evaluate(Method::MfTtoi, &ds, n_test_t, &|mu, k| mf_predict(&mf, mu, ds.time(k))) {
                                Ok((table, zero_cells)) => {
                                    let info = MethodInfo { finetune_loss: Some([mf.finetune_loss.0, mf.finetune_loss.1]), ..info };
                                    let timings =
                                        Timings { train: timings.train + mf_train, predict: clock.elapsed().as_secs_f64(), ..timings };
                                    match mf.save(&models.join(Method::MfTtoi.dir_name())) {
                                        Ok(()) => runs.push((Method::MfTtoi, MethodRun { table, zero_cells, info, timings })),
                                        Err(e) => fail(Method::MfTtoi, "save", e.to_string()),
                                    }
                                    if !cfg.probes.is_empty() {
                                        let mf = Arc::new(mf);
                                        if wants(Method::LfTtoi) {
                                            let m = Arc::clone(&mf);
                                            probe_models.push((Method::LfTtoi, Box::new(move |mu, t| lf_predict(&m.lf, mu, t))));
                                        }
                                        probe_models.push((Method::MfTtoi, Box::new(move |mu, t| mf_predict(&mf, mu, t))));
                                    }
                                }
                                Err(e) => fail(Method::MfTtoi, "predict", e.to_string()),
                            }
                        }
                    }
                } else if !cfg.probes.is_empty() {
                    probe_models.push((Method::LfTtoi, Box::new(move |mu, t| lf_predict(&lf, mu, t))));
                }
            }
        }
    }

    let train_params = ds.params.select_rows(&ds.train);
    if wants(Method::PodProj) {
        let clock = Instant::now();
        let mut cols = Vec::with_capacity(ds.train.len() * n_train_t);
        for &i in &ds.train {
            for k in 0..n_train_t {
                cols.push(ds.field(i, k));
            }
        }
        let result = Matrix::from_rows(&cols).and_then(|m| pod_basis(&m.transpose(), cfg.pod_energy_tol));
        match result {
            Err(e) => fail(Method::PodProj, "offline", e.to_string()),
            Ok(basis) => {
                let train = clock.elapsed().as_secs_f64();
                let clock = Instant::now();
                let project = |k: usize, i: usize| basis.expand(&basis.coefficients(&ds.field(i, k)));
                let by_param: BTreeMap<Vec<u64>, usize> =
                    ds.test.iter().map(|&i| (ds.param(i).iter().map(|v| v.to_bits()).collect(), i)).collect();
                let lookup = |mu: &[f64]| by_param.get(&mu.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).copied();
                let res = evaluate(Method::PodProj, &ds, n_test_t, &|mu, k| {
                    lookup(mu).map(|i| project(k, i)).ok_or_else(|| Error::Argument("projection needs a dataset parameter".into()))
                });
                match res {
                    Ok((table, zero_cells)) => {
                        let info = MethodInfo { r_pod: Some(basis.rank()), ..MethodInfo::default() };
                        let timings = Timings { decompose: train, train: 0.0, predict: clock.elapsed().as_secs_f64() };
                        match basis.save(&models.join(Method::PodProj.dir_name())) {
                            Ok(()) => runs.push((Method::PodProj, MethodRun { table, zero_cells, info, timings })),
                            Err(e) => fail(Method::PodProj, "save", e.to_string()),
                        }
                    }
                    Err(e) => fail(Method::PodProj, "predict", e.to_string()),
                }
            }
        }
    }

    if wants(Method::PodNn) {
        let clock = Instant::now();
        let times: Vec<f64> = (0..n_train_t).map(|k| ds.time(k)).collect();
        let fields = |i: usize, k: usize| ds.field(ds.train[i], k);
        let data = PodNnData { params: &train_params, times: &times, fields: &fields };
        match fit_podnn(&data, &cfg.podnn) {
            Err(e) => fail(Method::PodNn, "offline", e.to_string()),
            Ok(model) => {
                let train = clock.elapsed().as_secs_f64();
                let clock = Instant::now();
                match evaluate(Method::PodNn, &ds, n_test_t, &|mu, k| model.predict(mu, ds.time(k))) {
                    Ok((table, zero_cells)) => {
                        let info =
                            MethodInfo { r_pod: Some(model.basis.rank()), training_fit: Some(model.training_fit), ..MethodInfo::default() };
                        let timings = Timings { decompose: 0.0, train, predict: clock.elapsed().as_secs_f64() };
                        match model.save(&models.join(Method::PodNn.dir_name())) {
                            Ok(()) => runs.push((Method::PodNn, MethodRun { table, zero_cells, info, timings })),
                            Err(e) => fail(Method::PodNn, "save", e.to_string()),
                        }
                        if !cfg.probes.is_empty() {
                            probe_models.push((Method::PodNn, Box::new(move |mu, t| model.predict(mu, t))));
                        }
                    }
                    Err(e) => fail(Method::PodNn, "predict", e.to_string()),
                }
            }
        }
    }

    runs.sort_by_key(|(m, _)| cfg.methods.iter().position(|x| x == m));
    let probes = match &cfg.dataset {
        DatasetSource::Generate(fom) if !cfg.probes.is_empty() => run_probes(&fom.settings()?, &cfg.probes, &probe_models, &ds)?,
        _ => vec![],
    };

    let mut methods = Vec::new();
    let mut tables = Vec::new();
    for (m, run) in runs {
        let aggregates = aggregate_errors(&run.table)?;
        methods.push(MethodSummary {
            method: m,
            aggregates,
            zero_reference_cells: run.zero_cells,
            info: run.info,
            timings: run.timings,
            model_dir: format!("models/{}", m.dir_name()),
        });
        tables.push(run.table);
    }
    let summary = ExperimentSummary {
        format: "romtt-summary v1".into(),
        seed: cfg.seed,
        problem: ds.problem,
        window: ErrorWindow {
            train: [ds.t_first, cfg.train_end],
            test: [ds.t_first, test_end],
            averaging: "time-mean of the per-time means over test parameters, at every dataset instant of the test window".into(),
        },
        test_params: ds.test.iter().map(|&i| ds.param(i).to_vec()).collect(),
        test_times: (0..n_test_t).map(|k| ds.time(k)).collect(),
        generate_seconds,
        methods,
        failures,
        probes,
    };
    write_report(&out.join("report.csv"), &tables)?;
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(ExperimentOutcome { summary, tables })
}

type ProbeModel = (Method, Box<dyn Fn(&[f64], f64) -> Result<Vec<f64>> + Sync>);

fn run_probes(settings: &FomSettings, probes: &[Probe], models: &[ProbeModel], ds: &SnapshotDataset) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for p in probes {
        let k = (p.t / settings.dt).round() as usize;
        if ((k as f64) * settings.dt - p.t).abs() > 1e-9 || p.t > settings.t_final + 1e-12 {
            return Err(Error::Config(format!("probe time {} is not a solver instant", p.t)));
        }
        if p.t < ds.t_first - 1e-12 {
            return Err(Error::Config(format!("probe time {} precedes the dataset", p.t)));
        }
        let truth = settings.solve(&p.mu).context("probe solve")?.row(k).to_vec();
        let mut errors = BTreeMap::new();
        for (m, f) in models {
            let e = relative_error(&truth, &f(&p.mu, p.t)?)?;
            errors.insert(m.tag().to_string(), e.value);
        }
        out.push(ProbeResult { mu: p.mu.clone(), t: p.t, errors });
    }
    Ok(out)
}

/// Writes the per-point table of every method.
pub fn write_report(path: &Path, tables: &[ErrorTable]) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    let n_p = tables.first().map_or(0, |t| t.params.first().map_or(0, Vec::len));
    let mut text = String::new();
    text.push_str(REPORT_HEADER);
    text.push('\n');
    let mut header = vec!["method".to_string()];
    header.extend((0..n_p).map(|j| format!("mu{j}")));
    header.extend(["t".to_string(), "rel_error".to_string()]);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
    w.write_record(&header).map_err(csv_err)?;
    for table in tables {
        for (i, mu) in table.params.iter().enumerate() {
            for (k, t) in table.times.iter().enumerate() {
                let mut rec = vec![table.method.clone()];
                rec.extend(mu.iter().map(|v| format!("{v:e}")));
                rec.push(format!("{t:e}"));
                rec.push(table.get(i, k).map_or(String::new(), |v| format!("{v:e}")));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    let body = w.into_inner().map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    text.push_str(std::str::from_utf8(&body).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?);
    if let Some(parent) = path.parent() {
        io::ensure_dir(parent)?;
    }
    let mut f = File::create(path).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)
}

/// Reads a `report.csv` back into one table per method, in file order.
pub fn read_report(path: &Path) -> Result<Vec<ErrorTable>> {
    let fmt = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let text = io::read_text(path)?;
    let mut lines = text.splitn(2, '\n');
    if lines.next().map(str::trim_end) != Some(REPORT_HEADER) {
        return Err(fmt(format!("first line must be {REPORT_HEADER:?}")));
    }
    let rest = lines.next().unwrap_or("");
    let mut r = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
    let headers = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let n = headers.len();
    if n < 3 || &headers[0] != "method" || &headers[n - 2] != "t" || &headers[n - 1] != "rel_error" {
        return Err(fmt("expected columns method, mu..., t, rel_error".into()));
    }
    let n_p = n - 3;
    struct Acc {
        params: Vec<Vec<f64>>,
        times: Vec<f64>,
        cells: Vec<(usize, usize, Option<f64>)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut accs: BTreeMap<String, Acc> = BTreeMap::new();
    let num = |s: &str| s.parse::<f64>().map_err(|e| fmt(format!("bad number {s:?}: {e}")));
    for rec in r.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let method = rec[0].to_string();
        let mu = (1..=n_p).map(|j| num(&rec[j])).collect::<Result<Vec<_>>>()?;
        let t = num(&rec[n - 2])?;
        let v = if rec[n - 1].is_empty() { None } else { Some(num(&rec[n - 1])?) };
        let acc = accs.entry(method.clone()).or_insert_with(|| {
            order.push(method.clone());
            Acc { params: vec![], times: vec![], cells: vec![] }
        });
        let pi = match acc.params.iter().position(|p| *p == mu) {
            Some(p) => p,
            None => {
                acc.params.push(mu);
                acc.params.len() - 1
            }
        };
        let ti = match acc.times.iter().position(|&x| x == t) {
            Some(p) => p,
            None => {
                acc.times.push(t);
                acc.times.len() - 1
            }
        };
        acc.cells.push((pi, ti, v));
    }
    Ok(order
        .into_iter()
        .map(|m| {
            let acc = accs.remove(&m).expect("inserted above");
            let mut table = ErrorTable::new(m, acc.params, acc.times);
            for (i, k, v) in acc.cells {
                if let Some(v) = v {
                    table.set(i, k, v);
                }
            }
            table
        })
        .collect())
}
