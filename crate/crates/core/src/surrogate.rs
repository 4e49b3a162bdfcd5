//! Fixed-time parametric surrogates (parameter -> field at one instant), the
//! POD basis and the POD-NN baseline that treats time as an extra input.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{dot, norm2, svd, truncation_rank, Matrix};
use crate::nn::{self, InputScaling, Loss, Mlp, Supervised, TrainConfig};

/// Parameter-to-field map at a fixed time instance.
pub trait SliceSurrogate: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> SliceKind;

    fn t_slice(&self) -> f64;

    fn n_params(&self) -> usize;

    fn n_space(&self) -> usize;

    fn predict(&self, mu: &[f64]) -> Result<Vec<f64>>;

    /// Largest relative error on the training set, measured at fit time.
    fn training_fit(&self) -> f64;

    fn save(&self, dir: &Path) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    #[default]
    Rbf,
    PodNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    #[serde(default)]
    pub kind: SliceKind,
    /// Energy tolerance of the per-slice POD (POD-NN slices only).
    #[serde(default = "default_energy_tol")]
    pub energy_tol: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_energy_tol() -> f64 {
    1e-8
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self { kind: SliceKind::Rbf, energy_tol: default_energy_tol(), hidden: default_hidden(), train: TrainConfig::default() }
    }
}

pub fn fit_slice(cfg: &SliceConfig, params: &Matrix, fields: &Matrix, t_slice: f64) -> Result<Box<dyn SliceSurrogate>> {
    Ok(match cfg.kind {
        SliceKind::Rbf => Box::new(fit_rbf_slice(params, fields, t_slice)?),
        SliceKind::PodNn => Box::new(fit_podnn_slice(params, fields, t_slice, cfg)?),
    })
}

pub fn load_slice(dir: &Path) -> Result<Box<dyn SliceSurrogate>> {
    let meta: SliceMeta = io::read_json(&dir.join("slice_meta.json"))?;
    Ok(match meta.kind {
        SliceKind::Rbf => Box::new(RbfSlice::load(dir, meta)?),
        SliceKind::PodNn => Box::new(PodNnSlice::load(dir, meta)?),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SliceMeta {
    kind: SliceKind,
    t_slice: f64,
    n_train: usize,
    n_params: usize,
    n_space: usize,
    training_fit: f64,
    #[serde(default)]
    shape: Option<f64>,
    #[serde(default)]
    param_mean: Option<Vec<f64>>,
    #[serde(default)]
    param_std: Option<Vec<f64>>,
    #[serde(default)]
    rank: Option<usize>,
}

fn check_training_set(params: &Matrix, fields: &Matrix) -> Result<()> {
    if params.rows() != fields.rows() {
        return Err(Error::Argument(format!("{} parameter rows for {} fields", params.rows(), fields.rows())));
    }
    if params.rows() < 2 {
        return Err(Error::Data(format!("need at least 2 training points, got {}", params.rows())));
    }
    for i in 0..params.rows() {
        for j in i + 1..params.rows() {
            if params.row(i) == params.row(j) {
                return Err(Error::Data(format!("training parameters {i} and {j} coincide ({:?})", params.row(i))));
            }
        }
    }
    Ok(())
}

fn rel_err(pred: &[f64], truth: &[f64]) -> f64 {
    let diff: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let n = norm2(truth);
    if n > 0.0 { diff / n } else { diff }
}

fn max_training_error(s: &dyn SliceSurrogate, params: &Matrix, fields: &Matrix) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..params.rows() {
        worst = worst.max(rel_err(&s.predict(params.row(i))?, fields.row(i)));
    }
    Ok(worst)
}

pub const RBF_NUGGET: f64 = 1e-10;

/// Gaussian radial-basis interpolant of the fields around their mean.
///
/// Parameters are standardized per coordinate; the shape parameter is the
/// reciprocal of the median pairwise distance of the standardized points.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSlice {
    t_slice: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
    shape: f64,
    centers: Matrix,
    /// `N_train x N_h`.
    weights: Matrix,
    mean_field: Vec<f64>,
    training_fit: f64,
}

fn standardize(mu: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    mu.iter().zip(mean.iter().zip(std)).map(|(v, (m, s))| (v - m) / s).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn fit_rbf_slice(params: &Matrix, fields: &Matrix, t_slice: f64) -> Result<RbfSlice> {
    check_training_set(params, fields)?;
    let (n, p) = params.shape();
    let n_h = fields.cols();
    let mean: Vec<f64> = (0..p).map(|c| params.column(c).iter().sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..p)
        .map(|c| {
            let col = params.column(c);
            let var = col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let centers = Matrix::from_rows(&(0..n).map(|i| standardize(params.row(i), &mean, &std)).collect::<Vec<_>>())?;
    let mut pair: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pair.push(dist(centers.row(i), centers.row(j)));
        }
    }
    pair.sort_by(f64::total_cmp);
    let m = pair.len();
    let median = if m % 2 == 1 { pair[m / 2] } else { 0.5 * (pair[m / 2 - 1] + pair[m / 2]) };
    let shape = 1.0 / median;

    let kernel = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| {
        let k = (-(shape * dist(centers.row(i), centers.row(j))).powi(2)).exp();
        if i == j { k + RBF_NUGGET } else { k }
    });
    let mean_field: Vec<f64> = (0..n_h).map(|c| (0..n).map(|i| fields.get(i, c)).sum::<f64>() / n as f64).collect();
    let rhs = nalgebra::DMatrix::<f64>::from_fn(n, n_h, |i, c| fields.get(i, c) - mean_field[c]);
    let solve = |b: &nalgebra::DMatrix<f64>| -> Result<nalgebra::DMatrix<f64>> {
        match kernel.clone().cholesky() {
            Some(ch) => Ok(ch.solve(b)),
            None => kernel.clone().lu().solve(b).ok_or_else(|| Error::Data("RBF kernel matrix is singular".into())),
        }
    };
    // The kernel is severely ill-conditioned for flat shapes; one refinement
    // step recovers most of the digits lost in the factorization.
    let mut w = solve(&rhs)?;
    let r = &rhs - &kernel * &w;
    w += solve(&r)?;
    let weights = Matrix::from_fn(n, n_h, |i, c| w[(i, c)]);
    let mut s = RbfSlice { t_slice, mean, std, shape, centers, weights, mean_field, training_fit: 0.0 };
    s.training_fit = max_training_error(&s, params, fields)?;
    Ok(s)
}

impl RbfSlice {
    pub fn shape(&self) -> f64 {
        self.shape
    }

    fn load(dir: &Path, meta: SliceMeta) -> Result<Self> {
        let path = dir.join("slice_meta.json");
        let missing = |what: &str| Error::Format { path: path.clone(), msg: format!("missing {what}") };
        let (n, p, n_h) = (meta.n_train, meta.n_params, meta.n_space);
        Ok(Self {
            t_slice: meta.t_slice,
            mean: meta.param_mean.ok_or_else(|| missing("param_mean"))?,
            std: meta.param_std.ok_or_else(|| missing("param_std"))?,
            shape: meta.shape.ok_or_else(|| missing("shape"))?,
            centers: Matrix::new(n, p, io::read_f64s(&dir.join("centers.f64"), n * p)?)?,
            weights: Matrix::new(n, n_h, io::read_f64s(&dir.join("weights.f64"), n * n_h)?)?,
            mean_field: io::read_f64s(&dir.join("mean_field.f64"), n_h)?,
            training_fit: meta.training_fit,
        })
    }
}

impl SliceSurrogate for RbfSlice {
    fn kind(&self) -> SliceKind {
        SliceKind::Rbf
    }

    fn t_slice(&self) -> f64 {
        self.t_slice
    }

    fn n_params(&self) -> usize {
        self.mean.len()
    }

    fn n_space(&self) -> usize {
        self.mean_field.len()
    }

    fn predict(&self, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.n_params() {
            return Err(Error::Argument(format!("expected {} parameters, got {}", self.n_params(), mu.len())));
        }
        let z = standardize(mu, &self.mean, &self.std);
        let mut out = self.mean_field.clone();
        for i in 0..self.centers.rows() {
            let k = (-(self.shape * dist(&z, self.centers.row(i))).powi(2)).exp();
            for (o, w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += k * w;
            }
        }
        Ok(out)
    }

    fn training_fit(&self) -> f64 {
        self.training_fit
    }

    fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = SliceMeta {
            kind: SliceKind::Rbf,
            t_slice: self.t_slice,
            n_train: self.centers.rows(),
            n_params: self.n_params(),
            n_space: self.n_space(),
            training_fit: self.training_fit,
            shape: Some(self.shape),
            param_mean: Some(self.mean.clone()),
            param_std: Some(self.std.clone()),
            rank: None,
        };
        io::write_json(&dir.join("slice_meta.json"), &meta)?;
        io::write_f64s(&dir.join("centers.f64"), self.centers.data())?;
        io::write_f64s(&dir.join("weights.f64"), self.weights.data())?;
        io::write_f64s(&dir.join("mean_field.f64"), &self.mean_field)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// `N_h x r_pod`, orthonormal columns.
    pub v: Matrix,
    pub singular_values: Vec<f64>,
    pub energy_tol: f64,
    /// Set when the snapshot matrix is zero and the basis is a placeholder.
    pub degenerate: bool,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.v.cols()
    }

    pub fn n_space(&self) -> usize {
        self.v.rows()
    }

    pub fn coefficients(&self, u: &[f64]) -> Vec<f64> {
        (0..self.rank()).map(|c| (0..u.len()).map(|n| self.v.get(n, c) * u[n]).sum()).collect()
    }

    pub fn expand(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.n_space()).map(|n| dot(self.v.row(n), coef)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = PodMeta {
            n_space: self.n_space(),
            rank: self.rank(),
            energy_tol: self.energy_tol,
            degenerate: self.degenerate,
            singular_values: self.singular_values.clone(),
        };
        io::write_json(&dir.join("pod_meta.json"), &meta)?;
        io::write_f64s(&dir.join("V.f64"), self.v.data())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PodMeta = io::read_json(&dir.join("pod_meta.json"))?;
        let v = Matrix::new(meta.n_space, meta.rank, io::read_f64s(&dir.join("V.f64"), meta.n_space * meta.rank)?)?;
        Ok(Self { v, singular_values: meta.singular_values, energy_tol: meta.energy_tol, degenerate: meta.degenerate })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PodMeta {
    n_space: usize,
    rank: usize,
    energy_tol: f64,
    degenerate: bool,
    singular_values: Vec<f64>,
}

/// Leading left singular vectors of the `N_h x K` snapshot matrix, keeping
/// the smallest rank whose discarded energy fraction is at most `energy_tol`.
pub fn pod_basis(s: &Matrix, energy_tol: f64) -> Result<PodBasis> {
    if s.cols() == 0 || s.rows() == 0 {
        return Err(Error::Argument("POD of an empty snapshot matrix".into()));
    }
    if !(energy_tol >= 0.0) {
        return Err(Error::Argument(format!("energy tolerance must be >= 0, got {energy_tol}")));
    }
    let total = s.frobenius_norm().powi(2);
    if total == 0.0 {
        let v = Matrix::from_fn(s.rows(), 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        return Ok(PodBasis { v, singular_values: vec![0.0], energy_tol, degenerate: true });
    }
    let full = svd(s)?;
    let r = truncation_rank(&full.s, (energy_tol * total).sqrt());
    let v = Matrix::from_fn(s.rows(), r, |i, j| full.u.get(i, j));
    Ok(PodBasis { v, singular_values: full.s, energy_tol, degenerate: false })
}

/// `||u - V V^T u|| / ||u||`, defined as 0 for `u = 0`.
pub fn pod_project_error(basis: &PodBasis, u: &[f64]) -> Result<f64> {
    if u.len() != basis.n_space() {
        return Err(Error::Argument(format!("field of length {} for a basis of dimension {}", u.len(), basis.n_space())));
    }
    let n = norm2(u);
    if n == 0.0 {
        return Ok(0.0);
    }
    let proj = basis.expand(&basis.coefficients(u));
    let res: f64 = u.iter().zip(&proj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(res / n)
}

fn network(input: usize, hidden: &[usize], output: usize, seed: u64) -> Result<Mlp> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    Mlp::new(&sizes, seed)
}

/// MLP on centered POD coefficients: `coef = mean + scale * net(x)`.
///
/// The output layer starts at zero, so the map starts at the mean coefficient
/// vector and data with no variation is reproduced exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientNet {
    pub net: Mlp,
    pub mean: Vec<f64>,
    pub scale: f64,
    /// Mean-squared loss on the scaled targets at the returned iterate.
    pub train_loss: f64,
}

impl CoefficientNet {
    pub fn fit(inputs: &Matrix, coefs: &Matrix, hidden: &[usize], cfg: &TrainConfig) -> Result<Self> {
        let (n, r) = coefs.shape();
        let mean: Vec<f64> = (0..r).map(|j| (0..n).map(|i| coefs.get(i, j)).sum::<f64>() / n as f64).collect();
        let scale = (0..n)
            .flat_map(|i| (0..r).map(move |j| (i, j)))
            .fold(0.0f64, |m, (i, j)| m.max((coefs.get(i, j) - mean[j]).abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let targets = Matrix::from_fn(n, r, |i, j| (coefs.get(i, j) - mean[j]) / scale);
        let scaling = InputScaling::from_rows((0..inputs.rows()).map(|i| inputs.row(i)))?;
        let net = network(inputs.cols(), hidden, r, cfg.seed)?.with_scaling(scaling)?.zero_output_layer();
        let data = Supervised::new(inputs.clone(), targets, Loss::MeanSquared)?;
        let out = nn::train(net, &data, cfg)?;
        Ok(Self { net: out.net, mean, scale, train_loss: out.best_loss })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(x)?.into_iter().zip(&self.mean).map(|(v, m)| m + v * self.scale).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        io::write_json(
            &dir.join("coef_meta.json"),
            &CoefMeta { scale: self.scale, mean: self.mean.clone(), train_loss: self.train_loss },
        )?;
        self.net.save(&dir.join("net"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CoefMeta = io::read_json(&dir.join("coef_meta.json"))?;
        let net = Mlp::load(&dir.join("net"))?;
        if net.output_dim() != meta.mean.len() {
            return Err(Error::Format { path: dir.join("coef_meta.json"), msg: "coefficient count does not match the network".into() });
        }
        Ok(Self { net, mean: meta.mean, scale: meta.scale, train_loss: meta.train_loss })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CoefMeta {
    scale: f64,
    mean: Vec<f64>,
    train_loss: f64,
}

/// Slice surrogate through a per-slice POD and an MLP on the coefficients.
#[derive(Debug, Clone)]
pub struct PodNnSlice {
    t_slice: f64,
    basis: PodBasis,
    coefs: CoefficientNet,
    training_fit: f64,
}

pub fn fit_podnn_slice(params: &Matrix, fields: &Matrix, t_slice: f64, cfg: &SliceConfig) -> Result<PodNnSlice> {
    check_training_set(params, fields)?;
    let basis = pod_basis(&fields.transpose(), cfg.energy_tol)?;
    let coefs = Matrix::from_rows(&(0..fields.rows()).map(|i| basis.coefficients(fields.row(i))).collect::<Vec<_>>())?;
    let coefs = CoefficientNet::fit(params, &coefs, &cfg.hidden, &cfg.train)?;
    let mut s = PodNnSlice { t_slice, basis, coefs, training_fit: 0.0 };
    s.training_fit = max_training_error(&s, params, fields)?;
    Ok(s)
}

impl PodNnSlice {
    fn load(dir: &Path, meta: SliceMeta) -> Result<Self> {
        Ok(Self {
            t_slice: meta.t_slice,
            basis: PodBasis::load(&dir.join("pod"))?,
            coefs: CoefficientNet::load(&dir.join("coefficients"))?,
            training_fit: meta.training_fit,
        })
    }
}

impl SliceSurrogate for PodNnSlice {
    fn kind(&self) -> SliceKind {
        SliceKind::PodNn
    }

    fn t_slice(&self) -> f64 {
        self.t_slice
    }

    fn n_params(&self) -> usize {
        self.coefs.net.input_dim()
    }

    fn n_space(&self) -> usize {
        self.basis.n_space()
    }

    fn predict(&self, mu: &[f64]) -> Result<Vec<f64>> {
        Ok(self.basis.expand(&self.coefs.predict(mu)?))
    }

    fn training_fit(&self) -> f64 {
        self.training_fit
    }

    fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = SliceMeta {
            kind: SliceKind::PodNn,
            t_slice: self.t_slice,
            n_train: 0,
            n_params: self.n_params(),
            n_space: self.n_space(),
            training_fit: self.training_fit,
            shape: None,
            param_mean: None,
            param_std: None,
            rank: Some(self.basis.rank()),
        };
        io::write_json(&dir.join("slice_meta.json"), &meta)?;
        self.basis.save(&dir.join("pod"))?;
        self.coefs.save(&dir.join("coefficients"))
    }
}

/// POD-NN baseline: one POD basis over every training snapshot and an MLP
/// from `(mu, t)` to its coefficients.
#[derive(Debug, Clone)]
pub struct PodNn {
    pub basis: PodBasis,
    pub coefs: CoefficientNet,
    /// Largest relative training error.
    pub training_fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodNnConfig {
    #[serde(default = "default_energy_tol")]
    pub energy_tol: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for PodNnConfig {
    fn default() -> Self {
        Self { energy_tol: default_energy_tol(), hidden: default_hidden(), train: TrainConfig::default() }
    }
}

/// Training samples for POD-NN: parameter `i` at time `times[k]` has field
/// `fields[i][k]`.
pub struct PodNnData<'a> {
    pub params: &'a Matrix,
    pub times: &'a [f64],
    pub fields: &'a dyn Fn(usize, usize) -> Vec<f64>,
}

pub fn fit_podnn(data: &PodNnData<'_>, cfg: &PodNnConfig) -> Result<PodNn> {
    let (n_mu, p) = data.params.shape();
    let n_t = data.times.len();
    if n_mu == 0 || n_t == 0 {
        return Err(Error::Data("POD-NN needs at least one snapshot".into()));
    }
    let mut snaps = Vec::with_capacity(n_mu * n_t);
    let mut inputs = Vec::with_capacity(n_mu * n_t);
    for i in 0..n_mu {
        for (k, &t) in data.times.iter().enumerate() {
            snaps.push((data.fields)(i, k));
            let mut x = data.params.row(i).to_vec();
            x.push(t);
            inputs.push(x);
        }
    }
    let s = Matrix::from_rows(&snaps)?.transpose();
    let basis = pod_basis(&s, cfg.energy_tol)?;
    let coefs = Matrix::from_rows(&snaps.iter().map(|u| basis.coefficients(u)).collect::<Vec<_>>())?;
    let inputs = Matrix::from_rows(&inputs)?;
    debug_assert_eq!(inputs.cols(), p + 1);
    let coefs = CoefficientNet::fit(&inputs, &coefs, &cfg.hidden, &cfg.train)?;
    let mut model = PodNn { basis, coefs, training_fit: 0.0 };
    let mut worst: f64 = 0.0;
    for (row, u) in snaps.iter().enumerate() {
        let x = inputs.row(row);
        let pred = model.predict(&x[..p], x[p])?;
        worst = worst.max(rel_err(&pred, u));
    }
    model.training_fit = worst;
    Ok(model)
}

impl PodNn {
    pub fn predict(&self, mu: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut x = mu.to_vec();
        x.push(t);
        Ok(self.basis.expand(&self.coefs.predict(&x)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        io::write_json(&dir.join("podnn_meta.json"), &PodNnMeta { training_fit: self.training_fit })?;
        self.basis.save(&dir.join("pod"))?;
        self.coefs.save(&dir.join("coefficients"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PodNnMeta = io::read_json(&dir.join("podnn_meta.json"))?;
        Ok(Self {
            basis: PodBasis::load(&dir.join("pod"))?,
            coefs: CoefficientNet::load(&dir.join("coefficients"))?,
            training_fit: meta.training_fit,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PodNnMeta {
    training_fit: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rbf_two_points_interpolates() {
        let params = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let fields = random_matrix(2, 7, 1);
        let s = fit_rbf_slice(&params, &fields, 0.5).unwrap();
        for i in 0..2 {
            assert!(rel_err(&s.predict(params.row(i)).unwrap(), fields.row(i)) <= 1e-8);
        }
        assert!(s.training_fit() <= 1e-8);
    }

    #[test]
    fn rbf_linear_fields_at_centroid() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.2]];
        let map = |mu: &[f64]| -> Vec<f64> { (0..5).map(|n| 1.0 + n as f64 * mu[0] - 0.5 * mu[1] + 2.0).collect() };
        let params = Matrix::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
        let fields = Matrix::from_rows(&pts.iter().map(|p| map(p)).collect::<Vec<_>>()).unwrap();
        let s = fit_rbf_slice(&params, &fields, 0.0).unwrap();
        let c = [0.5, 0.44];
        let err = rel_err(&s.predict(&c).unwrap(), &map(&c));
        assert!(err <= 5e-2, "{err}");
    }

    #[test]
    fn rbf_reproduces_constants() {
        let params = random_matrix(12, 2, 3);
        let fields = Matrix::from_fn(12, 4, |_, j| 1.5 + j as f64);
        let s = fit_rbf_slice(&params, &fields, 0.0).unwrap();
        for mu in [[0.0, 0.0], [5.0, -7.0], [0.3, 0.9]] {
            let y = s.predict(&mu).unwrap();
            for (j, v) in y.iter().enumerate() {
                assert!((v - (1.5 + j as f64)).abs() <= 1e-8 * (1.5 + j as f64));
            }
        }
    }

    #[test]
    fn rbf_rejects_duplicates() {
        let params = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![0.0, 1.0]]).unwrap();
        match fit_rbf_slice(&params, &random_matrix(3, 2, 0), 0.0) {
            Err(Error::Data(msg)) => assert!(msg.contains("0 and 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rbf_persistence() {
        let params = random_matrix(8, 2, 4);
        let fields = random_matrix(8, 5, 5);
        let s = fit_rbf_slice(&params, &fields, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = load_slice(dir.path()).unwrap();
        assert_eq!(back.kind(), SliceKind::Rbf);
        assert_eq!(back.t_slice(), 0.25);
        assert_eq!(back.predict(&[0.1, 0.2]).unwrap(), s.predict(&[0.1, 0.2]).unwrap());
    }

    #[test]
    fn pod_rank_one_and_full_rank() {
        let a: Vec<f64> = (0..8).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let s = Matrix::from_fn(8, 5, |i, j| a[i] * (j as f64 - 1.5));
        assert_eq!(pod_basis(&s, 1e-8).unwrap().rank(), 1);
        let r = random_matrix(10, 6, 6);
        let b = pod_basis(&r, 0.0).unwrap();
        assert_eq!(b.rank(), 6);
        for j in 0..6 {
            assert!(pod_project_error(&b, &r.column(j)).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn pod_zero_matrix_is_flagged() {
        let b = pod_basis(&Matrix::zeros(4, 3), 1e-8).unwrap();
        assert!(b.degenerate);
        assert_eq!((b.rank(), b.singular_values.clone()), (1, vec![0.0]));
    }

    #[test]
    fn projection_error_cases() {
        let v = Matrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let b = PodBasis { v, singular_values: vec![1.0, 1.0], energy_tol: 0.0, degenerate: false };
        assert!(pod_project_error(&b, &[2.0, -1.0, 0.0, 0.0]).unwrap() <= 1e-12);
        assert!((pod_project_error(&b, &[0.0, 0.0, 3.0, 1.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(pod_project_error(&b, &[0.0; 4]).unwrap(), 0.0);
    }

    /// Residual after classical Gram-Schmidt against the basis columns.
    fn gram_schmidt_residual(v: &Matrix, u: &[f64]) -> f64 {
        let mut q: Vec<Vec<f64>> = Vec::new();
        for j in 0..v.cols() {
            let mut c = v.column(j);
            for e in &q {
                let d = dot(&c, e);
                c.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
            }
            let n = norm2(&c);
            q.push(c.into_iter().map(|x| x / n).collect());
        }
        let mut r = u.to_vec();
        for e in &q {
            let d = dot(&r, e);
            r.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
        }
        norm2(&r) / norm2(u)
    }

    #[test]
    fn podnn_constant_field() {
        let params = random_matrix(6, 2, 7);
        let times = [0.0, 0.5, 1.0];
        let field = vec![2.0, -1.0, 0.5, 3.0];
        let f = |_: usize, _: usize| field.clone();
        let cfg = PodNnConfig { train: TrainConfig { epochs: 300, ..TrainConfig::default() }, ..PodNnConfig::default() };
        let m = fit_podnn(&PodNnData { params: &params, times: &times, fields: &f }, &cfg).unwrap();
        assert_eq!(m.basis.rank(), 1);
        for (mu, t) in [([0.1, 0.2], 0.3), ([5.0, 5.0], 9.0)] {
            let err = rel_err(&m.predict(&mu, t).unwrap(), &field);
            assert!(err <= 1e-3, "{err}");
        }
    }

    #[test]
    fn podnn_persistence_and_training_bound() {
        let params = random_matrix(5, 2, 8);
        let times = [0.0, 0.5, 1.0];
        let f = |i: usize, k: usize| -> Vec<f64> {
            let mu = params.row(i);
            (0..6).map(|n| (n as f64 + mu[0]) * (1.0 + times[k] * mu[1])).collect()
        };
        let cfg = PodNnConfig { train: TrainConfig { epochs: 200, ..TrainConfig::default() }, ..PodNnConfig::default() };
        let m = fit_podnn(&PodNnData { params: &params, times: &times, fields: &f }, &cfg).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                assert!(rel_err(&m.predict(params.row(i), times[k]).unwrap(), &f(i, k)) <= m.training_fit + 1e-15);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = PodNn::load(dir.path()).unwrap();
        assert_eq!(back.predict(&[0.2, 0.1], 2.0).unwrap(), m.predict(&[0.2, 0.1], 2.0).unwrap());
    }

    #[test]
    fn podnn_slice_round_trip() {
        let params = random_matrix(6, 2, 9);
        let fields = random_matrix(6, 5, 10);
        let cfg = SliceConfig { kind: SliceKind::PodNn, train: TrainConfig { epochs: 50, ..TrainConfig::default() }, ..SliceConfig::default() };
        let s = fit_slice(&cfg, &params, &fields, 0.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = load_slice(dir.path()).unwrap();
        assert_eq!(back.kind(), SliceKind::PodNn);
        assert_eq!(back.predict(&[0.0, 0.3]).unwrap(), s.predict(&[0.0, 0.3]).unwrap());
        assert!((back.training_fit() - s.training_fit()).abs() == 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_matches_gram_schmidt(seed in 0u64..1000, r in 1usize..5) {
            let s = random_matrix(12, r + 2, seed);
            let b = pod_basis(&s, 0.0).unwrap();
            let v = Matrix::from_fn(12, r, |i, j| b.v.get(i, j));
            let basis = PodBasis { v: v.clone(), singular_values: vec![], energy_tol: 0.0, degenerate: false };
            let u = random_matrix(12, 1, seed + 1).column(0);
            let e = pod_project_error(&basis, &u).unwrap();
            prop_assert!((e - gram_schmidt_residual(&v, &u)).abs() <= 1e-10);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        }

        #[test]
        fn pod_energy_rule_is_minimal(seed in 0u64..1000, tol in 1e-6f64..0.5) {
            let s = random_matrix(9, 7, seed);
            let b = pod_basis(&s, tol).unwrap();
            let sv = &b.singular_values;
            let total: f64 = sv.iter().map(|v| v * v).sum();
            let tail = |r: usize| sv[r..].iter().map(|v| v * v).sum::<f64>() / total;
            prop_assert!(tail(b.rank()) <= tol);
            if b.rank() > 1 {
                prop_assert!(tail(b.rank() - 1) > tol);
            }
            let g = b.v.transpose().matmul(&b.v).unwrap();
            for i in 0..b.rank() {
                for j in 0..b.rank() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g.get(i, j) - want).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn rbf_residual_is_nugget_times_weights(seed in 0u64..1000, n in 3usize..40) {
            let params = random_matrix(n, 2, seed);
            let fields = Matrix::from_fn(n, 6, |i, j| {
                let mu = params.row(i);
                (1.0 + j as f64 * mu[0]).exp() * (0.5 + 0.1 * j as f64) + mu[1] * mu[1]
            });
            let s = fit_rbf_slice(&params, &fields, 0.0).unwrap();
            for i in 0..n {
                let y = s.predict(params.row(i)).unwrap();
                for c in 0..6 {
                    let want = fields.get(i, c) - RBF_NUGGET * s.weights.get(i, c);
                    // evaluation round-off grows with the weight magnitudes
                    let scale: f64 = (0..n).map(|k| s.weights.get(k, c).abs()).sum::<f64>() + fields.get(i, c).abs();
                    prop_assert!((y[c] - want).abs() <= 1e-13 * scale, "{} vs {}", y[c], want);
                }
            }
        }
    }
}
