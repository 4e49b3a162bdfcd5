//! Dense row-major containers and the factorizations the rest of the crate
//! is built on: mode unfoldings, truncated SVD and Tikhonov least squares.
//!
//! Layout is fixed: a `DenseTensor3` with dims `(n1, n2, n3)` stores entry
//! `(i, j, k)` at offset `(i * n2 + j) * n3 + k`, and a `Matrix` stores entry
//! `(i, j)` at `i * cols + j`. Persistence writes these buffers verbatim.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Anything backed by a flat buffer of reals.
pub trait Entries {
    fn entries(&self) -> &[f64];
}

pub fn frobenius_norm(x: &impl Entries) -> f64 {
    x.entries().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} has a non-finite entry at offset {pos}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Entries for Matrix {
    fn entries(&self) -> &[f64] {
        &self.data
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("rows have different lengths".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Argument(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Argument(format!(
                "vector of length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// Rows `range` as a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub(crate) fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    #[cfg(test)]
    pub(crate) fn from_na(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Entries for DenseTensor3 {
    fn entries(&self) -> &[f64] {
        &self.data
    }
}

impl DenseTensor3 {
    /// Validates length and finiteness.
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::Argument(format!(
                "tensor {:?} needs {len} entries, got {}",
                dims,
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    /// The mode-2 fiber `t[i, :, k]`.
    pub fn fiber(&self, i: usize, k: usize) -> Vec<f64> {
        (0..self.dims[1]).map(|j| self.get(i, j, k)).collect()
    }

    /// Sub-tensor over the given first-mode indices and a contiguous run of
    /// third-mode indices.
    pub fn select(&self, first: &[usize], third: std::ops::Range<usize>) -> Result<Self> {
        let [n1, n2, n3] = self.dims;
        if first.iter().any(|&i| i >= n1) || third.end > n3 || third.start >= third.end {
            return Err(Error::Argument("sub-tensor selection out of bounds".into()));
        }
        let len3 = third.len();
        let mut data = Vec::with_capacity(first.len() * n2 * len3);
        for &i in first {
            for j in 0..n2 {
                let base = self.offset(i, j, 0);
                data.extend_from_slice(&self.data[base + third.start..base + third.end]);
            }
        }
        Ok(Self { dims: [first.len(), n2, len3], data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=3).contains(&mode) {
        return Err(Error::Argument(format!("mode must be 1, 2 or 3, got {mode}")));
    }
    Ok(())
}

/// Mode-`mode` matricization.
///
/// Mode 1 gives `n1 x (n2 n3)` with column `j n3 + k`, mode 2 gives
/// `n2 x (n1 n3)` with column `i n3 + k`, mode 3 gives `(n1 n2) x n3` with
/// row `i n2 + j`. Modes 1 and 3 are pure reshapes of the buffer.
pub fn unfold(t: &DenseTensor3, mode: usize) -> Result<Matrix> {
    check_mode(mode)?;
    let [n1, n2, n3] = t.dims;
    Ok(match mode {
        1 => Matrix { rows: n1, cols: n2 * n3, data: t.data.clone() },
        3 => Matrix { rows: n1 * n2, cols: n3, data: t.data.clone() },
        _ => {
            let mut data = Vec::with_capacity(t.data.len());
            for j in 0..n2 {
                for i in 0..n1 {
                    let base = t.offset(i, j, 0);
                    data.extend_from_slice(&t.data[base..base + n3]);
                }
            }
            Matrix { rows: n2, cols: n1 * n3, data }
        }
    })
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, dims: [usize; 3]) -> Result<DenseTensor3> {
    check_mode(mode)?;
    let [n1, n2, n3] = dims;
    let expected = match mode {
        1 => (n1, n2 * n3),
        2 => (n2, n1 * n3),
        _ => (n1 * n2, n3),
    };
    if m.shape() != expected {
        return Err(Error::Argument(format!(
            "cannot fold {}x{} into {:?} along mode {mode}",
            m.rows, m.cols, dims
        )));
    }
    let data = if mode == 2 {
        let mut data = vec![0.0; n1 * n2 * n3];
        for j in 0..n2 {
            for i in 0..n1 {
                let src = &m.data[(j * n1 + i) * n3..(j * n1 + i + 1) * n3];
                let dst = (i * n2 + j) * n3;
                data[dst..dst + n3].copy_from_slice(src);
            }
        }
        data
    } else {
        m.data.clone()
    };
    DenseTensor3::new(dims, data)
}

/// Thin singular value decomposition with sorted values.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, length `k = min(rows, cols)` (or the truncated rank).
    pub s: Vec<f64>,
    /// `k x cols`, orthonormal rows.
    pub vt: Matrix,
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
    pub rank: usize,
    /// Every singular value before truncation.
    pub spectrum: Vec<f64>,
    /// `sqrt(sum_{i > rank} s_i^2)`.
    pub tail_norm: f64,
}

/// Full thin SVD, sorted descending, with the sign of each left singular
/// vector fixed so that its first nonzero entry is nonnegative.
pub fn svd(m: &Matrix) -> Result<Svd> {
    check_finite(&m.data, "matrix")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("SVD of an empty matrix".into()));
    }
    // Factor the taller orientation; nalgebra's bidiagonalization is happier
    // that way and wide unfoldings are common here.
    let wide = cols > rows;
    let a = if wide { m.transpose().to_na() } else { m.to_na() };
    let dec = nalgebra::linalg::SVD::try_new(a, true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Data("SVD did not converge".into()))?;
    let (uu, vvt) = (dec.u.expect("u requested"), dec.v_t.expect("v_t requested"));
    let sv = dec.singular_values;
    let k = sv.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    // For the transposed problem m^T = U S V^T we have m = V S U^T.
    let mut u = Matrix::zeros(rows, k);
    let mut vt = Matrix::zeros(k, cols);
    let mut s = Vec::with_capacity(k);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    // Values at round-off level relative to the largest are flushed to zero
    // so that exact low-rank inputs report their exact rank.
    let flush = (rows.max(cols) as f64) * f64::EPSILON * smax;
    for (dst, &src) in order.iter().enumerate() {
        s.push(if sv[src] <= flush { 0.0 } else { sv[src] });
        for i in 0..rows {
            u.set(i, dst, if wide { vvt[(src, i)] } else { uu[(i, src)] });
        }
        for j in 0..cols {
            vt.set(dst, j, if wide { uu[(j, src)] } else { vvt[(src, j)] });
        }
    }
    fix_signs(&mut u, &mut vt);
    Ok(Svd { u, s, vt })
}

fn fix_signs(u: &mut Matrix, vt: &mut Matrix) {
    for c in 0..u.cols {
        let col_max = (0..u.rows).map(|i| u.get(i, c).abs()).fold(0.0, f64::max);
        let threshold = 1e-12 * col_max;
        let first = (0..u.rows).map(|i| u.get(i, c)).find(|v| v.abs() > threshold);
        if matches!(first, Some(v) if v < 0.0) {
            for i in 0..u.rows {
                let v = u.get(i, c);
                u.set(i, c, -v);
            }
            for v in vt.row_mut(c) {
                *v = -*v;
            }
        }
    }
}

/// Smallest `r >= 1` with `sqrt(sum_{i > r} s_i^2) <= delta`.
pub fn truncation_rank(s: &[f64], delta: f64) -> usize {
    let mut tail = 0.0;
    let mut r = s.len();
    // Walk from the back: drop values while the accumulated tail stays within delta.
    while r > 1 {
        let next = tail + s[r - 1] * s[r - 1];
        if next.sqrt() <= delta {
            tail = next;
            r -= 1;
        } else {
            break;
        }
    }
    r.max(1)
}

/// SVD truncated to the smallest rank whose discarded tail has Frobenius
/// norm at most `delta`. At least one mode is always kept.
pub fn truncated_svd(m: &Matrix, delta: f64) -> Result<TruncatedSvd> {
    if !(delta >= 0.0) {
        return Err(Error::Argument(format!("truncation tolerance must be >= 0, got {delta}")));
    }
    let full = svd(m)?;
    let rank = truncation_rank(&full.s, delta);
    let tail_norm = full.s[rank..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let (rows, cols) = m.shape();
    let u = Matrix::from_fn(rows, rank, |i, j| full.u.get(i, j));
    let vt = Matrix::new(rank, cols, full.vt.data[..rank * cols].to_vec())?;
    Ok(TruncatedSvd {
        u,
        s: full.s[..rank].to_vec(),
        vt,
        rank,
        spectrum: full.s,
        tail_norm,
    })
}

/// Pre-factored Tikhonov least-squares operator.
///
/// Minimizes `||A X - B||_F^2 + lambda^2 ||X||_F^2` through the SVD of the
/// augmented matrix `[A; lambda I]`. Numerically zero singular values are
/// dropped, which yields the minimum-norm solution for rank-deficient `A`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// `cols(A) x rows(A)`, maps right-hand sides to solutions.
    pinv: Matrix,
    lambda: f64,
    rank: usize,
    rank_deficient: bool,
}

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: Matrix,
    pub rank: usize,
    pub rank_deficient: bool,
    /// `||A X - B||_F`.
    pub residual_norm: f64,
}

impl LeastSquares {
    pub fn factor(a: &Matrix, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Argument(format!("regularization must be finite and >= 0, got {lambda}")));
        }
        let (m, n) = a.shape();
        let aug = if lambda > 0.0 {
            let mut data = a.data.clone();
            data.extend(Matrix::identity(n).data.iter().map(|v| v * lambda));
            Matrix::new(m + n, n, data)?
        } else {
            a.clone()
        };
        let dec = svd(&aug)?;
        let smax = dec.s.first().copied().unwrap_or(0.0);
        let tol = (aug.rows.max(n) as f64) * f64::EPSILON * smax;
        let rank = dec.s.iter().take_while(|&&s| s > tol && s > 0.0).count();
        // pinv = V diag(1/s) U_top^T, restricted to the first m rows of U.
        let mut pinv = Matrix::zeros(n, m);
        for c in 0..rank {
            let inv = 1.0 / dec.s[c];
            for i in 0..n {
                let vi = dec.vt.get(c, i) * inv;
                if vi == 0.0 {
                    continue;
                }
                let row = pinv.row_mut(i);
                for (j, r) in row.iter_mut().enumerate() {
                    *r += vi * dec.u.get(j, c);
                }
            }
        }
        Ok(Self {
            pinv,
            lambda,
            rank,
            rank_deficient: rank < n,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.pinv.cols {
            return Err(Error::Argument(format!(
                "right-hand side has {} rows, system has {}",
                b.rows, self.pinv.cols
            )));
        }
        self.pinv.matmul(b)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.pinv.matvec(b)
    }
}

pub fn solve_least_squares(a: &Matrix, b: &Matrix, lambda: f64) -> Result<LstsqSolution> {
    if a.rows != b.rows {
        return Err(Error::Argument(format!(
            "A has {} rows but B has {}",
            a.rows, b.rows
        )));
    }
    check_finite(&a.data, "A")?;
    check_finite(&b.data, "B")?;
    let ls = LeastSquares::factor(a, lambda)?;
    let x = ls.solve(b)?;
    let ax = a.matmul(&x)?;
    let residual_norm = ax
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    Ok(LstsqSolution {
        x,
        rank: ls.rank,
        rank_deficient: ls.rank_deficient,
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_tensor(dims: [usize; 3], seed: u64) -> DenseTensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn unfold_scalar() {
        let t = DenseTensor3::new([1, 1, 1], vec![5.0]).unwrap();
        let m = unfold(&t, 1).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m.data(), &[5.0]);
    }

    #[test]
    fn unfold_mode1_offsets() {
        let t = DenseTensor3::from_fn([2, 2, 2], |i, j, k| (100 * i + 10 * j + k) as f64).unwrap();
        let m = unfold(&t, 1).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(m.row(1), &[100.0, 101.0, 110.0, 111.0]);
    }

    #[test]
    fn unfold_shapes() {
        let t = random_tensor([3, 4, 5], 1);
        assert_eq!(unfold(&t, 1).unwrap().shape(), (3, 20));
        assert_eq!(unfold(&t, 2).unwrap().shape(), (4, 15));
        assert_eq!(unfold(&t, 3).unwrap().shape(), (12, 5));
        let m2 = unfold(&t, 2).unwrap();
        assert_eq!(m2.get(2, 1 * 5 + 3), t.get(1, 2, 3));
    }

    #[test]
    fn fold_roundtrip_every_mode() {
        let t = random_tensor([3, 4, 5], 2);
        for mode in 1..=3 {
            let back = fold(&unfold(&t, mode).unwrap(), mode, t.dims()).unwrap();
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn invalid_mode() {
        let t = random_tensor([2, 2, 2], 3);
        assert!(matches!(unfold(&t, 0), Err(Error::Argument(_))));
        assert!(matches!(unfold(&t, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(matches!(DenseTensor3::new([1, 1, 2], vec![1.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn norms() {
        assert_eq!(DenseTensor3::zeros([2, 2, 2]).frobenius_norm(), 0.0);
        assert_eq!(Matrix::new(1, 2, vec![3.0, 4.0]).unwrap().frobenius_norm(), 5.0);
        let t = random_tensor([3, 3, 3], 4);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    acc += t.get(i, j, k).powi(2);
                }
            }
        }
        let n = t.frobenius_norm();
        assert!((n * n - acc).abs() <= 1e-12 * acc);
    }

    #[test]
    fn svd_rank_one_exact() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.3, 1.0, -1.5];
        let m = Matrix::from_fn(4, 3, |i, j| a[i] * b[j]);
        let t = truncated_svd(&m, 0.0).unwrap();
        assert_eq!(t.rank, 1);
        let rec = reconstruct(&t);
        assert!(diff_norm(&rec, &m) <= 1e-12 * m.frobenius_norm());
    }

    #[test]
    fn svd_identity_tail_tie_keeps_smaller_rank() {
        let t = truncated_svd(&Matrix::identity(3), 1.0).unwrap();
        assert_eq!(t.rank, 2);
        assert!((t.tail_norm - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_keeps_one_mode_for_huge_delta() {
        let m = random_matrix(4, 3, 11);
        let t = truncated_svd(&m, 1e6).unwrap();
        assert_eq!(t.rank, 1);
    }

    #[test]
    fn svd_random_full_reconstruction() {
        let m = random_matrix(6, 4, 5);
        let t = truncated_svd(&m, 0.0).unwrap();
        let rec = reconstruct(&t);
        let max_err = rec.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 1e-10, "max error {max_err}");
        let utu = t.u.transpose().matmul(&t.u).unwrap();
        for i in 0..t.rank {
            for j in 0..t.rank {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((utu.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn svd_wide_and_sign_convention() {
        let m = random_matrix(3, 9, 6);
        let d = svd(&m).unwrap();
        assert_eq!(d.u.shape(), (3, 3));
        assert_eq!(d.vt.shape(), (3, 9));
        for c in 0..3 {
            assert!(d.u.get(0, c) >= 0.0);
        }
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rejects_nonfinite() {
        let m = Matrix::new(1, 2, vec![1.0, f64::INFINITY]).unwrap();
        assert!(matches!(truncated_svd(&m, 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn lstsq_identity() {
        let b = Matrix::new(3, 1, vec![1.0, -2.0, 3.5]).unwrap();
        let sol = solve_least_squares(&Matrix::identity(3), &b, 0.0).unwrap();
        for (x, y) in sol.x.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(!sol.rank_deficient);
    }

    #[test]
    fn lstsq_overdetermined_mean() {
        let a = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let b = Matrix::new(2, 1, vec![1.0, 3.0]).unwrap();
        let sol = solve_least_squares(&a, &b, 0.0).unwrap();
        assert!((sol.x.get(0, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lstsq_ridge_scalar() {
        let one = Matrix::new(1, 1, vec![1.0]).unwrap();
        let sol = solve_least_squares(&one, &one, 1.0).unwrap();
        assert!((sol.x.get(0, 0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lstsq_rank_deficient_min_norm() {
        // Two identical columns: minimum-norm solution splits evenly.
        let a = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Matrix::new(2, 1, vec![2.0, 2.0]).unwrap();
        let sol = solve_least_squares(&a, &b, 0.0).unwrap();
        assert!(sol.rank_deficient);
        assert_eq!(sol.rank, 1);
        assert!((sol.x.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((sol.x.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_zero_matrix_gives_zero() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let sol = solve_least_squares(&a, &b, 0.0).unwrap();
        assert_eq!(sol.rank, 0);
        assert!(sol.x.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstsq_row_mismatch() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(2, 1);
        assert!(matches!(solve_least_squares(&a, &b, 0.0), Err(Error::Argument(_))));
    }

    pub(super) fn reconstruct(t: &TruncatedSvd) -> Matrix {
        let mut us = t.u.clone();
        for i in 0..us.rows() {
            for j in 0..t.rank {
                let v = us.get(i, j) * t.s[j];
                us.set(i, j, v);
            }
        }
        us.matmul(&t.vt).unwrap()
    }

    fn diff_norm(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dims() -> impl Strategy<Value = [usize; 3]> {
            (1usize..5, 1usize..5, 1usize..5).prop_map(|(a, b, c)| [a, b, c])
        }

        proptest! {
            #[test]
            fn fold_unfold_bitwise(d in dims(), seed in 0u64..1000, mode in 1usize..=3) {
                let t = random_tensor(d, seed);
                let back = fold(&unfold(&t, mode).unwrap(), mode, d).unwrap();
                prop_assert_eq!(back.data(), t.data());
            }

            #[test]
            fn truncation_tail_rule(rows in 1usize..7, cols in 1usize..7, seed in 0u64..1000, frac in 0.0f64..1.2) {
                let m = random_matrix(rows, cols, seed);
                let delta = frac * m.frobenius_norm();
                let t = truncated_svd(&m, delta).unwrap();
                let tail = |r: usize| t.spectrum[r..].iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(tail(t.rank) <= delta || t.rank == t.spectrum.len());
                prop_assert!(t.rank == 1 || tail(t.rank - 1) > delta);
                let err = diff_norm(&reconstruct(&t), &m);
                prop_assert!(err <= delta + 1e-12 * m.frobenius_norm().max(1.0));
            }

            #[test]
            fn square_system_matches_direct(n in 1usize..6, seed in 0u64..500) {
                let mut a = random_matrix(n, n, seed);
                for i in 0..n {
                    let v = a.get(i, i) + 3.0;
                    a.set(i, i, v);
                }
                let b = random_matrix(n, 2, seed + 1);
                let sol = solve_least_squares(&a, &b, 0.0).unwrap();
                let direct = a.to_na().lu().solve(&b.to_na()).unwrap();
                let direct = Matrix::from_na(&direct);
                let scale = direct.frobenius_norm().max(1e-300);
                prop_assert!(diff_norm(&sol.x, &direct) <= 1e-10 * scale);
            }

            #[test]
            fn augmented_residual_orthogonal(rows in 1usize..8, cols in 1usize..5, seed in 0u64..500, lam in 0.0f64..2.0) {
                let a = random_matrix(rows, cols, seed);
                let b = random_matrix(rows, 1, seed + 7);
                let sol = solve_least_squares(&a, &b, lam).unwrap();
                // Augmented residual r = [b - A x; -lambda x]; check [A; lambda I]^T r = 0.
                let ax = a.matmul(&sol.x).unwrap();
                for j in 0..cols {
                    let mut g = 0.0;
                    for i in 0..rows {
                        g += a.get(i, j) * (b.get(i, 0) - ax.get(i, 0));
                    }
                    g -= lam * lam * sol.x.get(j, 0);
                    prop_assert!(g.abs() <= 1e-8, "component {} = {}", j, g);
                }
            }
        }
    }
}
