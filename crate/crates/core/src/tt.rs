//! Three-core tensor-train factorization of a `parameter x space x time`
//! snapshot tensor.
//!
//! `S[i, n, j] ~= sum_a sum_b G1[i, a] G2[a, n, b] G3[b, j]`, computed by two
//! sequential truncated SVDs (parameter first, then space/time).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{truncated_svd, unfold, DenseTensor3, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TtCores {
    /// `N_param x r1`, row `i` is the parameter coefficient vector of sample `i`.
    g1: Matrix,
    /// `r1 x N_h x r2`.
    g2: DenseTensor3,
    /// `r2 x N_t`, column `j` is the time coefficient vector at time index `j`.
    g3: Matrix,
    eps_tt: f64,
}

impl TtCores {
    pub fn new(g1: Matrix, g2: DenseTensor3, g3: Matrix, eps_tt: f64) -> Result<Self> {
        let [r1, _, r2] = g2.dims();
        if g1.cols() != r1 || g3.rows() != r2 {
            return Err(Error::Argument(format!(
                "core shapes do not chain: G1 {:?}, G2 {:?}, G3 {:?}",
                g1.shape(),
                g2.dims(),
                g3.shape()
            )));
        }
        Ok(Self { g1, g2, g3, eps_tt })
    }

    pub fn g1(&self) -> &Matrix {
        &self.g1
    }

    pub fn g2(&self) -> &DenseTensor3 {
        &self.g2
    }

    pub fn g3(&self) -> &Matrix {
        &self.g3
    }

    pub fn eps_tt(&self) -> f64 {
        self.eps_tt
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.g1.cols(), self.g3.rows())
    }

    /// `(N_param, N_h, N_t)` of the tensor these cores approximate.
    pub fn dims(&self) -> [usize; 3] {
        [self.g1.rows(), self.g2.dims()[1], self.g3.cols()]
    }

    pub fn n_space(&self) -> usize {
        self.g2.dims()[1]
    }

    /// `N_h x r1` matrix `M[n, a] = sum_b G2[a, n, b] g3[b]`, so that the field
    /// for parameter coefficients `c` is `M c`.
    pub fn space_basis(&self, g3_col: &[f64]) -> Result<Matrix> {
        let [r1, nh, r2] = self.g2.dims();
        if g3_col.len() != r2 {
            return Err(Error::Argument(format!(
                "time coefficient vector has length {}, expected r2 = {r2}",
                g3_col.len()
            )));
        }
        let g2 = self.g2.data();
        let mut m = Matrix::zeros(nh, r1);
        for a in 0..r1 {
            for n in 0..nh {
                let base = (a * nh + n) * r2;
                let v: f64 = g2[base..base + r2].iter().zip(g3_col).map(|(x, y)| x * y).sum();
                m.set(n, a, v);
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let [n_param, n_space, n_time] = self.dims();
        let (r1, r2) = self.ranks();
        io::write_json(
            &dir.join("tt_meta.json"),
            &TtMeta { ranks: [r1, r2], dims: [n_param, n_space, n_time], eps_tt: self.eps_tt },
        )?;
        io::write_f64s(&dir.join("G1.f64"), self.g1.data())?;
        io::write_f64s(&dir.join("G2.f64"), self.g2.data())?;
        io::write_f64s(&dir.join("G3.f64"), self.g3.data())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TtMeta = io::read_json(&dir.join("tt_meta.json"))?;
        let [r1, r2] = meta.ranks;
        let [n_param, n_space, n_time] = meta.dims;
        let g1 = Matrix::new(n_param, r1, io::read_f64s(&dir.join("G1.f64"), n_param * r1)?)?;
        let g2 = DenseTensor3::new([r1, n_space, r2], io::read_f64s(&dir.join("G2.f64"), r1 * n_space * r2)?)?;
        let g3 = Matrix::new(r2, n_time, io::read_f64s(&dir.join("G3.f64"), r2 * n_time)?)?;
        Self::new(g1, g2, g3, meta.eps_tt)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TtMeta {
    ranks: [usize; 2],
    dims: [usize; 3],
    eps_tt: f64,
}

/// Tensor-train SVD with relative tolerance `eps_tt`.
///
/// Each of the two truncations discards at most `eps_tt ||s||_F / sqrt(2)`,
/// so the relative reconstruction error is bounded by `eps_tt`.
pub fn tt_svd(s: &DenseTensor3, eps_tt: f64) -> Result<TtCores> {
    let [n1, n2, n3] = s.dims();
    if n1 == 0 || n2 == 0 || n3 == 0 {
        return Err(Error::Argument(format!("degenerate tensor dims {:?}", s.dims())));
    }
    if !(eps_tt > 0.0) {
        return Err(Error::Argument(format!("eps_tt must be positive, got {eps_tt}")));
    }
    let delta = eps_tt * s.frobenius_norm() / 2f64.sqrt();

    let first = truncated_svd(&unfold(s, 1)?, delta)?;
    let r1 = first.rank;
    // diag(s1) Vt1 is r1 x (n2 n3); read as (r1 n2) x n3 it is the next unfolding.
    let mut rest = first.vt.into_data();
    for (a, sv) in first.s.iter().enumerate() {
        for v in &mut rest[a * n2 * n3..(a + 1) * n2 * n3] {
            *v *= sv;
        }
    }
    let second = truncated_svd(&Matrix::new(r1 * n2, n3, rest)?, delta)?;
    let r2 = second.rank;
    let g2 = DenseTensor3::new([r1, n2, r2], second.u.into_data())?;
    let mut g3 = second.vt;
    for b in 0..r2 {
        for v in g3.row_mut(b) {
            *v *= second.s[b];
        }
    }
    TtCores::new(first.u, g2, g3, eps_tt)
}

pub fn tt_reconstruct(cores: &TtCores) -> Result<DenseTensor3> {
    let [n1, nh, nt] = cores.dims();
    let (r1, r2) = cores.ranks();
    // (G1 G2) as (n1 nh) x r2, then times G3.
    let g2_mat = Matrix::new(r1, nh * r2, cores.g2.data().to_vec())?;
    let left = cores.g1.matmul(&g2_mat)?;
    let left = Matrix::new(n1 * nh, r2, left.into_data())?;
    let full = left.matmul(&cores.g3)?;
    DenseTensor3::new([n1, nh, nt], full.into_data())
}

/// Field `u[n] = sum_a sum_b g1_row[a] G2[a, n, b] g3_col[b]`.
pub fn tt_eval(g1_row: &[f64], cores: &TtCores, g3_col: &[f64]) -> Result<Vec<f64>> {
    let (r1, r2) = cores.ranks();
    if g1_row.len() != r1 || g3_col.len() != r2 {
        return Err(Error::Argument(format!(
            "coefficient lengths ({}, {}) do not match ranks ({r1}, {r2})",
            g1_row.len(),
            g3_col.len()
        )));
    }
    cores.space_basis(g3_col)?.matvec(g1_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 3], seed: u64) -> DenseTensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rel_err(a: &DenseTensor3, b: &DenseTensor3) -> f64 {
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        d.sqrt() / a.frobenius_norm()
    }

    #[test]
    fn rank_one_tensor() {
        let a = [1.0, 2.0, -0.5];
        let b = [0.3, -1.0, 2.0, 0.7];
        let c = [1.0, 0.5, 0.25, 0.125, 0.0625];
        let t = DenseTensor3::from_fn([3, 4, 5], |i, j, k| a[i] * b[j] * c[k]).unwrap();
        let cores = tt_svd(&t, 1e-8).unwrap();
        assert_eq!(cores.ranks(), (1, 1));
        assert!(rel_err(&t, &tt_reconstruct(&cores).unwrap()) <= 1e-12);
    }

    #[test]
    fn random_tensor_tight_tolerance() {
        let t = random_tensor([4, 5, 6], 3);
        let cores = tt_svd(&t, 1e-12).unwrap();
        let (r1, r2) = cores.ranks();
        assert!(r1 <= 4 && r2 <= 6);
        assert!(rel_err(&t, &tt_reconstruct(&cores).unwrap()) <= 1e-10);
    }

    #[test]
    fn degenerate_dims_rejected() {
        let t = DenseTensor3::zeros([0, 2, 2]);
        assert!(matches!(tt_svd(&t, 1e-8), Err(Error::Argument(_))));
    }

    #[test]
    fn scalar_contraction() {
        let v = [1.0, -2.0, 0.5];
        let g1 = Matrix::new(1, 1, vec![2.0]).unwrap();
        let g2 = DenseTensor3::new([1, 3, 1], v.to_vec()).unwrap();
        let g3 = Matrix::new(1, 1, vec![3.0]).unwrap();
        let cores = TtCores::new(g1, g2, g3, 1e-8).unwrap();
        let full = tt_reconstruct(&cores).unwrap();
        for n in 0..3 {
            assert_eq!(full.get(0, n, 0), 6.0 * v[n]);
        }
    }

    #[test]
    fn zero_time_core_annihilates() {
        let t = random_tensor([3, 4, 5], 9);
        let c = tt_svd(&t, 1e-10).unwrap();
        let (r2, nt) = c.g3().shape();
        let z = TtCores::new(c.g1().clone(), c.g2().clone(), Matrix::zeros(r2, nt), 1e-10).unwrap();
        assert!(tt_reconstruct(&z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g1 = Matrix::zeros(2, 2);
        let g2 = DenseTensor3::zeros([3, 4, 1]);
        let g3 = Matrix::zeros(1, 5);
        assert!(matches!(TtCores::new(g1, g2, g3, 1e-8), Err(Error::Argument(_))));
    }

    #[test]
    fn eval_matches_reconstruction_slice() {
        let t = random_tensor([3, 6, 4], 5);
        let c = tt_svd(&t, 1e-3).unwrap();
        let full = tt_reconstruct(&c).unwrap();
        let u = tt_eval(c.g1().row(0), &c, &c.g3().column(0)).unwrap();
        for n in 0..6 {
            assert!((u[n] - full.get(0, n, 0)).abs() <= 1e-12);
        }
        let zero = vec![0.0; c.ranks().0];
        assert!(tt_eval(&zero, &c, &c.g3().column(0)).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(tt_eval(&[1.0; 17], &c, &c.g3().column(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let t = random_tensor([3, 4, 5], 6);
        let c = tt_svd(&t, 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(TtCores::load(dir.path()).unwrap(), c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn realized_error_within_tolerance(n1 in 1usize..6, n2 in 1usize..6, n3 in 1usize..6, seed in 0u64..1000, exp in -12i32..0) {
                let t = random_tensor([n1, n2, n3], seed);
                let eps = 10f64.powi(exp);
                let c = tt_svd(&t, eps).unwrap();
                prop_assert!(rel_err(&t, &tt_reconstruct(&c).unwrap()) <= eps * (1.0 + 1e-10) + 1e-14);
            }

            #[test]
            fn ranks_monotone_in_tolerance(seed in 0u64..1000, exp in -6i32..0) {
                let t = random_tensor([4, 5, 6], seed);
                let loose = tt_svd(&t, 10f64.powi(exp)).unwrap().ranks();
                let tight = tt_svd(&t, 10f64.powi(exp - 1)).unwrap().ranks();
                prop_assert!(tight.0 >= loose.0 && tight.1 >= loose.1);
            }

            #[test]
            fn eval_is_bilinear(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_tensor([3, 5, 4], seed);
                let c = tt_svd(&t, 1e-12).unwrap();
                let (r1, r2) = c.ranks();
                let mut g1: Vec<f64> = (0..r1).map(|_| rng.random_range(-1.0..1.0)).collect();
                let h1: Vec<f64> = (0..r1).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g3: Vec<f64> = (0..r2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let h3: Vec<f64> = (0..r2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let base = tt_eval(&g1, &c, &g3).unwrap();
                let scale = base.iter().map(|v| v.abs()).fold(1e-300, f64::max);

                let doubled: Vec<f64> = g1.iter().map(|v| 2.0 * v).collect();
                let u2 = tt_eval(&doubled, &c, &g3).unwrap();
                for (a, b) in u2.iter().zip(&base) {
                    prop_assert!((a - 2.0 * b).abs() <= 1e-12 * scale.max(1.0));
                }

                let sum3: Vec<f64> = g3.iter().zip(&h3).map(|(a, b)| a + b).collect();
                let lhs = tt_eval(&g1, &c, &sum3).unwrap();
                let rhs_b = tt_eval(&g1, &c, &h3).unwrap();
                for ((l, a), b) in lhs.iter().zip(&base).zip(&rhs_b) {
                    prop_assert!((l - a - b).abs() <= 1e-12 * (a.abs() + b.abs()).max(1.0));
                }

                let hb = tt_eval(&h1, &c, &g3).unwrap();
                for (v, h) in g1.iter_mut().zip(&h1) { *v += h; }
                let lhs = tt_eval(&g1, &c, &g3).unwrap();
                for ((l, a), b) in lhs.iter().zip(&base).zip(&hb) {
                    prop_assert!((l - a - b).abs() <= 1e-12 * (a.abs() + b.abs()).max(1.0));
                }
            }
        }
    }
}
