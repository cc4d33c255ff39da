//! Complex sparse storage, sparse and dense LU, and the Hermitian generalized
//! eigensolver used for the edge bases. Factorizations are delegated to `faer`.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

pub use faer::c64;

/// Relative pivot threshold below which a factorization is declared singular.
pub const PIVOT_TOL: f64 = 1e-14;

/// Complex matrix in compressed sparse row format.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<c64>,
}

impl CsrMatrix {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, c64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![c64::new(0.0, 0.0); triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, c64)> = Vec::new();
        for i in 0..nrows {
            row.clear();
            row.extend((counts[i]..counts[i + 1]).map(|p| (cols[p], vals[p])));
            row.sort_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                if indices.len() > indptr[i] && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![c64::new(1.0, 0.0); n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, c64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(p) => self.values[span.start + p],
            Err(_) => c64::new(0.0, 0.0),
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, c64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn matvec(&self, x: &[c64]) -> Vec<c64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `y += A x`.
    pub fn matvec_add(&self, x: &[c64], y: &mut [c64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += self.row(i).map(|(j, v)| v * x[j]).sum::<c64>();
        }
    }

    /// `yᴴ A x`.
    pub fn form(&self, x: &[c64], y: &[c64]) -> c64 {
        assert_eq!(y.len(), self.nrows);
        let ax = self.matvec(x);
        y.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = v.conj());
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == 0.0)
    }

    /// Submatrix on the given rows and columns, with local indices following
    /// the order of `rows` and `cols`.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let mut t = Vec::new();
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                if map[j] != usize::MAX {
                    t.push((r, map[j], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &t)
    }

    /// Product with a dense matrix.
    pub fn mul_dense(&self, x: &Mat<c64>) -> Mat<c64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = Mat::<c64>::zeros(self.nrows, x.ncols());
        for j in 0..x.ncols() {
            for i in 0..self.nrows {
                out[(i, j)] = self.row(i).map(|(c, v)| v * x[(c, j)]).sum();
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat<c64> {
        let mut m = Mat::<c64>::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, c64>> {
        let t: Vec<_> = self.triplets().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t).map_err(|e| {
            Error::Singular {
                context: "sparse assembly".into(),
                detail: format!("{e:?}"),
            }
        })
    }
}

pub fn norm2(x: &[c64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dot(x: &[c64], y: &[c64]) -> c64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

// Fixed probe vector for singularity checks: unit-modulus entries with
// irregular phases.
fn probe_vector(n: usize) -> Vec<c64> {
    (0..n)
        .map(|i| c64::from_polar(1.0, (i as f64 * 0.618_033_988_749_895).fract() * std::f64::consts::TAU))
        .collect()
}

/// Sparse LU factorization with reusable factors.
pub struct SparseLu {
    n: usize,
    lu: Option<faer::sparse::linalg::solvers::Lu<usize, c64>>,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu").field("n", &self.n).finish()
    }
}

impl SparseLu {
    /// Factorize a square matrix. The factors are checked by solving against a
    /// probe right-hand side `K p`; a non-finite or inaccurate probe solution
    /// marks the matrix as numerically singular.
    pub fn factorize(k: &CsrMatrix) -> Result<Self> {
        if k.nrows != k.ncols {
            return Err(Error::Dimension {
                expected: k.nrows,
                got: k.ncols,
            });
        }
        let n = k.nrows;
        if n == 0 {
            return Ok(Self { n, lu: None });
        }
        let lu = k.to_faer()?.sp_lu().map_err(|e| Error::Singular {
            context: format!("sparse LU of order {n}"),
            detail: format!("{e:?}"),
        })?;
        let out = Self { n, lu: Some(lu) };

        let p = probe_vector(n);
        let b = k.matvec(&p);
        let x = out.solve(&b);
        let err = norm2(&x.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm2(&p);
        let resid = {
            let kx = k.matvec(&x);
            norm2(&kx.iter().zip(&b).map(|(a, b)| a - b).collect::<Vec<_>>())
        };
        let bnorm = norm2(&b).max(f64::MIN_POSITIVE);
        if !err.is_finite() || resid > 1e-8 * bnorm || err > 1e-2 {
            return Err(Error::Singular {
                context: format!("sparse LU of order {n}"),
                detail: format!(
                    "probe solve error {err:.3e}, relative residual {:.3e}; k² may sit on a discrete resonance",
                    resid / bnorm
                ),
            });
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [c64]) {
        assert_eq!(b.len(), self.n);
        if let Some(lu) = &self.lu {
            let mut m = faer::MatMut::from_column_major_slice_mut(b, self.n, 1);
            lu.solve_in_place(m.as_mut());
        }
    }

    pub fn solve(&self, b: &[c64]) -> Vec<c64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solve for several right-hand sides stored as matrix columns.
    pub fn solve_mat_in_place(&self, b: &mut Mat<c64>) {
        assert_eq!(b.nrows(), self.n);
        if let Some(lu) = &self.lu {
            if b.ncols() > 0 {
                lu.solve_in_place(b.as_mut());
            }
        }
    }
}

/// Dense LU with partial pivoting for the coarse system.
pub struct DenseLu {
    lu: faer::linalg::solvers::PartialPivLu<c64>,
    n: usize,
}

impl DenseLu {
    pub fn factorize(a: MatRef<'_, c64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: a.ncols(),
            });
        }
        let scale = (0..n)
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| a[(i, j)].norm())
            .fold(0.0, f64::max);
        let lu = a.partial_piv_lu();
        let u = lu.U();
        let min_pivot = (0..n).map(|i| u[(i, i)].norm()).fold(f64::INFINITY, f64::min);
        if n > 0 && !(min_pivot > PIVOT_TOL * scale) {
            return Err(Error::Singular {
                context: format!("dense LU of order {n}"),
                detail: format!("smallest pivot {min_pivot:.3e} vs max entry {scale:.3e}"),
            });
        }
        Ok(Self { lu, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[c64]) -> Vec<c64> {
        let mut x = b.to_vec();
        if self.n > 0 {
            let m = faer::MatMut::from_column_major_slice_mut(&mut x, self.n, 1);
            self.lu.solve_in_place(m);
        }
        x
    }

    fn solve_adjoint(&self, b: &[c64]) -> Vec<c64> {
        let mut x = b.to_vec();
        if self.n > 0 {
            let m = faer::MatMut::from_column_major_slice_mut(&mut x, self.n, 1);
            self.lu.solve_adjoint_in_place(m);
        }
        x
    }

    /// Estimate of the smallest singular value by inverse iteration on `SᴴS`.
    pub fn sigma_min_estimate(&self, iterations: usize) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let mut x = probe_vector(self.n);
        let mut sigma = f64::NAN;
        for _ in 0..iterations.max(1) {
            let nx = norm2(&x);
            x.iter_mut().for_each(|v| *v /= nx);
            let y = self.solve_adjoint(&self.solve(&x));
            let ny = norm2(&y);
            if !ny.is_finite() || ny == 0.0 {
                return 0.0;
            }
            sigma = 1.0 / ny.sqrt();
            x = y;
        }
        sigma
    }
}

/// Hermitian generalized eigenproblem `M g = λ² G g`.
#[derive(Debug, Clone)]
pub struct HermitianGevp {
    pub m: Mat<c64>,
    pub g: Mat<c64>,
}

/// Leading eigenpairs of a [`HermitianGevp`].
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    /// Eigenvalues `λ²`, descending, clamped at zero.
    pub values: Vec<f64>,
    /// `G`-orthonormal eigenvectors, one per column.
    pub vectors: Mat<c64>,
    /// Whether `G` needed a diagonal shift before Cholesky succeeded.
    pub regularized: bool,
}

impl HermitianGevp {
    pub fn new(m: Mat<c64>, g: Mat<c64>) -> Result<Self> {
        let n = g.nrows();
        for mat in [&m, &g] {
            if mat.nrows() != n || mat.ncols() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: mat.nrows().max(mat.ncols()),
                });
            }
        }
        Ok(Self { m, g })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn is_real(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| self.m[(i, j)].im == 0.0 && self.g[(i, j)].im == 0.0))
    }

    /// Top `count` eigenpairs. Real inputs are solved in real arithmetic so
    /// that the eigenvectors come out exactly real.
    pub fn top_eigenpairs(&self, count: usize) -> Result<Eigenpairs> {
        let n = self.dim();
        let count = count.min(n);
        if self.is_real() {
            let m = Mat::<f64>::from_fn(n, n, |i, j| self.m[(i, j)].re);
            let g = Mat::<f64>::from_fn(n, n, |i, j| self.g[(i, j)].re);
            let (values, vecs, regularized) = reduce_and_solve(m, g, count)?;
            let vectors = Mat::<c64>::from_fn(n, count, |i, j| c64::new(vecs[(i, j)], 0.0));
            Ok(Eigenpairs {
                values,
                vectors,
                regularized,
            })
        } else {
            let (values, vectors, regularized) = reduce_and_solve(self.m.clone(), self.g.clone(), count)?;
            Ok(Eigenpairs {
                values,
                vectors,
                regularized,
            })
        }
    }
}

trait Scalar: faer::traits::ComplexField + Copy {
    fn re(self) -> f64;
    fn cj(self) -> Self;
    fn plus(self, other: Self) -> Self;
    fn scaled(self, s: f64) -> Self;
}

impl Scalar for f64 {
    fn re(self) -> f64 {
        self
    }
    fn cj(self) -> Self {
        self
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
    fn scaled(self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for c64 {
    fn re(self) -> f64 {
        self.re
    }
    fn cj(self) -> Self {
        self.conj()
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
    fn scaled(self, s: f64) -> Self {
        self * s
    }
}

fn hermitian_part<T: Scalar>(a: &Mat<T>) -> Mat<T> {
    let n = a.nrows();
    Mat::from_fn(n, n, |i, j| a[(i, j)].plus(a[(j, i)].cj()).scaled(0.5))
}

fn reduce_and_solve<T: Scalar>(m: Mat<T>, g: Mat<T>, count: usize) -> Result<(Vec<f64>, Mat<T>, bool)> {
    let n = g.nrows();
    let g = hermitian_part(&g);
    let m = hermitian_part(&m);
    let mut regularized = false;
    let llt = match g.llt(Side::Lower) {
        Ok(l) => l,
        Err(_) => {
            regularized = true;
            let trace: f64 = (0..n).map(|i| g[(i, i)].re()).sum();
            let shift = 1e-12 * trace / n as f64;
            let mut gr = g.clone();
            for i in 0..n {
                gr[(i, i)] = gr[(i, i)].plus(T::from_f64_impl(shift));
            }
            gr.llt(Side::Lower)
                .map_err(|e| Error::IllConditionedGram(format!("{e:?}")))?
        }
    };
    let l = llt.L();
    // C = L⁻¹ M L⁻ᴴ
    let mut x = m.clone();
    l.solve_lower_triangular_in_place(x.as_mut());
    let mut c = x.adjoint().to_owned();
    l.solve_lower_triangular_in_place(c.as_mut());
    let c = hermitian_part(&c);
    let eig = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::IllConditionedGram(format!("eigensolver: {e:?}")))?;
    let s = eig.S();
    let u = eig.U();
    let val = |i: usize| s.column_vector()[i].re();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| val(b).total_cmp(&val(a)));
    order.truncate(count);
    let values = order.iter().map(|&i| val(i).max(0.0)).collect();
    let mut y = Mat::<T>::from_fn(n, count, |r, j| u[(r, order[j])]);
    l.adjoint().solve_upper_triangular_in_place(y.as_mut());
    Ok((values, y, regularized))
}
