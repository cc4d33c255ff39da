//! Online stage: the coarse effective equation in Ritz or Petrov form.
//!
//! The unknown is `u^h − u^s`, sought in the span of the trial columns; the
//! coarse matrix is formed by triple products against the fine matrix `K`.

use std::fmt;

use faer::linalg::solvers::Solve;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{ColumnKind, SparseColumn, TrialSpace};
use crate::error::{Error, Result};
use crate::fem::FineFunction;
use crate::linalg::{c64, norm2, CsrMatrix, DenseLu};
use crate::mesh::TwoLevelMesh;

/// Relative imaginary mass above which a column is considered complex.
pub const COMPLEX_COLUMN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Test space equal to the trial space, closed under conjugation.
    Ritz,
    /// Test space equal to the conjugate of the trial space.
    Petrov,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ritz => "ritz",
            Method::Petrov => "petrov",
        })
    }
}

/// Coarse system assembled for the largest `m`; smaller `m` select a
/// principal submatrix.
#[derive(Debug, Clone)]
pub struct CoarseSystem {
    pub method: Method,
    pub trial: Vec<SparseColumn>,
    pub test: Vec<SparseColumn>,
    trial_kinds: Vec<ColumnKind>,
    test_kinds: Vec<ColumnKind>,
    /// Ritz column selection per `m`.
    ritz: Vec<Vec<usize>>,
    /// `S[a, b] = test_aᴴ K trial_b`.
    pub s: Mat<c64>,
}

fn in_subspace(kind: ColumnKind, m: usize) -> bool {
    match kind {
        ColumnKind::Nodal(_) => true,
        ColumnKind::Edge { index, .. } => index < m,
    }
}

fn select(kinds: &[ColumnKind], m: usize) -> Vec<usize> {
    (0..kinds.len()).filter(|&i| in_subspace(kinds[i], m)).collect()
}

fn max_index(kinds: &[ColumnKind]) -> usize {
    kinds
        .iter()
        .map(|k| match k {
            ColumnKind::Nodal(_) => 0,
            ColumnKind::Edge { index, .. } => index + 1,
        })
        .max()
        .unwrap_or(0)
}

/// Coarse elements within one element (in the max norm) of the given ones.
fn dilate(mesh: &TwoLevelMesh, elements: &[usize]) -> Vec<usize> {
    let nc = mesh.spec.coarse as isize;
    let mut out = Vec::with_capacity(9 * elements.len());
    for &t in elements {
        let [i, j] = mesh.element_coords(t);
        for dj in -1..=1 {
            for di in -1..=1 {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a >= 0 && b >= 0 && a < nc && b < nc {
                    out.push(mesh.element_index(a as usize, b as usize));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Dense matrix `[test_aᴴ K trial_b]` exploiting the local supports.
pub fn sesquilinear_products(
    mesh: &TwoLevelMesh,
    k: &CsrMatrix,
    test: &[SparseColumn],
    trial: &[SparseColumn],
) -> Mat<c64> {
    let n = mesh.num_nodes();
    let mut by_element: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_elements()];
    for (a, col) in test.iter().enumerate() {
        for &t in &col.elements {
            by_element[t].push(a);
        }
    }
    let kt = k.transpose();
    let cols: Vec<Vec<(usize, c64)>> = trial
        .par_iter()
        .enumerate()
        .map_init(
            || (vec![c64::new(0.0, 0.0); n], vec![usize::MAX; test.len()]),
            |(buf, stamp), (b, col)| {
                let mut touched = Vec::with_capacity(col.entries.len() * 2);
                for &(j, v) in &col.entries {
                    for (i, kij) in kt.row(j) {
                        if buf[i] == c64::new(0.0, 0.0) {
                            touched.push(i);
                        }
                        buf[i] += kij * v;
                    }
                }
                let mut out = Vec::new();
                for t in dilate(mesh, &col.elements) {
                    for &a in &by_element[t] {
                        if stamp[a] == b {
                            continue;
                        }
                        stamp[a] = b;
                        let val: c64 = test[a].entries.iter().map(|&(i, w)| w.conj() * buf[i]).sum();
                        out.push((a, val));
                    }
                }
                for i in touched {
                    buf[i] = c64::new(0.0, 0.0);
                }
                out
            },
        )
        .collect();
    let mut s = Mat::<c64>::zeros(test.len(), trial.len());
    for (b, col) in cols.into_iter().enumerate() {
        for (a, v) in col {
            s[(a, b)] = v;
        }
    }
    s
}

/// Build the coarse system for the trial space `Φ`.
pub fn assemble_coarse(mesh: &TwoLevelMesh, k: &CsrMatrix, space: &TrialSpace, method: Method) -> CoarseSystem {
    let (trial, trial_kinds, test, test_kinds, ritz) = match method {
        Method::Ritz => {
            let (cols, kinds, ritz) = conjugate_augmented(mesh, space);
            (cols.clone(), kinds.clone(), cols, kinds, ritz)
        }
        Method::Petrov => {
            let test = space.columns.iter().map(SparseColumn::conj).collect();
            (space.columns.clone(), space.kinds.clone(), test, space.kinds.clone(), Vec::new())
        }
    };
    let s = sesquilinear_products(mesh, k, &test, &trial);
    CoarseSystem {
        method,
        trial,
        test,
        trial_kinds,
        test_kinds,
        ritz,
        s,
    }
}

/// Fraction of its squared norm a conjugate column must keep after
/// projection onto the columns already selected.
pub const DEPENDENCE_TOL: f64 = 1e-8;

/// `Φ ∪ conj(Φ)` without real columns. Returns the columns, their kinds
/// and, for every `m`, the selected column indices: all members of `Φ_m`
/// plus a maximal independent set of conjugates, chosen greedily in order.
fn conjugate_augmented(mesh: &TwoLevelMesh, space: &TrialSpace) -> (Vec<SparseColumn>, Vec<ColumnKind>, Vec<Vec<usize>>) {
    let m_max = max_index(&space.kinds);
    let n_orig = space.columns.len();
    let mut cols = space.columns.clone();
    let mut kinds = space.kinds.clone();
    for (j, col) in space.columns.iter().enumerate() {
        if col.imaginary_fraction() > COMPLEX_COLUMN_TOL {
            cols.push(col.conj());
            kinds.push(space.kinds[j]);
        }
    }
    let conj: Vec<usize> = (n_orig..cols.len()).collect();
    // only originals touching the support of some conjugate can take part
    let mut region = vec![false; mesh.num_elements()];
    for &c in &conj {
        cols[c].elements.iter().for_each(|&t| region[t] = true);
    }
    let near: Vec<usize> = (0..n_orig).filter(|&j| cols[j].elements.iter().any(|&t| region[t])).collect();
    let members: Vec<usize> = near.iter().chain(&conj).copied().collect();
    let sub: Vec<SparseColumn> = members.iter().map(|&j| cols[j].clone()).collect();
    let g = if conj.is_empty() {
        Mat::zeros(0, 0)
    } else {
        let g = sesquilinear_products(mesh, &CsrMatrix::identity(mesh.num_nodes()), &sub, &sub);
        let d: Vec<f64> = (0..g.nrows()).map(|i| g[(i, i)].re.sqrt().recip()).collect();
        Mat::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * (d[i] * d[j]))
    };
    let selections = (0..=m_max)
        .into_par_iter()
        .map(|m| {
            let o: Vec<usize> = (0..near.len()).filter(|&i| in_subspace(kinds[members[i]], m)).collect();
            let c: Vec<usize> = (near.len()..members.len()).filter(|&i| in_subspace(kinds[members[i]], m)).collect();
            let mut sel = select(&space.kinds, m);
            sel.extend(independent_conjugates(&g, &o, &c).into_iter().map(|i| members[i]));
            sel
        })
        .collect();
    (cols, kinds, selections)
}

/// Greedy choice among `c` of columns independent of `o` and of each other,
/// given their Gram matrix `g`.
fn independent_conjugates(g: &Mat<c64>, o: &[usize], c: &[usize]) -> Vec<usize> {
    if c.is_empty() {
        return Vec::new();
    }
    let goo = Mat::from_fn(o.len(), o.len(), |i, j| g[(o[i], o[j])]);
    let goc = Mat::from_fn(o.len(), c.len(), |i, j| g[(o[i], c[j])]);
    let mut z = Mat::from_fn(c.len(), c.len(), |i, j| g[(c[i], c[j])]);
    if !o.is_empty() {
        match goo.llt(faer::Side::Lower) {
            Ok(llt) => {
                let x = llt.solve(&goc);
                z -= goc.adjoint() * &x;
            }
            Err(_) => return Vec::new(),
        }
    }
    let nc = c.len();
    let mut rows: Vec<Vec<c64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    let mut d: Vec<f64> = (0..nc).map(|j| z[(j, j)].re).collect();
    for j in 0..nc {
        if d[j] <= DEPENDENCE_TOL {
            continue;
        }
        let s = d[j].sqrt();
        let mut r = vec![c64::new(0.0, 0.0); nc];
        for i in j + 1..nc {
            let mut v = z[(j, i)];
            for row in &rows {
                v -= row[j].conj() * row[i];
            }
            r[i] = v / s;
            d[i] -= r[i].norm_sqr();
        }
        r[j] = c64::new(s, 0.0);
        rows.push(r);
        pivots.push(j);
    }
    pivots.into_iter().map(|j| c[j]).collect()
}

impl CoarseSystem {
    /// Dimension of the coarse system with `m` edge functions per edge.
    pub fn dim(&self, m: usize) -> usize {
        self.indices(m).0.len()
    }

    /// Trial and test column indices for `m`.
    pub fn indices(&self, m: usize) -> (Vec<usize>, Vec<usize>) {
        if self.method == Method::Ritz {
            let sel = self.ritz[m.min(self.ritz.len() - 1)].clone();
            return (sel.clone(), sel);
        }
        (select(&self.trial_kinds, m), select(&self.test_kinds, m))
    }

    /// Coarse matrix for `m` edge functions per edge.
    pub fn matrix(&self, m: usize) -> Mat<c64> {
        let (tr, te) = self.indices(m);
        Mat::from_fn(te.len(), tr.len(), |i, j| self.s[(te[i], tr[j])])
    }
}

/// Fine-grid parts of the solution that are computed locally.
#[derive(Debug, Clone)]
pub struct FineParts {
    /// Glued element bubbles (including the particular part for boundary data).
    pub u_b: FineFunction,
    pub u_s: FineFunction,
}

#[derive(Debug, Clone)]
pub struct OnlineSolution {
    pub u: FineFunction,
    pub coarse_dim: usize,
    /// Estimated smallest singular value of the coarse matrix.
    pub sigma_min: f64,
}

/// Solve `a(u^h − u^s, v) = (f, v) − a(u^b + u^s, v)` over the coarse space with
/// `m` edge functions per edge and return `u = U c + u^b + u^s`.
pub fn solve_online(cs: &CoarseSystem, m: usize, k: &CsrMatrix, load: &[c64], parts: &FineParts) -> Result<OnlineSolution> {
    let n = load.len();
    if parts.u_b.len() != n || parts.u_s.len() != n || k.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: parts.u_b.len(),
        });
    }
    let known: Vec<c64> = parts.u_b.iter().zip(&parts.u_s).map(|(a, b)| a + b).collect();
    let kk = k.matvec(&known);
    let w: Vec<c64> = load.iter().zip(&kk).map(|(f, x)| f - x).collect();

    let (tr, te) = cs.indices(m);
    let rhs: Vec<c64> = te
        .iter()
        .map(|&a| cs.test[a].entries.iter().map(|&(i, v)| v.conj() * w[i]).sum())
        .collect();
    let s = cs.matrix(m);
    let lu = DenseLu::factorize(s.as_ref()).map_err(|e| match e {
        Error::Singular { detail, .. } => Error::Singular {
            context: format!("coarse {} system of order {}", cs.method, s.nrows()),
            detail,
        },
        other => other,
    })?;
    let c = lu.solve(&rhs);
    let sigma_min = lu.sigma_min_estimate(30);
    let mut u = known;
    for (&b, cb) in tr.iter().zip(&c) {
        for &(i, v) in &cs.trial[b].entries {
            u[i] += cb * v;
        }
    }
    Ok(OnlineSolution {
        u,
        coarse_dim: tr.len(),
        sigma_min,
    })
}

/// Largest `|test_aᴴ (F − K u)|` over the test columns used for `m`.
pub fn galerkin_residual(cs: &CoarseSystem, m: usize, k: &CsrMatrix, load: &[c64], u: &[c64]) -> f64 {
    let ku = k.matvec(u);
    let (_, te) = cs.indices(m);
    te.iter()
        .map(|&a| {
            cs.test[a]
                .entries
                .iter()
                .map(|&(i, v)| v.conj() * (load[i] - ku[i]))
                .sum::<c64>()
                .norm()
        })
        .fold(0.0, f64::max)
}

/// Energy-norm best approximation error of `target` from the span of the
/// given columns.
pub fn best_approximation_error(
    mesh: &TwoLevelMesh,
    energy: &CsrMatrix,
    columns: &[SparseColumn],
    target: &[c64],
) -> Result<f64> {
    let gram = sesquilinear_products(mesh, energy, columns, columns);
    let et = energy.matvec(target);
    let rhs: Vec<c64> = columns
        .iter()
        .map(|col| col.entries.iter().map(|&(i, v)| v.conj() * et[i]).sum())
        .collect();
    let c = DenseLu::factorize(gram.as_ref())?.solve(&rhs);
    let mut diff = target.to_vec();
    for (col, cb) in columns.iter().zip(&c) {
        for &(i, v) in &col.entries {
            diff[i] -= cb * v;
        }
    }
    Ok(energy.form(&diff, &diff).re.max(0.0).sqrt())
}

/// Relative `L²` and energy errors; absolute when `u_ref` vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPair {
    pub l2: f64,
    pub energy: f64,
    pub absolute: bool,
}

pub fn compute_errors(u_sol: &[c64], u_ref: &[c64], mass: &CsrMatrix, energy: &CsrMatrix) -> ErrorPair {
    let diff: Vec<c64> = u_sol.iter().zip(u_ref).map(|(a, b)| a - b).collect();
    let dl2 = mass.form(&diff, &diff).re.max(0.0).sqrt();
    let de = energy.form(&diff, &diff).re.max(0.0).sqrt();
    let rl2 = mass.form(u_ref, u_ref).re.max(0.0).sqrt();
    let re = energy.form(u_ref, u_ref).re.max(0.0).sqrt();
    if rl2 == 0.0 || re == 0.0 || norm2(u_ref) == 0.0 {
        ErrorPair {
            l2: dl2,
            energy: de,
            absolute: true,
        }
    } else {
        ErrorPair {
            l2: dl2 / rl2,
            energy: de / re,
            absolute: false,
        }
    }
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub problem: String,
    pub method: Method,
    pub k: f64,
    #[serde(rename = "nH")]
    pub n_h: usize,
    pub refine: usize,
    pub m: usize,
    pub coarse_dim: usize,
    #[serde(rename = "e_L2")]
    pub e_l2: f64,
    #[serde(rename = "e_H")]
    pub e_h: f64,
    pub offline_sec: f64,
    pub online_sec: f64,
    pub flags: String,
}
