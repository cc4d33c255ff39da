//! Q1 finite elements on the fine grid.
//!
//! Matrices follow the convention `a(u, v) = v̄ᵀ K u`. All assembly routines
//! work on a [`Patch`] (the whole domain, a coarse element or an oversampling
//! domain) and return matrices indexed by the patch-local row-major node
//! numbering. Coefficients are piecewise constant on fine cells, so the 2×2
//! Gauss rule used for the reference element matrices is exact.

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::{c64, norm2, CsrMatrix, SparseLu};
use crate::mesh::{BoundaryKind, NodeRole, Patch, Side, TwoLevelMesh};

pub type ComplexSparseMatrix = CsrMatrix;

/// Complex value per fine node, indexed like the mesh (row-major). Dirichlet
/// nodes carry their prescribed (zero) value.
pub type FineFunction = Vec<c64>;

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Coefficients sampled on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    /// Fine cells per side.
    pub n: usize,
    /// `A` per fine cell, row-major (`cy * n + cx`).
    pub a: Vec<f64>,
    /// `V` per fine cell.
    pub v: Vec<f64>,
    /// `β` per boundary facet, in the order of [`TwoLevelMesh::boundary_facets`].
    pub beta: Vec<f64>,
    pub k: f64,
}

impl CoefficientField {
    /// Sample `A` and `V` at fine-cell midpoints and `β` at boundary-facet midpoints.
    pub fn sample(
        mesh: &TwoLevelMesh,
        a: impl Fn([f64; 2]) -> f64,
        v: impl Fn([f64; 2]) -> f64,
        beta: impl Fn([f64; 2]) -> f64,
        k: f64,
    ) -> Result<Self> {
        let n = mesh.n();
        let h = mesh.spec.fine_size();
        let mut av = Vec::with_capacity(n * n);
        let mut vv = Vec::with_capacity(n * n);
        for cy in 0..n {
            for cx in 0..n {
                let x = [(cx as f64 + 0.5) * h, (cy as f64 + 0.5) * h];
                av.push(a(x));
                vv.push(v(x));
            }
        }
        let bv = mesh
            .boundary_facets()
            .iter()
            .map(|f| {
                let p = mesh.node_coords(f.nodes[0]);
                let q = mesh.node_coords(f.nodes[1]);
                beta([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0])
            })
            .collect();
        let out = Self {
            n,
            a: av,
            v: vv,
            beta: bv,
            k,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn constant(mesh: &TwoLevelMesh, a: f64, v: f64, beta: f64, k: f64) -> Result<Self> {
        Self::sample(mesh, |_| a, |_| v, |_| beta, k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: &f64| x.is_finite() && *x > 0.0;
        if self.a.len() != self.n * self.n || self.v.len() != self.n * self.n || self.beta.len() != 4 * self.n {
            return Err(Error::Config("coefficient arrays do not match the grid".into()));
        }
        if !self.a.iter().all(ok) || !self.v.iter().all(ok) || !self.beta.iter().all(ok) {
            return Err(Error::Config("coefficients must be positive and finite".into()));
        }
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(Error::Config(format!("invalid wavenumber {}", self.k)));
        }
        Ok(())
    }

    pub fn a_cell(&self, cx: usize, cy: usize) -> f64 {
        self.a[cy * self.n + cx]
    }

    pub fn v_cell(&self, cx: usize, cy: usize) -> f64 {
        self.v[cy * self.n + cx]
    }

    pub fn a_min(&self) -> f64 {
        self.a.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn a_max(&self) -> f64 {
        self.a.iter().copied().fold(0.0, f64::max)
    }

    pub fn v_max(&self) -> f64 {
        self.v.iter().copied().fold(0.0, f64::max)
    }

    /// Whether the Helmholtz form on `patch` is real (no Robin facet, or k = 0).
    pub fn is_real_on(&self, mesh: &TwoLevelMesh, patch: &Patch) -> bool {
        self.k == 0.0 || patch_robin_facets(mesh, patch).next().is_none()
    }
}

/// Bilinear forms that can be assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    /// `(A∇u,∇v) − k²(V²u,v) − (ikβu,v)_{Γ_R}`.
    Helmholtz,
    /// Adjoint form: the Robin term changes sign.
    Adjoint,
    /// Energy inner product `(A∇u,∇v) + k²(V²u,v)`.
    Energy,
    /// Unweighted `L²` inner product.
    Mass,
}

/// Q1 stiffness and mass matrices on the unit square, counterclockwise node
/// order, by 2×2 Gauss quadrature.
pub fn reference_matrices() -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
    let mut k = [[0.0; 4]; 4];
    let mut m = [[0.0; 4]; 4];
    for &x in &GAUSS {
        for &y in &GAUSS {
            let (phi, grad) = q1_basis(x, y);
            for i in 0..4 {
                for j in 0..4 {
                    k[i][j] += 0.25 * (grad[i][0] * grad[j][0] + grad[i][1] * grad[j][1]);
                    m[i][j] += 0.25 * phi[i] * phi[j];
                }
            }
        }
    }
    (k, m)
}

/// Q1 shape functions and reference gradients at `(x, y) ∈ [0,1]²`.
fn q1_basis(x: f64, y: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    (
        [(1.0 - x) * (1.0 - y), x * (1.0 - y), x * y, (1.0 - x) * y],
        [
            [-(1.0 - y), -(1.0 - x)],
            [1.0 - y, -x],
            [y, x],
            [-y, 1.0 - x],
        ],
    )
}

/// Patch-local indices of the nodes of fine cell `(cx, cy)`, counterclockwise.
fn cell_nodes(patch: &Patch, cx: usize, cy: usize) -> [usize; 4] {
    let w = patch.nodes_x();
    let base = (cy - patch.y0) * w + (cx - patch.x0);
    [base, base + 1, base + w + 1, base + w]
}

fn facet_cell(n: usize, side: Side, p: usize) -> (usize, usize) {
    match side {
        Side::Bottom => (p, 0),
        Side::Top => (p, n - 1),
        Side::Left => (0, p),
        Side::Right => (n - 1, p),
    }
}

/// Boundary facets of `∂Ω` lying on the boundary of `patch`, with their index.
fn patch_facets<'a>(
    mesh: &'a TwoLevelMesh,
    patch: &'a Patch,
) -> impl Iterator<Item = (usize, &'a crate::mesh::BoundaryFacet)> + 'a {
    let n = mesh.n();
    mesh.boundary_facets().iter().enumerate().filter(move |(_, f)| {
        let (cx, cy) = facet_cell(n, f.side, f.position);
        patch.contains_cell(cx, cy)
    })
}

fn patch_robin_facets<'a>(
    mesh: &'a TwoLevelMesh,
    patch: &'a Patch,
) -> impl Iterator<Item = (usize, &'a crate::mesh::BoundaryFacet)> + 'a {
    patch_facets(mesh, patch).filter(|(_, f)| f.kind == BoundaryKind::Robin)
}

fn check_patch(mesh: &TwoLevelMesh, patch: &Patch) -> Result<()> {
    if patch.x1 <= patch.x0 || patch.y1 <= patch.y0 || patch.x1 > mesh.n() || patch.y1 > mesh.n() {
        return Err(Error::EmptyDofSet);
    }
    Ok(())
}

/// Assemble `form` on `patch` over all patch nodes (no elimination).
pub fn assemble_form(mesh: &TwoLevelMesh, coeff: &CoefficientField, patch: &Patch, form: Form) -> Result<CsrMatrix> {
    check_patch(mesh, patch)?;
    let (sref, mref) = reference_matrices();
    let h = mesh.spec.fine_size();
    let k2 = coeff.k * coeff.k;
    let mut t = Vec::with_capacity(16 * patch.num_cells() + 4 * (patch.nodes_x() + patch.nodes_y()));
    for cy in patch.y0..patch.y1 {
        for cx in patch.x0..patch.x1 {
            let a = coeff.a_cell(cx, cy);
            let v2 = coeff.v_cell(cx, cy).powi(2);
            let (ws, wm) = match form {
                Form::Helmholtz | Form::Adjoint => (a, -k2 * v2 * h * h),
                Form::Energy => (a, k2 * v2 * h * h),
                Form::Mass => (0.0, h * h),
            };
            let nodes = cell_nodes(patch, cx, cy);
            for i in 0..4 {
                for j in 0..4 {
                    t.push((nodes[i], nodes[j], c64::new(ws * sref[i][j] + wm * mref[i][j], 0.0)));
                }
            }
        }
    }
    let sign = match form {
        Form::Helmholtz => -1.0,
        Form::Adjoint => 1.0,
        Form::Energy | Form::Mass => 0.0,
    };
    if sign != 0.0 {
        for (idx, f) in patch_robin_facets(mesh, patch) {
            let w = c64::new(0.0, sign * coeff.k * coeff.beta[idx] * h / 6.0);
            let [p, q] = f.nodes.map(|g| {
                let (ix, iy) = mesh.grid_point(g);
                patch.local_index(ix, iy).expect("facet node inside patch")
            });
            t.push((p, p, w * 2.0));
            t.push((q, q, w * 2.0));
            t.push((p, q, w));
            t.push((q, p, w));
        }
    }
    Ok(CsrMatrix::from_triplets(patch.num_nodes(), patch.num_nodes(), &t))
}

/// Sesquilinear matrix of the Helmholtz form on `patch`.
pub fn assemble_sesquilinear(mesh: &TwoLevelMesh, coeff: &CoefficientField, patch: &Patch) -> Result<CsrMatrix> {
    assemble_form(mesh, coeff, patch, Form::Helmholtz)
}

/// Energy Gram matrix `K_A + k² M_{V²}` on `patch`.
pub fn assemble_energy_gram(mesh: &TwoLevelMesh, coeff: &CoefficientField, patch: &Patch) -> Result<CsrMatrix> {
    assemble_form(mesh, coeff, patch, Form::Energy)
}

/// `(f, φ_i)` on `patch` by 2×2 Gauss quadrature.
pub fn assemble_load(mesh: &TwoLevelMesh, f: &(dyn Fn([f64; 2]) -> c64 + Sync), patch: &Patch) -> Result<Vec<c64>> {
    check_patch(mesh, patch)?;
    let h = mesh.spec.fine_size();
    let mut out = vec![c64::new(0.0, 0.0); patch.num_nodes()];
    for cy in patch.y0..patch.y1 {
        for cx in patch.x0..patch.x1 {
            let nodes = cell_nodes(patch, cx, cy);
            for &gx in &GAUSS {
                for &gy in &GAUSS {
                    let val = f([(cx as f64 + gx) * h, (cy as f64 + gy) * h]);
                    if val == c64::new(0.0, 0.0) {
                        continue;
                    }
                    let (phi, _) = q1_basis(gx, gy);
                    for i in 0..4 {
                        out[nodes[i]] += val * (0.25 * h * h * phi[i]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Load vector of the bilinear interpolant of nodal samples given on the patch.
pub fn assemble_load_nodal(mesh: &TwoLevelMesh, samples: &[c64], patch: &Patch) -> Result<Vec<c64>> {
    if samples.len() != patch.num_nodes() {
        return Err(Error::Dimension {
            expected: patch.num_nodes(),
            got: samples.len(),
        });
    }
    let mass = assemble_form(mesh, &unit_coefficients(mesh), patch, Form::Mass)?;
    Ok(mass.matvec(samples))
}

fn unit_coefficients(mesh: &TwoLevelMesh) -> CoefficientField {
    let n = mesh.n();
    CoefficientField {
        n,
        a: vec![1.0; n * n],
        v: vec![1.0; n * n],
        beta: vec![1.0; 4 * n],
        k: 0.0,
    }
}

/// `(g, φ_i)_{∂Ω ∩ (Γ_N ∪ Γ_R)}` for boundary facets on `patch`, two-point Gauss.
/// `g` receives the point and the side it lies on.
pub fn assemble_boundary_load(
    mesh: &TwoLevelMesh,
    g: &(dyn Fn([f64; 2], Side) -> c64 + Sync),
    patch: &Patch,
) -> Result<Vec<c64>> {
    check_patch(mesh, patch)?;
    let h = mesh.spec.fine_size();
    let mut out = vec![c64::new(0.0, 0.0); patch.num_nodes()];
    for (_, f) in patch_facets(mesh, patch) {
        if !f.kind.is_natural() {
            continue;
        }
        let a = mesh.node_coords(f.nodes[0]);
        let b = mesh.node_coords(f.nodes[1]);
        let [p, q] = f.nodes.map(|n| {
            let (ix, iy) = mesh.grid_point(n);
            patch.local_index(ix, iy).expect("facet node inside patch")
        });
        for &s in &GAUSS {
            let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            let val = g(x, f.side) * (0.5 * h);
            out[p] += val * (1.0 - s);
            out[q] += val * s;
        }
    }
    Ok(out)
}

/// Global load `(f, φ_i) + (g, φ_i)_{Γ_N ∪ Γ_R}` on the whole grid.
pub fn global_load(
    mesh: &TwoLevelMesh,
    f: &(dyn Fn([f64; 2]) -> c64 + Sync),
    g: Option<&(dyn Fn([f64; 2], Side) -> c64 + Sync)>,
) -> Result<Vec<c64>> {
    let whole = mesh.whole_patch();
    let mut load = assemble_load(mesh, f, &whole)?;
    if let Some(g) = g {
        for (l, b) in load.iter_mut().zip(assemble_boundary_load(mesh, g, &whole)?) {
            *l += b;
        }
    }
    Ok(load)
}

/// Bilinear interpolation of a nodal function on an `n × n` cell grid onto
/// the uniformly refined `2n × 2n` grid.
pub fn prolongate(n: usize, u: &[c64]) -> Vec<c64> {
    let np = n + 1;
    let m = 2 * n + 1;
    let at = |i: usize, j: usize| u[j * np + i];
    let mut out = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let (i0, i1) = (i / 2, i.div_ceil(2));
            let (j0, j1) = (j / 2, j.div_ceil(2));
            out.push((at(i0, j0) + at(i1, j0) + at(i0, j1) + at(i1, j1)) * 0.25);
        }
    }
    out
}

/// Copy the patch part of a global fine function.
pub fn gather(mesh: &TwoLevelMesh, patch: &Patch, global: &[c64]) -> Vec<c64> {
    (0..patch.num_nodes())
        .map(|l| {
            let (ix, iy) = patch.grid_point(l);
            global[mesh.node_index(ix, iy)]
        })
        .collect()
}

/// Write patch values into a global fine function.
pub fn scatter(mesh: &TwoLevelMesh, patch: &Patch, local: &[c64], global: &mut [c64]) {
    for (l, v) in local.iter().enumerate() {
        let (ix, iy) = patch.grid_point(l);
        global[mesh.node_index(ix, iy)] = *v;
    }
}

/// A form assembled on a patch with the node roles of the local problem
/// resolved: free nodes are unknowns, trace nodes carry prescribed values,
/// fixed (global Dirichlet) nodes are zero.
pub struct PatchSystem {
    pub patch: Patch,
    /// Full patch matrix, all nodes.
    pub matrix: CsrMatrix,
    /// Patch-local indices of free nodes.
    pub free: Vec<usize>,
    /// Patch-local indices of trace nodes.
    pub trace: Vec<usize>,
    k_ft: CsrMatrix,
    lu: SparseLu,
}

impl std::fmt::Debug for PatchSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PatchSystem")
            .field("patch", &self.patch)
            .field("free", &self.free.len())
            .field("trace", &self.trace.len())
            .finish()
    }
}

impl PatchSystem {
    pub fn new(mesh: &TwoLevelMesh, coeff: &CoefficientField, patch: Patch, form: Form) -> Result<Self> {
        let matrix = assemble_form(mesh, coeff, &patch, form)?;
        Self::from_matrix(mesh, patch, matrix)
    }

    pub fn from_matrix(mesh: &TwoLevelMesh, patch: Patch, matrix: CsrMatrix) -> Result<Self> {
        let mut free = Vec::new();
        let mut trace = Vec::new();
        for l in 0..patch.num_nodes() {
            let (ix, iy) = patch.grid_point(l);
            match mesh.node_role(&patch, ix, iy) {
                NodeRole::Free => free.push(l),
                NodeRole::Trace => trace.push(l),
                NodeRole::Fixed => {}
            }
        }
        if free.is_empty() {
            return Err(Error::EmptyDofSet);
        }
        let k_ff = matrix.submatrix(&free, &free);
        let k_ft = matrix.submatrix(&free, &trace);
        let lu = SparseLu::factorize(&k_ff).map_err(|e| match e {
            Error::Singular { detail, .. } => Error::Singular {
                context: format!(
                    "local problem on fine cells [{}, {}) x [{}, {})",
                    patch.x0, patch.x1, patch.y0, patch.y1
                ),
                detail,
            },
            other => other,
        })?;
        Ok(Self {
            patch,
            matrix,
            free,
            trace,
            k_ft,
            lu,
        })
    }

    /// Global node indices of the trace nodes.
    pub fn trace_global(&self, mesh: &TwoLevelMesh) -> Vec<usize> {
        self.trace
            .iter()
            .map(|&l| {
                let (ix, iy) = self.patch.grid_point(l);
                mesh.node_index(ix, iy)
            })
            .collect()
    }

    /// Solution with the given trace values and zero load.
    pub fn extend(&self, trace_values: &[c64]) -> Result<Vec<c64>> {
        if trace_values.len() != self.trace.len() {
            return Err(Error::Dimension {
                expected: self.trace.len(),
                got: trace_values.len(),
            });
        }
        let mut rhs = self.k_ft.matvec(trace_values);
        rhs.iter_mut().for_each(|v| *v = -*v);
        self.lu.solve_in_place(&mut rhs);
        let mut out = vec![c64::new(0.0, 0.0); self.patch.num_nodes()];
        for (&l, v) in self.free.iter().zip(rhs) {
            out[l] = v;
        }
        for (&l, v) in self.trace.iter().zip(trace_values) {
            out[l] = *v;
        }
        Ok(out)
    }

    /// Extend several traces at once; `traces` has one trace per column, the
    /// result one patch function per column.
    pub fn extend_many(&self, traces: &Mat<c64>) -> Result<Mat<c64>> {
        if traces.nrows() != self.trace.len() {
            return Err(Error::Dimension {
                expected: self.trace.len(),
                got: traces.nrows(),
            });
        }
        let q = traces.ncols();
        let mut rhs = Mat::<c64>::zeros(self.free.len(), q);
        for (r, row) in (0..self.free.len()).map(|r| (r, self.k_ft.row(r).collect::<Vec<_>>())) {
            for j in 0..q {
                rhs[(r, j)] = -row.iter().map(|&(c, v)| v * traces[(c, j)]).sum::<c64>();
            }
        }
        self.lu.solve_mat_in_place(&mut rhs);
        let mut out = Mat::<c64>::zeros(self.patch.num_nodes(), q);
        for j in 0..q {
            for (r, &l) in self.free.iter().enumerate() {
                out[(l, j)] = rhs[(r, j)];
            }
            for (r, &l) in self.trace.iter().enumerate() {
                out[(l, j)] = traces[(r, j)];
            }
        }
        Ok(out)
    }

    /// Solution with zero trace for a load given on the patch nodes; only the
    /// free-node entries of the load are used.
    pub fn solve_load(&self, load: &[c64]) -> Result<Vec<c64>> {
        if load.len() != self.patch.num_nodes() {
            return Err(Error::Dimension {
                expected: self.patch.num_nodes(),
                got: load.len(),
            });
        }
        let mut rhs: Vec<c64> = self.free.iter().map(|&l| load[l]).collect();
        self.lu.solve_in_place(&mut rhs);
        let mut out = vec![c64::new(0.0, 0.0); self.patch.num_nodes()];
        for (&l, v) in self.free.iter().zip(rhs) {
            out[l] = v;
        }
        Ok(out)
    }
}

/// Solve the global Helmholtz problem `K u = F` for an assembled global load.
pub fn solve_reference(mesh: &TwoLevelMesh, coeff: &CoefficientField, load: &[c64]) -> Result<FineFunction> {
    solve_global(mesh, coeff, load, Form::Helmholtz)
}

/// Solve the adjoint problem (Robin sign flipped) for an assembled global load.
pub fn solve_adjoint(mesh: &TwoLevelMesh, coeff: &CoefficientField, load: &[c64]) -> Result<FineFunction> {
    solve_global(mesh, coeff, load, Form::Adjoint)
}

fn solve_global(mesh: &TwoLevelMesh, coeff: &CoefficientField, load: &[c64], form: Form) -> Result<FineFunction> {
    let sys = PatchSystem::new(mesh, coeff, mesh.whole_patch(), form)?;
    let u = sys.solve_load(load)?;
    let ku = sys.matrix.matvec(&u);
    let resid: Vec<c64> = sys.free.iter().map(|&l| ku[l] - load[l]).collect();
    let fnorm = norm2(&sys.free.iter().map(|&l| load[l]).collect::<Vec<_>>());
    let r = norm2(&resid);
    if !(r <= 1e-10 * fnorm.max(f64::MIN_POSITIVE)) && r > 0.0 {
        return Err(Error::Singular {
            context: "global system".into(),
            detail: format!("relative residual {:.3e}", r / fnorm),
        });
    }
    Ok(u)
}

/// Squared norm `v̄ᵀ G v` for a Hermitian Gram matrix `G`.
pub fn gram_norm_sqr(gram: &CsrMatrix, v: &[c64]) -> f64 {
    gram.form(v, v).re.max(0.0)
}
