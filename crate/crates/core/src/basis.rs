//! Offline stage: nodal MsFEM functions, discretized restriction operators,
//! spectral edge bases and the trial space.

use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{assemble_energy_gram, CoefficientField, FineFunction, Form, PatchSystem};
use crate::linalg::{c64, HermitianGevp};
use crate::local::{edge_residue, LocalProblem};
use crate::mesh::{oversampling_domain, GridSpec, Patch, TwoLevelMesh};

/// Fine-grid function stored by its nonzero entries, sorted by node.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumn {
    pub entries: Vec<(usize, c64)>,
    /// Coarse elements containing the support.
    pub elements: Vec<usize>,
}

impl SparseColumn {
    pub fn to_dense(&self, len: usize) -> FineFunction {
        let mut out = vec![c64::new(0.0, 0.0); len];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|&(i, v)| (i, v.conj())).collect(),
            elements: self.elements.clone(),
        }
    }

    /// `‖Im φ‖ / ‖φ‖`.
    pub fn imaginary_fraction(&self) -> f64 {
        let total: f64 = self.entries.iter().map(|(_, v)| v.norm_sqr()).sum();
        let imag: f64 = self.entries.iter().map(|(_, v)| v.im * v.im).sum();
        if total == 0.0 {
            0.0
        } else {
            (imag / total).sqrt()
        }
    }
}

/// A skeleton function (values on fine nodes of coarse edges) to be extended
/// harmonically into the listed elements.
struct SkeletonData {
    values: Vec<(usize, c64)>,
    elements: Vec<usize>,
}

/// Element-wise harmonic extension of many skeleton functions at once.
fn extend_skeletons(mesh: &TwoLevelMesh, elements: &[LocalProblem], data: &[SkeletonData]) -> Result<Vec<SparseColumn>> {
    let mut by_element: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_elements()];
    for (c, d) in data.iter().enumerate() {
        for &t in &d.elements {
            by_element[t].push(c);
        }
    }
    let pieces = by_element
        .par_iter()
        .enumerate()
        .map(|(t, cols)| -> Result<Vec<(usize, Vec<(usize, c64)>)>> {
            if cols.is_empty() {
                return Ok(Vec::new());
            }
            let lp = &elements[t];
            let trace_nodes = lp.trace_global(mesh);
            let mut traces = Mat::<c64>::zeros(trace_nodes.len(), cols.len());
            for (j, &c) in cols.iter().enumerate() {
                for &(node, v) in &data[c].values {
                    if let Ok(r) = trace_nodes.binary_search(&node) {
                        traces[(r, j)] = v;
                    }
                }
            }
            let ext = lp.extend_many(&traces)?;
            Ok(cols
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let entries = (0..lp.patch.num_nodes())
                        .filter(|&l| ext[(l, j)] != c64::new(0.0, 0.0))
                        .map(|l| {
                            let (ix, iy) = lp.patch.grid_point(l);
                            (mesh.node_index(ix, iy), ext[(l, j)])
                        })
                        .collect();
                    (c, entries)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut columns: Vec<SparseColumn> = data
        .iter()
        .map(|d| SparseColumn {
            entries: Vec::new(),
            elements: d.elements.clone(),
        })
        .collect();
    for piece in pieces {
        for (c, entries) in piece {
            columns[c].entries.extend(entries);
        }
    }
    for col in &mut columns {
        // shared skeleton nodes appear once per element with identical values
        col.entries.sort_by_key(|&(i, _)| i);
        col.entries.dedup_by_key(|&mut (i, _)| i);
    }
    Ok(columns)
}

/// Nodal MsFEM functions `ψ_i`, one per interior coarse node.
#[derive(Debug, Clone)]
pub struct NodalBasis {
    pub columns: Vec<SparseColumn>,
}

fn tent_skeleton(mesh: &TwoLevelMesh, c: usize) -> Vec<(usize, c64)> {
    let p = mesh.coarse_nodes()[c];
    let mut values = vec![(mesh.coarse_point_node(p), c64::new(1.0, 0.0))];
    let r = mesh.spec.refine;
    for e in mesh.node_edges(c) {
        let at_start = mesh.edges()[e].start == p;
        for (t, node) in mesh.edge_fine_nodes(e).into_iter().enumerate().take(r).skip(1) {
            let s = t as f64 / r as f64;
            let w = if at_start { 1.0 - s } else { s };
            values.push((node, c64::new(w, 0.0)));
        }
    }
    values
}

/// For each interior coarse node: linear tents on its four edges, zero on
/// all other edges, extended harmonically into its four elements.
pub fn build_nodal_basis(mesh: &TwoLevelMesh, elements: &[LocalProblem]) -> Result<NodalBasis> {
    let data: Vec<SkeletonData> = (0..mesh.coarse_nodes().len())
        .map(|c| SkeletonData {
            values: tent_skeleton(mesh, c),
            elements: mesh.node_elements(c).to_vec(),
        })
        .collect();
    Ok(NodalBasis {
        columns: extend_skeletons(mesh, elements, &data)?,
    })
}

/// Discretized restriction operator of one edge.
#[derive(Debug, Clone)]
pub struct RestrictionDiscretization {
    pub edge: usize,
    /// Oversampling patch.
    pub patch: Patch,
    /// Global indices of the trace unknowns on `∂ω_e`.
    pub trace_nodes: Vec<usize>,
    /// Global indices of the edge unknowns.
    pub edge_nodes: Vec<usize>,
    /// Harmonic extensions of unit traces, patch values per column.
    pub extensions: Mat<c64>,
    /// Interpolation residues on the edge unknowns, one column per trace unknown.
    pub r: Mat<c64>,
    /// Energy Gram of the extensions on `ω_e`.
    pub a_gram: Mat<c64>,
    /// Energy Gram of the element-wise extensions of edge vectors.
    pub b_gram: Mat<c64>,
}

/// `B[r, s]`: energy of the element-wise extension of unit edge vectors,
/// zero-extended on the rest of the boundaries of the two elements sharing `e`.
pub fn edge_gram(mesh: &TwoLevelMesh, coeff: &CoefficientField, elements: &[LocalProblem], e: usize) -> Result<Mat<c64>> {
    let nodes: Vec<usize> = mesh.edge_dofs(e).into_iter().map(|(n, _)| n).collect();
    let d = nodes.len();
    let mut b = Mat::<c64>::zeros(d, d);
    for t in mesh.edge_elements(e) {
        let lp = &elements[t];
        let trace_nodes = lp.trace_global(mesh);
        let mut traces = Mat::<c64>::zeros(trace_nodes.len(), d);
        for (j, node) in nodes.iter().enumerate() {
            let r = trace_nodes.binary_search(node).expect("edge unknown is a trace node of its elements");
            traces[(r, j)] = c64::new(1.0, 0.0);
        }
        let ext = lp.extend_many(&traces)?;
        let gram = assemble_energy_gram(mesh, coeff, &lp.patch)?;
        b += ext.adjoint() * gram.mul_dense(&ext);
    }
    Ok(b)
}

/// Build `R`, `A` and `B` for edge `e` using the given oversampling problem.
pub fn build_restriction_with(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    elements: &[LocalProblem],
    e: usize,
    omega: &LocalProblem,
) -> Result<RestrictionDiscretization> {
    let patch = omega.patch;
    let trace_nodes = omega.trace_global(mesh);
    let q = trace_nodes.len();
    let extensions = omega.extend_many(&Mat::<c64>::identity(q, q))?;
    let gram = assemble_energy_gram(mesh, coeff, &patch)?;
    let a_gram = extensions.adjoint() * gram.mul_dense(&extensions);

    let dofs = mesh.edge_dofs(e);
    let edge_nodes: Vec<usize> = dofs.iter().map(|&(n, _)| n).collect();
    let mut r = Mat::<c64>::zeros(edge_nodes.len(), q);
    for j in 0..q {
        let res = edge_residue(mesh, e, |node| {
            let (ix, iy) = mesh.grid_point(node);
            extensions[(patch.local_index(ix, iy).expect("edge inside oversampling domain"), j)]
        });
        for (i, v) in res.into_iter().enumerate() {
            r[(i, j)] = v;
        }
    }
    Ok(RestrictionDiscretization {
        edge: e,
        patch,
        trace_nodes,
        edge_nodes,
        extensions,
        r,
        a_gram,
        b_gram: edge_gram(mesh, coeff, elements, e)?,
    })
}

/// Build `R`, `A` and `B` for edge `e`.
pub fn build_restriction(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    elements: &[LocalProblem],
    e: usize,
) -> Result<RestrictionDiscretization> {
    let omega = PatchSystem::new(mesh, coeff, oversampling_domain(mesh, e)?.patch, Form::Helmholtz)?;
    build_restriction_with(mesh, coeff, elements, e, &omega)
}

/// Spectral basis of one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBasis {
    pub edge: usize,
    /// Global indices of the edge unknowns the vectors live on.
    pub nodes: Vec<usize>,
    /// Singular values, descending.
    pub lambdas: Vec<f64>,
    /// `B`-orthonormal edge vectors.
    pub vectors: Vec<Vec<c64>>,
    /// Fewer than the requested number of pairs exist.
    pub truncated: bool,
    /// The `A` Gram needed a diagonal shift.
    pub regularized: bool,
}

fn phase_normalize(v: &mut [c64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.norm() > v[best].norm() {
            best = i;
        }
    }
    let p = v.get(best).copied().unwrap_or_default();
    if p.norm() > 0.0 {
        let rot = p.conj() / p.norm();
        v.iter_mut().for_each(|x| *x *= rot);
    }
}

/// Leading left singular vectors of `R` between the `A`-norm on traces and the
/// `B`-norm on edge vectors.
pub fn edge_svd(rd: &RestrictionDiscretization, m: usize) -> Result<EdgeBasis> {
    let d = rd.edge_nodes.len();
    let count = m.min(d);
    let br = &rd.b_gram * &rd.r;
    let numerator = rd.r.adjoint() * &br;
    let pairs = HermitianGevp::new(numerator, rd.a_gram.clone())?.top_eigenpairs(count)?;
    let mut lambdas = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for j in 0..count {
        let g = pairs.vectors.col(j);
        let mut v: Vec<c64> = (0..d).map(|i| (0..g.nrows()).map(|k| rd.r[(i, k)] * g[k]).sum()).collect();
        let bnorm = (0..d)
            .map(|i| v[i].conj() * (0..d).map(|k| rd.b_gram[(i, k)] * v[k]).sum::<c64>())
            .sum::<c64>()
            .re
            .max(0.0)
            .sqrt();
        if bnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= bnorm);
        }
        phase_normalize(&mut v);
        lambdas.push(pairs.values[j].max(0.0).sqrt());
        vectors.push(v);
    }
    Ok(EdgeBasis {
        edge: rd.edge,
        nodes: rd.edge_nodes.clone(),
        lambdas,
        vectors,
        truncated: m > d,
        regularized: pairs.regularized,
    })
}

/// Edge bases of all edges of `E_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBasisSet {
    pub spec: GridSpec,
    pub m: usize,
    pub edges: Vec<EdgeBasis>,
}

impl EdgeBasisSet {
    pub fn any_truncated(&self) -> bool {
        self.edges.iter().any(|e| e.truncated)
    }

    pub fn any_regularized(&self) -> bool {
        self.edges.iter().any(|e| e.regularized)
    }
}

/// Everything the online stage needs that does not depend on `m`.
pub struct Offline {
    pub elements: Vec<LocalProblem>,
    pub nodal: NodalBasis,
    pub edges: EdgeBasisSet,
    /// Per-edge residues of the oversampling bubbles, when a load was given.
    pub residues: Option<Vec<Vec<c64>>>,
}

/// Offline stage: element problems, nodal basis and edge bases with `m_max`
/// vectors per edge. When `load` is given, the oversampling bubble residues
/// needed for `u^s` are computed with the same factorizations.
pub fn build_offline(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    m_max: usize,
    load: Option<&[c64]>,
) -> Result<Offline> {
    offline_impl(mesh, coeff, m_max, load, None)
}

/// Offline stage with edge bases taken from a cache; only the element
/// problems, nodal functions and (optionally) residues are computed.
pub fn build_offline_cached(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    cached: EdgeBasisSet,
    load: Option<&[c64]>,
) -> Result<Offline> {
    if cached.spec != mesh.spec || cached.edges.len() != mesh.edges().len() {
        return Err(Error::Cache("cached bases belong to a different mesh".into()));
    }
    offline_impl(mesh, coeff, cached.m, load, Some(cached))
}

fn offline_impl(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    m_max: usize,
    load: Option<&[c64]>,
    cached: Option<EdgeBasisSet>,
) -> Result<Offline> {
    let elements = crate::local::element_problems(mesh, coeff)?;
    let nodal = build_nodal_basis(mesh, &elements)?;
    let have = cached.as_ref().map(|c| &c.edges);
    let per_edge = (0..mesh.edges().len())
        .into_par_iter()
        .map(|e| -> Result<(EdgeBasis, Option<Vec<c64>>)> {
            if let (Some(have), None) = (have, load) {
                return Ok((have[e].clone(), None));
            }
            let omega = PatchSystem::new(mesh, coeff, oversampling_domain(mesh, e)?.patch, Form::Helmholtz)?;
            let basis = if let Some(have) = have {
                have[e].clone()
            } else if m_max > 0 {
                edge_svd(&build_restriction_with(mesh, coeff, &elements, e, &omega)?, m_max)?
            } else {
                EdgeBasis {
                    edge: e,
                    nodes: mesh.edge_dofs(e).into_iter().map(|(n, _)| n).collect(),
                    lambdas: Vec::new(),
                    vectors: Vec::new(),
                    truncated: false,
                    regularized: false,
                }
            };
            let residue = load
                .map(|l| crate::local::oversampling_residue(mesh, &omega, e, l))
                .transpose()?;
            Ok((basis, residue))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::with_capacity(per_edge.len());
    let mut residues = Vec::with_capacity(per_edge.len());
    for (b, r) in per_edge {
        edges.push(b);
        if let Some(r) = r {
            residues.push(r);
        }
    }
    Ok(Offline {
        elements,
        nodal,
        edges: EdgeBasisSet {
            spec: mesh.spec,
            m: m_max,
            edges,
        },
        residues: load.map(|_| residues),
    })
}

/// Origin of a trial-space column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Nodal(usize),
    Edge { edge: usize, index: usize },
}

/// Trial space `Φ`: nodal functions first, then per edge its first `m` edge
/// functions.
#[derive(Debug, Clone)]
pub struct TrialSpace {
    pub columns: Vec<SparseColumn>,
    pub kinds: Vec<ColumnKind>,
}

impl TrialSpace {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Indices of the columns that belong to the subspace with `m` edge
    /// functions per edge.
    pub fn subspace(&self, m: usize) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| match k {
                ColumnKind::Nodal(_) => true,
                ColumnKind::Edge { index, .. } => *index < m,
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Extend the edge vectors into the two elements of each edge and collect
/// them with the nodal functions.
pub fn assemble_trial_space(
    mesh: &TwoLevelMesh,
    elements: &[LocalProblem],
    nodal: &NodalBasis,
    edges: &EdgeBasisSet,
    m: usize,
) -> Result<TrialSpace> {
    let mut data = Vec::new();
    let mut kinds: Vec<ColumnKind> = (0..nodal.columns.len()).map(ColumnKind::Nodal).collect();
    for eb in &edges.edges {
        for (j, v) in eb.vectors.iter().enumerate().take(m) {
            data.push(SkeletonData {
                values: eb.nodes.iter().copied().zip(v.iter().copied()).collect(),
                elements: mesh.edge_elements(eb.edge).to_vec(),
            });
            kinds.push(ColumnKind::Edge {
                edge: eb.edge,
                index: j,
            });
        }
    }
    let mut columns = nodal.columns.clone();
    columns.extend(extend_skeletons(mesh, elements, &data)?);
    Ok(TrialSpace { columns, kinds })
}

const CACHE_MAGIC: &[u8; 8] = b"HMSEDGE\0";
const CACHE_VERSION: u32 = 1;

/// SHA-256 of the sampled coefficients and wavenumber.
pub fn coefficient_hash(coeff: &CoefficientField) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((coeff.n as u64).to_le_bytes());
    h.update(coeff.k.to_le_bytes());
    for arr in [&coeff.a, &coeff.v, &coeff.beta] {
        h.update((arr.len() as u64).to_le_bytes());
        for x in arr.iter() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn put_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Cache(format!("value {x} does not fit the cache format")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, x: f64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serialize an edge basis set. All numbers are little-endian.
pub fn write_cache(w: &mut impl Write, set: &EdgeBasisSet, hash: &[u8; 32]) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    put_u32(w, CACHE_VERSION as usize)?;
    put_u32(w, set.spec.coarse)?;
    put_u32(w, set.spec.refine)?;
    put_u32(w, set.m)?;
    put_u32(w, set.edges.len())?;
    w.write_all(hash)?;
    for eb in &set.edges {
        put_u32(w, eb.edge)?;
        put_u32(w, eb.vectors.len())?;
        put_u32(w, eb.nodes.len())?;
        w.write_all(&[eb.truncated as u8, eb.regularized as u8])?;
        for &l in &eb.lambdas {
            put_f64(w, l)?;
        }
        for v in &eb.vectors {
            for x in v {
                put_f64(w, x.re)?;
                put_f64(w, x.im)?;
            }
        }
    }
    Ok(())
}

/// Read an edge basis set written by [`write_cache`], checking it against
/// the mesh and the coefficient hash.
pub fn read_cache(r: &mut impl Read, mesh: &TwoLevelMesh, hash: &[u8; 32]) -> Result<EdgeBasisSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != CACHE_VERSION as usize {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let coarse = get_u32(r)?;
    let refine = get_u32(r)?;
    let m = get_u32(r)?;
    let n_edges = get_u32(r)?;
    if coarse != mesh.spec.coarse || refine != mesh.spec.refine || n_edges != mesh.edges().len() {
        return Err(Error::Cache("grid does not match".into()));
    }
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)?;
    if &stored != hash {
        return Err(Error::Cache("coefficient hash does not match".into()));
    }
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let edge = get_u32(r)?;
        let count = get_u32(r)?;
        let p = get_u32(r)?;
        if edge >= n_edges {
            return Err(Error::Cache(format!("edge id {edge} out of range")));
        }
        let nodes: Vec<usize> = mesh.edge_dofs(edge).into_iter().map(|(n, _)| n).collect();
        if nodes.len() != p {
            return Err(Error::Cache(format!("record for edge {edge} does not match the mesh")));
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let lambdas = (0..count).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
        let vectors = (0..count)
            .map(|_| (0..p).map(|_| Ok(c64::new(get_f64(r)?, get_f64(r)?))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        edges.push(EdgeBasis {
            edge,
            nodes,
            lambdas,
            vectors,
            truncated: flags[0] != 0,
            regularized: flags[1] != 0,
        });
    }
    Ok(EdgeBasisSet {
        spec: mesh.spec,
        m,
        edges,
    })
}

pub fn save_cache(path: &Path, set: &EdgeBasisSet, coeff: &CoefficientField) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cache(&mut w, set, &coefficient_hash(coeff))?;
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path, mesh: &TwoLevelMesh, coeff: &CoefficientField) -> Result<EdgeBasisSet> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_cache(&mut r, mesh, &coefficient_hash(coeff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::gram_norm_sqr;
    use crate::local::{element_problems, extend_skeleton};
    use crate::mesh::{build_mesh, BoundaryClassification, BoundaryKind, Orientation};
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn setup(kind: BoundaryKind, coarse: usize, refine: usize, k: f64) -> (TwoLevelMesh, CoefficientField, Vec<LocalProblem>) {
        let m = build_mesh(GridSpec { coarse, refine }, BoundaryClassification::uniform(kind)).unwrap();
        let c = CoefficientField::sample(
            &m,
            |x| 1.0 + 0.5 * (9.0 * x[0]).sin().abs() + 0.3 * (4.0 * x[1]).cos(),
            |_| 1.0,
            |_| 1.0,
            k,
        )
        .unwrap();
        let els = element_problems(&m, &c).unwrap();
        (m, c, els)
    }

    fn hermitian_err(a: &Mat<c64>) -> f64 {
        let n = a.nrows();
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                err = err.max((a[(i, j)] - a[(j, i)].conj()).norm());
                scale = scale.max(a[(i, j)].norm());
            }
        }
        err / scale
    }

    #[test]
    fn nodal_basis_kronecker_and_supports() {
        let (m, _, els) = setup(BoundaryKind::Robin, 4, 4, 3.0);
        let nb = build_nodal_basis(&m, &els).unwrap();
        assert_eq!(nb.columns.len(), 9);
        for (i, col) in nb.columns.iter().enumerate() {
            let dense = col.to_dense(m.num_nodes());
            for (j, p) in m.coarse_nodes().iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dense[m.coarse_point_node(*p)] - c64::new(want, 0.0)).norm() < 1e-14);
            }
            let [ci, cj] = m.coarse_nodes()[i];
            let r = m.spec.refine;
            for &(node, _) in &col.entries {
                let (ix, iy) = m.grid_point(node);
                assert!(ix >= (ci - 1) * r && ix <= (ci + 1) * r && iy >= (cj - 1) * r && iy <= (cj + 1) * r);
            }
        }
    }

    #[test]
    fn nodal_basis_partition_of_unity_at_k0() {
        let (m, c, _) = setup(BoundaryKind::Dirichlet, 4, 4, 0.0);
        let c = CoefficientField { a: vec![1.0; c.a.len()], ..c };
        let els = element_problems(&m, &c).unwrap();
        let nb = build_nodal_basis(&m, &els).unwrap();
        let mut sum = vec![c64::new(0.0, 0.0); m.num_nodes()];
        for col in &nb.columns {
            for &(i, v) in &col.entries {
                sum[i] += v;
            }
        }
        // elements away from the boundary see a full set of tents
        let r = m.spec.refine;
        for iy in r..=3 * r {
            for ix in r..=3 * r {
                assert!((sum[m.node_index(ix, iy)] - c64::new(1.0, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn nodal_basis_orthogonal_to_bubbles() {
        let (m, c, els) = setup(BoundaryKind::Robin, 4, 4, 5.0);
        let nb = build_nodal_basis(&m, &els).unwrap();
        let k = crate::fem::assemble_sesquilinear(&m, &c, &m.whole_patch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lp = &els[m.element_index(1, 1)];
        let mut w = vec![c64::new(0.0, 0.0); m.num_nodes()];
        for &l in &lp.free {
            let (ix, iy) = lp.patch.grid_point(l);
            w[m.node_index(ix, iy)] = c64::new(uniform(&mut rng), uniform(&mut rng));
        }
        for col in &nb.columns {
            let psi = col.to_dense(m.num_nodes());
            assert!(k.form(&psi, &w).norm() < 1e-12);
        }
    }

    fn rd_interior(m: &TwoLevelMesh, e: usize) -> bool {
        let p = oversampling_domain(m, e).unwrap().patch;
        p.x0 > 0 && p.y0 > 0 && p.x1 < m.n() && p.y1 < m.n()
    }

    #[test]
    fn restriction_annihilates_nodal_traces() {
        let (m, _, els) = setup(BoundaryKind::Robin, 4, 4, 4.0);
        let nb = build_nodal_basis(&m, &els).unwrap();
        for e in 0..m.edges().len() {
            for col in &nb.columns {
                let psi = col.to_dense(m.num_nodes());
                assert!(edge_residue(&m, e, |n| psi[n]).iter().all(|v| v.norm() < 1e-13));
            }
        }
        // traces of functions harmonic on the oversampling domain and linear on the edge
        let m = build_mesh(GridSpec { coarse: 6, refine: 4 }, BoundaryClassification::uniform(BoundaryKind::Neumann)).unwrap();
        let c = CoefficientField::constant(&m, 1.7, 1.0, 1.0, 0.0).unwrap();
        let els = element_problems(&m, &c).unwrap();
        let e = m.edge_id(Orientation::Horizontal, [2, 3]).unwrap();
        assert!(rd_interior(&m, e));
        let rd = build_restriction(&m, &c, &els, e).unwrap();
        let affine = |n: usize| {
            let [x, y] = m.node_coords(n);
            c64::new(0.3 + 2.0 * x - y, 1.5 * y - 0.7 * x)
        };
        let trace: Vec<c64> = rd.trace_nodes.iter().map(|&n| affine(n)).collect();
        for i in 0..rd.r.nrows() {
            let v: c64 = (0..trace.len()).map(|j| rd.r[(i, j)] * trace[j]).sum();
            assert!(v.norm() < 1e-10);
        }
    }

    #[test]
    fn restriction_dimensions_and_real_grams() {
        let (m, c, els) = setup(BoundaryKind::Robin, 6, 4, 0.0);
        let e = m.edge_id(Orientation::Vertical, [3, 2]).unwrap();
        let rd = build_restriction(&m, &c, &els, e).unwrap();
        assert_eq!(rd.r.nrows(), 3);
        // 3x2 block of 4x4 cells: perimeter of a 8 x 12 rectangle
        assert_eq!(rd.trace_nodes.len(), 2 * (8 + 12));
        for g in [&rd.a_gram, &rd.b_gram] {
            assert!(hermitian_err(g) < 1e-12);
            assert!((0..g.nrows()).all(|i| (0..g.ncols()).all(|j| g[(i, j)].im == 0.0)));
            assert!(g.llt(faer::Side::Lower).is_ok());
        }
        // an edge whose oversampling domain reaches a Robin side has a
        // complex A but still a Hermitian one
        let (m, c, els) = setup(BoundaryKind::Robin, 6, 4, 3.0);
        let e = m.edge_id(Orientation::Vertical, [1, 0]).unwrap();
        let rd = build_restriction(&m, &c, &els, e).unwrap();
        assert!(hermitian_err(&rd.a_gram) < 1e-12);
        assert_eq!(rd.r.nrows(), 4);
    }

    #[test]
    fn b_gram_equals_extension_energy() {
        let (m, c, els) = setup(BoundaryKind::Robin, 4, 4, 4.0);
        let e = m.edge_id(Orientation::Horizontal, [0, 1]).unwrap();
        let b = edge_gram(&m, &c, &els, e).unwrap();
        let nodes: Vec<usize> = m.edge_dofs(e).into_iter().map(|(n, _)| n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w: Vec<c64> = nodes.iter().map(|_| c64::new(uniform(&mut rng), uniform(&mut rng))).collect();
        let mut skel = vec![c64::new(0.0, 0.0); m.num_nodes()];
        for (n, v) in nodes.iter().zip(&w) {
            skel[*n] = *v;
        }
        let ext = extend_skeleton(&m, &els, &skel).unwrap();
        let energy = gram_norm_sqr(&assemble_energy_gram(&m, &c, &m.whole_patch()).unwrap(), &ext);
        let quad: c64 = (0..w.len())
            .map(|i| w[i].conj() * (0..w.len()).map(|j| b[(i, j)] * w[j]).sum::<c64>())
            .sum();
        assert!((quad.re - energy).abs() < 1e-10 * energy);
    }

    #[test]
    fn edge_svd_properties() {
        let (m, c, els) = setup(BoundaryKind::Robin, 6, 8, 6.0);
        // interior edge whose oversampling domain avoids the boundary
        let e = m.edge_id(Orientation::Vertical, [3, 2]).unwrap();
        let rd = build_restriction(&m, &c, &els, e).unwrap();
        let eb = edge_svd(&rd, 7).unwrap();
        assert_eq!(eb.lambdas.len(), 7);
        assert!(eb.lambdas.windows(2).all(|w| w[0] >= w[1]));
        for v in &eb.vectors {
            assert!(v.iter().all(|x| x.im.abs() <= 1e-8));
        }
        for i in 0..7 {
            for j in 0..7 {
                let g: c64 = (0..7)
                    .map(|a| eb.vectors[i][a].conj() * (0..7).map(|b| rd.b_gram[(a, b)] * eb.vectors[j][b]).sum::<c64>())
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - c64::new(want, 0.0)).norm() < 1e-8);
            }
        }
        let over = edge_svd(&rd, 20).unwrap();
        assert!(over.truncated);
        assert_eq!(over.lambdas.len(), 7);
    }

    #[test]
    fn best_approximation_bound() {
        let (m, c, els) = setup(BoundaryKind::Robin, 6, 8, 6.0);
        let e = m.edge_id(Orientation::Horizontal, [1, 1]).unwrap();
        let rd = build_restriction(&m, &c, &els, e).unwrap();
        let d = rd.edge_nodes.len();
        let q = rd.trace_nodes.len();
        let eb = edge_svd(&rd, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let bform = |x: &[c64], y: &[c64]| -> c64 {
            (0..d).map(|i| x[i].conj() * (0..d).map(|j| rd.b_gram[(i, j)] * y[j]).sum::<c64>()).sum()
        };
        for _ in 0..5 {
            let t: Vec<c64> = (0..q).map(|_| c64::new(uniform(&mut rng), uniform(&mut rng))).collect();
            let rt: Vec<c64> = (0..d).map(|i| (0..q).map(|j| rd.r[(i, j)] * t[j]).sum()).collect();
            let vnorm = (0..q)
                .map(|i| t[i].conj() * (0..q).map(|j| rd.a_gram[(i, j)] * t[j]).sum::<c64>())
                .sum::<c64>()
                .re
                .sqrt();
            for mm in 0..d - 1 {
                let mut res = rt.clone();
                for v in eb.vectors.iter().take(mm) {
                    let coef = bform(v, &rt);
                    for i in 0..d {
                        res[i] -= coef * v[i];
                    }
                }
                let err = bform(&res, &res).re.max(0.0).sqrt();
                assert!(err <= eb.lambdas[mm] * vnorm * (1.0 + 1e-6) + 1e-14, "m = {mm}");
            }
        }
    }

    #[test]
    fn trial_space_dimensions() {
        let (m, c, _) = setup(BoundaryKind::Robin, 4, 4, 2.0);
        let off = build_offline(&m, &c, 3, None).unwrap();
        let ts = assemble_trial_space(&m, &off.elements, &off.nodal, &off.edges, 3).unwrap();
        assert_eq!(ts.dim(), 9 + 3 * 24);
        assert_eq!(ts.subspace(0).len(), 9);
        assert_eq!(ts.subspace(1).len(), 9 + 24);
        for (col, kind) in ts.columns.iter().zip(&ts.kinds) {
            let n = match kind {
                ColumnKind::Nodal(_) => 4,
                ColumnKind::Edge { .. } => 2,
            };
            assert_eq!(col.elements.len(), n);
        }
        let t0 = assemble_trial_space(&m, &off.elements, &off.nodal, &off.edges, 0).unwrap();
        assert_eq!(t0.dim(), 9);
    }

    #[test]
    fn cache_roundtrip() {
        let (m, c, _) = setup(BoundaryKind::Robin, 3, 4, 2.0);
        let off = build_offline(&m, &c, 2, None).unwrap();
        let hash = coefficient_hash(&c);
        let mut buf = Vec::new();
        write_cache(&mut buf, &off.edges, &hash).unwrap();
        let back = read_cache(&mut buf.as_slice(), &m, &hash).unwrap();
        assert_eq!(back, off.edges);
        let mut other = c.clone();
        other.k = 2.5;
        assert!(read_cache(&mut buf.as_slice(), &m, &coefficient_hash(&other)).is_err());
        assert!(read_cache(&mut &buf[..20], &m, &hash).is_err());
    }
}
