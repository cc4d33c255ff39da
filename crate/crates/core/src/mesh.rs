//! Two-level uniform quadrilateral mesh on the unit square.
//!
//! The coarse grid has `nH × nH` square elements of side `H = 1/nH`; every
//! coarse element is split into `refine × refine` fine cells of side
//! `h = H/refine`. Fine nodes are numbered row-major: node `(ix, iy)` has index
//! `iy * (n + 1) + ix` with `n = nH * refine`.
//!
//! Subdomains used by the local solvers (coarse elements, oversampling
//! domains, the whole domain) are axis-aligned blocks of fine cells, see
//! [`Patch`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Coarse elements per side.
    pub coarse: usize,
    /// Fine cells per coarse cell per side.
    pub refine: usize,
}

impl GridSpec {
    pub fn new(coarse: usize, refine: usize) -> Result<Self> {
        if coarse < 2 || refine < 2 {
            return Err(Error::InvalidGrid { coarse, refine });
        }
        Ok(Self { coarse, refine })
    }

    /// Fine cells per side.
    pub fn fine_cells(&self) -> usize {
        self.coarse * self.refine
    }

    /// Fine nodes per side.
    pub fn nodes_per_side(&self) -> usize {
        self.fine_cells() + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_per_side() * self.nodes_per_side()
    }

    pub fn coarse_size(&self) -> f64 {
        1.0 / self.coarse as f64
    }

    pub fn fine_size(&self) -> f64 {
        1.0 / self.fine_cells() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bottom,
    Top,
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Top, Side::Left, Side::Right];

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 2] {
        match self {
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
    Robin,
}

impl BoundaryKind {
    // Corner resolution: Dirichlet > Robin > Neumann.
    fn precedence(self) -> u8 {
        match self {
            BoundaryKind::Dirichlet => 2,
            BoundaryKind::Robin => 1,
            BoundaryKind::Neumann => 0,
        }
    }

    pub fn is_natural(self) -> bool {
        !matches!(self, BoundaryKind::Dirichlet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub side: Side,
    /// Interval `[start, end]` along the side, measured in the free coordinate.
    pub start: f64,
    pub end: f64,
    pub kind: BoundaryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryClassification {
    pub segments: Vec<BoundarySegment>,
}

impl BoundaryClassification {
    pub fn uniform(kind: BoundaryKind) -> Self {
        Self::per_side(kind, kind, kind, kind)
    }

    pub fn per_side(
        bottom: BoundaryKind,
        top: BoundaryKind,
        left: BoundaryKind,
        right: BoundaryKind,
    ) -> Self {
        let seg = |side, kind| BoundarySegment {
            side,
            start: 0.0,
            end: 1.0,
            kind,
        };
        Self {
            segments: vec![
                seg(Side::Bottom, bottom),
                seg(Side::Top, top),
                seg(Side::Left, left),
                seg(Side::Right, right),
            ],
        }
    }

    pub fn has_kind(&self, kind: BoundaryKind) -> bool {
        self.segments.iter().any(|s| s.kind == kind)
    }

    fn validate(&self, spec: &GridSpec) -> Result<()> {
        let n = spec.fine_cells() as f64;
        for side in Side::ALL {
            let mut segs: Vec<_> = self.segments.iter().filter(|s| s.side == side).collect();
            if segs.is_empty() {
                return Err(Error::Boundary(format!("side {side:?} has no segment")));
            }
            segs.sort_by(|a, b| a.start.total_cmp(&b.start));
            let mut cursor = 0.0;
            for s in segs {
                for x in [s.start, s.end] {
                    if ((x * n).round() - x * n).abs() > ALIGN_TOL * n.max(1.0) {
                        return Err(Error::Boundary(format!(
                            "segment endpoint {x} on {side:?} is not a multiple of h"
                        )));
                    }
                }
                if !(s.end > s.start) {
                    return Err(Error::Boundary(format!(
                        "empty segment [{}, {}] on {side:?}",
                        s.start, s.end
                    )));
                }
                if (s.start - cursor).abs() > ALIGN_TOL {
                    return Err(Error::Boundary(format!(
                        "segments on {side:?} overlap or leave a gap at {cursor}"
                    )));
                }
                cursor = s.end;
            }
            if (cursor - 1.0).abs() > ALIGN_TOL {
                return Err(Error::Boundary(format!(
                    "segments on {side:?} end at {cursor}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Kind of the strongest segment containing coordinate `t` on `side`.
    fn kind_at(&self, side: Side, t: f64) -> BoundaryKind {
        self.segments
            .iter()
            .filter(|s| s.side == side && t >= s.start - ALIGN_TOL && t <= s.end + ALIGN_TOL)
            .map(|s| s.kind)
            .max_by_key(|k| k.precedence())
            .expect("classification validated to tile every side")
    }
}

/// Tag of a fine node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeTag {
    Interior,
    Boundary(BoundaryKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// A coarse edge between two coarse grid points, in coarse grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoarseEdge {
    pub orientation: Orientation,
    /// Lower/left endpoint.
    pub start: [usize; 2],
}

impl CoarseEdge {
    pub fn end(&self) -> [usize; 2] {
        match self.orientation {
            Orientation::Horizontal => [self.start[0] + 1, self.start[1]],
            Orientation::Vertical => [self.start[0], self.start[1] + 1],
        }
    }
}

/// One boundary fine facet (a fine edge on `∂Ω`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFacet {
    pub side: Side,
    /// Endpoints as global fine node indices, ordered by increasing coordinate.
    pub nodes: [usize; 2],
    /// Index along the side (0..n).
    pub position: usize,
    pub kind: BoundaryKind,
}

/// Block of fine cells `[x0, x1) × [y0, y1)` (fine cell indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Patch {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Patch {
    pub fn nodes_x(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn nodes_y(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_x() * self.nodes_y()
    }

    pub fn num_cells(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Local (row-major) index of the patch node at global grid point `(ix, iy)`.
    pub fn local_index(&self, ix: usize, iy: usize) -> Option<usize> {
        if ix < self.x0 || ix > self.x1 || iy < self.y0 || iy > self.y1 {
            return None;
        }
        Some((iy - self.y0) * self.nodes_x() + (ix - self.x0))
    }

    /// Global grid point of a local node.
    pub fn grid_point(&self, local: usize) -> (usize, usize) {
        (self.x0 + local % self.nodes_x(), self.y0 + local / self.nodes_x())
    }

    pub fn contains_cell(&self, cx: usize, cy: usize) -> bool {
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }
}

#[derive(Debug, Clone)]
pub struct TwoLevelMesh {
    pub spec: GridSpec,
    pub boundary: BoundaryClassification,
    tags: Vec<NodeTag>,
    coarse_nodes: Vec<[usize; 2]>,
    edges: Vec<CoarseEdge>,
    facets: Vec<BoundaryFacet>,
}

/// Construct the two-level mesh and tag every fine node.
pub fn build_mesh(spec: GridSpec, boundary: BoundaryClassification) -> Result<TwoLevelMesh> {
    let spec = GridSpec::new(spec.coarse, spec.refine)?;
    boundary.validate(&spec)?;
    let n = spec.fine_cells();
    let h = spec.fine_size();
    let np = n + 1;

    let mut tags = vec![NodeTag::Interior; np * np];
    for iy in 0..np {
        for ix in 0..np {
            let mut kind: Option<BoundaryKind> = None;
            let mut merge = |side: Side, t: f64| {
                let k = boundary.kind_at(side, t);
                kind = Some(match kind {
                    Some(old) if old.precedence() >= k.precedence() => old,
                    _ => k,
                });
            };
            if iy == 0 {
                merge(Side::Bottom, ix as f64 * h);
            }
            if iy == n {
                merge(Side::Top, ix as f64 * h);
            }
            if ix == 0 {
                merge(Side::Left, iy as f64 * h);
            }
            if ix == n {
                merge(Side::Right, iy as f64 * h);
            }
            if let Some(k) = kind {
                tags[iy * np + ix] = NodeTag::Boundary(k);
            }
        }
    }

    let nc = spec.coarse;
    let mut coarse_nodes = Vec::with_capacity((nc - 1) * (nc - 1));
    for j in 1..nc {
        for i in 1..nc {
            coarse_nodes.push([i, j]);
        }
    }

    let mut edges = Vec::with_capacity(2 * nc * (nc - 1));
    for j in 1..nc {
        for i in 0..nc {
            edges.push(CoarseEdge {
                orientation: Orientation::Horizontal,
                start: [i, j],
            });
        }
    }
    for j in 0..nc {
        for i in 1..nc {
            edges.push(CoarseEdge {
                orientation: Orientation::Vertical,
                start: [i, j],
            });
        }
    }

    let mut facets = Vec::with_capacity(4 * n);
    for side in Side::ALL {
        for p in 0..n {
            let (a, b) = match side {
                Side::Bottom => ((p, 0), (p + 1, 0)),
                Side::Top => ((p, n), (p + 1, n)),
                Side::Left => ((0, p), (0, p + 1)),
                Side::Right => ((n, p), (n, p + 1)),
            };
            let mid = (p as f64 + 0.5) * h;
            facets.push(BoundaryFacet {
                side,
                nodes: [a.1 * np + a.0, b.1 * np + b.0],
                position: p,
                kind: boundary.kind_at(side, mid),
            });
        }
    }

    Ok(TwoLevelMesh {
        spec,
        boundary,
        tags,
        coarse_nodes,
        edges,
        facets,
    })
}

impl TwoLevelMesh {
    pub fn n(&self) -> usize {
        self.spec.fine_cells()
    }

    pub fn num_nodes(&self) -> usize {
        self.spec.num_nodes()
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.n() + 1) + ix
    }

    pub fn grid_point(&self, node: usize) -> (usize, usize) {
        let np = self.n() + 1;
        (node % np, node / np)
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        let (ix, iy) = self.grid_point(node);
        let h = self.spec.fine_size();
        [ix as f64 * h, iy as f64 * h]
    }

    pub fn tag(&self, node: usize) -> NodeTag {
        self.tags[node]
    }

    pub fn tags(&self) -> &[NodeTag] {
        &self.tags
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.tags[node] == NodeTag::Boundary(BoundaryKind::Dirichlet)
    }

    /// Interior coarse nodes `N_H`, in coarse grid coordinates, row-major.
    pub fn coarse_nodes(&self) -> &[[usize; 2]] {
        &self.coarse_nodes
    }

    /// Coarse edges `E_H` (edges fully on `∂Ω` excluded).
    pub fn edges(&self) -> &[CoarseEdge] {
        &self.edges
    }

    pub fn num_elements(&self) -> usize {
        self.spec.coarse * self.spec.coarse
    }

    /// Coarse element `(i, j)` has index `j * nH + i`.
    pub fn element_index(&self, i: usize, j: usize) -> usize {
        j * self.spec.coarse + i
    }

    pub fn element_coords(&self, element: usize) -> [usize; 2] {
        [element % self.spec.coarse, element / self.spec.coarse]
    }

    pub fn boundary_facets(&self) -> &[BoundaryFacet] {
        &self.facets
    }

    /// Fine node index of a coarse grid point.
    pub fn coarse_point_node(&self, p: [usize; 2]) -> usize {
        let r = self.spec.refine;
        self.node_index(p[0] * r, p[1] * r)
    }

    /// Index into [`Self::coarse_nodes`] of an interior coarse grid point.
    pub fn interior_coarse_node_id(&self, p: [usize; 2]) -> Option<usize> {
        let nc = self.spec.coarse;
        if p[0] == 0 || p[1] == 0 || p[0] >= nc || p[1] >= nc {
            return None;
        }
        Some((p[1] - 1) * (nc - 1) + (p[0] - 1))
    }

    /// All fine nodes of edge `e` from start to end, endpoints included.
    pub fn edge_fine_nodes(&self, e: usize) -> Vec<usize> {
        let edge = self.edges[e];
        let r = self.spec.refine;
        let (sx, sy) = (edge.start[0] * r, edge.start[1] * r);
        (0..=r)
            .map(|t| match edge.orientation {
                Orientation::Horizontal => self.node_index(sx + t, sy),
                Orientation::Vertical => self.node_index(sx, sy + t),
            })
            .collect()
    }

    /// Unknowns carried by edge `e`: its interior fine nodes, plus any endpoint
    /// lying on a Neumann/Robin part of `∂Ω` (those are not coarse nodes, so
    /// nodal interpolation does not fix them). Returned with the parameter
    /// `t ∈ [0, 1]` along the edge.
    pub fn edge_dofs(&self, e: usize) -> Vec<(usize, f64)> {
        let nodes = self.edge_fine_nodes(e);
        let edge = self.edges[e];
        let r = self.spec.refine;
        let ends = [edge.start, edge.end()];
        nodes
            .into_iter()
            .enumerate()
            .filter(|&(t, node)| {
                if t == 0 || t == r {
                    let p = ends[if t == 0 { 0 } else { 1 }];
                    self.interior_coarse_node_id(p).is_none() && !self.is_dirichlet(node)
                } else {
                    true
                }
            })
            .map(|(t, node)| (node, t as f64 / r as f64))
            .collect()
    }

    /// Coarse elements sharing edge `e`, `N(e, T_H)`.
    pub fn edge_elements(&self, e: usize) -> [usize; 2] {
        let edge = self.edges[e];
        let [i, j] = edge.start;
        match edge.orientation {
            Orientation::Horizontal => [self.element_index(i, j - 1), self.element_index(i, j)],
            Orientation::Vertical => [self.element_index(i - 1, j), self.element_index(i, j)],
        }
    }

    /// Index of the edge with the given orientation and start point, if in `E_H`.
    pub fn edge_id(&self, orientation: Orientation, start: [usize; 2]) -> Option<usize> {
        let nc = self.spec.coarse;
        let [i, j] = start;
        match orientation {
            Orientation::Horizontal => {
                (j >= 1 && j < nc && i < nc).then(|| (j - 1) * nc + i)
            }
            Orientation::Vertical => {
                (i >= 1 && i < nc && j < nc).then(|| nc * (nc - 1) + j * (nc - 1) + (i - 1))
            }
        }
    }

    /// Edges of `E_H` incident to interior coarse node `c` (index into
    /// [`Self::coarse_nodes`]), `N(x, E_H)`.
    pub fn node_edges(&self, c: usize) -> Vec<usize> {
        let [i, j] = self.coarse_nodes[c];
        let mut out = Vec::with_capacity(4);
        out.extend(self.edge_id(Orientation::Horizontal, [i - 1, j]));
        out.extend(self.edge_id(Orientation::Horizontal, [i, j]));
        out.extend(self.edge_id(Orientation::Vertical, [i, j - 1]));
        out.extend(self.edge_id(Orientation::Vertical, [i, j]));
        out
    }

    /// Coarse elements around interior coarse node `c`, `N(x, T_H)`.
    pub fn node_elements(&self, c: usize) -> [usize; 4] {
        let [i, j] = self.coarse_nodes[c];
        [
            self.element_index(i - 1, j - 1),
            self.element_index(i, j - 1),
            self.element_index(i - 1, j),
            self.element_index(i, j),
        ]
    }

    /// Edges of `E_H` on the boundary of element `t`.
    pub fn element_edges(&self, t: usize) -> Vec<usize> {
        let [i, j] = self.element_coords(t);
        let mut out = Vec::with_capacity(4);
        out.extend(self.edge_id(Orientation::Horizontal, [i, j]));
        out.extend(self.edge_id(Orientation::Horizontal, [i, j + 1]));
        out.extend(self.edge_id(Orientation::Vertical, [i, j]));
        out.extend(self.edge_id(Orientation::Vertical, [i + 1, j]));
        out
    }

    pub fn whole_patch(&self) -> Patch {
        Patch {
            x0: 0,
            x1: self.n(),
            y0: 0,
            y1: self.n(),
        }
    }

    /// Patch covering the coarse elements `[i0, i1) × [j0, j1)`.
    pub fn coarse_block_patch(&self, i0: usize, i1: usize, j0: usize, j1: usize) -> Patch {
        let r = self.spec.refine;
        Patch {
            x0: i0 * r,
            x1: i1 * r,
            y0: j0 * r,
            y1: j1 * r,
        }
    }

    pub fn element_patch(&self, t: usize) -> Patch {
        let [i, j] = self.element_coords(t);
        self.coarse_block_patch(i, i + 1, j, j + 1)
    }

    /// Coarse element of fine cell `(cx, cy)`.
    pub fn cell_element(&self, cx: usize, cy: usize) -> usize {
        let r = self.spec.refine;
        self.element_index(cx / r, cy / r)
    }

    /// Role a fine node plays in the local problem posed on `patch`.
    pub fn node_role(&self, patch: &Patch, ix: usize, iy: usize) -> NodeRole {
        let n = self.n();
        if self.is_dirichlet(self.node_index(ix, iy)) {
            return NodeRole::Fixed;
        }
        // The node is an unknown of the local problem iff its hat function is
        // supported inside the patch.
        let inside_x = (ix > patch.x0 || ix == 0) && (ix < patch.x1 || ix == n);
        let inside_y = (iy > patch.y0 || iy == 0) && (iy < patch.y1 || iy == n);
        if inside_x && inside_y {
            NodeRole::Free
        } else {
            NodeRole::Trace
        }
    }
}

/// Role of a patch node in a local Helmholtz problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRole {
    /// Unknown: interior node or node on a Neumann/Robin part of `∂Ω`.
    Free,
    /// Dirichlet data prescribed by the caller (on `∂patch \ (Γ_N ∪ Γ_R)`).
    Trace,
    /// Node on `Γ_D`; carries the global Dirichlet value.
    Fixed,
}

/// Oversampling domain `ω_e` of an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct OversamplingDomain {
    pub edge: usize,
    /// Coarse elements in the block, row-major.
    pub elements: Vec<usize>,
    /// Coarse element block `[i0, i1) × [j0, j1)`.
    pub block: [usize; 4],
    pub patch: Patch,
    /// Fine nodes on `∂ω_e \ (Γ_N ∪ Γ_R)` (global indices, row-major).
    pub dirichlet_fine_nodes: Vec<usize>,
    /// Fine nodes on `∂ω_e ∩ (Γ_N ∪ Γ_R)` that are unknowns of the local problem.
    pub natural_fine_nodes: Vec<usize>,
    pub interior_fine_nodes: Vec<usize>,
}

/// `ω_e`: union of the coarse elements whose closure meets `e`.
pub fn oversampling_domain(mesh: &TwoLevelMesh, e: usize) -> Result<OversamplingDomain> {
    let edge = *mesh.edges.get(e).ok_or(Error::InvalidEdge(e))?;
    let nc = mesh.spec.coarse;
    let [i, j] = edge.start;
    let [i0, i1, j0, j1] = match edge.orientation {
        Orientation::Horizontal => [i.saturating_sub(1), (i + 2).min(nc), j - 1, j + 1],
        Orientation::Vertical => [i - 1, i + 1, j.saturating_sub(1), (j + 2).min(nc)],
    };
    let mut elements = Vec::new();
    for b in j0..j1 {
        for a in i0..i1 {
            elements.push(mesh.element_index(a, b));
        }
    }
    let patch = mesh.coarse_block_patch(i0, i1, j0, j1);
    let mut dirichlet_fine_nodes = Vec::new();
    let mut natural_fine_nodes = Vec::new();
    let mut interior_fine_nodes = Vec::new();
    for iy in patch.y0..=patch.y1 {
        for ix in patch.x0..=patch.x1 {
            let node = mesh.node_index(ix, iy);
            let on_boundary = ix == patch.x0 || ix == patch.x1 || iy == patch.y0 || iy == patch.y1;
            match mesh.node_role(&patch, ix, iy) {
                NodeRole::Trace | NodeRole::Fixed => dirichlet_fine_nodes.push(node),
                NodeRole::Free if on_boundary => natural_fine_nodes.push(node),
                NodeRole::Free => interior_fine_nodes.push(node),
            }
        }
    }
    Ok(OversamplingDomain {
        edge: e,
        elements,
        block: [i0, i1, j0, j1],
        patch,
        dirichlet_fine_nodes,
        natural_fine_nodes,
        interior_fine_nodes,
    })
}

impl fmt::Display for TwoLevelMesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} coarse (H = {}), refine {} (h = {}), {} fine nodes, |N_H| = {}, |E_H| = {}, |T_H| = {}",
            self.spec.coarse,
            self.spec.coarse,
            self.spec.coarse_size(),
            self.spec.refine,
            self.spec.fine_size(),
            self.num_nodes(),
            self.coarse_nodes.len(),
            self.edges.len(),
            self.num_elements()
        )
    }
}
