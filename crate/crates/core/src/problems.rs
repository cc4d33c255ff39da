//! Problem recipes, run configuration and the sweep driver.
//!
//! A [`ProblemSpec`] fixes coefficients, boundary classification and data as
//! functions on the unit square, so the same problem can be sampled on any
//! grid. A [`RunConfig`] adds the two-level grid and the list of `m` values;
//! [`run_sweep`] performs one offline stage and one online solve per
//! `(m, method)` pair.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{
    assemble_trial_space, build_offline, build_offline_cached, build_restriction, coefficient_hash, edge_svd,
    load_cache, save_cache, EdgeBasis, Offline,
};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_energy_gram, assemble_form, assemble_sesquilinear, global_load, prolongate, solve_reference,
    CoefficientField, FineFunction, Form,
};
use crate::galerkin::{assemble_coarse, compute_errors, solve_online, ErrorPair, FineParts, Method, SolveReport};
use crate::linalg::c64;
use crate::local::{element_problems, glued_bubbles, u_s_from_residues};
use crate::mesh::{build_mesh, BoundaryClassification, BoundaryKind, BoundarySegment, GridSpec, Side, TwoLevelMesh};

type ScalarFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// Points per side of the Gaussian lattice of the random field.
pub const LATTICE: usize = 128;

/// Relative L2 threshold of the `h` vs `h/2` reference check.
pub const REFERENCE_L2_TOL: f64 = 5e-4;
/// Relative energy threshold of the `h` vs `h/2` reference check.
pub const REFERENCE_ENERGY_TOL: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoefficientRecipe {
    Constant { a: f64, v: f64, beta: f64 },
    /// `A = ε²` on the periodic inclusions inside `(0.25, 0.75)²`, 1 elsewhere;
    /// `V = β = 1`.
    Mie { eps: f64 },
    /// `A`, `V` and `β` are `|ξ| + 0.5` for three independent fields `ξ`.
    RandomField { seed: u64 },
    /// `A` given per cell of a uniform grid in a CSV file, one line per row
    /// of cells starting at `y = 0`; `V = β = 1`.
    GridFile { path: PathBuf },
}

/// Piecewise bilinear interpolant of i.i.d. unit Gaussians on the
/// `(LATTICE + 1)²` lattice over the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomField {
    values: Vec<f64>,
}

impl RandomField {
    /// Field number `stream` of the realization `seed`. Each stream is an
    /// independent ChaCha20 sub-stream; Gaussians come from Box–Muller on
    /// 53-bit uniforms, both outputs of each pair used in lattice order.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let count = (LATTICE + 1) * (LATTICE + 1);
        let mut values = Vec::with_capacity(count + 1);
        while values.len() < count {
            let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let r = (-2.0 * u1.ln()).sqrt();
            let t = std::f64::consts::TAU * u2;
            values.push(r * t.cos());
            values.push(r * t.sin());
        }
        values.truncate(count);
        Self { values }
    }

    pub fn lattice(&self, i: usize, j: usize) -> f64 {
        self.values[j * (LATTICE + 1) + i]
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let s = [x[0] * LATTICE as f64, x[1] * LATTICE as f64];
        let i = (s[0].floor().max(0.0) as usize).min(LATTICE - 1);
        let j = (s[1].floor().max(0.0) as usize).min(LATTICE - 1);
        let (tx, ty) = (s[0] - i as f64, s[1] - j as f64);
        (1.0 - tx) * (1.0 - ty) * self.lattice(i, j)
            + tx * (1.0 - ty) * self.lattice(i + 1, j)
            + (1.0 - tx) * ty * self.lattice(i, j + 1)
            + tx * ty * self.lattice(i + 1, j + 1)
    }
}

/// Whether `x` lies in the inclusion set of the high-contrast medium.
pub fn in_mie_inclusion(x: [f64; 2], eps: f64) -> bool {
    x.iter().all(|&c| {
        let f = (c / eps).rem_euclid(1.0);
        c > 0.25 && c < 0.75 && f > 0.25 && f < 0.75
    })
}

fn read_grid_file(path: &Path) -> Result<ScalarFn> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let row = rec?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{}: expected a square grid of values", path.display())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Arc::new(move |x: [f64; 2]| {
        let i = ((x[0] * n as f64) as usize).min(n - 1);
        let j = ((x[1] * n as f64) as usize).min(n - 1);
        flat[j * n + i]
    }))
}

impl CoefficientRecipe {
    /// `(A, V, β)` as functions of position.
    pub fn functions(&self) -> Result<(ScalarFn, ScalarFn, ScalarFn)> {
        let one: ScalarFn = Arc::new(|_| 1.0);
        Ok(match self {
            &CoefficientRecipe::Constant { a, v, beta } => (Arc::new(move |_| a), Arc::new(move |_| v), Arc::new(move |_| beta)),
            &CoefficientRecipe::Mie { eps } => {
                if !(eps > 0.0 && eps <= 1.0) {
                    return Err(Error::Config(format!("Mie contrast parameter must lie in (0, 1], got {eps}")));
                }
                let a: ScalarFn = Arc::new(move |x| if in_mie_inclusion(x, eps) { eps * eps } else { 1.0 });
                (a, one.clone(), one)
            }
            &CoefficientRecipe::RandomField { seed } => {
                let field = |stream| -> ScalarFn {
                    let f = RandomField::new(seed, stream);
                    Arc::new(move |x| f.eval(x).abs() + 0.5)
                };
                (field(0), field(1), field(2))
            }
            CoefficientRecipe::GridFile { path } => (read_grid_file(path)?, one.clone(), one),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceRecipe {
    Zero,
    Constant { value: f64 },
    /// `scale · exp(−1 / (1 − 400|x − center|²))` inside the disc of radius 1/20.
    Bump { center: [f64; 2], scale: f64 },
    /// `x⁴ − y³ + 1`.
    Polynomial,
}

/// `scale · exp(−1/(1 − 400 d²))` for `d² < 1/400`, else 0.
pub fn bump(x: [f64; 2], center: [f64; 2], scale: f64) -> f64 {
    let d2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
    let s = 1.0 - 400.0 * d2;
    if s > 0.0 {
        scale * (-1.0 / s).exp()
    } else {
        0.0
    }
}

impl SourceRecipe {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            SourceRecipe::Zero => 0.0,
            SourceRecipe::Constant { value } => value,
            SourceRecipe::Bump { center, scale } => bump(x, center, scale),
            SourceRecipe::Polynomial => x[0].powi(4) - x[1].powi(3) + 1.0,
        }
    }
}

/// Known solution; its boundary flux becomes the data on natural boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExactSolution {
    /// `exp(−ik d·x)`; solves the equation with `f = 0` when `A = V = 1` and `|d| = 1`.
    PlaneWave { direction: [f64; 2] },
}

impl ExactSolution {
    pub fn value(&self, x: [f64; 2], k: f64) -> c64 {
        match self {
            ExactSolution::PlaneWave { direction: d } => {
                let phase = -k * (d[0] * x[0] + d[1] * x[1]);
                c64::new(phase.cos(), phase.sin())
            }
        }
    }

    pub fn gradient(&self, x: [f64; 2], k: f64) -> [c64; 2] {
        match self {
            ExactSolution::PlaneWave { direction: d } => {
                let u = self.value(x, k);
                let f = c64::new(0.0, -k) * u;
                [f * d[0], f * d[1]]
            }
        }
    }
}

/// Boundary classification in config form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundarySpec {
    Uniform(BoundaryKind),
    Sides {
        bottom: BoundaryKind,
        top: BoundaryKind,
        left: BoundaryKind,
        right: BoundaryKind,
    },
    Segments { segments: Vec<BoundarySegment> },
}

impl BoundarySpec {
    pub fn classification(&self) -> BoundaryClassification {
        match self {
            &BoundarySpec::Uniform(kind) => BoundaryClassification::uniform(kind),
            &BoundarySpec::Sides { bottom, top, left, right } => BoundaryClassification::per_side(bottom, top, left, right),
            BoundarySpec::Segments { segments } => BoundaryClassification { segments: segments.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub k: f64,
    pub coefficients: CoefficientRecipe,
    pub boundary: BoundarySpec,
    pub source: SourceRecipe,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSolution>,
}

impl ProblemSpec {
    /// Plane wave in direction `(0.6, 0.8)`, unit coefficients, Robin
    /// boundary data taken from the exact solution.
    pub fn plane_wave(k: f64) -> Self {
        Self {
            name: "plane_wave".into(),
            k,
            coefficients: CoefficientRecipe::Constant { a: 1.0, v: 1.0, beta: 1.0 },
            boundary: BoundarySpec::Uniform(BoundaryKind::Robin),
            source: SourceRecipe::Zero,
            exact: Some(ExactSolution::PlaneWave { direction: [0.6, 0.8] }),
        }
    }

    /// High-contrast inclusions driven by a bump at `(0.125, 0.5)`, Robin boundary.
    pub fn mie(eps: f64, k: f64) -> Self {
        Self {
            name: "mie".into(),
            k,
            coefficients: CoefficientRecipe::Mie { eps },
            boundary: BoundarySpec::Uniform(BoundaryKind::Robin),
            source: SourceRecipe::Bump {
                center: [0.125, 0.5],
                scale: 10000.0,
            },
            exact: None,
        }
    }

    /// Rough random medium; Dirichlet at `y = 0`, Neumann at `y = 1`, Robin on the sides.
    pub fn random_mixed(seed: u64, k: f64) -> Self {
        Self {
            name: "random_mixed".into(),
            k,
            coefficients: CoefficientRecipe::RandomField { seed },
            boundary: BoundarySpec::Sides {
                bottom: BoundaryKind::Dirichlet,
                top: BoundaryKind::Neumann,
                left: BoundaryKind::Robin,
                right: BoundaryKind::Robin,
            },
            source: SourceRecipe::Polynomial,
            exact: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(Error::Config(format!("wavenumber must be finite and nonnegative, got {}", self.k)));
        }
        if self.exact.is_some() && self.boundary.classification().has_kind(BoundaryKind::Dirichlet) {
            return Err(Error::Config("inhomogeneous Dirichlet data is not supported".into()));
        }
        if let CoefficientRecipe::Constant { a, v, beta } = self.coefficients {
            if !(a > 0.0 && v > 0.0 && beta > 0.0) {
                return Err(Error::Config("constant coefficients must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn mesh(&self, coarse: usize, refine: usize) -> Result<TwoLevelMesh> {
        build_mesh(GridSpec::new(coarse, refine)?, self.boundary.classification())
    }

    pub fn coefficients(&self, mesh: &TwoLevelMesh) -> Result<CoefficientField> {
        let (a, v, beta) = self.coefficients.functions()?;
        CoefficientField::sample(mesh, &*a, &*v, &*beta, self.k)
            .map_err(|e| Error::Config(format!("coefficients of '{}': {e}", self.name)))
    }

    /// Load vector, including `A∇u·ν − ikβu` (Robin) or `A∇u·ν` (Neumann)
    /// of the exact solution when one is given.
    pub fn load(&self, mesh: &TwoLevelMesh) -> Result<Vec<c64>> {
        let src = self.source.clone();
        let f = move |x: [f64; 2]| c64::new(src.eval(x), 0.0);
        let Some(exact) = self.exact.clone() else {
            return global_load(mesh, &f, None);
        };
        let (a, _, beta) = self.coefficients.functions()?;
        let k = self.k;
        let bc = self.boundary.classification();
        let h = mesh.spec.fine_size();
        let g = move |x: [f64; 2], side: Side| {
            let grad = exact.gradient(x, k);
            let nu = side.normal();
            let flux = (grad[0] * nu[0] + grad[1] * nu[1]) * a(x);
            // the facet kind decides; probing the classification at x is exact
            // away from segment endpoints, which are fine nodes
            let t = match side {
                Side::Bottom | Side::Top => x[0],
                Side::Left | Side::Right => x[1],
            };
            let robin = bc
                .segments
                .iter()
                .filter(|s| s.side == side && t > s.start - 0.5 * h && t < s.end + 0.5 * h)
                .any(|s| s.kind == BoundaryKind::Robin && t > s.start && t < s.end);
            if robin {
                flux - c64::new(0.0, k * beta(x)) * exact.value(x, k)
            } else {
                flux
            }
        };
        global_load(mesh, &f, Some(&g))
    }

    /// Exact solution at the fine nodes, if known.
    pub fn exact_nodal(&self, mesh: &TwoLevelMesh) -> Option<FineFunction> {
        self.exact
            .as_ref()
            .map(|ex| (0..mesh.num_nodes()).map(|n| ex.value(mesh.node_coords(n), self.k)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// Solve on the fine grid.
    #[default]
    Compute,
    /// Reuse a reference stored in `cache_dir`, computing it on a miss.
    Cached,
    /// Solve on the fine grid and check it against a solve at `h/2`.
    VerifyHalving,
}

fn default_cp() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    /// Coarse elements per side.
    #[serde(rename = "nH")]
    pub n_h: usize,
    /// Fine cells per coarse element side.
    pub refine: usize,
    pub m_list: Vec<usize>,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub reference: ReferencePolicy,
    /// Poincaré constant used by the mesh-size check.
    #[serde(default = "default_cp")]
    pub c_p: f64,
    /// Directory for edge-basis and reference caches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    fn desk(problem: ProblemSpec, refine: usize) -> Self {
        Self {
            problem,
            n_h: 16,
            refine,
            m_list: (1..=7).collect(),
            methods: vec![Method::Ritz, Method::Petrov],
            out: None,
            reference: ReferencePolicy::Compute,
            c_p: 1.0,
            cache_dir: None,
        }
    }

    /// Plane wave, `k = 32`, `H = 1/16`, `h = 1/256`.
    pub fn desk_plane_wave() -> Self {
        Self::desk(ProblemSpec::plane_wave(32.0), 16)
    }

    /// Mie inclusions, `ε = 1/16`, `k = 9`, `H = 1/16`, `h = 1/128`.
    pub fn desk_mie() -> Self {
        Self::desk(ProblemSpec::mie(1.0 / 16.0, 9.0), 8)
    }

    /// Random medium with mixed boundary, `k = 16`, `H = 1/16`, `h = 1/256`.
    pub fn desk_random_mixed(seed: u64) -> Self {
        Self::desk(ProblemSpec::random_mixed(seed, 16.0), 16)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.n_h, self.refine)?;
        self.problem.validate()?;
        if self.m_list.is_empty() {
            return Err(Error::Config("m_list is empty".into()));
        }
        if self.m_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("m_list must be strictly ascending".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods given".into()));
        }
        if self.methods.len() == 2 && self.methods[0] == self.methods[1] {
            return Err(Error::Config("duplicate method".into()));
        }
        if self.methods.len() > 2 {
            return Err(Error::Config("at most two methods".into()));
        }
        if !(self.c_p > 0.0 && self.c_p.is_finite()) {
            return Err(Error::Config("c_p must be positive".into()));
        }
        if self.reference == ReferencePolicy::Cached && self.cache_dir.is_none() {
            return Err(Error::Config("reference policy 'cached' needs cache_dir".into()));
        }
        Ok(())
    }

    pub fn m_max(&self) -> usize {
        *self.m_list.last().expect("validated")
    }
}

/// Outcome of the `h` vs `h/2` comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub h: f64,
    pub e_l2: f64,
    pub e_h: f64,
    pub pass: bool,
}

impl fmt::Display for ReferenceCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "h = {:.3e}: relative h vs h/2 difference L2 {:.3e} (tol {:.0e}), energy {:.3e} (tol {:.0e}): {}",
            self.h,
            self.e_l2,
            REFERENCE_L2_TOL,
            self.e_h,
            REFERENCE_ENERGY_TOL,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Solve at `h` and `h/2` and compare; returns the check and the solution at `h`.
fn reference_with_check(cfg: &RunConfig) -> Result<(ReferenceCheck, FineFunction)> {
    let p = &cfg.problem;
    let mesh = p.mesh(cfg.n_h, cfg.refine)?;
    let u = solve_reference(&mesh, &p.coefficients(&mesh)?, &p.load(&mesh)?)?;
    let fine = p.mesh(cfg.n_h, 2 * cfg.refine)?;
    let coeff = p.coefficients(&fine)?;
    let u2 = solve_reference(&fine, &coeff, &p.load(&fine)?)?;
    let whole = fine.whole_patch();
    let mass = assemble_form(&fine, &coeff, &whole, Form::Mass)?;
    let energy = assemble_energy_gram(&fine, &coeff, &whole)?;
    let e = compute_errors(&prolongate(mesh.n(), &u), &u2, &mass, &energy);
    let check = ReferenceCheck {
        h: mesh.spec.fine_size(),
        e_l2: e.l2,
        e_h: e.energy,
        pass: e.l2 <= REFERENCE_L2_TOL && e.energy <= REFERENCE_ENERGY_TOL,
    };
    Ok((check, u))
}

/// Compare fine solutions at `h` and `h/2` (the coarser one prolongated bilinearly).
pub fn verify_reference(cfg: &RunConfig) -> Result<ReferenceCheck> {
    cfg.validate()?;
    Ok(reference_with_check(cfg)?.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn reference_cache_path(dir: &Path, coeff: &CoefficientField, load: &[c64]) -> PathBuf {
    let mut h = Sha256::new();
    h.update(coefficient_hash(coeff));
    for v in load {
        h.update(v.re.to_le_bytes());
        h.update(v.im.to_le_bytes());
    }
    dir.join(format!("reference-{}.bin", &hex(&h.finalize())[..16]))
}

fn read_reference(path: &Path, len: usize) -> Result<FineFunction> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != 16 * len {
        return Err(Error::Cache(format!("{} has the wrong length", path.display())));
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
    Ok(bytes.chunks_exact(16).map(|c| c64::new(f(&c[..8]), f(&c[8..]))).collect())
}

fn write_reference(path: &Path, u: &[c64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in u {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn offline_stage(cfg: &RunConfig, mesh: &TwoLevelMesh, coeff: &CoefficientField, load: &[c64]) -> Result<Offline> {
    let m_max = cfg.m_max();
    let Some(dir) = &cfg.cache_dir else {
        return build_offline(mesh, coeff, m_max, Some(load));
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!(
        "basis-{}-{}x{}-m{}.bin",
        &hex(&coefficient_hash(coeff))[..16],
        cfg.n_h,
        cfg.refine,
        m_max
    ));
    match load_cache(&path, mesh, coeff) {
        Ok(set) if set.m == m_max => {
            log::info!("edge bases loaded from {}", path.display());
            build_offline_cached(mesh, coeff, set, Some(load))
        }
        _ => {
            let off = build_offline(mesh, coeff, m_max, Some(load))?;
            save_cache(&path, &off.edges, coeff)?;
            Ok(off)
        }
    }
}

/// Result of a sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub reports: Vec<SolveReport>,
    /// Number of offline stages executed; one per sweep.
    pub offline_builds: usize,
    pub reference: Option<ReferenceCheck>,
    /// Relative errors of the fine reference against the exact solution, if known.
    pub reference_vs_exact: Option<ErrorPair>,
}

/// Offline stage at `max(m_list)`, then one online solve per `(m, method)`.
/// Rows are ordered by `m`, then by method as listed in the config. Failures
/// of a single online solve are reported in that row's flags.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    faer::set_global_parallelism(faer::Par::Seq);
    let p = &cfg.problem;
    let mesh = p.mesh(cfg.n_h, cfg.refine)?;
    let coeff = p.coefficients(&mesh)?;
    let load = p.load(&mesh)?;
    log::info!("{}: {mesh}", p.name);

    let (u_ref, reference) = match cfg.reference {
        ReferencePolicy::Compute => (solve_reference(&mesh, &coeff, &load)?, None),
        ReferencePolicy::VerifyHalving => {
            let (check, u) = reference_with_check(cfg)?;
            log::info!("reference check: {check}");
            (u, Some(check))
        }
        ReferencePolicy::Cached => {
            let dir = cfg.cache_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            let path = reference_cache_path(dir, &coeff, &load);
            match read_reference(&path, mesh.num_nodes()) {
                Ok(u) => (u, None),
                Err(_) => {
                    let u = solve_reference(&mesh, &coeff, &load)?;
                    write_reference(&path, &u)?;
                    (u, None)
                }
            }
        }
    };

    let whole = mesh.whole_patch();
    let kmat = assemble_sesquilinear(&mesh, &coeff, &whole)?;
    let mass = assemble_form(&mesh, &coeff, &whole, Form::Mass)?;
    let energy = assemble_energy_gram(&mesh, &coeff, &whole)?;
    let reference_vs_exact = p.exact_nodal(&mesh).map(|ex| compute_errors(&u_ref, &ex, &mass, &energy));

    let t_off = Instant::now();
    let off = offline_stage(cfg, &mesh, &coeff, &load)?;
    let offline_builds = 1;
    let space = assemble_trial_space(&mesh, &off.elements, &off.nodal, &off.edges, cfg.m_max())?;
    let systems: Vec<_> = cfg.methods.iter().map(|&m| assemble_coarse(&mesh, &kmat, &space, m)).collect();
    let offline_sec = t_off.elapsed().as_secs_f64();
    log::info!("offline stage: {offline_sec:.2} s");

    let t_loc = Instant::now();
    let parts = FineParts {
        u_b: glued_bubbles(&mesh, &off.elements, &load)?,
        u_s: u_s_from_residues(&mesh, &off.elements, off.residues.as_deref().expect("load given"))?,
    };
    let local_sec = t_loc.elapsed().as_secs_f64();

    let available = off.edges.edges.iter().map(|e| e.vectors.len()).min().unwrap_or(0);
    let regularized = off.edges.any_regularized();
    let mut reports = Vec::new();
    for &m in &cfg.m_list {
        for cs in &systems {
            let t = Instant::now();
            let mut flags = Vec::new();
            if m > available {
                flags.push("truncated".to_string());
            }
            if regularized {
                flags.push("regularized".to_string());
            }
            let (e_l2, e_h) = match solve_online(cs, m, &kmat, &load, &parts) {
                Ok(sol) => {
                    let e = compute_errors(&sol.u, &u_ref, &mass, &energy);
                    if e.absolute {
                        flags.push("absolute".to_string());
                    }
                    flags.push(format!("sigma_min={:.3e}", sol.sigma_min));
                    (e.l2, e.energy)
                }
                Err(err) => {
                    log::warn!("{} m={m}: {err}", cs.method);
                    flags.push(format!("error={err}"));
                    (f64::NAN, f64::NAN)
                }
            };
            reports.push(SolveReport {
                problem: p.name.clone(),
                method: cs.method,
                k: p.k,
                n_h: cfg.n_h,
                refine: cfg.refine,
                m,
                coarse_dim: cs.dim(m),
                e_l2,
                e_h,
                offline_sec,
                online_sec: local_sec + t.elapsed().as_secs_f64(),
                flags: flags.join(";"),
            });
        }
    }
    Ok(SweepOutcome {
        reports,
        offline_builds,
        reference,
        reference_vs_exact,
    })
}

/// CSV columns: problem, method, k, nH, refine, m, coarse_dim, e_L2, e_H,
/// offline_sec, online_sec, flags.
pub fn write_csv(w: impl Write, reports: &[SolveReport]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in reports {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Vec<SolveReport>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Singular values of the restriction operator of one edge, all of them.
pub fn spectrum(cfg: &RunConfig, edge: usize) -> Result<EdgeBasis> {
    cfg.validate()?;
    let mesh = cfg.problem.mesh(cfg.n_h, cfg.refine)?;
    if edge >= mesh.edges().len() {
        return Err(Error::InvalidEdge(edge));
    }
    let coeff = cfg.problem.coefficients(&mesh)?;
    let elements = element_problems(&mesh, &coeff)?;
    let rd = build_restriction(&mesh, &coeff, &elements, edge)?;
    edge_svd(&rd, rd.edge_nodes.len())
}

/// CSV columns: edge, j, lambda (`j` starting at 1).
pub fn write_spectrum_csv(w: impl Write, basis: &EdgeBasis) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["edge", "j", "lambda"])?;
    for (j, l) in basis.lambdas.iter().enumerate() {
        wtr.write_record([basis.edge.to_string(), (j + 1).to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mesh and coefficient summary with the coarse mesh-size check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Description {
    pub problem: String,
    pub k: f64,
    pub n_h: usize,
    pub refine: usize,
    pub coarse_h: f64,
    pub fine_h: f64,
    pub fine_nodes: usize,
    pub interior_coarse_nodes: usize,
    pub edges: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub c_p: f64,
    /// `A_min^{1/2} / (√2 C_P V_max k)`.
    pub coarse_h_bound: f64,
    pub assumption_holds: bool,
    pub k_h: f64,
}

pub fn describe(cfg: &RunConfig) -> Result<Description> {
    cfg.validate()?;
    let p = &cfg.problem;
    let mesh = p.mesh(cfg.n_h, cfg.refine)?;
    let coeff = p.coefficients(&mesh)?;
    let bound = if p.k > 0.0 {
        coeff.a_min().sqrt() / (std::f64::consts::SQRT_2 * cfg.c_p * coeff.v_max() * p.k)
    } else {
        f64::INFINITY
    };
    let coarse_h = mesh.spec.coarse_size();
    Ok(Description {
        problem: p.name.clone(),
        k: p.k,
        n_h: cfg.n_h,
        refine: cfg.refine,
        coarse_h,
        fine_h: mesh.spec.fine_size(),
        fine_nodes: mesh.num_nodes(),
        interior_coarse_nodes: mesh.coarse_nodes().len(),
        edges: mesh.edges().len(),
        a_min: coeff.a_min(),
        a_max: coeff.a_max(),
        v_max: coeff.v_max(),
        c_p: cfg.c_p,
        coarse_h_bound: bound,
        assumption_holds: coarse_h <= bound,
        k_h: p.k * mesh.spec.fine_size(),
    })
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "problem      {}", self.problem)?;
        writeln!(f, "k            {}", self.k)?;
        writeln!(f, "coarse       {} x {} elements, H = {:.4e}", self.n_h, self.n_h, self.coarse_h)?;
        writeln!(f, "fine         h = {:.4e} (refine {}), k h = {:.3}", self.fine_h, self.refine, self.k_h)?;
        writeln!(f, "fine nodes   {}", self.fine_nodes)?;
        writeln!(f, "coarse nodes {} interior, {} edges", self.interior_coarse_nodes, self.edges)?;
        writeln!(f, "A            [{:.4e}, {:.4e}], V_max {:.4e}", self.a_min, self.a_max, self.v_max)?;
        write!(
            f,
            "mesh check   H <= A_min^(1/2) / (sqrt(2) C_P V_max k) = {:.4e} with C_P = {}: {}",
            self.coarse_h_bound,
            self.c_p,
            if self.assumption_holds { "holds" } else { "VIOLATED (warning only)" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mie_inclusion_points() {
        let eps = 1.0 / 16.0;
        assert!(in_mie_inclusion([0.5 + eps / 2.0, 0.5 + eps / 2.0], eps));
        assert!(!in_mie_inclusion([0.1, 0.1], eps));
        assert!(!in_mie_inclusion([0.5, 0.5], eps));
        // the set is a product of 1D sets: frac(x/ε) in (1/4, 3/4) inside (1/4, 3/4)
        let (a, _, _) = CoefficientRecipe::Mie { eps }.functions().unwrap();
        assert_eq!(a([0.5 + eps / 2.0, 0.3 + eps / 2.0 - 0.3 % eps]), eps * eps);
        assert_eq!(a([0.8, 0.5 + eps / 2.0]), 1.0);
    }

    #[test]
    fn mie_contrast_ratio() {
        let p = ProblemSpec::mie(1.0 / 16.0, 9.0);
        let mesh = p.mesh(16, 8).unwrap();
        let c = p.coefficients(&mesh).unwrap();
        assert_eq!(c.a_max() / c.a_min(), 256.0);
        let inside = c.a.iter().filter(|&&a| a < 1.0).count();
        // 8 x 8 inclusions of 4 x 4 cells each at h = 1/128
        assert_eq!(inside, 64 * 16);
    }

    #[test]
    fn bump_values() {
        let z = [0.125, 0.5];
        assert!((bump(z, z, 10000.0) - 10000.0 * (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(bump([0.125 + 0.05, 0.5], z, 10000.0), 0.0);
        assert_eq!(bump([0.125, 0.5 - 0.06], z, 10000.0), 0.0);
        assert!(bump([0.14, 0.51], z, 10000.0) > 0.0);
    }

    #[test]
    fn random_field_lattice_and_bounds() {
        let f = RandomField::new(7, 0);
        let g = RandomField::new(7, 0);
        assert_eq!(f, g);
        assert_ne!(f, RandomField::new(7, 1));
        assert_ne!(f, RandomField::new(8, 0));
        for (i, j) in [(0, 0), (3, 5), (128, 128), (64, 1)] {
            let x = [i as f64 / 128.0, j as f64 / 128.0];
            assert!((f.eval(x) - f.lattice(i, j)).abs() < 1e-15);
        }
        let (a, v, b) = CoefficientRecipe::RandomField { seed: 7 }.functions().unwrap();
        for t in 0..50 {
            let x = [(t as f64 * 0.137).fract(), (t as f64 * 0.291).fract()];
            assert!(a(x) >= 0.5 && v(x) >= 0.5 && b(x) >= 0.5);
        }
    }

    #[test]
    fn random_field_moments() {
        let f = RandomField::new(3, 2);
        let n = (LATTICE + 1) * (LATTICE + 1);
        let vals: Vec<f64> = (0..=LATTICE).flat_map(|j| (0..=LATTICE).map(move |i| (i, j))).map(|(i, j)| f.lattice(i, j)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // 16641 samples: standard error of the mean ~ 0.008
        assert!(mean.abs() < 0.04, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn plane_wave_flux_matches_robin_data() {
        let p = ProblemSpec::plane_wave(5.0);
        let ex = p.exact.clone().unwrap();
        let x = [0.3, 0.0];
        let g = ex.gradient(x, 5.0);
        let eps = 1e-6;
        let fd = (ex.value([0.3, eps], 5.0) - ex.value([0.3, -eps], 5.0)) / (2.0 * eps);
        assert!((g[1] - fd).norm() < 1e-6);
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = RunConfig::desk_random_mixed(11);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert!(text.contains("\"nH\": 16"));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.m_list = vec![3, 2];
        assert!(bad.validate().unwrap_err().is_config());
        bad.m_list = vec![];
        assert!(bad.validate().unwrap_err().is_config());
        let mut bad = cfg.clone();
        bad.refine = 1;
        assert!(bad.validate().unwrap_err().is_config());
        let mut bad = RunConfig::desk_plane_wave();
        bad.problem.boundary = BoundarySpec::Uniform(BoundaryKind::Dirichlet);
        assert!(bad.validate().unwrap_err().is_config());
        assert!(RunConfig::from_json("{").unwrap_err().is_config());
        let minimal = r#"{"problem": {"name": "p", "k": 2.0,
            "coefficients": {"type": "constant", "a": 1, "v": 1, "beta": 1},
            "boundary": "robin", "source": {"type": "constant", "value": 1}},
            "nH": 4, "refine": 4, "m_list": [0, 1], "methods": ["ritz"]}"#;
        let cfg = RunConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.c_p, 1.0);
        assert_eq!(cfg.reference, ReferencePolicy::Compute);
    }

    #[test]
    fn grid_file_recipe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "1,2\n3,4\n").unwrap();
        let (a, v, _) = CoefficientRecipe::GridFile { path: path.clone() }.functions().unwrap();
        assert_eq!(a([0.1, 0.1]), 1.0);
        assert_eq!(a([0.9, 0.1]), 2.0);
        assert_eq!(a([0.1, 0.9]), 3.0);
        assert_eq!(a([1.0, 1.0]), 4.0);
        assert_eq!(v([0.5, 0.5]), 1.0);
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(CoefficientRecipe::GridFile { path }.functions().is_err());
    }

    fn small(problem: ProblemSpec) -> RunConfig {
        RunConfig {
            problem,
            n_h: 4,
            refine: 4,
            m_list: vec![0, 1, 2],
            methods: vec![Method::Ritz, Method::Petrov],
            out: None,
            reference: ReferencePolicy::Compute,
            c_p: 1.0,
            cache_dir: None,
        }
    }

    #[test]
    fn sweep_rows_and_csv() {
        let cfg = small(ProblemSpec::random_mixed(5, 3.0));
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.offline_builds, 1);
        assert_eq!(out.reports.len(), 6);
        let order: Vec<(usize, Method)> = out.reports.iter().map(|r| (r.m, r.method)).collect();
        assert_eq!(order[0], (0, Method::Ritz));
        assert_eq!(order[1], (0, Method::Petrov));
        assert_eq!(order[5], (2, Method::Petrov));
        assert!(out.reports.iter().all(|r| r.e_l2.is_finite()));
        // nodal functions alone are far from resolving this medium
        assert!(out.reports.iter().filter(|r| r.m > 0).all(|r| r.e_l2 < 0.05), "{:?}", out.reports);
        let mut buf = Vec::new();
        write_csv(&mut buf, &out.reports).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("problem,method,k,nH,refine,m,coarse_dim,e_L2,e_H,offline_sec,online_sec,flags\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), out.reports);
    }

    #[test]
    fn caches_reproduce_uncached_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(ProblemSpec::mie(0.25, 3.0));
        let plain = run_sweep(&cfg).unwrap();
        cfg.cache_dir = Some(dir.path().to_path_buf());
        cfg.reference = ReferencePolicy::Cached;
        let first = run_sweep(&cfg).unwrap();
        let second = run_sweep(&cfg).unwrap();
        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 2);
        for ((a, b), c) in plain.reports.iter().zip(&first.reports).zip(&second.reports) {
            assert_eq!((a.e_l2, a.e_h), (b.e_l2, b.e_h));
            assert_eq!((a.e_l2, a.e_h), (c.e_l2, c.e_h));
        }
    }

    #[test]
    fn describe_reports_mesh_check() {
        let d = describe(&RunConfig::desk_plane_wave()).unwrap();
        assert_eq!(d.fine_nodes, 257 * 257);
        assert_eq!(d.edges, 2 * 16 * 15);
        let want = 1.0 / (std::f64::consts::SQRT_2 * 32.0);
        assert!((d.coarse_h_bound - want).abs() < 1e-15);
        assert!(!d.assumption_holds);
        assert!(d.to_string().contains("VIOLATED"));
    }

    #[test]
    fn spectrum_is_sorted_and_rejects_bad_edges() {
        let cfg = small(ProblemSpec::plane_wave(4.0));
        let b = spectrum(&cfg, 5).unwrap();
        assert_eq!(b.lambdas.len(), b.nodes.len());
        assert!(b.lambdas.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(spectrum(&cfg, 10_000), Err(Error::InvalidEdge(10_000))));
    }
}
