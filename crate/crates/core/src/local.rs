//! Local Helmholtz solves on coarse elements and oversampling domains.
//!
//! Every local problem is a [`PatchSystem`]: nodes whose hat function lies
//! inside the subdomain are unknowns, the remaining subdomain nodes (on the
//! part of the subdomain boundary interior to `Ω`, or at its ends) carry
//! Dirichlet data, and nodes on `Γ_D` are zero. With this rule the rows of a
//! local system coincide with rows of the global system, so the global load
//! vector can be used directly as local load.

use rayon::prelude::*;

use crate::error::Result;
use crate::fem::{gather, scatter, CoefficientField, FineFunction, Form, PatchSystem};
use crate::linalg::c64;
use crate::mesh::{oversampling_domain, TwoLevelMesh};

pub type LocalProblem = PatchSystem;

/// Local problems for all coarse elements, indexed like the elements.
pub fn element_problems(mesh: &TwoLevelMesh, coeff: &CoefficientField) -> Result<Vec<LocalProblem>> {
    (0..mesh.num_elements())
        .into_par_iter()
        .map(|t| PatchSystem::new(mesh, coeff, mesh.element_patch(t), Form::Helmholtz))
        .collect()
}

/// Local problem on the oversampling domain of edge `e`.
pub fn oversampling_problem(mesh: &TwoLevelMesh, coeff: &CoefficientField, e: usize) -> Result<LocalProblem> {
    let omega = oversampling_domain(mesh, e)?;
    PatchSystem::new(mesh, coeff, omega.patch, Form::Helmholtz)
}

/// Helmholtz-harmonic function on the subdomain with the given trace
/// (indexed like `lp.trace`). Returns patch values.
pub fn harmonic_extension(lp: &LocalProblem, trace: &[c64]) -> Result<Vec<c64>> {
    lp.extend(trace)
}

/// Harmonic extension whose trace is read from a global fine function.
pub fn extend_global(mesh: &TwoLevelMesh, lp: &LocalProblem, global: &[c64]) -> Result<Vec<c64>> {
    let trace: Vec<c64> = lp.trace_global(mesh).iter().map(|&n| global[n]).collect();
    lp.extend(&trace)
}

/// Bubble part on an element for a global load vector: zero trace, the local
/// rows of the load as right-hand side.
pub fn bubble_solve(mesh: &TwoLevelMesh, lp: &LocalProblem, load: &[c64]) -> Result<Vec<c64>> {
    lp.solve_load(&gather(mesh, &lp.patch, load))
}

/// Bubble part on an oversampling domain.
pub fn oversampling_bubble(mesh: &TwoLevelMesh, lp: &LocalProblem, load: &[c64]) -> Result<Vec<c64>> {
    bubble_solve(mesh, lp, load)
}

/// Bubble solve with an additional boundary flux load (`u^b + u^p`).
pub fn particular_solve(
    mesh: &TwoLevelMesh,
    lp: &LocalProblem,
    volume_load: &[c64],
    flux_load: &[c64],
) -> Result<Vec<c64>> {
    let total: Vec<c64> = volume_load.iter().zip(flux_load).map(|(a, b)| a + b).collect();
    bubble_solve(mesh, lp, &total)
}

/// Assemble patch functions into one global function. Overlapping values must
/// agree (they do for element-wise harmonic extensions of one skeleton
/// function and for bubbles).
pub fn glue(mesh: &TwoLevelMesh, parts: &[(crate::mesh::Patch, Vec<c64>)]) -> FineFunction {
    let mut out = vec![c64::new(0.0, 0.0); mesh.num_nodes()];
    for (patch, vals) in parts {
        scatter(mesh, patch, vals, &mut out);
    }
    out
}

/// Per-element harmonic extension of the skeleton values of `skeleton`.
pub fn extend_skeleton(mesh: &TwoLevelMesh, elements: &[LocalProblem], skeleton: &[c64]) -> Result<FineFunction> {
    let parts = elements
        .par_iter()
        .map(|lp| Ok((lp.patch, extend_global(mesh, lp, skeleton)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(glue(mesh, &parts))
}

/// Element-wise bubbles glued into a global function.
pub fn glued_bubbles(mesh: &TwoLevelMesh, elements: &[LocalProblem], load: &[c64]) -> Result<FineFunction> {
    let parts = elements
        .par_iter()
        .map(|lp| Ok((lp.patch, bubble_solve(mesh, lp, load)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(glue(mesh, &parts))
}

/// Split of a fine function into its harmonic and bubble parts.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub harmonic: FineFunction,
    pub bubble: FineFunction,
}

/// `u^h` from the skeleton values of `u` and `u^b` from the load.
pub fn decompose(mesh: &TwoLevelMesh, elements: &[LocalProblem], u: &[c64], load: &[c64]) -> Result<Decomposition> {
    Ok(Decomposition {
        harmonic: extend_skeleton(mesh, elements, u)?,
        bubble: glued_bubbles(mesh, elements, load)?,
    })
}

/// Interpolation residue of a function on the unknowns of edge `e`:
/// values minus the linear interpolant of the values at interior coarse
/// endpoints. `values(node)` returns the function value at a global node.
pub fn edge_residue(mesh: &TwoLevelMesh, e: usize, values: impl Fn(usize) -> c64) -> Vec<c64> {
    let edge = mesh.edges()[e];
    let ends = [edge.start, edge.end()];
    let end_vals: Vec<Option<c64>> = ends
        .iter()
        .map(|&p| mesh.interior_coarse_node_id(p).map(|_| values(mesh.coarse_point_node(p))))
        .collect();
    mesh.edge_dofs(e)
        .into_iter()
        .map(|(node, t)| {
            let mut r = values(node);
            if let Some(v) = end_vals[0] {
                r -= v * (1.0 - t);
            }
            if let Some(v) = end_vals[1] {
                r -= v * t;
            }
            r
        })
        .collect()
}

/// Residue on edge `e` of the oversampling bubble for `load`.
pub fn oversampling_residue(mesh: &TwoLevelMesh, lp: &LocalProblem, e: usize, load: &[c64]) -> Result<Vec<c64>> {
    let ub = oversampling_bubble(mesh, lp, load)?;
    Ok(edge_residue(mesh, e, |node| {
        let (ix, iy) = mesh.grid_point(node);
        ub[lp.patch.local_index(ix, iy).expect("edge inside its oversampling domain")]
    }))
}

/// Skeleton function carrying the given per-edge values on the edge unknowns.
pub fn skeleton_from_edges(mesh: &TwoLevelMesh, edge_values: &[Vec<c64>]) -> FineFunction {
    let mut s = vec![c64::new(0.0, 0.0); mesh.num_nodes()];
    for (e, vals) in edge_values.iter().enumerate() {
        for ((node, _), v) in mesh.edge_dofs(e).into_iter().zip(vals) {
            s[node] = *v;
        }
    }
    s
}

/// `u^s` from precomputed edge residues of the oversampling bubbles.
pub fn u_s_from_residues(mesh: &TwoLevelMesh, elements: &[LocalProblem], residues: &[Vec<c64>]) -> Result<FineFunction> {
    extend_skeleton(mesh, elements, &skeleton_from_edges(mesh, residues))
}

/// The special Helmholtz-harmonic function `u^s`: on every edge it equals the
/// interpolation residue of the oversampling bubble of that edge.
pub fn build_u_s(
    mesh: &TwoLevelMesh,
    coeff: &CoefficientField,
    elements: &[LocalProblem],
    load: &[c64],
) -> Result<FineFunction> {
    let residues = (0..mesh.edges().len())
        .into_par_iter()
        .map(|e| {
            let lp = oversampling_problem(mesh, coeff, e)?;
            oversampling_residue(mesh, &lp, e, load)
        })
        .collect::<Result<Vec<_>>>()?;
    u_s_from_residues(mesh, elements, &residues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_energy_gram, assemble_form, global_load, gram_norm_sqr, solve_reference};
    use crate::mesh::{build_mesh, BoundaryClassification, BoundaryKind, GridSpec, Orientation};
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn mixed_mesh(coarse: usize, refine: usize) -> TwoLevelMesh {
        let bc = BoundaryClassification::per_side(
            BoundaryKind::Dirichlet,
            BoundaryKind::Neumann,
            BoundaryKind::Robin,
            BoundaryKind::Robin,
        );
        build_mesh(GridSpec { coarse, refine }, bc).unwrap()
    }

    fn rough_coeff(mesh: &TwoLevelMesh, k: f64) -> CoefficientField {
        CoefficientField::sample(
            mesh,
            |x| 1.0 + 0.5 * (7.0 * x[0]).sin() * (5.0 * x[1]).cos(),
            |x| 1.0 + 0.3 * (3.0 * x[0] * x[1]).sin(),
            |x| 1.0 + 0.2 * x[0] + 0.1 * x[1],
            k,
        )
        .unwrap()
    }

    fn source(x: [f64; 2]) -> c64 {
        c64::new(1.0 + x[0] * x[0], x[1] - 0.5)
    }

    #[test]
    fn zero_trace_and_zero_load() {
        let m = mixed_mesh(3, 4);
        let c = rough_coeff(&m, 3.0);
        let els = element_problems(&m, &c).unwrap();
        for lp in &els {
            let z = harmonic_extension(lp, &vec![c64::new(0.0, 0.0); lp.trace.len()]).unwrap();
            assert!(z.iter().all(|v| v.norm() == 0.0));
            let b = bubble_solve(&m, lp, &vec![c64::new(0.0, 0.0); m.num_nodes()]).unwrap();
            assert!(b.iter().all(|v| v.norm() == 0.0));
        }
        let us = build_u_s(&m, &c, &els, &vec![c64::new(0.0, 0.0); m.num_nodes()]).unwrap();
        assert!(us.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn decomposition_reproduces_reference() {
        let m = mixed_mesh(4, 4);
        let c = rough_coeff(&m, 6.0);
        let g = |x: [f64; 2], _| c64::new(x[1], 1.0);
        let load = global_load(&m, &source, Some(&g)).unwrap();
        let u = solve_reference(&m, &c, &load).unwrap();
        let els = element_problems(&m, &c).unwrap();
        let d = decompose(&m, &els, &u, &load).unwrap();
        let e = assemble_energy_gram(&m, &c, &m.whole_patch()).unwrap();
        let diff: Vec<c64> = (0..u.len()).map(|i| d.harmonic[i] + d.bubble[i] - u[i]).collect();
        assert!(gram_norm_sqr(&e, &diff).sqrt() <= 1e-10 * gram_norm_sqr(&e, &u).sqrt());
    }

    #[test]
    fn left_orthogonality_per_element() {
        let m = mixed_mesh(4, 4);
        let c = rough_coeff(&m, 6.0);
        let load = global_load(&m, &source, None).unwrap();
        let u = solve_reference(&m, &c, &load).unwrap();
        let els = element_problems(&m, &c).unwrap();
        for lp in &els {
            let uh = extend_global(&m, lp, &u).unwrap();
            let ub = bubble_solve(&m, lp, &load).unwrap();
            let eg = assemble_energy_gram(&m, &c, &lp.patch).unwrap();
            let a = lp.matrix.form(&uh, &ub).norm();
            let scale = (gram_norm_sqr(&eg, &uh) * gram_norm_sqr(&eg, &ub)).sqrt();
            assert!(a <= 1e-9 * scale);
        }
    }

    #[test]
    fn particular_with_zero_flux_is_bubble() {
        let m = mixed_mesh(3, 4);
        let c = rough_coeff(&m, 2.0);
        let load = global_load(&m, &source, None).unwrap();
        let zero = vec![c64::new(0.0, 0.0); m.num_nodes()];
        let els = element_problems(&m, &c).unwrap();
        for lp in &els {
            assert_eq!(particular_solve(&m, lp, &load, &zero).unwrap(), bubble_solve(&m, lp, &load).unwrap());
        }
        // flux on an interior element has no effect
        let g = |_: [f64; 2], _| c64::new(1.0, 0.0);
        let flux = crate::fem::assemble_boundary_load(&m, &g, &m.whole_patch()).unwrap();
        let mid = &els[m.element_index(1, 1)];
        assert_eq!(particular_solve(&m, mid, &load, &flux).unwrap(), bubble_solve(&m, mid, &load).unwrap());
    }

    #[test]
    fn oversampling_bubble_vanishes_for_remote_source() {
        let m = mixed_mesh(6, 4);
        let c = rough_coeff(&m, 3.0);
        let f = |x: [f64; 2]| {
            if x[0] > 0.8 && x[1] > 0.8 {
                c64::new(1.0, 0.0)
            } else {
                c64::new(0.0, 0.0)
            }
        };
        let load = global_load(&m, &f, None).unwrap();
        let e = m.edge_id(Orientation::Vertical, [1, 1]).unwrap();
        let lp = oversampling_problem(&m, &c, e).unwrap();
        let ub = oversampling_bubble(&m, &lp, &load).unwrap();
        assert!(ub.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn u_s_locality_and_zero_at_coarse_nodes() {
        let m = mixed_mesh(6, 4);
        let c = rough_coeff(&m, 3.0);
        // source inside element (4, 4) only
        let f = |x: [f64; 2]| {
            let inside = x[0] > 4.0 / 6.0 && x[0] < 5.0 / 6.0 && x[1] > 4.0 / 6.0 && x[1] < 5.0 / 6.0;
            c64::new(if inside { 1.0 } else { 0.0 }, 0.0)
        };
        let load = global_load(&m, &f, None).unwrap();
        let els = element_problems(&m, &c).unwrap();
        let us = build_u_s(&m, &c, &els, &load).unwrap();
        for p in m.coarse_nodes() {
            assert_eq!(us[m.coarse_point_node(*p)], c64::new(0.0, 0.0));
        }
        // elements whose edges all have oversampling domains away from (4,4)
        // carry no u^s
        let src = m.element_index(4, 4);
        let mut active = vec![false; m.num_elements()];
        for e in 0..m.edges().len() {
            if oversampling_domain(&m, e).unwrap().elements.contains(&src) {
                for t in m.edge_elements(e) {
                    active[t] = true;
                }
            }
        }
        for t in 0..m.num_elements() {
            if !active[t] {
                let vals = gather(&m, &m.element_patch(t), &us);
                assert!(vals.iter().all(|v| v.norm() == 0.0), "element {t}");
            }
        }
        assert!(us.iter().any(|v| v.norm() > 0.0));
    }

    #[test]
    fn local_coercivity_under_mesh_assumption() {
        // H = 1/8, k = 2: H k = 0.25 well below 1/sqrt(2)
        let m = mixed_mesh(8, 4);
        let c = rough_coeff(&m, 2.0);
        let t = m.element_index(3, 3);
        let patch = m.element_patch(t);
        let a = assemble_form(&m, &c, &patch, Form::Helmholtz).unwrap();
        let stiff = {
            let mut c0 = c.clone();
            c0.k = 0.0;
            assemble_form(&m, &c0, &patch, Form::Energy).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut v: Vec<c64> = (0..patch.num_nodes())
                .map(|_| c64::new(uniform(&mut rng), uniform(&mut rng)))
                .collect();
            // vanish on the bottom edge of T
            for ix in 0..patch.nodes_x() {
                v[ix] = c64::new(0.0, 0.0);
            }
            let re = a.form(&v, &v).re;
            assert!(re >= 0.5 * stiff.form(&v, &v).re - 1e-12);
        }
    }
}
