use helmholtz_msfem::c64;
use helmholtz_msfem::fem::{assemble_energy_gram, assemble_form, assemble_sesquilinear, solve_reference, Form};
use helmholtz_msfem::galerkin::{compute_errors, galerkin_residual, solve_online, FineParts, Method};
use helmholtz_msfem::galerkin::assemble_coarse;
use helmholtz_msfem::basis::{assemble_trial_space, build_offline};
use helmholtz_msfem::local::{glued_bubbles, u_s_from_residues};
use helmholtz_msfem::problems::{run_sweep, ProblemSpec, RunConfig};

fn small(p: ProblemSpec) -> RunConfig {
    let mut cfg = RunConfig::desk_plane_wave();
    cfg.problem = p;
    cfg.n_h = 4;
    cfg.refine = 8;
    cfg.m_list = vec![0, 1, 2, 3, 4];
    cfg
}

#[test]
fn baseline_row_and_decay() {
    let out = run_sweep(&small(ProblemSpec::plane_wave(8.0))).unwrap();
    assert_eq!(out.offline_builds, 1);
    assert_eq!(out.reports.len(), 10);
    let ritz: Vec<f64> = out.reports.iter().filter(|r| r.method == Method::Ritz).map(|r| r.e_l2).collect();
    assert!(ritz.iter().all(|e| e.is_finite()));
    assert!(ritz[4] < 1e-3 * ritz[1], "{ritz:?}");
}

#[test]
fn mixed_boundary_problem_runs() {
    let out = run_sweep(&small(ProblemSpec::random_mixed(11, 6.0))).unwrap();
    for r in &out.reports {
        assert!(r.e_l2.is_finite() && r.e_h.is_finite(), "{r:?}");
        assert!(!r.flags.contains("error"));
    }
    let last = out.reports.iter().rev().find(|r| r.method == Method::Ritz).unwrap();
    assert!(last.e_h < 1e-2, "{last:?}");
}

#[test]
fn galerkin_orthogonality_end_to_end() {
    let p = ProblemSpec::mie(0.25, 4.0);
    let mesh = p.mesh(4, 8).unwrap();
    let coeff = p.coefficients(&mesh).unwrap();
    let load = p.load(&mesh).unwrap();
    let kmat = assemble_sesquilinear(&mesh, &coeff, &mesh.whole_patch()).unwrap();
    let off = build_offline(&mesh, &coeff, 3, Some(&load)).unwrap();
    let space = assemble_trial_space(&mesh, &off.elements, &off.nodal, &off.edges, 3).unwrap();
    let parts = FineParts {
        u_b: glued_bubbles(&mesh, &off.elements, &load).unwrap(),
        u_s: u_s_from_residues(&mesh, &off.elements, off.residues.as_ref().unwrap()).unwrap(),
    };
    let fnorm = load.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    for method in [Method::Ritz, Method::Petrov] {
        let cs = assemble_coarse(&mesh, &kmat, &space, method);
        for m in 0..=3 {
            let sol = solve_online(&cs, m, &kmat, &load, &parts).unwrap();
            assert!(galerkin_residual(&cs, m, &kmat, &load, &sol.u) <= 1e-8 * fnorm);
        }
    }
}

#[test]
fn error_is_linear_in_perturbation() {
    let p = ProblemSpec::plane_wave(6.0);
    let mesh = p.mesh(4, 4).unwrap();
    let coeff = p.coefficients(&mesh).unwrap();
    let u = solve_reference(&mesh, &coeff, &p.load(&mesh).unwrap()).unwrap();
    let whole = mesh.whole_patch();
    let mass = assemble_form(&mesh, &coeff, &whole, Form::Mass).unwrap();
    let energy = assemble_energy_gram(&mesh, &coeff, &whole).unwrap();
    let hat = mesh.node_index(5, 7);
    let errs: Vec<_> = [1e-3, 2e-3, 4e-3]
        .iter()
        .map(|&eps| {
            let mut v = u.clone();
            v[hat] += c64::new(eps, 0.0);
            compute_errors(&v, &u, &mass, &energy)
        })
        .collect();
    for w in errs.windows(2) {
        assert!((w[1].l2 / w[0].l2 - 2.0).abs() < 1e-9);
        assert!((w[1].energy / w[0].energy - 2.0).abs() < 1e-9);
    }
}
