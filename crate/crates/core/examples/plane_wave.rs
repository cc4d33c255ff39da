//! Plane wave in a homogeneous medium: m-sweep of both coarse methods.
//!
//! `cargo run --release --example plane_wave`

use helmholtz_msfem::galerkin::Method;
use helmholtz_msfem::problems::{run_sweep, ProblemSpec, RunConfig};

fn main() -> helmholtz_msfem::Result<()> {
    let mut cfg = RunConfig::desk_plane_wave();
    cfg.problem = ProblemSpec::plane_wave(16.0);
    cfg.n_h = 8;
    cfg.refine = 16;
    cfg.m_list = (0..=5).collect();
    cfg.methods = vec![Method::Ritz, Method::Petrov];

    let out = run_sweep(&cfg)?;
    if let Some(e) = out.reference_vs_exact {
        println!("fine reference vs exact: L2 {:.3e}, energy {:.3e}", e.l2, e.energy);
    }
    println!("{:>7} {:>2} {:>6} {:>10} {:>10}", "method", "m", "dim", "e_L2", "e_H");
    for r in &out.reports {
        println!("{:>7} {:>2} {:>6} {:>10.3e} {:>10.3e}", r.method, r.m, r.coarse_dim, r.e_l2, r.e_h);
    }
    Ok(())
}
