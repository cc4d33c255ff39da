//! Periodic high-contrast inclusions driven by a localized source.

use helmholtz_msfem::galerkin::Method;
use helmholtz_msfem::problems::{describe, run_sweep, ProblemSpec, RunConfig};

fn main() -> helmholtz_msfem::Result<()> {
    let mut cfg = RunConfig::desk_mie();
    cfg.problem = ProblemSpec::mie(1.0 / 8.0, 6.0);
    cfg.n_h = 8;
    cfg.refine = 8;
    cfg.m_list = vec![1, 2, 3, 4, 5];
    cfg.methods = vec![Method::Ritz];
    println!("{}\n", describe(&cfg)?);

    for r in run_sweep(&cfg)?.reports {
        println!("m={} dim={:>4} e_L2={:.3e} e_H={:.3e}", r.m, r.coarse_dim, r.e_l2, r.e_h);
    }
    Ok(())
}
