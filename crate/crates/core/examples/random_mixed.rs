//! Rough random medium with Dirichlet, Neumann and Robin sides; writes a CSV.

use helmholtz_msfem::problems::{run_sweep, write_csv, RunConfig};

fn main() -> helmholtz_msfem::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let mut cfg = RunConfig::desk_random_mixed(seed);
    cfg.problem.k = 8.0;
    cfg.n_h = 8;
    cfg.refine = 8;
    cfg.m_list = vec![1, 2, 3, 4];

    let out = run_sweep(&cfg)?;
    write_csv(std::io::stdout().lock(), &out.reports)?;
    Ok(())
}
