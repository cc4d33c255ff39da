//! Singular values of the restriction operator of one interior edge.

use helmholtz_msfem::problems::{spectrum, ProblemSpec, RunConfig};

fn main() -> helmholtz_msfem::Result<()> {
    let mut cfg = RunConfig::desk_plane_wave();
    cfg.problem = ProblemSpec::plane_wave(16.0);
    cfg.n_h = 8;
    cfg.refine = 16;
    let mesh = cfg.problem.mesh(cfg.n_h, cfg.refine)?;
    let edge = (0..mesh.edges().len())
        .find(|&e| {
            let ed = mesh.edges()[e];
            ed.start == [3, 3] && ed.end() == [4, 3]
        })
        .expect("edge exists");

    let basis = spectrum(&cfg, edge)?;
    let first = basis.lambdas[0];
    for (j, l) in basis.lambdas.iter().enumerate() {
        println!("{:>2} {:.6e} {:.3e}", j + 1, l, l / first);
    }
    Ok(())
}
