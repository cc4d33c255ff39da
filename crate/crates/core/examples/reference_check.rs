//! Compare fine solutions at `h` and `h/2` for a sequence of meshes.

use helmholtz_msfem::problems::{verify_reference, ProblemSpec, RunConfig};

fn main() -> helmholtz_msfem::Result<()> {
    let mut cfg = RunConfig::desk_plane_wave();
    cfg.problem = ProblemSpec::plane_wave(16.0);
    cfg.n_h = 4;
    for refine in [8, 16, 32] {
        cfg.refine = refine;
        println!("{}", verify_reference(&cfg)?);
    }
    Ok(())
}
