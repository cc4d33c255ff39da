//! Split of a fine solution into its element-wise harmonic and bubble parts,
//! and the size of the special harmonic part `u^s`.

use helmholtz_msfem::c64;
use helmholtz_msfem::fem::{assemble_energy_gram, gram_norm_sqr, solve_reference};
use helmholtz_msfem::local::{build_u_s, decompose, element_problems};
use helmholtz_msfem::problems::ProblemSpec;

fn main() -> helmholtz_msfem::Result<()> {
    let p = ProblemSpec::random_mixed(3, 8.0);
    let mesh = p.mesh(8, 8)?;
    let coeff = p.coefficients(&mesh)?;
    let load = p.load(&mesh)?;
    let u = solve_reference(&mesh, &coeff, &load)?;
    let elements = element_problems(&mesh, &coeff)?;
    let energy = assemble_energy_gram(&mesh, &coeff, &mesh.whole_patch())?;
    let norm = |v: &[c64]| gram_norm_sqr(&energy, v).sqrt();

    let d = decompose(&mesh, &elements, &u, &load)?;
    let sum: Vec<c64> = (0..u.len()).map(|i| d.harmonic[i] + d.bubble[i] - u[i]).collect();
    let us = build_u_s(&mesh, &coeff, &elements, &load)?;
    println!("||u||_H     {:.6e}", norm(&u));
    println!("||u^h||_H   {:.6e}", norm(&d.harmonic));
    println!("||u^b||_H   {:.6e}", norm(&d.bubble));
    println!("||u^s||_H   {:.6e}", norm(&us));
    println!("||u^h + u^b - u||_H / ||u||_H = {:.3e}", norm(&sum) / norm(&u));
    Ok(())
}
