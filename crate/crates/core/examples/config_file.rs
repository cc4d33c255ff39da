//! Load a JSON run configuration and print its description.
//!
//! `cargo run --release --example config_file -- configs/mie.json`

use std::path::PathBuf;

use helmholtz_msfem::problems::{describe, RunConfig};

fn main() {
    let path: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/plane_wave.json").into())
        .into();
    match RunConfig::from_path(&path).and_then(|cfg| describe(&cfg)) {
        Ok(d) => println!("{d}"),
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            std::process::exit(1);
        }
    }
}
