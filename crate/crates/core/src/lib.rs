//! Multiscale finite elements for heterogeneous, high-frequency Helmholtz
//! problems on the unit square.
//!
//! The solution is split as `u = u^h + u^b`: a Helmholtz-harmonic part fixed by
//! its values on the coarse skeleton and a bubble part computed element by
//! element. The skeleton values are approximated with nodal tent functions
//! plus a few spectral edge functions per coarse edge, obtained offline from a
//! singular value decomposition of a restriction operator on an oversampling
//! patch. The online stage is a small dense Galerkin system.
//!
//! Module overview:
//!
//! - [`mesh`]: two-level grid, boundary classification, oversampling domains
//! - [`fem`]: Q1 assembly on the fine grid and the reference solver
//! - [`linalg`]: sparse/dense LU and the Hermitian generalized eigensolver
//! - [`local`]: harmonic extensions, bubbles, the special function `u^s`
//! - [`basis`]: nodal and edge bases, offline stage, basis cache
//! - [`galerkin`]: coarse system, online solve, error metrics
//! - [`problems`]: coefficient and source recipes, run configs, sweeps

pub mod basis;
pub mod error;
pub mod fem;
pub mod galerkin;
pub mod linalg;
pub mod local;
pub mod mesh;
pub mod problems;

pub use error::{Error, Result};
pub use linalg::c64;
