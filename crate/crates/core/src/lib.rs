//! Finite-element solver for the incompressible Navier-Stokes equations with
//! grad-div stabilization, plus a POD-Galerkin reduced-order-model pipeline in
//! which the convection term may be discretized differently offline
//! (skew-symmetric) and online (EMAC).
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`mesh`]: triangulations, boundary markers, quadrature rules
//! - [`fespace`]: Taylor-Hood P2/P1 spaces, dof maps, Dirichlet data
//! - [`assembly`]: sparse operators, convection forms, integral norms
//! - [`linsolve`]: sparse saddle-point direct solver, dense symmetric eigensolver
//! - [`fom`]: full-order time stepping and snapshot recording
//! - [`pod`]: correlation matrix, POD basis, spectral diagnostics
//! - [`rom`]: reduced operators, online time stepping, lifting
//! - [`diagnostics`]: error series, conserved quantities, drag/lift functionals
//! - [`io`]: binary snapshot/basis/reduced-system formats and CSV reports
//! - [`verify`]: self-check suites backing the `poddiv verify` command

pub mod assembly;
pub mod diagnostics;
pub mod fespace;
pub mod fom;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod pod;
pub mod rom;
pub mod verify;
