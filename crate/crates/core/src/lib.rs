//! Library for uncertainty quantification and boundary control of 2D
//! incompressible channel flow past a rotating circular cylinder.
//!
//! The crate is organized around a pipeline:
//!
//! - [`mesh_fem`]: channel mesh generation and Taylor-Hood finite element
//!   assembly,
//! - [`ns_solver`]: semi-implicit time integration of the incompressible
//!   Navier-Stokes equations with force and shedding diagnostics,
//! - [`noise`]: spectral Brownian-motion representation of the stochastic
//!   boundary data,
//! - [`pce`]: multi-index bookkeeping and normalized Hermite chaos algebra,
//! - [`cs_solver`]: basis-pursuit recovery of sparse chaos coefficients from
//!   sample simulations,
//! - [`datadriven_basis`]: covariance recovery, Karhunen-Loeve mode
//!   extraction and the multi-fidelity reconstruction pipeline,
//! - [`control`]: velocity-tracking objective, adjoint solves and the
//!   gradient-descent control loop,
//! - [`config`]: experiment configuration shared by the CLI subcommands.

pub mod config;
pub mod control;
pub mod cs_solver;
pub mod datadriven_basis;
pub mod linalg;
pub mod mesh_fem;
pub mod noise;
pub mod ns_solver;
pub mod pce;
pub mod runner;
