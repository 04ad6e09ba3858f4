//! Finite-element toolkit for the regularized p-Stokes equations of glacier
//! flow, with adjoint-based identification of the ice rheology `B` and the
//! basal friction coefficient `tau` from surface velocity observations.
//!
//! The building blocks, bottom-up:
//!
//! * [`mesh`]: triangle meshes with tagged boundary segments and a slab generator.
//! * [`spaces`]: Taylor-Hood P2/P1 spaces, coefficient spaces, quadrature, norms.
//! * [`tensor`]: pointwise power-law operators and their derivatives.
//! * [`assembly`]: residuals, Jacobians and the adjoint bilinear form.
//! * [`forward`]: damped Newton solver for the nonlinear flow problem.
//! * [`adjoint`]: observations, misfit and the dual equation.
//! * [`inversion`]: Tikhonov cost, gradients, projected descent, Taylor tests.
//! * [`verify`]: numerical checks of the pointwise and discrete inequalities.
//! * [`config`]: `key = value` run configuration shared with the CLI.

pub mod adjoint;
pub mod assembly;
pub mod config;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod mesh;
pub mod quadrature;
pub mod sparse;
pub mod spaces;
pub mod tensor;
pub mod verify;

pub use error::{Error, MeshError, Result};
