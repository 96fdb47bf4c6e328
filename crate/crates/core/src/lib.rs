//! Homogenization laboratory for monotone elliptic operators on periodically
//! perforated domains in two dimensions.
//!
//! The crate covers the reference cell geometry, monotone vector fields,
//! periodic corrector problems and the effective operator, fine-scale and
//! homogenized boundary value problems, two-scale approximations, the
//! hole-filling extension operator, large-scale regularity measurements, and
//! the experiment campaigns that tie them together.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod analytic;
pub mod campaign;
pub mod cell;
pub mod error;
pub mod extension;
pub mod fem;
pub mod geometry;
pub mod linalg;
pub mod monotone;
pub mod pde;
pub mod regularity;
pub mod twoscale;

pub use error::{Error, Result};
pub use geometry::{
    build_cell_mesh, build_domain_mesh, build_full_cell_mesh, build_torus_mesh, layer_sets,
    DomainMesh, EdgeTag, HoleSpec, LayerSets, Mesh, PerforatedCell, Rect,
};
pub use monotone::{audit_structure, make_linear, make_rational, AuditReport, VectorField};
