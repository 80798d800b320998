//! Registration of quasi-static ultrasound elastography frame sequences.

// `!(x > 0.0)` is used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod blockmatch;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod geom;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod registration;
pub mod regularizers;
pub mod rf;
pub mod sparse;
pub mod ussim;

pub use error::{Error, Result};
pub use mesh::{NodalField, Point, QuadMesh, QuadratureRule};
pub use rf::{ImageGeometry, RfImage};
