//! Fixed rank kriging under the spatial mixed effects model, with EM and
//! AECM estimation of the variance parameters and the bisquare bandwidth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod io;
pub mod model;
pub mod numerics;
pub mod prediction;
pub mod simulation;
pub mod special;

pub use error::{Error, ErrorKind, Result};
