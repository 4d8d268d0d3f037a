//! Forward and inverse modelling of single-atom cavity vacuum-field
//! imaging: photon statistics of a micromaser pumped through a nanohole
//! aperture, synthetic scans, Richardson–Lucy deconvolution, calibration
//! fits and a quantum-trajectory cross-check.

pub mod acceptance;
pub mod config;
pub mod deconv;
pub mod ensemble;
pub mod error;
pub mod fit;
pub mod io;
pub mod kinetics;
mod linalg;
pub mod manifest;
pub mod physics;
pub mod pipeline;
mod quadrature;
pub mod scan;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/steady-state.md")]
    mod steady_state {}
    #[doc = include_str!("../../../book/src/averaging.md")]
    mod averaging {}
    #[doc = include_str!("../../../book/src/scans.md")]
    mod scans {}
    #[doc = include_str!("../../../book/src/deconvolution.md")]
    mod deconvolution {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
