//! A laboratory for learning hyperparameters of iterative reconstruction
//! schemes at equilibrium. The crate implements restarted truncated unrolled
//! proximal schemes, five hypergradient estimators (exact equilibrium
//! differentiation, Neumann-truncated, Jacobian-free, full truncated
//! backpropagation, and the restarted Jacobian-free step), and numerical
//! certification of the approximation-error bounds relating them, on
//! problems small enough for exact oracles.

pub mod bilevel;
pub mod bounds_lab;
pub mod cli;
pub mod core;
pub mod error;
pub mod diff;
pub mod forward_models;
pub mod group_norms;
pub mod hypergrad;
pub mod io;
pub mod linalg;
pub mod models;
pub mod pnp;
pub mod scheme;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};
