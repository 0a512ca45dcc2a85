//! Joint embedding of two metric-measure spaces into a fixed reference space.
//!
//! The central quantity couples each input space to the reference space with
//! a Gromov-Wasserstein penalty and couples the two images by optimal
//! transport. [`ew::solve_ew_lambda`] minimizes its entropic relaxation by
//! block-coordinate descent over a chain-factored 4-plan.

pub mod error;
pub mod eval;
pub mod ew;
pub mod gw;
pub mod io;
pub mod numeric;
pub mod ot;
pub mod spaces;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
