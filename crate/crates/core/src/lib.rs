//! Forward PIDE pricing and Tikhonov calibration of local volatility and
//! jump-size distributions.

pub mod adjoint;
pub mod analytic;
pub mod error;
pub mod grid;
pub mod io;
pub mod levy_tail;
pub mod mc;
pub mod pide;
pub mod regularization;
pub mod splitting;
pub mod surface;
pub mod synthetic;
pub mod tridiag;
pub mod workflow;

pub use adjoint::{AdjointMode, AdjointSurface, Observations, Residual};
pub use error::{Error, Result};
pub use grid::{Grid, MarketParams};
pub use levy_tail::{JumpDensity, TailFunction};
pub use pide::{PideModel, WeightMode};
pub use surface::{PriceSurface, VolSurface};
