//! Conditional flow matching with independent, optimal-transport and
//! conditional optimal-transport couplings.
//!
//! The pieces, bottom-up:
//!
//! * [`nn`]: the MLP vector field, its gradient and Adam.
//! * [`ot`]: exact assignment between equal-size batches and the pairing costs.
//! * [`condproc`]: PCA encoding and K-means discretization of conditions.
//! * [`coupling`]: noise priors and the three pairing strategies.
//! * [`flow`]: the training loop.
//! * [`ode`]: euler, midpoint and dopri5 sampling with NFE accounting.
//! * [`metrics`]: W2, DTW, DBA and trajectory variance.
//! * [`tasks`]: seeded synthetic datasets.
//! * [`eval`]: generation plus metrics against fresh target draws.
//! * [`io`]: configs, checkpoints and CSV artifacts.

pub mod condproc;
pub mod coupling;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod ode;
pub mod ot;
pub mod tasks;

pub use error::{Error, Result};
