//! Reduced-order surrogates for parameterized time-dependent PDEs.
//!
//! Snapshot tensors are factorized into parameter, space and time cores by a
//! tensor-train SVD. The time core is extrapolated with an operator-inference
//! ODE, and the parameter core at unseen parameters is recovered from
//! fixed-time slice surrogates (the low-fidelity pipeline), optionally
//! corrected by a branch network trained on high-fidelity data (the
//! multi-fidelity pipeline).

pub mod bench;
pub mod error;
pub mod fom;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod opinf;
pub mod pipeline;
pub mod surrogate;
pub mod tt;

pub use error::{Error, Result};
