//! Multiplicative-noise LQG compensator synthesis, exact second-moment
//! analysis of the closed loop, Monte-Carlo simulation, and distribution-free
//! anomaly detector thresholds tuned from residual moments.

pub mod detector;
pub mod error;
pub mod matops;
pub mod model;
pub mod moments;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};

/// Serializes a matrix as row-major nested arrays, the layout of the config
/// files.
pub fn serde_matrix<S: serde::Serializer>(m: &matops::Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.row_iter() {
        seq.serialize_element(&row.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}
