//! Design-based average-treatment-effect estimation with Neumann-series
//! corrections to OLS regression adjustment.

pub mod cli;
pub mod combinatorics;
pub mod design_matrix;
pub mod envelopes;
pub mod error;
pub mod estimators;
pub mod folding;
pub mod oracle;
pub mod sampling;
pub mod simulation;
pub mod weights;

pub use error::{Error, Result};

/// Locale-independent rendering with 17 significant digits.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    format!("{v:.16e}")
}
