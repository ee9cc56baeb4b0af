//! Float formatting shared by every text format in the crate.

/// 17 significant digits: enough for any f64 to parse back bit-identically.
pub(crate) fn full(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Parses a finite decimal float; `nan`/`inf` spellings are rejected.
pub(crate) fn parse_finite(token: &str) -> Option<f64> {
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}
