//! End-to-end checks and the independent oracles they compare against.
//!
//! Each check returns a [`CheckReport`] instead of asserting, so the same
//! code backs both the `acceptance` test target and the CLI `selftest`
//! subcommand.

pub mod acceptance;
pub mod oracle;
pub mod scalar_em;

/// Outcome of one acceptance check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Short stable identifier, e.g. "quadrature-em-fixed-point".
    pub name: &'static str,
    pub passed: bool,
    /// Human-readable numbers behind the verdict.
    pub detail: String,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}
