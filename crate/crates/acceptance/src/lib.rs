//! Acceptance checks: oracle equivalences, gradient integrity, determinism
//! of the command-line pipeline, and the toy-scale reproduction.

pub mod criteria;
pub mod oracles;
pub mod toy;

/// Result of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}
