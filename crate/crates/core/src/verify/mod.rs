//! Self-verification suites: finite-difference gradient checks and scalar
//! loop oracles. Both produce a [`Report`] listing the worst error per check.

mod gradcheck;
mod oracle;

use std::fmt;

pub use gradcheck::{finite_difference_check, gradcheck_suite, primitive_cases, FdOutcome, GradcheckOptions, Precision};
pub use oracle::oracle_suite;

/// What a check exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Primitive(crate::OpKind),
    Block,
    Oracle,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub subject: Subject,
    pub precision: &'static str,
    /// Worst error observed over all seeds and tensors.
    pub worst: f64,
    /// Where the worst error came from, e.g. a tensor name.
    pub detail: String,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} {:<4} worst={:.3e} tol={:.0e} ({})",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.precision,
            self.worst,
            self.tol,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    /// Primitive kinds with at least one failing check.
    pub fn failing_ops(&self) -> Vec<crate::OpKind> {
        let mut ops: Vec<_> = self
            .failures()
            .filter_map(|r| match r.subject {
                Subject::Primitive(k) => Some(k),
                _ => None,
            })
            .collect();
        ops.sort();
        ops.dedup();
        ops
    }

    pub fn extend(&mut self, other: Report) {
        self.results.extend(other.results);
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.results.len(), failed)
    }
}
