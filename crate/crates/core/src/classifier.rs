//! Flakiness verdicts from per-test outcomes.
//!
//! A list of outcomes is flaky if it holds at least one pass and at least one
//! failure or error. Failing and erroring alone is not flakiness, and skips
//! are no evidence either way. A test is then
//!
//! * non-order-dependent if some iteration is flaky within its same-order runs,
//! * order-dependent if only some iteration's random-order runs are flaky,
//! * infrastructure if its outcomes are flaky only when pooled across
//!   iterations,
//! * not flaky otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::RunOrder;
use crate::junit::{IterationKey, RunRecord, TestId, Verdict};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("outcome matrix of {0:?} has no verdicts")]
    EmptyMatrix(TestId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlakinessVerdict {
    NotFlaky,
    NonOrderDependent,
    OrderDependent,
    Infrastructure,
}

impl FlakinessVerdict {
    pub const ALL: [FlakinessVerdict; 4] = [
        FlakinessVerdict::NotFlaky,
        FlakinessVerdict::NonOrderDependent,
        FlakinessVerdict::OrderDependent,
        FlakinessVerdict::Infrastructure,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FlakinessVerdict::NotFlaky => "not flaky",
            FlakinessVerdict::NonOrderDependent => "non-order-dependent",
            FlakinessVerdict::OrderDependent => "order-dependent",
            FlakinessVerdict::Infrastructure => "infrastructure",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == label)
    }

    pub fn is_flaky(self) -> bool {
        self != FlakinessVerdict::NotFlaky
    }
}

impl std::fmt::Display for FlakinessVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Verdicts of one test, grouped by iteration and order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeMatrix {
    pub test: TestId,
    /// Each list is in run-index order.
    pub cells: BTreeMap<(IterationKey, RunOrder), Vec<Verdict>>,
}

impl OutcomeMatrix {
    pub fn new(test: TestId) -> Self {
        Self {
            test,
            cells: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, iteration: IterationKey, order: RunOrder, verdict: Verdict) {
        self.cells.entry((iteration, order)).or_default().push(verdict);
    }

    /// Number of runs in which the test appeared.
    pub fn appearances(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationKey> {
        let mut keys: Vec<&IterationKey> = self.cells.keys().map(|(k, _)| k).collect();
        keys.dedup();
        keys.into_iter()
    }

    /// Groups records by test; cells are filled in run-index order.
    pub fn from_records(records: &[RunRecord]) -> Vec<OutcomeMatrix> {
        let mut sorted: Vec<&RunRecord> = records.iter().collect();
        sorted.sort_by(|a, b| {
            (&a.test, &a.iteration, a.order, a.run_index).cmp(&(&b.test, &b.iteration, b.order, b.run_index))
        });
        let mut matrices: Vec<OutcomeMatrix> = Vec::new();
        for record in sorted {
            if matrices.last().is_none_or(|m| m.test != record.test) {
                matrices.push(OutcomeMatrix::new(record.test.clone()));
            }
            let matrix = matrices.last_mut().expect("pushed above");
            matrix.push(record.iteration.clone(), record.order, record.verdict);
        }
        matrices
    }
}

/// At least one pass and at least one failure or error.
pub fn is_flaky(verdicts: &[Verdict]) -> bool {
    let passed = verdicts.contains(&Verdict::Passed);
    let broken = verdicts.iter().any(|v| matches!(v, Verdict::Failed | Verdict::Error));
    passed && broken
}

fn flaky_within(matrix: &OutcomeMatrix, order: RunOrder) -> bool {
    matrix
        .cells
        .iter()
        .any(|((_, o), verdicts)| *o == order && is_flaky(verdicts))
}

pub fn decide_verdict(matrix: &OutcomeMatrix) -> Result<FlakinessVerdict, ClassifyError> {
    if matrix.appearances() == 0 {
        return Err(ClassifyError::EmptyMatrix(matrix.test.clone()));
    }
    if flaky_within(matrix, RunOrder::Same) {
        return Ok(FlakinessVerdict::NonOrderDependent);
    }
    if flaky_within(matrix, RunOrder::Random) {
        return Ok(FlakinessVerdict::OrderDependent);
    }
    let pooled: Vec<Verdict> = matrix.cells.values().flatten().copied().collect();
    Ok(if is_flaky(&pooled) {
        FlakinessVerdict::Infrastructure
    } else {
        FlakinessVerdict::NotFlaky
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderCounts {
    pub passed: u64,
    pub failed: u64,
    pub error: u64,
    pub skipped: u64,
}

impl OrderCounts {
    pub fn add(&mut self, verdict: Verdict) {
        match verdict {
            Verdict::Passed => self.passed += 1,
            Verdict::Failed => self.failed += 1,
            Verdict::Error => self.error += 1,
            Verdict::Skipped => self.skipped += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.passed + self.failed + self.error + self.skipped
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub same: OrderCounts,
    pub random: OrderCounts,
}

impl VerdictCounts {
    pub fn total(&self) -> u64 {
        self.same.total() + self.random.total()
    }
}

pub fn count_verdicts(matrix: &OutcomeMatrix) -> VerdictCounts {
    let mut counts = VerdictCounts::default();
    for ((_, order), verdicts) in &matrix.cells {
        let side = match order {
            RunOrder::Same => &mut counts.same,
            RunOrder::Random => &mut counts.random,
        };
        verdicts.iter().for_each(|v| side.add(*v));
    }
    counts
}
