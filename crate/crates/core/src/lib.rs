//! Flaky-test mining: rerun the test suites of many Python projects in
//! fresh environments, in declaration and in shuffled order, and classify
//! every test from the collected JUnit reports.

pub mod classifier;
pub mod cli;
pub mod execution;
pub mod input;
pub mod junit;
pub mod overview;
pub mod sandbox;
pub mod scheduler;
pub mod store;
