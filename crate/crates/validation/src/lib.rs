//! Holds the end-to-end acceptance suite in `tests/acceptance.rs`.
//!
//! The suite sits in its own package so that it is the last test target
//! of a workspace run: it trains real models for hours and fails on any
//! unmet criterion, and cargo stops at the first failing target.
