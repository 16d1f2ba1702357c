//! Fault-injection switches for negative-control tests.
//!
//! The selftest harness flips these to prove a suite actually fails when
//! the math is wrong. They are process-global and default to off.

use std::sync::atomic::{AtomicBool, Ordering};

static SABOTAGE_MERGE: AtomicBool = AtomicBool::new(false);

/// When on, `merge_attention` perturbs its output slightly.
pub fn set_sabotage_merge(on: bool) {
    SABOTAGE_MERGE.store(on, Ordering::SeqCst);
}

pub(crate) fn merge_sabotaged() -> bool {
    SABOTAGE_MERGE.load(Ordering::Relaxed)
}
