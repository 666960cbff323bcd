//! Per-thread multiply counter.
//!
//! Every kernel reports the number of f32 multiplications it actually
//! executes (one fused multiply-accumulate counts as one). Divisions,
//! square roots, exponentials and comparisons are not counted; this is the
//! convention under which a vanilla ViT-B/16 at 224 px costs about 17.6 G
//! ops. Counts are added in bulk on the thread that invoked the kernel —
//! parallel kernels report their full cost before dispatching — so a
//! forward pass can be measured by snapshotting around it, and concurrent
//! measurements never bleed into each other.

use std::cell::Cell;

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
    static TIE_FAULT: Cell<bool> = const { Cell::new(false) };
}

#[inline]
pub fn add(n: u64) {
    MULS.with(|c| c.set(c.get() + n));
}

/// Running total on this thread since the last [`reset`].
#[inline]
pub fn total() -> u64 {
    MULS.with(Cell::get)
}

pub fn reset() {
    MULS.with(|c| c.set(0));
}

// Test-support fault injection: flips every tie-break from lowest-index to
// highest-index so that self-test suites can prove they detect a broken
// ordering contract. Never set outside `selftest`.
pub fn set_tie_break_fault(enabled: bool) {
    TIE_FAULT.with(|c| c.set(enabled));
}

#[inline]
pub fn tie_break_fault() -> bool {
    TIE_FAULT.with(Cell::get)
}
