//! Per-thread invocation counters for code paths toggled by configuration
//! flags. Training runs on the calling thread, so a test can reset, run and
//! inspect without interference from other tests.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, u64>> = const { RefCell::new(BTreeMap::new()) };
}

pub fn hit(name: &'static str) {
    COUNTS.with(|c| *c.borrow_mut().entry(name).or_insert(0) += 1);
}

pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

pub fn count(name: &str) -> u64 {
    COUNTS.with(|c| c.borrow().get(name).copied().unwrap_or(0))
}

pub fn snapshot() -> BTreeMap<&'static str, u64> {
    COUNTS.with(|c| c.borrow().clone())
}
