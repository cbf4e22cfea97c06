//! Process-wide counters for gradient computations and optimizer updates.
//!
//! Inference paths snapshot these before and after running; any change
//! means parameters or inputs were optimized during inference.

use std::sync::atomic::{AtomicU64, Ordering};

static BACKWARD_PASSES: AtomicU64 = AtomicU64::new(0);
static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static LOCAL_BACKWARD: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
    static LOCAL_STEPS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

pub(crate) fn record_backward() {
    BACKWARD_PASSES.fetch_add(1, Ordering::SeqCst);
    LOCAL_BACKWARD.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_optimizer_step() {
    OPTIMIZER_STEPS.fetch_add(1, Ordering::SeqCst);
    LOCAL_STEPS.with(|c| c.set(c.get() + 1));
}

/// Counter values. `thread_*` only count work done on the calling thread,
/// which keeps measurements stable while other tests train in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub backward_passes: u64,
    pub optimizer_steps: u64,
    pub thread_backward_passes: u64,
    pub thread_optimizer_steps: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        backward_passes: BACKWARD_PASSES.load(Ordering::SeqCst),
        optimizer_steps: OPTIMIZER_STEPS.load(Ordering::SeqCst),
        thread_backward_passes: LOCAL_BACKWARD.with(|c| c.get()),
        thread_optimizer_steps: LOCAL_STEPS.with(|c| c.get()),
    }
}

impl Counters {
    /// Work recorded on this thread since `earlier`.
    pub fn thread_delta(&self, earlier: &Counters) -> (u64, u64) {
        (
            self.thread_backward_passes - earlier.thread_backward_passes,
            self.thread_optimizer_steps - earlier.thread_optimizer_steps,
        )
    }
}
