//! Allocation accounting for solver kernels.
//!
//! Kernels charge the meter for every working buffer they allocate
//! (excluding their inputs and the factors they were handed). A charge is
//! released when its guard drops. [`measure`] reports the peak number of
//! bytes simultaneously charged on the current thread while a closure runs.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// RAII guard for a charged buffer.
#[must_use = "the charge is released as soon as the guard drops"]
pub struct Charge(usize);

impl Drop for Charge {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(c.get().saturating_sub(self.0)));
    }
}

pub(crate) fn charge_bytes(bytes: usize) -> Charge {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| p.set(p.get().max(now)));
    });
    Charge(bytes)
}

/// Charges room for `n` doubles.
pub(crate) fn charge_f64(n: usize) -> Charge {
    charge_bytes(n * std::mem::size_of::<f64>())
}

/// Runs `f` and returns its output together with the peak workspace bytes it charged.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let outer_current = CURRENT.with(|c| c.replace(0));
    let outer_peak = PEAK.with(|p| p.replace(0));
    let out = f();
    let inner_peak = PEAK.with(|p| p.get());
    CURRENT.with(|c| c.set(outer_current));
    PEAK.with(|p| p.set(outer_peak.max(outer_current + inner_peak)));
    (out, inner_peak)
}
