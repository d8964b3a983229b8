//! Instrumented FLOP counter plus the closed-form costs it shares with the
//! analytic profiler.
//!
//! Convention (multiply-add = 2 FLOPs; stated in every report):
//! - matmul m×k · k×n: 2·m·k·n
//! - linear with bias: 2·rows·in·out + rows·out
//! - conv3d: 2·B·Cout·(Cin/g)·k³·OV, plus B·Cout·OV for bias
//! - layernorm: 8 per element; softmax: 5 per element
//! - gelu and other elementwise ops: 1 per element
//! - trilinear upsample: 15 per output element (7 lerps × ~2 plus index math
//!   amortized — a documented convention, not a measurement)
//! - pure data movement (reshape/permute/concat): 0
//!
//! The tensor ops report their cost here during a real forward pass; the
//! profiler computes the same formulas analytically. A test pins the two
//! paths to exact equality.

use std::cell::Cell;

pub const LAYERNORM_FLOPS_PER_ELEM: u64 = 8;
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;
pub const GELU_FLOPS_PER_ELEM: u64 = 1;
pub const ELEMWISE_FLOPS_PER_ELEM: u64 = 1;
pub const TRILINEAR_FLOPS_PER_OUT_ELEM: u64 = 15;

pub fn matmul_flops(batch: u64, m: u64, k: u64, n: u64) -> u64 {
    2 * batch * m * k * n
}

pub fn linear_flops(rows: u64, inf: u64, outf: u64) -> u64 {
    2 * rows * inf * outf + rows * outf
}

pub fn conv3d_flops(bsz: u64, cin_per_group: u64, cout: u64, k3: u64, out_voxels: u64) -> u64 {
    2 * bsz * cout * cin_per_group * k3 * out_voxels + bsz * cout * out_voxels
}

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Record `n` FLOPs if a measurement scope is active on this thread.
pub(crate) fn record(n: u64) {
    COUNTER.with(|c| {
        if let Some(cur) = c.get() {
            c.set(Some(cur + n));
        }
    });
}

/// Run `f` with FLOP instrumentation enabled and return (result, flops).
///
/// Each tensor op records its full analytic cost on the thread that built it
/// (before any kernel-internal parallelism), so counts are exact as long as
/// the ops themselves are issued from the calling thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    COUNTER.with(|c| {
        let prev = c.replace(Some(0));
        let out = f();
        let count = c.replace(prev).unwrap_or(0);
        (out, count)
    })
}
