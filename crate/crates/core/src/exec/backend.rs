//! Memory backend trait the SIMT engine drives.

use crate::lang::ast::{AtomicOp, MemSpace};
use std::fmt;

/// Who is accessing: attribution for traces and shared-memory routing.
#[derive(Debug, Clone, Copy)]
pub struct AccessCtx {
    pub cta: i64,
    pub warp: i64,
    /// Iteration ordinal of the anchored loop, when executing inside it.
    pub epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecFault {
    OutOfBounds { array: String, index: i64, cta: i64, tid: i64 },
    UnknownArray { array: String },
    BarrierDivergence { cta: i64, warp: i64 },
    Arith { msg: &'static str, cta: i64, tid: i64 },
    Invalid { msg: String },
}

impl fmt::Display for ExecFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecFault::OutOfBounds { array, index, cta, tid } => write!(
                f,
                "out-of-bounds access to {array}[{index}] by thread (cta={cta}, tid={tid})"
            ),
            ExecFault::UnknownArray { array } => write!(f, "unknown array `{array}`"),
            ExecFault::BarrierDivergence { cta, warp } => {
                write!(f, "barrier divergence in cta {cta}, warp {warp}")
            }
            ExecFault::Arith { msg, cta, tid } => {
                write!(f, "{msg} in thread (cta={cta}, tid={tid})")
            }
            ExecFault::Invalid { msg } => f.write_str(msg),
        }
    }
}

impl std::error::Error for ExecFault {}

/// Memory operations, lane-batched. `reads`/`writes` carry `(lane, index)`
/// and `(lane, index, value)` tuples for the active lanes, in lane order.
pub trait Backend {
    fn load(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        reads: &[(usize, i64)],
    ) -> Result<Vec<i64>, ExecFault>;

    fn store(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        writes: &[(usize, i64, i64)],
        through: bool,
    ) -> Result<(), ExecFault>;

    /// Atomics apply per lane in lane order (the canonical order).
    fn atomic(
        &mut self,
        ctx: &AccessCtx,
        op: AtomicOp,
        array: &str,
        ops: &[(usize, i64, i64)],
    ) -> Result<(), ExecFault>;

    fn clwb(&mut self, ctx: &AccessCtx, array: &str, addrs: &[(usize, i64)])
        -> Result<(), ExecFault>;

    fn l2wb(&mut self, ctx: &AccessCtx) -> Result<(), ExecFault>;

    fn sfence(&mut self, ctx: &AccessCtx) -> Result<(), ExecFault>;

    fn pcommit(&mut self, ctx: &AccessCtx) -> Result<(), ExecFault>;
}

pub fn apply_atomic(op: AtomicOp, old: i64, v: i64) -> i64 {
    match op {
        AtomicOp::Add => old.wrapping_add(v),
        AtomicOp::Min => old.min(v),
        AtomicOp::Max => old.max(v),
    }
}
