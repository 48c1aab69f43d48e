//! Epoch-scope region execution: the dynamic idempotency oracle and
//! read/write-set recording.
//!
//! A region is a kernel, one CTA's execution, or one iteration of a
//! top-level loop in one CTA. Loop iterations are executed by carving the
//! kernel into prefix/iteration/suffix kernels with adjusted bounds; shared
//! memory is threaded between the pieces explicitly.

use super::{run_kernel, KernelRun, MemoryImage, RwRecorder, SharedMem};
use super::{AccessEvent, Loc};
use crate::exec::ExecFault;
use crate::lang::ast::*;
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub enum Region {
    Kernel { kernel: String },
    Cta { kernel: String, cta: i64 },
    /// One iteration (by iterator value) of the top-level loop at
    /// `body_index`, executed by one CTA.
    LoopIter { kernel: String, body_index: usize, cta: i64, iter_value: i64 },
}

impl Region {
    pub fn kernel_name(&self) -> &str {
        match self {
            Region::Kernel { kernel }
            | Region::Cta { kernel, .. }
            | Region::LoopIter { kernel, .. } => kernel,
        }
    }
}

/// Dynamic read/write sets of one region execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RWRecord {
    pub read_set: BTreeSet<Loc>,
    pub write_set: BTreeSet<Loc>,
    /// Locations read (or live-in) before being written: the minimal undo
    /// log contents.
    pub overwritten_live_in: BTreeSet<Loc>,
    /// Raw event order, for consistency checks.
    pub events: Vec<(AccessEvent, Loc)>,
}

impl RWRecord {
    pub fn from_events(events: Vec<(AccessEvent, Loc)>) -> RWRecord {
        let mut rec = RWRecord { events: events.clone(), ..Default::default() };
        for (ev, loc) in events {
            match ev {
                AccessEvent::Read => {
                    if !rec.write_set.contains(&loc) {
                        rec.overwritten_live_in.insert(loc.clone());
                    }
                    rec.read_set.insert(loc);
                }
                AccessEvent::Write => {
                    rec.write_set.insert(loc);
                }
            }
        }
        // Only keep live-ins that are actually overwritten.
        rec.overwritten_live_in =
            rec.overwritten_live_in.intersection(&rec.write_set).cloned().collect();
        rec
    }
}

fn stmts_contain_atomic(body: &[StmtNode]) -> bool {
    body.iter().any(|n| match &n.stmt {
        Stmt::Atomic { .. } => true,
        Stmt::If { then_body, else_body, .. } => {
            stmts_contain_atomic(then_body) || stmts_contain_atomic(else_body)
        }
        Stmt::Loop { body, .. } => stmts_contain_atomic(body),
        _ => false,
    })
}

pub fn region_contains_atomic(unit: &ProgramUnit, region: &Region) -> bool {
    let Some(kernel) = unit.kernel(region.kernel_name()) else { return false };
    match region {
        Region::Kernel { .. } | Region::Cta { .. } => stmts_contain_atomic(&kernel.body),
        Region::LoopIter { body_index, .. } => match kernel.body.get(*body_index) {
            Some(StmtNode { stmt: Stmt::Loop { body, .. }, .. }) => stmts_contain_atomic(body),
            _ => false,
        },
    }
}

fn loop_parts(kernel: &KernelProgram, body_index: usize) -> Option<(IterId, GridScalar, GridScalar, GridScalar)> {
    match kernel.body.get(body_index).map(|n| &n.stmt) {
        Some(Stmt::Loop { iter, lo, hi, step, .. }) => Some((*iter, *lo, *hi, *step)),
        _ => None,
    }
}

/// Kernel containing only the statements before the loop plus the loop
/// limited to iterator values below `upto`.
pub fn prefix_kernel(kernel: &KernelProgram, body_index: usize, upto: i64) -> KernelProgram {
    let mut k = kernel.clone();
    k.body.truncate(body_index + 1);
    if let Stmt::Loop { hi, .. } = &mut k.body[body_index].stmt {
        *hi = GridScalar::constant(upto);
    } else {
        panic!("body_index does not name a loop");
    }
    k
}

/// Kernel running exactly the iterations `[from, from + count*step)` of the
/// loop, with everything before and after stripped.
pub fn iteration_kernel(
    kernel: &KernelProgram,
    body_index: usize,
    from: i64,
    count: i64,
) -> KernelProgram {
    let (_, _, _, step) = loop_parts(kernel, body_index).expect("loop at body_index");
    let mut k = kernel.clone();
    let mut node = k.body.swap_remove(body_index);
    if let Stmt::Loop { lo, hi, .. } = &mut node.stmt {
        *lo = GridScalar::constant(from);
        // from + count*step, kept grid-symbolic so ctadim-scaled steps work.
        *hi = GridScalar::constant(from)
            .add(&step.mul(&GridScalar::constant(count)).expect("constant scale is linear"));
    }
    k.body = vec![node];
    k
}

/// Kernel that resumes at iterator value `from` and runs through the end of
/// the original kernel (loop remainder plus post-loop statements).
pub fn resume_kernel(kernel: &KernelProgram, body_index: usize, from: i64) -> KernelProgram {
    let mut k = kernel.clone();
    k.body.drain(..body_index);
    if let Stmt::Loop { lo, .. } = &mut k.body[0].stmt {
        *lo = GridScalar::constant(from);
    } else {
        panic!("body_index does not name a loop");
    }
    k
}

fn run_piece(
    unit: &ProgramUnit,
    kernel: &KernelProgram,
    grid: GridConfig,
    cta: Option<i64>,
    shared_init: SharedMem,
    img: &mut MemoryImage,
    recorder: Option<&mut RwRecorder>,
) -> Result<SharedMem, ExecFault> {
    let run = KernelRun {
        unit,
        kernel,
        grid,
        cta_filter: cta.map(|c| vec![c]),
        shared_init,
    };
    run_kernel(&run, img, recorder)
}

/// The dynamic idempotency oracle: true iff executing the region once and
/// twice from the same start state yields identical memory (global and, for
/// loop iterations, shared). Regions containing global atomics are
/// non-idempotent by fiat, without execution.
pub fn run_region_twice(
    unit: &ProgramUnit,
    region: &Region,
    grid: GridConfig,
    state: &MemoryImage,
) -> Result<bool, ExecFault> {
    if region_contains_atomic(unit, region) {
        return Ok(false);
    }
    let kernel = unit.kernel(region.kernel_name()).ok_or_else(|| ExecFault::Invalid {
        msg: format!("unknown kernel `{}`", region.kernel_name()),
    })?;
    let mut base = state.clone();
    super::ensure_allocs(unit, &grid, &mut base);
    match region {
        Region::Kernel { .. } => {
            let mut once = base.clone();
            run_piece(unit, kernel, grid, None, SharedMem::new(), &mut once, None)?;
            let mut twice = once.clone();
            run_piece(unit, kernel, grid, None, SharedMem::new(), &mut twice, None)?;
            Ok(once == twice)
        }
        Region::Cta { cta, .. } => {
            let mut once = base.clone();
            run_piece(unit, kernel, grid, Some(*cta), SharedMem::new(), &mut once, None)?;
            let mut twice = once.clone();
            run_piece(unit, kernel, grid, Some(*cta), SharedMem::new(), &mut twice, None)?;
            Ok(once == twice)
        }
        Region::LoopIter { body_index, cta, iter_value, .. } => {
            let pre = prefix_kernel(kernel, *body_index, *iter_value);
            let mut img = base.clone();
            let shared =
                run_piece(unit, &pre, grid, Some(*cta), SharedMem::new(), &mut img, None)?;
            let iter = iteration_kernel(kernel, *body_index, *iter_value, 1);
            let mut img1 = img.clone();
            let shared1 =
                run_piece(unit, &iter, grid, Some(*cta), shared.clone(), &mut img1, None)?;
            let mut img2 = img1.clone();
            let shared2 =
                run_piece(unit, &iter, grid, Some(*cta), shared1.clone(), &mut img2, None)?;
            Ok(img1 == img2 && shared1 == shared2)
        }
    }
}

/// Record the exact dynamic read/write sets of one region execution.
pub fn record_rw_sets(
    unit: &ProgramUnit,
    region: &Region,
    grid: GridConfig,
    state: &MemoryImage,
) -> Result<RWRecord, ExecFault> {
    let kernel = unit.kernel(region.kernel_name()).ok_or_else(|| ExecFault::Invalid {
        msg: format!("unknown kernel `{}`", region.kernel_name()),
    })?;
    let mut img = state.clone();
    super::ensure_allocs(unit, &grid, &mut img);
    let mut rec = RwRecorder::default();
    match region {
        Region::Kernel { .. } => {
            run_piece(unit, kernel, grid, None, SharedMem::new(), &mut img, Some(&mut rec))?;
        }
        Region::Cta { cta, .. } => {
            run_piece(unit, kernel, grid, Some(*cta), SharedMem::new(), &mut img, Some(&mut rec))?;
        }
        Region::LoopIter { body_index, cta, iter_value, .. } => {
            let pre = prefix_kernel(kernel, *body_index, *iter_value);
            let shared =
                run_piece(unit, &pre, grid, Some(*cta), SharedMem::new(), &mut img, None)?;
            let iter = iteration_kernel(kernel, *body_index, *iter_value, 1);
            run_piece(unit, &iter, grid, Some(*cta), shared, &mut img, Some(&mut rec))?;
        }
    }
    Ok(RWRecord::from_events(rec.events))
}
