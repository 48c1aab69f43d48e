//! Flat-memory, cache-free functional interpreter: the failure-free oracle.
//!
//! Execution is deterministic under a canonical interleaving: warps step one
//! instruction each in round-robin order across all resident CTAs, and
//! atomics apply in lane order. Persist instructions (`st.wt`, `clwb`,
//! `l2wb`, `sfence`, `pcommit`) are memory-semantic no-ops here; crash
//! semantics belong to the timing simulator.

pub mod image;
pub mod region;

#[cfg(test)]
mod tests;

pub use image::MemoryImage;
pub use region::{record_rw_sets, run_region_twice, Region, RWRecord};

use crate::exec::{self, AccessCtx, Backend, ExecFault, StepSignal};
use crate::lang::ast::*;
use std::collections::BTreeMap;

/// Per-CTA shared-memory contents keyed by `(cta, array)`.
pub type SharedMem = BTreeMap<(i64, String), Vec<i64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessEvent {
    Read,
    Write,
}

/// Address space tag for recorded locations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Space {
    Global,
    Shared(i64),
}

pub type Loc = (Space, String, i64);

/// Records dynamic read/write sets; flag-region arrays are excluded (the
/// benign flag race is not part of a region's data semantics).
#[derive(Debug, Default)]
pub struct RwRecorder {
    pub events: Vec<(AccessEvent, Loc)>,
}

struct FlatBackend<'a> {
    img: &'a mut MemoryImage,
    shared: &'a mut SharedMem,
    recorder: Option<&'a mut RwRecorder>,
    flag_arrays: Vec<String>,
}

impl<'a> FlatBackend<'a> {
    fn record(&mut self, ev: AccessEvent, space: MemSpace, cta: i64, array: &str, idx: i64) {
        if let Some(rec) = self.recorder.as_deref_mut() {
            if space == MemSpace::Global && self.flag_arrays.iter().any(|f| f == array) {
                return;
            }
            let s = match space {
                MemSpace::Global => Space::Global,
                MemSpace::Shared => Space::Shared(cta),
            };
            rec.events.push((ev, (s, array.to_string(), idx)));
        }
    }

    fn slot(&mut self, space: MemSpace, cta: i64, array: &str, idx: i64, tid: i64)
        -> Result<&mut i64, ExecFault> {
        let v: Option<&mut Vec<i64>> = match space {
            MemSpace::Global => self.img.arrays.get_mut(array),
            MemSpace::Shared => self.shared.get_mut(&(cta, array.to_string())),
        };
        let Some(v) = v else {
            return Err(ExecFault::UnknownArray { array: array.to_string() });
        };
        let len = v.len() as i64;
        if idx < 0 || idx >= len {
            return Err(ExecFault::OutOfBounds { array: array.to_string(), index: idx, cta, tid });
        }
        Ok(&mut v[idx as usize])
    }
}

impl<'a> Backend for FlatBackend<'a> {
    fn load(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        reads: &[(usize, i64)],
    ) -> Result<Vec<i64>, ExecFault> {
        let mut out = Vec::with_capacity(reads.len());
        for (lane, idx) in reads {
            let tid = *lane as i64;
            let v = *self.slot(space, ctx.cta, array, *idx, tid)?;
            self.record(AccessEvent::Read, space, ctx.cta, array, *idx);
            out.push(v);
        }
        Ok(out)
    }

    fn store(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        writes: &[(usize, i64, i64)],
        _through: bool,
    ) -> Result<(), ExecFault> {
        for (lane, idx, val) in writes {
            let tid = *lane as i64;
            *self.slot(space, ctx.cta, array, *idx, tid)? = *val;
            self.record(AccessEvent::Write, space, ctx.cta, array, *idx);
        }
        Ok(())
    }

    fn atomic(
        &mut self,
        ctx: &AccessCtx,
        op: AtomicOp,
        array: &str,
        ops: &[(usize, i64, i64)],
    ) -> Result<(), ExecFault> {
        for (lane, idx, val) in ops {
            let tid = *lane as i64;
            let slot = self.slot(MemSpace::Global, ctx.cta, array, *idx, tid)?;
            *slot = exec::backend::apply_atomic(op, *slot, *val);
            self.record(AccessEvent::Read, MemSpace::Global, ctx.cta, array, *idx);
            self.record(AccessEvent::Write, MemSpace::Global, ctx.cta, array, *idx);
        }
        Ok(())
    }

    fn clwb(&mut self, _: &AccessCtx, _: &str, _: &[(usize, i64)]) -> Result<(), ExecFault> {
        Ok(())
    }

    fn l2wb(&mut self, _: &AccessCtx) -> Result<(), ExecFault> {
        Ok(())
    }

    fn sfence(&mut self, _: &AccessCtx) -> Result<(), ExecFault> {
        Ok(())
    }

    fn pcommit(&mut self, _: &AccessCtx) -> Result<(), ExecFault> {
        Ok(())
    }
}

/// One kernel execution request against the flat interpreter.
pub struct KernelRun<'a> {
    pub unit: &'a ProgramUnit,
    pub kernel: &'a KernelProgram,
    pub grid: GridConfig,
    /// Restrict execution to these CTAs (recovery re-executes subsets).
    pub cta_filter: Option<Vec<i64>>,
    /// Pre-seeded shared memory (resume reconstructs it from shadows).
    pub shared_init: SharedMem,
}

impl<'a> KernelRun<'a> {
    pub fn whole(unit: &'a ProgramUnit, kernel: &'a KernelProgram, grid: GridConfig) -> Self {
        KernelRun { unit, kernel, grid, cta_filter: None, shared_init: SharedMem::new() }
    }
}

/// Execute one kernel over the image; returns final shared-memory contents
/// (resume and the region oracles need them).
pub fn run_kernel(
    run: &KernelRun,
    img: &mut MemoryImage,
    mut recorder: Option<&mut RwRecorder>,
) -> Result<SharedMem, ExecFault> {
    let grid = run.grid;
    let prog = exec::compile(run.kernel, None);
    let ctas: Vec<i64> = match &run.cta_filter {
        Some(f) => f.clone(),
        None => (0..grid.grid_dim).collect(),
    };

    let mut shared = SharedMem::new();
    for &cta in &ctas {
        for (name, size) in &run.kernel.shared_decls {
            let len = size.eval(&grid).max(0) as usize;
            let init = run
                .shared_init
                .get(&(cta, name.clone()))
                .cloned()
                .unwrap_or_else(|| vec![0; len]);
            shared.insert((cta, name.clone()), init);
        }
    }

    let warps_per_cta = grid.warps_per_cta();
    let mut warps: Vec<exec::WarpState> = Vec::new();
    for &cta in &ctas {
        for w in 0..warps_per_cta {
            warps.push(exec::WarpState::new(cta, w, &grid, &prog, run.kernel.iters.len()));
        }
    }

    // at_barrier[i] is set while warp i waits for its CTA to sync.
    let mut at_barrier = vec![false; warps.len()];
    let mut live = warps.len();
    while live > 0 {
        let mut progressed = false;
        for i in 0..warps.len() {
            if warps[i].done || at_barrier[i] {
                continue;
            }
            let mut backend = FlatBackend {
                img,
                shared: &mut shared,
                recorder: recorder.as_deref_mut(),
                flag_arrays: run.unit.flag_arrays.clone(),
            };
            match exec::step_warp(&prog, &mut warps[i], &grid, &mut backend)? {
                StepSignal::Ran => {}
                StepSignal::Barrier => at_barrier[i] = true,
                StepSignal::Finished => live -= 1,
            }
            progressed = true;
        }
        // Release any CTA whose live warps all reached the barrier. A warp
        // that finished while a sibling waits can never arrive: divergence.
        for &cta in &ctas {
            let idxs: Vec<usize> =
                (0..warps.len()).filter(|&i| warps[i].cta == cta).collect();
            let blocked: Vec<usize> =
                idxs.iter().copied().filter(|&i| !warps[i].done).collect();
            if blocked.is_empty() {
                continue;
            }
            let any_waiting = blocked.iter().any(|&i| at_barrier[i]);
            if any_waiting && idxs.iter().any(|&i| warps[i].done) {
                return Err(ExecFault::BarrierDivergence { cta, warp: blocked[0] as i64 });
            }
            if blocked.iter().all(|&i| at_barrier[i]) {
                for &i in &blocked {
                    at_barrier[i] = false;
                }
            }
        }
        if !progressed {
            // Everyone is parked at a barrier that can never release.
            let cta = warps.iter().position(|w| !w.done).map(|i| warps[i].cta).unwrap_or(0);
            return Err(ExecFault::BarrierDivergence { cta, warp: 0 });
        }
    }
    Ok(shared)
}

/// Evaluate every `alloc` in the host script against the image.
pub fn ensure_allocs(unit: &ProgramUnit, grid: &GridConfig, img: &mut MemoryImage) {
    for step in &unit.host.steps {
        if let HostStep::Alloc { array, size } = &step.step {
            img.ensure_array(array, size.eval(grid).max(0) as usize);
        }
    }
    for f in &unit.flag_arrays {
        img.flag_region.insert(f.clone());
        img.ensure_array(f, 1);
    }
}

/// Run the whole host script (including kernel launches) on the flat
/// interpreter and return the final image. The grid overrides every
/// launch's dimensions, matching the CLI contract.
pub fn run_reference(
    unit: &ProgramUnit,
    grid: GridConfig,
    input: &MemoryImage,
) -> Result<MemoryImage, ExecFault> {
    let mut img = input.clone();
    ensure_allocs(unit, &grid, &mut img);
    for step in &unit.host.steps {
        match &step.step {
            HostStep::Alloc { .. } => {}
            HostStep::MemcpyD2D { dst, src, size } => {
                let n = size.eval(&grid).max(0) as usize;
                let src_v = img
                    .arrays
                    .get(src)
                    .ok_or_else(|| ExecFault::UnknownArray { array: src.clone() })?;
                let data: Vec<i64> = src_v.iter().copied().take(n).collect();
                let dst_v = img
                    .arrays
                    .get_mut(dst)
                    .ok_or_else(|| ExecFault::UnknownArray { array: dst.clone() })?;
                for (i, v) in data.into_iter().enumerate() {
                    if i < dst_v.len() {
                        dst_v[i] = v;
                    }
                }
            }
            HostStep::SetPersistentFlag { flag, value } => {
                img.flag_region.insert(flag.clone());
                img.ensure_array(flag, 1);
                img.arrays.get_mut(flag).unwrap()[0] = value.as_word();
            }
            HostStep::LaunchKernel { kernel, .. } => {
                let k = unit.kernel(kernel).ok_or_else(|| ExecFault::Invalid {
                    msg: format!("launch of undefined kernel `{kernel}`"),
                })?;
                let run = KernelRun::whole(unit, k, grid);
                run_kernel(&run, &mut img, None)?;
            }
            HostStep::DeviceSync | HostStep::L2wbApi | HostStep::ConsumeOutput { .. } => {}
        }
    }
    Ok(img)
}
