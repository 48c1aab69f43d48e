//! Crash injection, recovery and verification against the failure-free
//! oracle: the module that turns persistency claims into pass/fail.

pub mod bundle;
pub mod ordering;

#[cfg(test)]
mod tests;

pub use ordering::{check_ordering, OrderingReport};

use crate::exec::ExecFault;
use crate::lang::ast::*;
use crate::memsim::{self, MachineConfig, SimOutcome};
use crate::passes::tx::{LogLayout, RecoveryPolicy};
use crate::passes::Applied;
use crate::refexec::{self, MemoryImage, SharedMem};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    RestoredRange { array: String, words: u64 },
    ReexecutedKernel,
    ReexecutedCta(i64),
    ReexecutedIteration { cta: i64, from_iter: i64 },
}

#[derive(Debug, Clone)]
pub struct RecoveryOutcome {
    pub crash_at: u64,
    pub actions: Vec<RecoveryAction>,
    pub recovered_image: MemoryImage,
    pub verdict: bool,
    pub mismatch: Option<String>,
}

/// Recovery marks: which units resume() must re-execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mark {
    Kernel,
    Cta(i64),
    LoopResume { cta: i64, from_iter: i64 },
    CtaFresh(i64),
}

#[derive(Debug, Clone)]
pub struct RecoverError(pub String);

impl std::fmt::Display for RecoverError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "recovery failed: {}", self.0)
    }
}

impl std::error::Error for RecoverError {}

fn flag_word(img: &MemoryImage, flag: &str, idx: usize) -> Result<FlagState, RecoverError> {
    let w = img
        .flag_word(flag, idx)
        .ok_or_else(|| RecoverError(format!("flag array `{flag}` missing index {idx}")))?;
    FlagState::from_word(w).ok_or_else(|| {
        RecoverError(format!(
            "corrupt flag value {w} in `{flag}[{idx}]`: durability ordering bug"
        ))
    })
}

/// Host-driven recovery: check the flags, restore logged data, and decide
/// what must re-execute.
pub fn recover(
    persistent: &MemoryImage,
    policy: &RecoveryPolicy,
    grid: &GridConfig,
) -> Result<(MemoryImage, Vec<Mark>, Vec<RecoveryAction>), RecoverError> {
    let mut img = persistent.clone();
    let mut marks = Vec::new();
    let mut actions = Vec::new();
    match policy.scope {
        EpochScope::Kernel => {
            match flag_word(&img, &policy.flag_array, 0)? {
                FlagState::Complete => {}
                FlagState::Initial => {
                    // The transaction never opened: the kernel still has to
                    // run, from pristine state.
                    marks.push(Mark::Kernel);
                    actions.push(RecoveryAction::ReexecutedKernel);
                }
                FlagState::InTx => {
                    if let LogLayout::HostPrefix { entries } = &policy.log_layout {
                        for (log, src, words) in entries {
                            let data: Vec<i64> = img.arrays[log]
                                .iter()
                                .take(*words as usize)
                                .copied()
                                .collect();
                            let dst = img.arrays.get_mut(src).ok_or_else(|| {
                                RecoverError(format!("logged array `{src}` missing"))
                            })?;
                            for (i, v) in data.into_iter().enumerate() {
                                dst[i] = v;
                            }
                            actions.push(RecoveryAction::RestoredRange {
                                array: src.clone(),
                                words: *words as u64,
                            });
                        }
                    }
                    marks.push(Mark::Kernel);
                    actions.push(RecoveryAction::ReexecutedKernel);
                }
            }
        }
        EpochScope::Cta => {
            for cta in 0..grid.grid_dim {
                match flag_word(&img, &policy.flag_array, cta as usize)? {
                    FlagState::Complete => {}
                    FlagState::Initial => {
                        marks.push(Mark::CtaFresh(cta));
                        actions.push(RecoveryAction::ReexecutedCta(cta));
                    }
                    FlagState::InTx => {
                        if let LogLayout::CtaSites { log, per_cta, sites } = &policy.log_layout {
                            let mut restored = 0u64;
                            for site in sites {
                                for tid in 0..grid.cta_dim {
                                    let src_idx =
                                        cta * per_cta + site.slot + tid;
                                    let v = img.arrays[log][src_idx as usize];
                                    let dst_idx = site.expr.eval(grid, cta, tid, &[]);
                                    let arr =
                                        img.arrays.get_mut(&site.array).ok_or_else(|| {
                                            RecoverError(format!(
                                                "logged array `{}` missing",
                                                site.array
                                            ))
                                        })?;
                                    arr[dst_idx as usize] = v;
                                    restored += 1;
                                }
                                actions.push(RecoveryAction::RestoredRange {
                                    array: site.array.clone(),
                                    words: grid.cta_dim as u64,
                                });
                            }
                            let _ = restored;
                        }
                        marks.push(Mark::Cta(cta));
                        actions.push(RecoveryAction::ReexecutedCta(cta));
                    }
                }
            }
        }
        EpochScope::Loop => {
            let li = policy
                .loop_info
                .ok_or_else(|| RecoverError("loop policy without loop info".into()))?;
            for cta in 0..grid.grid_dim {
                match flag_word(&img, &policy.flag_array, cta as usize)? {
                    FlagState::Initial => {
                        marks.push(Mark::CtaFresh(cta));
                        actions.push(RecoveryAction::ReexecutedCta(cta));
                    }
                    FlagState::InTx => {
                        // Roll the shadow back to the last logged iteration
                        // and re-execute from there.
                        if let LogLayout::ShadowCopy { entries } = &policy.log_layout {
                            for (log, shadow, _, slots) in entries {
                                let base = (cta * slots) as usize;
                                let data: Vec<i64> = img.arrays[log]
                                    [base..base + *slots as usize]
                                    .to_vec();
                                let sh = img.arrays.get_mut(shadow).ok_or_else(|| {
                                    RecoverError(format!("shadow `{shadow}` missing"))
                                })?;
                                sh[base..base + *slots as usize].copy_from_slice(&data);
                                actions.push(RecoveryAction::RestoredRange {
                                    array: shadow.clone(),
                                    words: *slots as u64,
                                });
                            }
                        }
                        let logged = img.arrays[crate::passes::tx::LAST_LOG_ITER]
                            [cta as usize];
                        img.arrays.get_mut(crate::passes::tx::LAST_ITER).unwrap()
                            [cta as usize] = logged;
                        let from = if logged == li.sentinel { li.lo } else { logged + li.step };
                        marks.push(Mark::LoopResume { cta, from_iter: from });
                        actions.push(RecoveryAction::ReexecutedIteration { cta, from_iter: from });
                    }
                    FlagState::Complete => {
                        // Committed through last_iter; the loop remainder
                        // plus the post-loop tail still re-execute.
                        let last = img.arrays[crate::passes::tx::LAST_ITER][cta as usize];
                        let from = if last == li.sentinel { li.lo } else { last + li.step };
                        marks.push(Mark::LoopResume { cta, from_iter: from });
                        actions.push(RecoveryAction::ReexecutedIteration { cta, from_iter: from });
                    }
                }
            }
        }
    }
    Ok((img, marks, actions))
}

/// Re-execute exactly the marked units on the reference interpreter over
/// the recovered image.
pub fn resume(
    recovered: &MemoryImage,
    marks: &[Mark],
    applied_unit: &ProgramUnit,
    policy: &RecoveryPolicy,
    grid: &GridConfig,
) -> Result<MemoryImage, ExecFault> {
    let mut img = recovered.clone();
    refexec::ensure_allocs(applied_unit, grid, &mut img);
    let kernel = applied_unit.kernel(&policy.kernel).ok_or_else(|| ExecFault::Invalid {
        msg: format!("instrumented kernel `{}` missing", policy.kernel),
    })?;
    // Whole-kernel re-execution first, then per-CTA work.
    if marks.contains(&Mark::Kernel) {
        let run = refexec::KernelRun::whole(applied_unit, kernel, *grid);
        refexec::run_kernel(&run, &mut img, None)?;
    }
    let fresh: Vec<i64> = marks
        .iter()
        .filter_map(|m| match m {
            Mark::Cta(c) | Mark::CtaFresh(c) => Some(*c),
            _ => None,
        })
        .collect();
    if !fresh.is_empty() {
        let run = refexec::KernelRun {
            unit: applied_unit,
            kernel,
            grid: *grid,
            cta_filter: Some(fresh),
            shared_init: SharedMem::new(),
        };
        refexec::run_kernel(&run, &mut img, None)?;
    }
    for m in marks {
        if let Mark::LoopResume { cta, from_iter } = m {
            let li = policy.loop_info.expect("loop marks need loop info");
            let resumed = refexec::region::resume_kernel(kernel, li.body_index, *from_iter);
            // Rebuild this CTA's shared memory from its shadow.
            let mut shared_init = SharedMem::new();
            for (shared_name, decl) in &kernel.shared_decls {
                let shadow = crate::passes::epoch::shadow_name(shared_name);
                if let Some(sh) = img.arrays.get(&shadow) {
                    let slots = crate::passes::epoch::shadow_slots(kernel, shared_name, grid);
                    let len = decl.eval(grid).max(0) as usize;
                    let base = (cta * slots) as usize;
                    let vals = sh[base..base + len.min(slots as usize)].to_vec();
                    shared_init.insert((*cta, shared_name.clone()), vals);
                }
            }
            let run = refexec::KernelRun {
                unit: applied_unit,
                kernel: &resumed,
                grid: *grid,
                cta_filter: Some(vec![*cta]),
                shared_init,
            };
            refexec::run_kernel(&run, &mut img, None)?;
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Exhaustive,
    Stride(u64),
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Recovery,
    OrderingOnly,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub mode: SweepMode,
    pub points_total: u64,
    pub points_tested: u64,
    pub failures: u64,
    pub pass_rate: f64,
    pub min_actions: u64,
    pub max_actions: u64,
    pub mean_actions: f64,
    pub first_failure: Option<RecoveryOutcome>,
    pub ordering: OrderingReport,
    pub note: Option<String>,
}

pub struct SweepOptions {
    pub sampling: Sampling,
    pub seed: u64,
    /// Write a repro bundle here on the first failure.
    pub bundle_dir: Option<std::path::PathBuf>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { sampling: Sampling::Exhaustive, seed: 1, bundle_dir: None }
    }
}

/// Crash points that respect host-step atomicity: each durability group
/// becomes testable once its last entry has landed.
fn crash_points(outcome: &SimOutcome, sampling: Sampling) -> Vec<u64> {
    let mut boundary: Vec<u64> = vec![0];
    let mut last_of_group: BTreeMap<u64, u64> = BTreeMap::new();
    for e in &outcome.trace {
        let slot = last_of_group.entry(e.group).or_insert(e.event);
        *slot = (*slot).max(e.event);
    }
    boundary.extend(last_of_group.values().copied());
    boundary.push(outcome.total_events);
    boundary.sort_unstable();
    boundary.dedup();
    match sampling {
        Sampling::Exhaustive => boundary,
        Sampling::Stride(k) => boundary.into_iter().step_by(k.max(1) as usize).collect(),
        Sampling::Seeded(n) => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0FFEE);
            let mut pts: Vec<u64> =
                (0..n).map(|_| boundary[rng.gen_range(0..boundary.len())]).collect();
            pts.sort_unstable();
            pts.dedup();
            pts
        }
    }
}

/// Crash-sweep a transactional program: for every crash point, project the
/// persistent image, recover, resume, and compare against the oracle.
/// Directives without `tx` run in ordering-check mode instead (durability
/// order alone does not provide recoverability).
pub fn sweep_crash_points(
    original: &ProgramUnit,
    applied: &Applied,
    grid: &GridConfig,
    cfg: &MachineConfig,
    input: &MemoryImage,
    opts: &SweepOptions,
) -> Result<SweepSummary, ExecFault> {
    let mut cfg = cfg.clone();
    cfg.wpq_durable = applied.directive.durable_wpq;
    let outcome = memsim::simulate(&applied.unit, *grid, &cfg, input, opts.seed, None)?;
    let ordering = check_ordering(&outcome, &applied.directive);

    let Some(policy) = applied.policy.as_ref() else {
        return Ok(SweepSummary {
            mode: SweepMode::OrderingOnly,
            points_total: outcome.total_events,
            points_tested: 0,
            failures: if ordering.ok() { 0 } else { 1 },
            pass_rate: if ordering.ok() { 1.0 } else { 0.0 },
            min_actions: 0,
            max_actions: 0,
            mean_actions: 0.0,
            first_failure: None,
            ordering,
            note: Some(
                "ordering invariants checked; recoverability is not guaranteed without tx"
                    .to_string(),
            ),
        });
    };

    let oracle = refexec::run_reference(original, *grid, input)?;
    let data = original.data_arrays();
    let map = memsim::AddrMap::build(&applied.unit, grid, &cfg);

    let points = crash_points(&outcome, opts.sampling);
    let mut failures = 0u64;
    let mut first_failure: Option<RecoveryOutcome> = None;
    let mut actions_min = u64::MAX;
    let mut actions_max = 0u64;
    let mut actions_sum = 0u64;
    let mut tested = 0u64;

    for &k in &points {
        let persistent =
            memsim::replay_prefix(&map, input, &applied.unit.flag_arrays, &outcome.trace, k);
        let (verdict, actions, recovered, mismatch) =
            match recover(&persistent, policy, grid) {
                Err(e) => (false, Vec::new(), persistent.clone(), Some(e.to_string())),
                Ok((recovered, marks, actions)) => {
                    match resume(&recovered, &marks, &applied.unit, policy, grid) {
                        Err(f) => (false, actions, recovered, Some(format!("resume fault: {f}"))),
                        Ok(final_img) => {
                            match final_img.diff_on(&oracle, data.iter().map(String::as_str)) {
                                None => (true, actions, recovered, None),
                                Some((a, i, x, y)) => (
                                    false,
                                    actions,
                                    recovered,
                                    Some(format!(
                                        "{a}[{i}] = {x:?} after recovery, oracle has {y:?}"
                                    )),
                                ),
                            }
                        }
                    }
                }
            };
        tested += 1;
        let n = actions.len() as u64;
        actions_min = actions_min.min(n);
        actions_max = actions_max.max(n);
        actions_sum += n;
        if !verdict {
            failures += 1;
            if first_failure.is_none() {
                let out = RecoveryOutcome {
                    crash_at: k,
                    actions,
                    recovered_image: recovered,
                    verdict,
                    mismatch,
                };
                if let Some(dir) = &opts.bundle_dir {
                    let _ = bundle::write_bundle(
                        dir, original, applied, grid, &cfg, input, opts.seed, k, &outcome,
                    );
                }
                first_failure = Some(out);
            }
        }
    }

    Ok(SweepSummary {
        mode: SweepMode::Recovery,
        points_total: outcome.total_events,
        points_tested: tested,
        failures,
        pass_rate: if tested > 0 { (tested - failures) as f64 / tested as f64 } else { 1.0 },
        min_actions: if tested > 0 { actions_min } else { 0 },
        max_actions: actions_max,
        mean_actions: if tested > 0 { actions_sum as f64 / tested as f64 } else { 0.0 },
        first_failure,
        ordering,
        note: None,
    })
}
