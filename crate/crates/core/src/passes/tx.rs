//! Durable transactions: undo logging plus the Initial/InTx/Complete flag
//! protocol, at kernel, CTA and loop scope, with idempotency-driven log
//! elimination and reduction.

use super::epoch::{
    guarded_tid0, insert_alloc, mirror_shared_stores, persist_pair, rewrite_stores_wt,
    shadow_name, shadow_slots, shared_written_in, PassError,
};
use super::idempotency::{written_arrays, IdempotencyResult};
use crate::lang::ast::*;
use crate::lang::slice::{access_sites, fresh_iter, fresh_reg, AccessKind, AccessSite};

/// Deliberate protocol mutations for the harness's canary tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolBug {
    /// Set the InTx flag before the undo log is created/persisted.
    FlagBeforeLog,
    /// Skip the output-persist phase before the Complete flag.
    MissingOutputPersist,
    /// Omit every pcommit although WPQs are volatile.
    MissingPcommit,
    /// Write the undo log with plain stores that linger in L2.
    UnpersistedLog,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TxOptions {
    /// Unified-memory model: inputs have no host copy, log them too.
    pub unified_memory: bool,
    pub bug: Option<ProtocolBug>,
}

/// One device-logged store site: thread `t` of CTA `c` saves the old value
/// of `array[expr(c,t)]` into log slot `c*per_cta + slot + t`.
#[derive(Debug, Clone)]
pub struct CtaLogSite {
    pub array: String,
    pub expr: AffineExpr,
    pub slot: i64,
}

#[derive(Debug, Clone)]
pub enum LogLayout {
    None,
    /// Host-side prefix copies: `(log array, source array, words)`.
    HostPrefix { entries: Vec<(String, String, i64)> },
    /// Device-side per-CTA slots.
    CtaSites { log: String, per_cta: i64, sites: Vec<CtaLogSite> },
    /// Loop scope: the log holds a copy of each shadow array
    /// (`(log, shadow, shared, slots per cta)`).
    ShadowCopy { entries: Vec<(String, String, String, i64)> },
}

/// Everything recovery needs to undo and resume one transactional unit.
#[derive(Debug, Clone)]
pub struct RecoveryPolicy {
    pub scope: EpochScope,
    pub uses_undo_log: bool,
    pub idempotent_reexec: bool,
    pub log_layout: LogLayout,
    pub flag_array: String,
    pub kernel: String,
    /// Loop scope: body index of the transactional loop plus its evaluated
    /// (lo, step, sentinel) values.
    pub loop_info: Option<LoopInfo>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoopInfo {
    /// Body index of the transactional loop in the instrumented kernel.
    pub body_index: usize,
    pub lo: i64,
    pub step: i64,
    /// Value of last_iter meaning "no iteration committed yet".
    pub sentinel: i64,
}

#[derive(Debug, Clone)]
pub struct TxOutcome {
    pub unit: ProgramUnit,
    pub policy: RecoveryPolicy,
    pub notes: Vec<String>,
    /// Static undo-log payload in words (0 when logging is eliminated).
    pub log_words: i64,
}

pub const FLAG_ARRAY: &str = "txflag";
pub const LAST_ITER: &str = "last_iter";
pub const LAST_LOG_ITER: &str = "last_log_iter";

fn flag_write(value: FlagState, index: AddressExpr, through: bool) -> StmtNode {
    Stmt::Store {
        space: MemSpace::Global,
        array: FLAG_ARRAY.to_string(),
        index,
        value: Operand::Imm(value.as_word()),
        through,
    }
    .into()
}

fn cta_flag_index() -> AddressExpr {
    AddressExpr::Affine(AffineExpr::var(AffVar::Ctaid))
}

/// Kernel-level durable transaction: host-side protocol around the launch.
pub fn transform_tx_kernel(
    unit: &ProgramUnit,
    kernel_name: &str,
    d: &PersistencyDirective,
    idem: &IdempotencyResult,
    grid: &GridConfig,
    opts: &TxOptions,
) -> Result<TxOutcome, PassError> {
    let mut out = unit.clone();
    let kernel = out
        .kernel(kernel_name)
        .ok_or_else(|| PassError::Invalid(format!("unknown kernel `{kernel_name}`")))?
        .clone();

    let use_idem = d.idem;
    let eliminate_log = use_idem && idem.idempotent;

    // What to log: with idem analysis, the reduced must-log prefixes;
    // without, the full extent of every written array (plus read arrays
    // under the unified-memory model, which lack a host copy).
    let mut entries: Vec<(String, String, i64)> = Vec::new();
    if !eliminate_log {
        if use_idem {
            for (array, set) in &idem.must_log {
                if set.is_empty() {
                    continue;
                }
                // Collapse to a covering prefix; exact for prefix-shaped
                // sets like a frontier half.
                let words = set.iter().max().unwrap() + 1;
                entries.push((format!("undo_{array}"), array.clone(), words));
            }
        } else {
            let mut log_set = written_arrays(&out, &kernel, grid);
            if opts.unified_memory {
                log_set.extend(super::idempotency::read_arrays(&out, &kernel, grid));
            }
            for (array, words) in log_set {
                entries.push((format!("undo_{array}"), array, words));
            }
        }
    }
    let log_words: i64 = entries.iter().map(|(_, _, w)| *w).sum();

    for (log, _, words) in &entries {
        out.aux_arrays.insert(log.clone(), AuxKind::UndoLog);
        insert_alloc(&mut out.host, log, GridScalar::constant(*words));
    }
    out.aux_arrays.insert(FLAG_ARRAY.into(), AuxKind::Flag);
    if !out.flag_arrays.iter().any(|f| f == FLAG_ARRAY) {
        out.flag_arrays.push(FLAG_ARRAY.into());
    }
    insert_alloc(&mut out.host, FLAG_ARRAY, GridScalar::constant(1));

    // Rebuild the host script around the (single transactional) launch.
    let mut steps: Vec<HostStepNode> = Vec::new();
    let src = std::mem::take(&mut out.host.steps);
    let mut i = 0;
    let mut instrumented = false;
    while i < src.len() {
        let node = src[i].clone();
        let is_target = matches!(
            &node.step,
            HostStep::LaunchKernel { kernel: k, .. } if k == kernel_name
        ) && !instrumented;
        if !is_target {
            steps.push(node);
            i += 1;
            continue;
        }
        instrumented = true;
        let mut prologue: Vec<HostStepNode> = Vec::new();
        for (log, srcarr, words) in &entries {
            prologue.push(
                HostStep::MemcpyD2D {
                    dst: log.clone(),
                    src: srcarr.clone(),
                    size: GridScalar::constant(*words),
                }
                .into(),
            );
        }
        let flag_in = HostStepNode::from(HostStep::SetPersistentFlag {
            flag: FLAG_ARRAY.into(),
            value: FlagState::InTx,
        });
        if opts.bug == Some(ProtocolBug::FlagBeforeLog) {
            steps.push(flag_in);
            steps.extend(prologue);
        } else {
            steps.extend(prologue);
            steps.push(flag_in);
        }
        if !eliminate_log {
            // Wait for the log copy before launching.
            steps.push(HostStep::DeviceSync.into());
        }
        steps.push(node);
        // Reuse an existing sync after the launch.
        if src.get(i + 1).map(|n| &n.step) == Some(&HostStep::DeviceSync) {
            steps.push(src[i + 1].clone());
            i += 1;
        } else {
            steps.push(HostStep::DeviceSync.into());
        }
        if opts.bug != Some(ProtocolBug::MissingOutputPersist) {
            steps.push(HostStep::L2wbApi.into());
            steps.push(HostStep::DeviceSync.into());
        }
        steps.push(
            HostStep::SetPersistentFlag { flag: FLAG_ARRAY.into(), value: FlagState::Complete }
                .into(),
        );
        i += 1;
    }
    out.host.steps = steps;
    if !instrumented {
        return Err(PassError::Invalid(format!("host script never launches `{kernel_name}`")));
    }

    let policy = RecoveryPolicy {
        scope: EpochScope::Kernel,
        uses_undo_log: !eliminate_log,
        idempotent_reexec: eliminate_log,
        log_layout: if eliminate_log {
            LogLayout::None
        } else {
            LogLayout::HostPrefix { entries }
        },
        flag_array: FLAG_ARRAY.into(),
        kernel: kernel_name.to_string(),
        loop_info: None,
    };
    Ok(TxOutcome { unit: out, policy, notes: Vec::new(), log_words })
}

/// Partition a straight-line body for the overlapped transaction layout:
/// leading loads, compute, and the global stores sunk to the end. `None`
/// when reordering is unsafe (control flow, barriers, atomics, persists,
/// or a global load following a store to the same array).
fn split_body(body: &[StmtNode]) -> Option<(Vec<StmtNode>, Vec<StmtNode>, Vec<StmtNode>)> {
    let mut stored_arrays: Vec<&str> = Vec::new();
    for node in body {
        match &node.stmt {
            Stmt::Arith { .. } | Stmt::Mov { .. } => {}
            Stmt::Load { space, array, .. } => {
                if *space == MemSpace::Global && stored_arrays.contains(&array.as_str()) {
                    return None;
                }
            }
            Stmt::Store { space, array, .. } => {
                if *space == MemSpace::Global {
                    stored_arrays.push(array);
                }
            }
            _ => return None,
        }
    }
    let mut loads = Vec::new();
    let mut compute = Vec::new();
    let mut stores = Vec::new();
    let mut in_prefix = true;
    for node in body {
        match &node.stmt {
            Stmt::Load { .. } if in_prefix && compute.is_empty() => loads.push(node.clone()),
            Stmt::Store { space: MemSpace::Global, .. } => {
                in_prefix = false;
                stores.push(node.clone());
            }
            _ => {
                in_prefix = false;
                compute.push(node.clone());
            }
        }
    }
    Some((loads, compute, stores))
}

/// Device-side log phase for CTA scope: per logged store site, read the old
/// value and write-through it into the per-CTA log region. Thread `t` of
/// CTA `c` covers slot `c*nsites*ctadim + ord*ctadim + t`.
fn cta_log_phase(
    kernel: &mut KernelProgram,
    sites: &[AccessSite],
    durable_log: bool,
) -> Result<(Vec<StmtNode>, Vec<CtaLogSite>), PassError> {
    let nsites = sites.len() as i64;
    let mut stmts = Vec::new();
    let mut layout = Vec::new();
    for (ord, site) in sites.iter().enumerate() {
        let AddressExpr::Affine(expr) = &site.index else {
            return Err(PassError::Invalid(format!(
                "cannot build a device-side undo log for a computed address into `{}`; \
                 use a kernel-level transaction",
                site.array
            )));
        };
        if expr.uses_iter() {
            return Err(PassError::Invalid(format!(
                "cannot build a device-side undo log for a loop-varying store to `{}`; \
                 use a kernel-level transaction",
                site.array
            )));
        }
        let lv = fresh_reg(kernel, "logv");
        let log_index = AffineExpr {
            base: GridScalar { c: 0, cd: ord as i64, gd: 0, both: 0 },
            terms: vec![
                (AffVar::Tid, GridScalar::constant(1)),
                (AffVar::Ctaid, GridScalar { c: 0, cd: nsites, gd: 0, both: 0 }),
            ],
        }
        .normalize();
        stmts.push(
            Stmt::Load {
                dst: lv,
                space: MemSpace::Global,
                array: site.array.clone(),
                index: site.index.clone(),
            }
            .into(),
        );
        stmts.push(
            Stmt::Store {
                space: MemSpace::Global,
                array: "undo_log".into(),
                index: AddressExpr::Affine(log_index),
                value: Operand::Reg(lv),
                through: durable_log,
            }
            .into(),
        );
        layout.push(CtaLogSite { array: site.array.clone(), expr: expr.clone(), slot: ord as i64 });
    }
    Ok((stmts, layout))
}

/// CTA-level durable transaction. Without idempotency the CTA write-through
/// logs the values it will overwrite, fences, barriers, raises its flag via
/// thread 0, runs, persists its outputs, barriers again and completes. An
/// idempotent CTA skips the log and every thread raises the flag before any
/// output store (the benign same-value race).
pub fn transform_tx_cta(
    unit: &ProgramUnit,
    kernel_name: &str,
    d: &PersistencyDirective,
    idem: &IdempotencyResult,
    grid: &GridConfig,
    opts: &TxOptions,
) -> Result<TxOutcome, PassError> {
    let mut out = unit.clone();
    let kidx = out
        .kernels
        .iter()
        .position(|k| k.name == kernel_name)
        .ok_or_else(|| PassError::Invalid(format!("unknown kernel `{kernel_name}`")))?;
    let mut k = out.kernels[kidx].clone();
    crate::lang::cfg::ensure_postdominant_exit(&mut k);

    let use_idem = d.idem;
    let eliminate_log = use_idem && idem.idempotent;
    let durable_log = opts.bug != Some(ProtocolBug::UnpersistedLog);
    let skip_pcommit = opts.bug == Some(ProtocolBug::MissingPcommit);
    let dp = {
        // A directive view whose pcommit emission respects the bug.
        let mut v = *d;
        if skip_pcommit {
            v.durable_wpq = true;
        }
        v
    };

    // Which sites get logged.
    let all_stores: Vec<AccessSite> = access_sites(&k)
        .into_iter()
        .filter(|s| {
            s.space == MemSpace::Global
                && matches!(s.kind, AccessKind::Store | AccessKind::Atomic)
        })
        .collect();
    let log_sites: Vec<AccessSite> = if eliminate_log {
        Vec::new()
    } else if use_idem {
        idem.must_log_sites.clone()
    } else {
        all_stores.clone()
    };
    let per_cta_sites = log_sites.len() as i64;
    let log_words = per_cta_sites * grid.cta_dim * grid.grid_dim;

    // Assemble the body.
    let split = split_body(&k.body);
    let (log_stmts, layout) = cta_log_phase(&mut k, &log_sites, durable_log)?;

    let mut body: Vec<StmtNode> = Vec::new();
    let flag_in_phase = |all_threads: bool, dp: &PersistencyDirective| -> Vec<StmtNode> {
        let w = flag_write(FlagState::InTx, cta_flag_index(), true);
        if all_threads {
            let mut v = vec![w];
            v.extend(persist_pair(dp));
            v
        } else {
            let mut inner = vec![w];
            inner.extend(persist_pair(dp));
            vec![guarded_tid0(inner)]
        }
    };
    let complete_phase = |dp: &PersistencyDirective| -> Vec<StmtNode> {
        let mut inner = vec![flag_write(FlagState::Complete, cta_flag_index(), true)];
        inner.extend(persist_pair(dp));
        vec![Stmt::Syncthreads.into(), guarded_tid0(inner)]
    };

    // Output-persist phase applied around/after the stores.
    let persist_outputs = |stores: &mut Vec<StmtNode>, dp: &PersistencyDirective| {
        if opts.bug == Some(ProtocolBug::MissingOutputPersist) {
            return;
        }
        match dp.mech {
            Mech::Wt => {
                rewrite_stores_wt(stores);
                stores.push(Stmt::Sfence.into());
            }
            Mech::Clwb => {
                let mut clwbs: Vec<StmtNode> = Vec::new();
                let mut seen: Vec<(String, AddressExpr)> = Vec::new();
                for node in stores.iter() {
                    if let Stmt::Store { space: MemSpace::Global, array, index, through, .. } =
                        &node.stmt
                    {
                        if *through {
                            continue;
                        }
                        let key = (array.clone(), index.clone());
                        if !seen.contains(&key) {
                            seen.push(key);
                            clwbs.push(
                                Stmt::Clwb { array: array.clone(), index: index.clone() }.into(),
                            );
                        }
                    }
                }
                stores.extend(clwbs);
                stores.extend(persist_pair(dp));
            }
            Mech::L2wb => {
                stores.push(Stmt::Syncthreads.into());
                stores.push(guarded_tid0(vec![Stmt::L2wb.into()]));
                stores.extend(persist_pair(dp));
            }
        }
    };

    if eliminate_log {
        // Fig-7b layout: loads, flag by all threads, compute, stores,
        // persist, barrier, complete.
        match split {
            Some((loads, compute, mut stores)) => {
                body.extend(loads);
                body.extend(flag_in_phase(true, &dp));
                body.extend(compute);
                persist_outputs(&mut stores, &dp);
                body.extend(stores);
            }
            None => {
                body.extend(flag_in_phase(true, &dp));
                let mut rest = k.body.clone();
                persist_outputs(&mut rest, &dp);
                body.extend(rest);
            }
        }
        body.extend(complete_phase(&dp));
    } else {
        // Fig-7a layout: loads, log writes, compute, log fence, barrier,
        // flag by thread 0, stores, persist, barrier, complete.
        let log_then_flag = |body: &mut Vec<StmtNode>, log_stmts: &[StmtNode]| {
            if opts.bug == Some(ProtocolBug::FlagBeforeLog) {
                body.extend(flag_in_phase(false, &dp));
                body.extend(log_stmts.to_vec());
                body.extend(persist_pair(&dp));
                body.push(Stmt::Syncthreads.into());
            } else {
                body.extend(log_stmts.to_vec());
            }
        };
        match split {
            Some((loads, compute, mut stores)) => {
                body.extend(loads);
                if opts.bug == Some(ProtocolBug::FlagBeforeLog) {
                    log_then_flag(&mut body, &log_stmts);
                    body.extend(compute);
                } else {
                    body.extend(log_stmts.iter().cloned());
                    body.extend(compute);
                    body.extend(persist_pair(&dp));
                    body.push(Stmt::Syncthreads.into());
                    body.extend(flag_in_phase(false, &dp));
                }
                persist_outputs(&mut stores, &dp);
                body.extend(stores);
            }
            None => {
                if opts.bug == Some(ProtocolBug::FlagBeforeLog) {
                    log_then_flag(&mut body, &log_stmts);
                } else {
                    body.extend(log_stmts.iter().cloned());
                    body.extend(persist_pair(&dp));
                    body.push(Stmt::Syncthreads.into());
                    body.extend(flag_in_phase(false, &dp));
                }
                let mut rest = k.body.clone();
                persist_outputs(&mut rest, &dp);
                body.extend(rest);
            }
        }
        body.extend(complete_phase(&dp));
    }

    k.body = body;
    out.kernels[kidx] = k;

    out.aux_arrays.insert(FLAG_ARRAY.into(), AuxKind::Flag);
    if !out.flag_arrays.iter().any(|f| f == FLAG_ARRAY) {
        out.flag_arrays.push(FLAG_ARRAY.into());
    }
    insert_alloc(&mut out.host, FLAG_ARRAY, GridScalar { c: 0, cd: 0, gd: 1, both: 0 });
    if !log_sites.is_empty() {
        out.aux_arrays.insert("undo_log".into(), AuxKind::UndoLog);
        insert_alloc(
            &mut out.host,
            "undo_log",
            GridScalar { c: 0, cd: 0, gd: 0, both: per_cta_sites },
        );
        out.kernel_mut(kernel_name).unwrap().params.push(("undo_log".into(), ParamSpace::Global));
    }
    out.kernel_mut(kernel_name).unwrap().params.push((FLAG_ARRAY.into(), ParamSpace::Global));

    let policy = RecoveryPolicy {
        scope: EpochScope::Cta,
        uses_undo_log: !log_sites.is_empty(),
        idempotent_reexec: eliminate_log,
        log_layout: if log_sites.is_empty() {
            LogLayout::None
        } else {
            LogLayout::CtaSites {
                log: "undo_log".into(),
                per_cta: per_cta_sites * grid.cta_dim,
                sites: layout
                    .into_iter()
                    .map(|mut s| {
                        s.slot *= grid.cta_dim;
                        s
                    })
                    .collect(),
            }
        },
        flag_array: FLAG_ARRAY.into(),
        kernel: kernel_name.to_string(),
        loop_info: None,
    };
    Ok(TxOutcome {
        unit: out,
        policy,
        notes: Vec::new(),
        log_words: if eliminate_log { 0 } else { log_words },
    })
}

/// Loop-level durable transaction (the shadow copy of shared memory is
/// itself undo-logged every iteration, together with the iteration meta).
pub fn transform_tx_loop(
    unit: &ProgramUnit,
    kernel_name: &str,
    body_index: usize,
    d: &PersistencyDirective,
    idem: &IdempotencyResult,
    grid: &GridConfig,
    opts: &TxOptions,
) -> Result<TxOutcome, PassError> {
    let mut out = unit.clone();
    let kidx = out
        .kernels
        .iter()
        .position(|k| k.name == kernel_name)
        .ok_or_else(|| PassError::Invalid(format!("unknown kernel `{kernel_name}`")))?;
    let mut k = out.kernels[kidx].clone();

    let (iter, lo_gs, step_gs) = match k.body.get(body_index).map(|n| &n.stmt) {
        Some(Stmt::Loop { iter, lo, step, .. }) => (*iter, *lo, *step),
        _ => {
            return Err(PassError::Invalid(format!(
                "statement {body_index} of `{kernel_name}` is not a top-level loop"
            )))
        }
    };

    // Resume re-enters the kernel at the loop: no register defined before
    // it may be read inside or after it.
    {
        let mut defined_before: Vec<RegId> = Vec::new();
        fn defs(body: &[StmtNode], out: &mut Vec<RegId>) {
            for n in body {
                match &n.stmt {
                    Stmt::Arith { dst, .. } | Stmt::Mov { dst, .. } | Stmt::Load { dst, .. } => {
                        out.push(*dst)
                    }
                    Stmt::If { then_body, else_body, .. } => {
                        defs(then_body, out);
                        defs(else_body, out);
                    }
                    Stmt::Loop { body, .. } => defs(body, out),
                    _ => {}
                }
            }
        }
        defs(&k.body[..body_index], &mut defined_before);
        let mut used_after: Vec<RegId> = Vec::new();
        fn uses(body: &[StmtNode], out: &mut Vec<RegId>) {
            let op = |o: &Operand, out: &mut Vec<RegId>| {
                if let Operand::Reg(r) = o {
                    out.push(*r);
                }
            };
            let idx = |i: &AddressExpr, out: &mut Vec<RegId>| {
                if let AddressExpr::Opaque(r) = i {
                    out.push(*r);
                }
            };
            for n in body {
                match &n.stmt {
                    Stmt::Arith { a, b, .. } => {
                        op(a, out);
                        op(b, out);
                    }
                    Stmt::Mov { a, .. } => op(a, out),
                    Stmt::Load { index, .. } | Stmt::Clwb { index, .. } => idx(index, out),
                    Stmt::Store { index, value, .. } | Stmt::Atomic { index, value, .. } => {
                        idx(index, out);
                        op(value, out);
                    }
                    Stmt::If { cond, then_body, else_body } => {
                        op(&cond.a, out);
                        op(&cond.b, out);
                        uses(then_body, out);
                        uses(else_body, out);
                    }
                    Stmt::Loop { body, .. } => uses(body, out),
                    _ => {}
                }
            }
        }
        uses(&k.body[body_index..], &mut used_after);
        if let Some(r) = defined_before.iter().find(|r| used_after.contains(r)) {
            return Err(PassError::Invalid(format!(
                "register `{}` flows into the transactional loop; resume cannot reconstruct it",
                k.reg_name(*r)
            )));
        }
    }

    // Post-loop statements are re-executed on every resume; they must not
    // read arrays they also write.
    {
        let post = &k.body[body_index + 1..];
        let mut reads: Vec<&str> = Vec::new();
        let mut writes: Vec<&str> = Vec::new();
        fn collect<'a>(body: &'a [StmtNode], reads: &mut Vec<&'a str>, writes: &mut Vec<&'a str>) {
            for n in body {
                match &n.stmt {
                    Stmt::Load { space: MemSpace::Global, array, .. } => reads.push(array),
                    Stmt::Store { space: MemSpace::Global, array, .. }
                    | Stmt::Atomic { array, .. } => writes.push(array),
                    Stmt::If { then_body, else_body, .. } => {
                        collect(then_body, reads, writes);
                        collect(else_body, reads, writes);
                    }
                    Stmt::Loop { body, .. } => collect(body, reads, writes),
                    _ => {}
                }
            }
        }
        collect(post, &mut reads, &mut writes);
        if let Some(a) = writes.iter().find(|w| reads.contains(w)) {
            return Err(PassError::Invalid(format!(
                "post-loop code reads and writes `{a}`; it cannot be re-executed on resume"
            )));
        }
    }

    let use_idem = d.idem;
    let eliminate_log = use_idem && idem.idempotent;
    let durable_log = opts.bug != Some(ProtocolBug::UnpersistedLog);
    let dp = {
        let mut v = *d;
        if opts.bug == Some(ProtocolBug::MissingPcommit) {
            v.durable_wpq = true;
        }
        v
    };

    // Shadows for shared arrays written anywhere in the kernel (the resume
    // path reconstructs shared memory from them). Log elimination only
    // applies to loops without shared-memory communication.
    let shared = shared_written_in(&k.body);
    let eliminate_log = eliminate_log && shared.is_empty();
    let shadows: Vec<(String, i64)> =
        shared.iter().map(|s| (s.clone(), shadow_slots(&k, s, grid))).collect();
    for (s, slots) in &shadows {
        let name = shadow_name(s);
        out.aux_arrays.insert(name.clone(), AuxKind::Shadow);
        insert_alloc(&mut out.host, &name, GridScalar::constant(slots * grid.grid_dim));
        k.params.push((name, ParamSpace::Global));
    }

    let through = dp.mech == Mech::Wt;
    // Mirror kernel-wide so pre-loop shared initialization reaches the
    // shadow as well; resume rebuilds shared memory from it.
    let body = std::mem::take(&mut k.body);
    k.body = mirror_shared_stores(&mut k, body, &shadows, through);
    let mut loop_body = match &mut k.body[body_index].stmt {
        Stmt::Loop { body, .. } => std::mem::take(body),
        _ => unreachable!(),
    };
    if through {
        rewrite_stores_wt(&mut loop_body);
    }

    // Aux arrays: per-shadow logs, flags and iteration metadata.
    let mut log_entries: Vec<(String, String, String, i64)> = Vec::new();
    if !eliminate_log {
        for (s, slots) in &shadows {
            let log = format!("undo_{}", shadow_name(s));
            out.aux_arrays.insert(log.clone(), AuxKind::UndoLog);
            insert_alloc(&mut out.host, &log, GridScalar::constant(slots * grid.grid_dim));
            k.params.push((log.clone(), ParamSpace::Global));
            log_entries.push((log, shadow_name(s), s.clone(), *slots));
        }
    }
    for (name, kind) in [
        (FLAG_ARRAY, AuxKind::Flag),
        (LAST_ITER, AuxKind::Meta),
        (LAST_LOG_ITER, AuxKind::Meta),
    ] {
        out.aux_arrays.insert(name.into(), kind);
        if kind == AuxKind::Flag && !out.flag_arrays.iter().any(|f| f == name) {
            out.flag_arrays.push(name.into());
        }
        insert_alloc(&mut out.host, name, GridScalar { c: 0, cd: 0, gd: 1, both: 0 });
        k.params.push((name.into(), ParamSpace::Global));
    }

    // Sentinel: lo - step, materialized into a register at kernel entry.
    let sentinel_gs = lo_gs.add(&step_gs.neg());
    let (mut preloop, sreg) = grid_scalar_to_reg(&mut k, &sentinel_gs);
    for meta in [LAST_ITER, LAST_LOG_ITER] {
        preloop.push(
            Stmt::Store {
                space: MemSpace::Global,
                array: meta.into(),
                index: cta_flag_index(),
                value: Operand::Reg(sreg),
                through: true,
            }
            .into(),
        );
    }
    preloop.push(Stmt::Sfence.into());

    // Iteration prologue: log the shadow and the last committed iteration,
    // persist, barrier, raise the flag.
    let mut prologue: Vec<StmtNode> = Vec::new();
    if !eliminate_log {
        for (log, shadow, _, slots) in &log_entries {
            let q = fresh_iter(&mut k, "q");
            let lv = fresh_reg(&mut k, "logv");
            let idx = AffineExpr {
                base: GridScalar::default(),
                terms: vec![
                    (AffVar::Tid, GridScalar::constant(1)),
                    (AffVar::Ctaid, GridScalar::constant(*slots)),
                    (AffVar::Iter(q), GridScalar::constant(1)),
                ],
            }
            .normalize();
            prologue.push(
                Stmt::Loop {
                    iter: q,
                    lo: GridScalar::constant(0),
                    hi: GridScalar::constant(*slots),
                    step: GridScalar { c: 0, cd: 1, gd: 0, both: 0 },
                    body: vec![
                        Stmt::Load {
                            dst: lv,
                            space: MemSpace::Global,
                            array: shadow.clone(),
                            index: AddressExpr::Affine(idx.clone()),
                        }
                        .into(),
                        Stmt::Store {
                            space: MemSpace::Global,
                            array: log.clone(),
                            index: AddressExpr::Affine(idx),
                            value: Operand::Reg(lv),
                            through: durable_log,
                        }
                        .into(),
                    ],
                    pragma: None,
                }
                .into(),
            );
        }
        let liv = fresh_reg(&mut k, "liv");
        prologue.push(
            Stmt::Load {
                dst: liv,
                space: MemSpace::Global,
                array: LAST_ITER.into(),
                index: cta_flag_index(),
            }
            .into(),
        );
        prologue.push(
            Stmt::Store {
                space: MemSpace::Global,
                array: LAST_LOG_ITER.into(),
                index: cta_flag_index(),
                value: Operand::Reg(liv),
                through: durable_log,
            }
            .into(),
        );
        prologue.extend(persist_pair(&dp));
        prologue.push(Stmt::Syncthreads.into());
        prologue.push(guarded_tid0(vec![flag_write(FlagState::InTx, cta_flag_index(), true)]));
        prologue.extend(persist_pair(&dp));
    } else {
        // No shared carry: every thread raises the flag (benign race).
        prologue.push(flag_write(FlagState::InTx, cta_flag_index(), true));
        prologue.extend(persist_pair(&dp));
    }

    // Iteration tail: persist the epoch, record the iteration, complete.
    let mut tail: Vec<StmtNode> = Vec::new();
    if opts.bug != Some(ProtocolBug::MissingOutputPersist) {
        match dp.mech {
            Mech::L2wb => {
                if !matches!(loop_body.last().map(|n| &n.stmt), Some(Stmt::Syncthreads)) {
                    tail.push(Stmt::Syncthreads.into());
                }
                tail.push(guarded_tid0(vec![Stmt::L2wb.into()]));
            }
            Mech::Wt => {}
            Mech::Clwb => {
                return Err(PassError::Invalid(
                    "loop-level transactions persist via l2wb or wt".into(),
                ))
            }
        }
    }
    tail.push(
        Stmt::Store {
            space: MemSpace::Global,
            array: LAST_ITER.into(),
            index: cta_flag_index(),
            value: Operand::Iter(iter),
            through: true,
        }
        .into(),
    );
    tail.extend(persist_pair(&dp));
    tail.push(Stmt::Syncthreads.into());
    tail.push(guarded_tid0(vec![flag_write(FlagState::Complete, cta_flag_index(), true)]));
    tail.extend(persist_pair(&dp));

    let mut new_body = prologue;
    new_body.extend(loop_body);
    new_body.extend(tail);
    if let Stmt::Loop { body, .. } = &mut k.body[body_index].stmt {
        *body = new_body;
    }
    // The sentinel initialization runs before the loop.
    let preloop_len = preloop.len();
    for (off, stmt) in preloop.into_iter().enumerate() {
        k.body.insert(body_index + off, stmt);
    }

    let lo = lo_gs.eval(grid);
    let step = step_gs.eval(grid);
    let log_words: i64 = log_entries.iter().map(|(_, _, _, s)| s * grid.grid_dim).sum();
    out.kernels[kidx] = k;

    let policy = RecoveryPolicy {
        scope: EpochScope::Loop,
        uses_undo_log: !eliminate_log,
        idempotent_reexec: eliminate_log,
        log_layout: if eliminate_log {
            LogLayout::None
        } else {
            LogLayout::ShadowCopy { entries: log_entries }
        },
        flag_array: FLAG_ARRAY.into(),
        kernel: kernel_name.to_string(),
        loop_info: Some(LoopInfo {
            body_index: body_index + preloop_len,
            lo,
            step,
            sentinel: lo - step,
        }),
    };
    Ok(TxOutcome { unit: out, policy, notes: Vec::new(), log_words })
}

/// Materialize a grid scalar into a register with a short arith sequence.
fn grid_scalar_to_reg(k: &mut KernelProgram, gs: &GridScalar) -> (Vec<StmtNode>, RegId) {
    let r = fresh_reg(k, "gsv");
    let mut out: Vec<StmtNode> = vec![Stmt::Mov { dst: r, a: Operand::Imm(gs.c) }.into()];
    let add_term = |out: &mut Vec<StmtNode>, k: &mut KernelProgram, coef: i64, parts: &[Builtin]| {
        if coef == 0 {
            return;
        }
        let t = fresh_reg(k, "gst");
        out.push(Stmt::Arith {
            dst: t,
            op: BinOp::Mul,
            a: Operand::Builtin(parts[0]),
            b: Operand::Imm(coef),
        }
        .into());
        for b in &parts[1..] {
            out.push(
                Stmt::Arith { dst: t, op: BinOp::Mul, a: Operand::Reg(t), b: Operand::Builtin(*b) }
                    .into(),
            );
        }
        out.push(Stmt::Arith { dst: r, op: BinOp::Add, a: Operand::Reg(r), b: Operand::Reg(t) }
            .into());
    };
    add_term(&mut out, k, gs.cd, &[Builtin::Ctadim]);
    add_term(&mut out, k, gs.gd, &[Builtin::Griddim]);
    add_term(&mut out, k, gs.both, &[Builtin::Ctadim, Builtin::Griddim]);
    (out, r)
}
