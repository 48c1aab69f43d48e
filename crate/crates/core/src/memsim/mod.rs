//! Deterministic memory-hierarchy simulator with persistent-memory
//! semantics.
//!
//! Execution is a discrete-event loop: warps issue one instruction at a
//! time (seeded round-robin among equally-ready warps), write-pending
//! queues drain continuously in the background, and every memory-op issue,
//! WPQ insertion, drain and host step is one numbered event. A crash point
//! is permitted after any event; what survives is the NVM image plus the
//! durable-WPQ contents, which by construction equals the durability-trace
//! prefix replayed over the input.

pub mod config;
pub mod machine;


pub use config::MachineConfig;
pub use machine::{AddrMap, Cause, Machine, Origin, HOST_ORIGIN};

use crate::exec::{self, AccessCtx, Backend, ExecFault, StepSignal};
use crate::lang::ast::*;
use crate::passes::KernelProfile;
use crate::refexec::MemoryImage;
use machine::Push;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One line-write that reached the persistence domain.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub event: u64,
    pub time: u64,
    pub line: i64,
    pub cause: Cause,
    /// Who issued the persisting operation (host steps use cta = warp = -1).
    pub cta: i64,
    pub warp: i64,
    /// Last writer of the line contents (epoch attribution).
    pub origin: Option<Origin>,
    /// Per-line write version carried by this entry.
    pub version: u64,
    /// Host-step entries share their step's group; crashes never split one.
    pub group: u64,
    pub words: Vec<(i64, i64)>,
}

/// Per-thread global-store issue order, for the strict-persistency check.
#[derive(Debug, Clone, Copy)]
pub struct StoreIssue {
    pub cta: i64,
    pub warp: i64,
    pub lane: usize,
    pub line: i64,
    pub seq: u64,
    pub issue_event: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct FenceComplete {
    pub cta: i64,
    pub warp: i64,
    pub epoch: Option<u64>,
    pub time: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SimStats {
    pub cycles: u64,
    pub nvm_line_writes: u64,
    pub clwb_count: u64,
    pub l2wb_count: u64,
    pub pcommit_count: u64,
    pub wt_count: u64,
    /// Durability-event words that landed in undo-log arrays.
    pub log_words_written: u64,
    /// Durability events by array class (data/log/flag/shadow/meta).
    pub writes_by_class: BTreeMap<String, u64>,
}

impl SimStats {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("cycles={}\n", self.cycles));
        s.push_str(&format!("nvmLineWrites={}\n", self.nvm_line_writes));
        s.push_str(&format!("clwbCount={}\n", self.clwb_count));
        s.push_str(&format!("l2wbCount={}\n", self.l2wb_count));
        s.push_str(&format!("pcommitCount={}\n", self.pcommit_count));
        s.push_str(&format!("wtCount={}\n", self.wt_count));
        s.push_str(&format!("logWordsWritten={}\n", self.log_words_written));
        for (k, v) in &self.writes_by_class {
            s.push_str(&format!("writes.{k}={v}\n"));
        }
        s
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub final_image: MemoryImage,
    pub persistent_image: MemoryImage,
    pub trace: Vec<TraceEntry>,
    pub stats: SimStats,
    pub fence_log: Vec<FenceComplete>,
    pub store_log: Vec<StoreIssue>,
    pub profiles: Vec<KernelProfile>,
    pub total_events: u64,
    pub crashed: bool,
}

impl SimOutcome {
    /// Trace dump: one durability event per line, bit-exact.
    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for e in &self.trace {
            s.push_str(&format!(
                "{} 0x{:x} {} {} {}\n",
                e.event,
                e.line,
                e.cause.name(),
                e.cta,
                e.warp
            ));
        }
        s
    }
}

struct SimCore {
    event: u64,
    stop_at: Option<u64>,
    stopped: bool,
    trace: Vec<TraceEntry>,
    store_log: Vec<StoreIssue>,
    fence_log: Vec<FenceComplete>,
    stats: SimStats,
    group: u64,
    class_of: BTreeMap<String, String>,
    wpq_durable: bool,
    rng: ChaCha8Rng,
}

impl SimCore {
    fn bump(&mut self) -> u64 {
        let e = self.event;
        self.event += 1;
        if let Some(k) = self.stop_at {
            if e >= k {
                self.stopped = true;
            }
        }
        e
    }

    fn classify_words(&mut self, map: &AddrMap, words: &[(i64, i64)]) {
        let mut seen: Vec<&str> = Vec::new();
        for (addr, _) in words {
            if let Some((name, _)) = map.array_of(*addr) {
                if seen.contains(&name) {
                    continue;
                }
                let class = self.class_of.get(name).cloned().unwrap_or_else(|| "data".into());
                if class == "log" {
                    // Count every log word, not just one per line.
                    let n = words
                        .iter()
                        .filter(|(a, _)| map.array_of(*a).map(|(m, _)| m) == Some(name))
                        .count() as u64;
                    self.stats.log_words_written += n;
                }
                *self.stats.writes_by_class.entry(class).or_insert(0) += 1;
                let name_owned: &str = name;
                seen.push(name_owned);
            }
        }
    }

    /// Record a durability event.
    fn durability(
        &mut self,
        map: &AddrMap,
        time: u64,
        cause: Cause,
        issuer: Origin,
        entry: &machine::WpqEntry,
        group: Option<u64>,
    ) {
        let ev = self.bump();
        self.stats.nvm_line_writes += 1;
        self.classify_words(map, &entry.words);
        self.trace.push(TraceEntry {
            event: ev,
            time,
            line: entry.line,
            cause,
            cta: issuer.cta,
            warp: issuer.warp,
            origin: entry.origin,
            version: entry.version,
            group: group.unwrap_or(ev),
            words: entry.words.clone(),
        });
    }
}

struct WarpTiming {
    ready: u64,
    pending_acks: Vec<u64>,
    at_barrier: bool,
    pcommit_wait: bool,
    pcommit_issue: u64,
    store_seq: Vec<u64>,
    sm: usize,
}

/// Backend wiring one warp's instruction into the machine and the clock.
struct TimingBackend<'a> {
    m: &'a mut Machine,
    core: &'a mut SimCore,
    wt: &'a mut WarpTiming,
    shared: &'a mut BTreeMap<(i64, String), Vec<i64>>,
    grid: GridConfig,
    t: u64,
}

impl<'a> TimingBackend<'a> {
    fn l2_start(&self) -> u64 {
        self.t.max(self.m.l2_blocked_until)
    }

    fn resolve(&self, ctx: &AccessCtx, array: &str, idx: i64, lane: usize) -> Result<i64, ExecFault> {
        self.m.map.word_addr(array, idx).ok_or_else(|| ExecFault::OutOfBounds {
            array: array.to_string(),
            index: idx,
            cta: ctx.cta,
            tid: ctx.warp * self.grid.warp_size + lane as i64,
        })
    }

    fn origin(&self, ctx: &AccessCtx) -> Origin {
        Origin { cta: ctx.cta, warp: ctx.warp, epoch: ctx.epoch }
    }

    fn register_pushes(&mut self, pushes: Vec<Push>, earliest: u64, issuer: Origin) -> u64 {
        let mut last = earliest;
        for mut p in pushes {
            let (it, _dt) = self.m.wpq_insert(&mut p, earliest);
            last = last.max(it);
            if self.core.wpq_durable {
                let cause = p.entry.cause;
                self.core.durability(&self.m.map, it, cause, issuer, &p.entry, None);
            } else {
                self.core.bump();
            }
        }
        last
    }

    fn shared_slot(
        &mut self,
        ctx: &AccessCtx,
        array: &str,
        idx: i64,
        lane: usize,
    ) -> Result<&mut i64, ExecFault> {
        let key = (ctx.cta, array.to_string());
        let v = self.shared.get_mut(&key).ok_or_else(|| ExecFault::UnknownArray {
            array: array.to_string(),
        })?;
        if idx < 0 || idx >= v.len() as i64 {
            return Err(ExecFault::OutOfBounds {
                array: array.to_string(),
                index: idx,
                cta: ctx.cta,
                tid: ctx.warp * self.grid.warp_size + lane as i64,
            });
        }
        Ok(&mut v[idx as usize])
    }
}

impl<'a> Backend for TimingBackend<'a> {
    fn load(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        reads: &[(usize, i64)],
    ) -> Result<Vec<i64>, ExecFault> {
        if space == MemSpace::Shared {
            let mut out = Vec::with_capacity(reads.len());
            for (lane, idx) in reads {
                out.push(*self.shared_slot(ctx, array, *idx, *lane)?);
            }
            self.wt.ready = self.t + self.m.cfg.lat_l1;
            return Ok(out);
        }
        self.core.bump();
        let mut addrs = Vec::with_capacity(reads.len());
        for (lane, idx) in reads {
            addrs.push(self.resolve(ctx, array, *idx, *lane)?);
        }
        let start = self.l2_start();
        let (vals, cost, pushes) = self.m.load(self.wt.sm, &addrs, start);
        self.register_pushes(pushes, start + cost, self.origin(ctx));
        // Loads block the warp until data returns.
        self.wt.ready = start + cost;
        Ok(vals)
    }

    fn store(
        &mut self,
        ctx: &AccessCtx,
        space: MemSpace,
        array: &str,
        writes: &[(usize, i64, i64)],
        through: bool,
    ) -> Result<(), ExecFault> {
        if space == MemSpace::Shared {
            for (lane, idx, val) in writes {
                *self.shared_slot(ctx, array, *idx, *lane)? = *val;
            }
            self.wt.ready = self.t + self.m.cfg.lat_l1;
            return Ok(());
        }
        let issue_event = self.core.bump();
        let origin = self.origin(ctx);
        let start = self.l2_start();
        if through {
            // No coalescing: one WPQ entry per lane; acknowledged at NVM.
            for (lane, idx, val) in writes {
                let addr = self.resolve(ctx, array, *idx, *lane)?;
                self.core.stats.wt_count += 1;
                let seq = self.wt.store_seq[*lane];
                self.wt.store_seq[*lane] += 1;
                self.core.store_log.push(StoreIssue {
                    cta: ctx.cta,
                    warp: ctx.warp,
                    lane: *lane,
                    line: self.m.map.line_of(addr),
                    seq,
                    issue_event,
                });
                let mut push = self.m.store_wt(self.wt.sm, addr, *val, origin);
                let (it, dt) = self.m.wpq_insert(&mut push, start + self.m.cfg.lat_l2);
                if self.core.wpq_durable {
                    self.core.durability(&self.m.map, it, Cause::Wt, origin, &push.entry, None);
                } else {
                    self.core.bump();
                }
                self.wt.pending_acks.push(dt);
            }
        } else {
            let mut resolved = Vec::with_capacity(writes.len());
            for (lane, idx, val) in writes {
                let addr = self.resolve(ctx, array, *idx, *lane)?;
                let seq = self.wt.store_seq[*lane];
                self.wt.store_seq[*lane] += 1;
                self.core.store_log.push(StoreIssue {
                    cta: ctx.cta,
                    warp: ctx.warp,
                    lane: *lane,
                    line: self.m.map.line_of(addr),
                    seq,
                    issue_event,
                });
                resolved.push((addr, *val));
            }
            let (cost, pushes) = self.m.store(self.wt.sm, &resolved, origin, start);
            self.register_pushes(pushes, start + cost, origin);
            self.wt.pending_acks.push(start + cost);
        }
        self.wt.ready = self.t + 1;
        Ok(())
    }

    fn atomic(
        &mut self,
        ctx: &AccessCtx,
        op: AtomicOp,
        array: &str,
        ops: &[(usize, i64, i64)],
    ) -> Result<(), ExecFault> {
        self.core.bump();
        let origin = self.origin(ctx);
        let start = self.l2_start();
        let mut acc = 0u64;
        for (lane, idx, val) in ops {
            let addr = self.resolve(ctx, array, *idx, *lane)?;
            let v = *val;
            let (cost, pushes) =
                self.m.atomic_rmw(self.wt.sm, addr, |old| exec::backend::apply_atomic(op, old, v), origin, start);
            acc += cost;
            self.register_pushes(pushes, start + acc, origin);
        }
        self.wt.pending_acks.push(start + acc);
        self.wt.ready = self.t + 1;
        Ok(())
    }

    fn clwb(
        &mut self,
        ctx: &AccessCtx,
        array: &str,
        addrs: &[(usize, i64)],
    ) -> Result<(), ExecFault> {
        self.core.bump();
        let origin = self.origin(ctx);
        let start = self.l2_start();
        let mut lines: Vec<i64> = Vec::new();
        for (lane, idx) in addrs {
            let addr = self.resolve(ctx, array, *idx, *lane)?;
            let line = self.m.map.line_of(addr);
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        for line in lines {
            self.core.stats.clwb_count += 1;
            match self.m.clwb_line(line) {
                Some(mut push) => {
                    let (it, _dt) = self.m.wpq_insert(&mut push, start + self.m.cfg.lat_l2);
                    if self.core.wpq_durable {
                        self.core.durability(&self.m.map, it, Cause::Clwb, origin, &push.entry, None);
                    } else {
                        self.core.bump();
                    }
                    // Acknowledged when the line reaches the WPQ.
                    self.wt.pending_acks.push(it);
                }
                None => {
                    // Clean line: acknowledgement only, no durability event.
                    self.wt.pending_acks.push(start + self.m.cfg.lat_l2);
                }
            }
        }
        self.wt.ready = self.t + 1;
        Ok(())
    }

    fn l2wb(&mut self, ctx: &AccessCtx) -> Result<(), ExecFault> {
        self.core.bump();
        self.core.stats.l2wb_count += 1;
        let origin = self.origin(ctx);
        let start = self.l2_start();
        let (pushes, scan) = self.m.l2wb_scan(Cause::L2wb);
        let scan_done = start + self.m.cfg.lat_l2 + scan;
        self.m.l2_blocked_until = scan_done;
        let last = self.register_pushes(pushes, scan_done, origin);
        assert_eq!(self.m.dirty_line_count(), 0, "l2wb leaves no dirty line");
        self.wt.pending_acks.push(last.max(scan_done));
        self.wt.ready = self.t + 1;
        Ok(())
    }

    fn sfence(&mut self, ctx: &AccessCtx) -> Result<(), ExecFault> {
        self.core.bump();
        let completion =
            self.wt.pending_acks.iter().copied().max().unwrap_or(self.t).max(self.t + 1);
        self.wt.pending_acks.clear();
        self.wt.ready = completion;
        self.core.fence_log.push(FenceComplete {
            cta: ctx.cta,
            warp: ctx.warp,
            epoch: ctx.epoch,
            time: completion,
        });
        Ok(())
    }

    fn pcommit(&mut self, _ctx: &AccessCtx) -> Result<(), ExecFault> {
        self.core.bump();
        self.core.stats.pcommit_count += 1;
        if self.m.all_wpqs_empty() {
            self.wt.ready = self.t + 1;
        } else {
            self.wt.pcommit_wait = true;
            self.wt.pcommit_issue = self.t;
        }
        Ok(())
    }
}

struct KernelSim<'a> {
    kernel: &'a KernelProgram,
    grid: GridConfig,
    prog: exec::ExecProgram,
    num_iters: usize,
}

/// The iterator id of the epoch-anchored loop, if the unit carries one.
fn anchored_iter(unit: &ProgramUnit, kernel: &KernelProgram) -> Option<IterId> {
    let mut found = None;
    kernel.visit(&mut |node| {
        if let Stmt::Loop { iter, pragma: Some(p), .. } = &node.stmt {
            if let Some(d) = unit.directives.get(*p) {
                if d.scope == Some(EpochScope::Loop) {
                    found = Some(*iter);
                }
            }
        }
    });
    found
}

fn drain_step(m: &mut Machine, core: &mut SimCore, ctrl: usize) {
    let entry = m.drain_one(ctrl);
    if core.wpq_durable {
        // Already durable at insertion; the drain is only a movement.
        core.bump();
    } else {
        let issuer = entry.origin.unwrap_or(HOST_ORIGIN);
        let (t, cause) = (entry.drain_time, entry.cause);
        core.durability(&m.map, t, cause, issuer, &entry, None);
    }
}

/// Process pending drains up to (and including) time `upto`; release any
/// pcommit waiters once all queues drain.
fn advance_drains(
    m: &mut Machine,
    core: &mut SimCore,
    timings: &mut [WarpTiming],
    upto: u64,
) {
    while let Some((ctrl, t)) = m.next_drain() {
        if t > upto || core.stopped {
            break;
        }
        drain_step(m, core, ctrl);
        if m.all_wpqs_empty() {
            for wt in timings.iter_mut() {
                if wt.pcommit_wait {
                    wt.pcommit_wait = false;
                    wt.ready = t.max(wt.pcommit_issue + 1);
                }
            }
        }
    }
}

fn run_kernel_sim(
    ks: &KernelSim,
    machine: &mut Machine,
    core: &mut SimCore,
    launch_time: u64,
) -> Result<(u64, KernelProfile), ExecFault> {
    let grid = ks.grid;
    let cfg = machine.cfg.clone();
    let num_ctas = grid.grid_dim;

    let mut shared: BTreeMap<(i64, String), Vec<i64>> = BTreeMap::new();
    let kernel_decls: Vec<(String, i64)> = ks
        .kernel
        .shared_decls
        .iter()
        .map(|(n, s)| (n.clone(), s.eval(&grid).max(0)))
        .collect();

    // CTA wave scheduling: cta c runs on SM c % numSMs; at most
    // maxCtasPerSm CTAs of one SM are resident at a time.
    let mut sm_pending: Vec<Vec<i64>> = vec![Vec::new(); cfg.num_sms as usize];
    for c in 0..num_ctas {
        sm_pending[(c % cfg.num_sms) as usize].push(c);
    }
    for q in &mut sm_pending {
        q.reverse(); // pop() yields the lowest CTA first
    }

    let mut exec_states: Vec<exec::WarpState> = Vec::new();
    let mut timings: Vec<WarpTiming> = Vec::new();
    let mut cta_of_warp: Vec<i64> = Vec::new();
    let mut cta_start: BTreeMap<i64, u64> = BTreeMap::new();
    let mut cta_end: BTreeMap<i64, u64> = BTreeMap::new();

    fn admit_cta(
        ks: &KernelSim,
        sm: usize,
        at: u64,
        exec_states: &mut Vec<exec::WarpState>,
        timings: &mut Vec<WarpTiming>,
        cta_of_warp: &mut Vec<i64>,
        cta_start: &mut BTreeMap<i64, u64>,
        sm_pending: &mut [Vec<i64>],
        shared: &mut BTreeMap<(i64, String), Vec<i64>>,
        decls: &[(String, i64)],
    ) {
        if let Some(c) = sm_pending[sm].pop() {
            cta_start.insert(c, at);
            for w in 0..ks.grid.warps_per_cta() {
                exec_states.push(exec::WarpState::new(c, w, &ks.grid, &ks.prog, ks.num_iters));
                timings.push(WarpTiming {
                    ready: at,
                    pending_acks: Vec::new(),
                    at_barrier: false,
                    pcommit_wait: false,
                    pcommit_issue: 0,
                    store_seq: vec![0; ks.grid.warp_size as usize],
                    sm,
                });
                cta_of_warp.push(c);
            }
            shared_init(shared, c, decls);
        }
    }
    for sm in 0..cfg.num_sms as usize {
        for _ in 0..cfg.max_ctas_per_sm {
            admit_cta(
                ks,
                sm,
                launch_time,
                &mut exec_states,
                &mut timings,
                &mut cta_of_warp,
                &mut cta_start,
                &mut sm_pending,
                &mut shared,
                &kernel_decls,
            );
        }
    }

    let mut end_time = launch_time;
    loop {
        if core.stopped {
            break;
        }
        // Runnable warps and the earliest issue time.
        let mut tmin = u64::MAX;
        for (i, w) in exec_states.iter().enumerate() {
            let t = &timings[i];
            if !w.done && !t.at_barrier && !t.pcommit_wait {
                tmin = tmin.min(t.ready);
            }
        }
        if tmin == u64::MAX {
            // Nothing runnable: wait on drains (pcommit) or we are done.
            let all_done = exec_states.iter().all(|w| w.done);
            if all_done && sm_pending.iter().all(|q| q.is_empty()) {
                break;
            }
            if let Some((ctrl, t)) = machine.next_drain() {
                drain_step(machine, core, ctrl);
                if machine.all_wpqs_empty() {
                    for wt in timings.iter_mut() {
                        if wt.pcommit_wait {
                            wt.pcommit_wait = false;
                            wt.ready = t.max(wt.pcommit_issue + 1);
                        }
                    }
                }
                continue;
            }
            // Barriers that can never release are a divergence bug.
            let cta = exec_states.iter().position(|w| !w.done).map(|i| exec_states[i].cta);
            return Err(ExecFault::BarrierDivergence { cta: cta.unwrap_or(0), warp: 0 });
        }
        advance_drains(machine, core, &mut timings, tmin);
        if core.stopped {
            break;
        }
        // A drain may have released a pcommit waiter earlier than tmin.
        let mut recheck = false;
        for (i, w) in exec_states.iter().enumerate() {
            let t = &timings[i];
            if !w.done && !t.at_barrier && !t.pcommit_wait && t.ready < tmin {
                recheck = true;
            }
        }
        if recheck {
            continue;
        }
        // Seeded choice among the warps ready at tmin.
        let ready: Vec<usize> = (0..exec_states.len())
            .filter(|&i| {
                let t = &timings[i];
                !exec_states[i].done && !t.at_barrier && !t.pcommit_wait && t.ready == tmin
            })
            .collect();
        let pick = ready[core.rng.gen_range(0..ready.len())];
        let sm = timings[pick].sm;
        let signal = {
            let mut backend = TimingBackend {
                m: machine,
                core,
                wt: &mut timings[pick],
                shared: &mut shared,
                grid,
                t: tmin,
            };
            // Non-memory ops advance the clock by one cycle by default.
            backend.wt.ready = tmin + 1;
            exec::step_warp(&ks.prog, &mut exec_states[pick], &grid, &mut backend)?
        };
        end_time = end_time.max(timings[pick].ready);
        match signal {
            StepSignal::Ran => {}
            StepSignal::Barrier => {
                timings[pick].at_barrier = true;
                let cta = cta_of_warp[pick];
                let members: Vec<usize> =
                    (0..exec_states.len()).filter(|&i| cta_of_warp[i] == cta).collect();
                if members.iter().any(|&i| exec_states[i].done) {
                    return Err(ExecFault::BarrierDivergence { cta, warp: exec_states[pick].warp });
                }
                if members.iter().all(|&i| timings[i].at_barrier) {
                    let release = members.iter().map(|&i| timings[i].ready).max().unwrap();
                    for &i in &members {
                        timings[i].at_barrier = false;
                        timings[i].ready = release;
                    }
                }
            }
            StepSignal::Finished => {
                let cta = cta_of_warp[pick];
                let members: Vec<usize> =
                    (0..exec_states.len()).filter(|&i| cta_of_warp[i] == cta).collect();
                if members.iter().any(|&i| timings[i].at_barrier) {
                    return Err(ExecFault::BarrierDivergence { cta, warp: exec_states[pick].warp });
                }
                if members.iter().all(|&i| exec_states[i].done) {
                    let done_at = members.iter().map(|&i| timings[i].ready).max().unwrap();
                    cta_end.insert(cta, done_at);
                    admit_cta(
                        ks,
                        sm,
                        done_at,
                        &mut exec_states,
                        &mut timings,
                        &mut cta_of_warp,
                        &mut cta_start,
                        &mut sm_pending,
                        &mut shared,
                        &kernel_decls,
                    );
                }
            }
        }
    }

    let kernel_cycles = end_time.saturating_sub(launch_time);
    let mut cta_cycles = 0u64;
    let mut n = 0u64;
    for (c, s) in &cta_start {
        if let Some(e) = cta_end.get(c) {
            cta_cycles += e.saturating_sub(*s);
            n += 1;
        }
    }
    let profile = KernelProfile {
        kernel_cycles,
        mean_cta_cycles: if n > 0 { cta_cycles / n } else { 0 },
        ctas: n,
    };
    Ok((end_time, profile))
}

fn shared_init(
    shared: &mut BTreeMap<(i64, String), Vec<i64>>,
    cta: i64,
    decls: &[(String, i64)],
) {
    for (name, len) in decls {
        shared.insert((cta, name.clone()), vec![0; *len as usize]);
    }
}

/// Replay a durability-trace prefix onto the input image: the persistent
/// image at any crash point.
pub fn replay_prefix(
    map: &AddrMap,
    input: &MemoryImage,
    flags: &[String],
    trace: &[TraceEntry],
    upto_event: u64,
) -> MemoryImage {
    let mut words = vec![0i64; map.total_words.max(1) as usize];
    for (name, base, len) in &map.arrays {
        if let Some(vals) = input.arrays.get(name) {
            for (i, v) in vals.iter().take(*len as usize).enumerate() {
                words[(*base + i as i64) as usize] = *v;
            }
        }
    }
    for e in trace {
        if e.event > upto_event {
            break;
        }
        for (addr, val) in &e.words {
            words[*addr as usize] = *val;
        }
    }
    let mut img = MemoryImage::new();
    for (name, base, len) in &map.arrays {
        img.set_array(name, words[*base as usize..(*base + *len) as usize].to_vec());
    }
    for f in flags {
        img.flag_region.insert(f.clone());
    }
    img
}

/// Execute the whole host script (kernel launches included) on the timing
/// simulator. `crash_at` halts after that event; the persistent image is
/// then the trace prefix replayed over the input.
pub fn simulate(
    unit: &ProgramUnit,
    grid: GridConfig,
    cfg: &MachineConfig,
    input: &MemoryImage,
    seed: u64,
    crash_at: Option<u64>,
) -> Result<SimOutcome, ExecFault> {
    let map = AddrMap::build(unit, &grid, cfg);
    let mut machine = Machine::new(cfg, map.clone(), input);
    let mut class_of: BTreeMap<String, String> = BTreeMap::new();
    for (name, kind) in &unit.aux_arrays {
        let class = match kind {
            AuxKind::UndoLog => "log",
            AuxKind::Shadow => "shadow",
            AuxKind::Flag => "flag",
            AuxKind::Meta => "meta",
        };
        class_of.insert(name.clone(), class.to_string());
    }
    let mut core = SimCore {
        event: 0,
        stop_at: crash_at,
        stopped: false,
        trace: Vec::new(),
        store_log: Vec::new(),
        fence_log: Vec::new(),
        stats: SimStats::default(),
        group: 0,
        class_of,
        wpq_durable: cfg.wpq_durable,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let mut host_time = 0u64;
    let mut device_free = 0u64;
    let mut profiles = Vec::new();
    let mut no_timings: Vec<WarpTiming> = Vec::new();

    for step in &unit.host.steps {
        if core.stopped {
            break;
        }
        advance_drains(&mut machine, &mut core, &mut no_timings, host_time);
        if core.stopped {
            break;
        }
        let group = core.bump();
        core.group = group;
        match &step.step {
            HostStep::Alloc { .. } | HostStep::ConsumeOutput { .. } => {}
            HostStep::MemcpyD2D { dst, src, size } => {
                let n = size.eval(&grid).max(0);
                let (sb, sl) = map
                    .base_len(src)
                    .ok_or_else(|| ExecFault::UnknownArray { array: src.clone() })?;
                let (db, dl) = map
                    .base_len(dst)
                    .ok_or_else(|| ExecFault::UnknownArray { array: dst.clone() })?;
                let n = n.min(sl).min(dl);
                let words: Vec<(i64, i64)> =
                    (0..n).map(|i| (db + i, machine.read_word_coherent(sb + i))).collect();
                machine.host_write(&words);
                // One durability entry per touched line, all in this
                // step's atomic group.
                let mut by_line: BTreeMap<i64, Vec<(i64, i64)>> = BTreeMap::new();
                for (a, v) in words {
                    by_line.entry(map.line_of(a)).or_default().push((a, v));
                }
                let lines = by_line.len() as u64;
                for (line, ws) in by_line {
                    let entry = machine::WpqEntry {
                        line,
                        words: ws,
                        cause: Cause::Wt,
                        origin: Some(HOST_ORIGIN),
                        version: 0,
                        insert_time: host_time,
                        drain_time: host_time,
                        insert_event: 0,
                    };
                    core.durability(&map, host_time, Cause::Wt, HOST_ORIGIN, &entry, Some(group));
                }
                host_time += lines * cfg.write_latency();
            }
            HostStep::SetPersistentFlag { flag, value } => {
                let (b, _) = map
                    .base_len(flag)
                    .ok_or_else(|| ExecFault::UnknownArray { array: flag.clone() })?;
                let words = vec![(b, value.as_word())];
                machine.host_write(&words);
                let entry = machine::WpqEntry {
                    line: map.line_of(b),
                    words,
                    cause: Cause::Wt,
                    origin: Some(HOST_ORIGIN),
                    version: 0,
                    insert_time: host_time,
                    drain_time: host_time,
                    insert_event: 0,
                };
                core.durability(&map, host_time, Cause::Wt, HOST_ORIGIN, &entry, Some(group));
                host_time += cfg.write_latency();
            }
            HostStep::LaunchKernel { kernel, .. } => {
                let k = unit.kernel(kernel).ok_or_else(|| ExecFault::Invalid {
                    msg: format!("launch of undefined kernel `{kernel}`"),
                })?;
                let anchored = anchored_iter(unit, k);
                let ks = KernelSim {
                    kernel: k,
                    grid,
                    prog: exec::compile(k, anchored),
                    num_iters: k.iters.len(),
                };
                let start = host_time.max(device_free);
                let (end, profile) = run_kernel_sim(&ks, &mut machine, &mut core, start)?;
                device_free = end;
                profiles.push(profile);
            }
            HostStep::DeviceSync => {
                // Wait for the device and for every pending line to reach
                // NVM (the sync is the persist barrier).
                let mut t = host_time.max(device_free);
                while let Some((ctrl, dt)) = machine.next_drain() {
                    if core.stopped {
                        break;
                    }
                    drain_step(&mut machine, &mut core, ctrl);
                    t = t.max(dt);
                }
                host_time = t;
                device_free = t;
            }
            HostStep::L2wbApi => {
                let start = host_time.max(device_free).max(machine.l2_blocked_until);
                let (pushes, scan) = machine.l2wb_scan(Cause::L2wb);
                core.stats.l2wb_count += 1;
                let scan_done = start + cfg.lat_l2 + scan;
                machine.l2_blocked_until = scan_done;
                let mut last = scan_done;
                for mut p in pushes {
                    let (it, _dt) = machine.wpq_insert(&mut p, scan_done);
                    last = last.max(it);
                    if core.wpq_durable {
                        let cause = p.entry.cause;
                        core.durability(&map, it, cause, HOST_ORIGIN, &p.entry, None);
                    } else {
                        core.bump();
                    }
                }
                assert_eq!(machine.dirty_line_count(), 0, "l2wb leaves no dirty line");
                host_time = last;
            }
        }
    }

    let crashed = core.stopped;
    if !crashed {
        // Run every pending drain to quiescence.
        while let Some((ctrl, _)) = machine.next_drain() {
            drain_step(&mut machine, &mut core, ctrl);
        }
    }

    let persistent_image = if crashed {
        replay_prefix(&map, input, &unit.flag_arrays, &core.trace, crash_at.unwrap_or(u64::MAX))
    } else {
        let direct = machine.persistent_image(&unit.flag_arrays);
        // Trace-replay equivalence: the full trace replayed over the input
        // must equal the machine's own persistent projection.
        let replayed = replay_prefix(&map, input, &unit.flag_arrays, &core.trace, u64::MAX);
        assert_eq!(direct, replayed, "trace replay must reproduce the persistent image");
        direct
    };
    let final_image = machine.volatile_image(&unit.flag_arrays);

    let mut stats = core.stats;
    stats.cycles = host_time.max(device_free);
    Ok(SimOutcome {
        final_image,
        persistent_image,
        trace: core.trace,
        stats,
        fence_log: core.fence_log,
        store_log: core.store_log,
        profiles,
        total_events: core.event,
        crashed,
    })
}
