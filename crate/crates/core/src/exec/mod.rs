//! Shared SIMT execution engine.
//!
//! Kernels compile to a flat op list with structured control markers; a warp
//! is a resumable cursor over that list plus per-lane registers and a
//! divergence mask stack. Reconvergence falls out of the structured form:
//! an `if` reconverges at its end marker, loops never diverge (bounds are
//! launch-uniform). Both the flat reference interpreter and the timing
//! simulator drive this engine through the [`Backend`] trait; only the
//! scheduler and the memory model differ.

pub mod backend;

pub use backend::{AccessCtx, Backend, ExecFault};

use crate::lang::ast::*;

#[derive(Debug, Clone)]
pub enum XOp {
    Simple(Stmt),
    IfBegin { cond: Cond, else_pc: usize, end_pc: usize },
    ElseBegin { end_pc: usize },
    IfEnd,
    LoopBegin {
        iter: IterId,
        lo: GridScalar,
        hi: GridScalar,
        step: GridScalar,
        end_pc: usize,
        /// True for the loop an epoch directive is anchored on; the warp
        /// exposes its iteration ordinal while inside it.
        anchored: bool,
    },
    LoopEnd { begin_pc: usize },
    KernelEnd,
}

#[derive(Debug, Clone)]
pub struct ExecProgram {
    pub ops: Vec<XOp>,
    pub num_regs: usize,
}

/// Flatten a kernel. `anchored_iter` marks the loop whose iterations form
/// epochs (loop-level persistency), if any.
pub fn compile(kernel: &KernelProgram, anchored_iter: Option<IterId>) -> ExecProgram {
    fn emit(body: &[StmtNode], ops: &mut Vec<XOp>, anchored: Option<IterId>) {
        for node in body {
            match &node.stmt {
                Stmt::If { cond, then_body, else_body } => {
                    let begin = ops.len();
                    ops.push(XOp::IfBegin { cond: cond.clone(), else_pc: 0, end_pc: 0 });
                    emit(then_body, ops, anchored);
                    let else_pc = ops.len();
                    ops.push(XOp::ElseBegin { end_pc: 0 });
                    emit(else_body, ops, anchored);
                    let end_pc = ops.len();
                    ops.push(XOp::IfEnd);
                    match &mut ops[begin] {
                        XOp::IfBegin { else_pc: e, end_pc: x, .. } => {
                            *e = else_pc;
                            *x = end_pc;
                        }
                        _ => unreachable!(),
                    }
                    match &mut ops[else_pc] {
                        XOp::ElseBegin { end_pc: x } => *x = end_pc,
                        _ => unreachable!(),
                    }
                }
                Stmt::Loop { iter, lo, hi, step, body, .. } => {
                    let begin = ops.len();
                    ops.push(XOp::LoopBegin {
                        iter: *iter,
                        lo: *lo,
                        hi: *hi,
                        step: *step,
                        end_pc: 0,
                        anchored: anchored == Some(*iter),
                    });
                    emit(body, ops, anchored);
                    let end_pc = ops.len();
                    ops.push(XOp::LoopEnd { begin_pc: begin });
                    match &mut ops[begin] {
                        XOp::LoopBegin { end_pc: x, .. } => *x = end_pc,
                        _ => unreachable!(),
                    }
                }
                s => ops.push(XOp::Simple(s.clone())),
            }
        }
    }
    let mut ops = Vec::new();
    emit(&kernel.body, &mut ops, anchored_iter);
    ops.push(XOp::KernelEnd);
    ExecProgram { ops, num_regs: kernel.regs.len() }
}

pub type LaneMask = u64;

#[derive(Debug, Clone)]
enum Ctl {
    Join { restore: LaneMask, pending_else: Option<LaneMask> },
    Loop { iter: IterId, hi: i64, step: i64, begin_pc: usize, anchored: bool },
}

/// One warp's execution state.
#[derive(Debug, Clone)]
pub struct WarpState {
    pub cta: i64,
    /// Warp index within its CTA.
    pub warp: i64,
    pub pc: usize,
    /// Registers, lane-major: `regs[lane * num_regs + reg]`.
    pub regs: Vec<i64>,
    pub iters: Vec<i64>,
    pub mask: LaneMask,
    /// Lanes retired by `halt`.
    pub dead: LaneMask,
    ctl: Vec<Ctl>,
    num_regs: usize,
    /// Iteration ordinal of the anchored loop, when inside it.
    pub epoch: Option<u64>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSignal {
    /// Executed one op; warp can continue.
    Ran,
    /// Reached `syncthreads`; scheduler must release the barrier.
    Barrier,
    /// Warp finished the kernel.
    Finished,
}

impl WarpState {
    pub fn new(cta: i64, warp: i64, grid: &GridConfig, prog: &ExecProgram, num_iters: usize) -> Self {
        let lanes = grid.warp_size as usize;
        WarpState {
            cta,
            warp,
            pc: 0,
            regs: vec![0; lanes * prog.num_regs.max(1)],
            iters: vec![0; num_iters.max(1)],
            mask: if lanes >= 64 { !0 } else { (1u64 << lanes) - 1 },
            dead: 0,
            ctl: Vec::new(),
            num_regs: prog.num_regs.max(1),
            epoch: None,
            done: false,
        }
    }

    pub fn reg(&self, lane: usize, r: RegId) -> i64 {
        self.regs[lane * self.num_regs + r]
    }

    pub fn set_reg(&mut self, lane: usize, r: RegId, v: i64) {
        self.regs[lane * self.num_regs + r] = v;
    }

    /// CTA-local thread id of a lane.
    pub fn tid(&self, lane: usize, grid: &GridConfig) -> i64 {
        self.warp * grid.warp_size + lane as i64
    }

    pub fn live_mask(&self) -> LaneMask {
        self.mask & !self.dead
    }

    fn operand(&self, op: &Operand, lane: usize, grid: &GridConfig) -> i64 {
        match op {
            Operand::Reg(r) => self.reg(lane, *r),
            Operand::Imm(v) => *v,
            Operand::Builtin(Builtin::Tid) => self.tid(lane, grid),
            Operand::Builtin(Builtin::Ctaid) => self.cta,
            Operand::Builtin(Builtin::Ctadim) => grid.cta_dim,
            Operand::Builtin(Builtin::Griddim) => grid.grid_dim,
            Operand::Iter(i) => self.iters[*i],
        }
    }

    fn addr(&self, index: &AddressExpr, lane: usize, grid: &GridConfig) -> i64 {
        match index {
            AddressExpr::Affine(e) => e.eval(grid, self.cta, self.tid(lane, grid), &self.iters),
            AddressExpr::Opaque(r) => self.reg(lane, *r),
        }
    }

    fn lanes(&self) -> impl Iterator<Item = usize> + '_ {
        let m = self.live_mask();
        (0..64usize).filter(move |l| m & (1 << l) != 0)
    }
}

fn binop(op: BinOp, a: i64, b: i64) -> Result<i64, &'static str> {
    Ok(match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Div => {
            if b == 0 {
                return Err("division by zero");
            }
            a.div_euclid(b)
        }
        BinOp::Mod => {
            if b == 0 {
                return Err("division by zero");
            }
            a.rem_euclid(b)
        }
        BinOp::Min => a.min(b),
        BinOp::Max => a.max(b),
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => a.wrapping_shl(b as u32),
        BinOp::Shr => a.wrapping_shr(b as u32),
    })
}

/// Execute one op for a warp. Memory effects go through the backend; the
/// caller owns scheduling, barriers and fences.
pub fn step_warp<B: Backend>(
    prog: &ExecProgram,
    warp: &mut WarpState,
    grid: &GridConfig,
    backend: &mut B,
) -> Result<StepSignal, ExecFault> {
    debug_assert!(!warp.done);
    let ctx = AccessCtx { cta: warp.cta, warp: warp.warp, epoch: warp.epoch };
    match &prog.ops[warp.pc] {
        XOp::KernelEnd => {
            warp.done = true;
            return Ok(StepSignal::Finished);
        }
        XOp::IfBegin { cond, else_pc, end_pc } => {
            let mut t: LaneMask = 0;
            for lane in warp.lanes().collect::<Vec<_>>() {
                let a = warp.operand(&cond.a, lane, grid);
                let b = warp.operand(&cond.b, lane, grid);
                if cond.op.apply(a, b) {
                    t |= 1 << lane;
                }
            }
            let live = warp.live_mask();
            let f = live & !t;
            let _ = end_pc;
            if t != 0 {
                warp.ctl.push(Ctl::Join {
                    restore: warp.mask,
                    pending_else: if f != 0 { Some(f) } else { None },
                });
                warp.mask = t;
                warp.pc += 1;
            } else {
                warp.ctl.push(Ctl::Join { restore: warp.mask, pending_else: None });
                warp.mask = f;
                warp.pc = else_pc + 1;
            }
        }
        XOp::ElseBegin { end_pc } => {
            match warp.ctl.last_mut() {
                Some(Ctl::Join { pending_else, .. }) => match pending_else.take() {
                    Some(f) => {
                        warp.mask = f;
                        warp.pc += 1;
                    }
                    None => warp.pc = *end_pc,
                },
                _ => unreachable!("else without join frame"),
            }
        }
        XOp::IfEnd => {
            match warp.ctl.pop() {
                Some(Ctl::Join { restore, .. }) => {
                    warp.mask = restore;
                    warp.pc += 1;
                }
                _ => unreachable!("if end without join frame"),
            }
        }
        XOp::LoopBegin { iter, lo, hi, step, end_pc, anchored } => {
            let lo_v = lo.eval(grid);
            let hi_v = hi.eval(grid);
            let step_v = step.eval(grid);
            assert!(step_v > 0, "loop step must be positive");
            if lo_v < hi_v {
                warp.iters[*iter] = lo_v;
                warp.ctl.push(Ctl::Loop {
                    iter: *iter,
                    hi: hi_v,
                    step: step_v,
                    begin_pc: warp.pc,
                    anchored: *anchored,
                });
                if *anchored {
                    warp.epoch = Some(0);
                }
                warp.pc += 1;
            } else {
                warp.pc = end_pc + 1;
            }
        }
        XOp::LoopEnd { begin_pc } => {
            let _ = begin_pc;
            match warp.ctl.last_mut() {
                Some(Ctl::Loop { iter, hi, step, begin_pc, anchored }) => {
                    let iter = *iter;
                    warp.iters[iter] += *step;
                    if warp.iters[iter] < *hi {
                        warp.pc = *begin_pc + 1;
                        if *anchored {
                            warp.epoch = warp.epoch.map(|e| e + 1);
                        }
                    } else {
                        let anchored = *anchored;
                        warp.ctl.pop();
                        if anchored {
                            warp.epoch = None;
                        }
                        warp.pc += 1;
                    }
                }
                _ => unreachable!("loop end without loop frame"),
            }
        }
        XOp::Simple(stmt) => {
            let lanes: Vec<usize> = warp.lanes().collect();
            match stmt {
                Stmt::Arith { dst, op, a, b } => {
                    for &lane in &lanes {
                        let x = warp.operand(a, lane, grid);
                        let y = warp.operand(b, lane, grid);
                        let v = binop(*op, x, y).map_err(|m| ExecFault::Arith {
                            msg: m,
                            cta: warp.cta,
                            tid: warp.tid(lane, grid),
                        })?;
                        warp.set_reg(lane, *dst, v);
                    }
                }
                Stmt::Mov { dst, a } => {
                    for &lane in &lanes {
                        let v = warp.operand(a, lane, grid);
                        warp.set_reg(lane, *dst, v);
                    }
                }
                Stmt::Load { dst, space, array, index } => {
                    let reads: Vec<(usize, i64)> =
                        lanes.iter().map(|&l| (l, warp.addr(index, l, grid))).collect();
                    let vals = backend.load(&ctx, *space, array, &reads)?;
                    for ((lane, _), v) in reads.iter().zip(vals) {
                        warp.set_reg(*lane, *dst, v);
                    }
                }
                Stmt::Store { space, array, index, value, through } => {
                    let writes: Vec<(usize, i64, i64)> = lanes
                        .iter()
                        .map(|&l| (l, warp.addr(index, l, grid), warp.operand(value, l, grid)))
                        .collect();
                    backend.store(&ctx, *space, array, &writes, *through)?;
                }
                Stmt::Atomic { op, array, index, value } => {
                    let ops_: Vec<(usize, i64, i64)> = lanes
                        .iter()
                        .map(|&l| (l, warp.addr(index, l, grid), warp.operand(value, l, grid)))
                        .collect();
                    backend.atomic(&ctx, *op, array, &ops_)?;
                }
                Stmt::Clwb { array, index } => {
                    let addrs: Vec<(usize, i64)> =
                        lanes.iter().map(|&l| (l, warp.addr(index, l, grid))).collect();
                    backend.clwb(&ctx, array, &addrs)?;
                }
                Stmt::L2wb => backend.l2wb(&ctx)?,
                Stmt::Sfence => backend.sfence(&ctx)?,
                Stmt::Pcommit => backend.pcommit(&ctx)?,
                Stmt::Syncthreads => {
                    // All live lanes of the warp must arrive together;
                    // uniform conditionals are fine, divergent ones fault.
                    let ws = grid.warp_size as u32;
                    let all = if ws >= 64 { !0u64 } else { (1u64 << ws) - 1 } & !warp.dead;
                    if warp.live_mask() != all {
                        return Err(ExecFault::BarrierDivergence { cta: warp.cta, warp: warp.warp });
                    }
                    warp.pc += 1;
                    return Ok(StepSignal::Barrier);
                }
                Stmt::Halt => {
                    warp.dead |= warp.mask;
                    if warp.live_mask() == 0 && warp.dead.count_ones() as i64 >= grid.warp_size {
                        warp.done = true;
                        return Ok(StepSignal::Finished);
                    }
                }
                Stmt::If { .. } | Stmt::Loop { .. } => unreachable!("control ops are flattened"),
            }
            warp.pc += 1;
        }
    }
    Ok(StepSignal::Ran)
}
