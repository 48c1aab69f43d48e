//! Backward slicing of store addresses, used by the CTA-level epoch pass to
//! recompute addresses in the post-dominant exit block.

use super::ast::*;
use std::fmt;

/// Where a statement lives: indices into the nested statement lists.
pub type StmtPath = Vec<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Load,
    Store,
    Atomic,
    Clwb,
}

/// One memory access with its loop context (outermost first).
#[derive(Debug, Clone)]
pub struct AccessSite {
    pub path: StmtPath,
    pub kind: AccessKind,
    pub space: MemSpace,
    pub array: String,
    pub index: AddressExpr,
    pub through: bool,
    pub enclosing: Vec<LoopCtx>,
    /// True when the access sits under an `if` (its thread set may be a
    /// strict subset of the CTA).
    pub divergent: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LoopCtx {
    pub iter: IterId,
    pub lo: GridScalar,
    pub hi: GridScalar,
    pub step: GridScalar,
}

/// Collect every memory access in the kernel, in program order.
pub fn access_sites(kernel: &KernelProgram) -> Vec<AccessSite> {
    fn walk(
        body: &[StmtNode],
        path: &mut StmtPath,
        loops: &mut Vec<LoopCtx>,
        divergent: bool,
        out: &mut Vec<AccessSite>,
    ) {
        for (i, node) in body.iter().enumerate() {
            path.push(i);
            match &node.stmt {
                Stmt::Load { space, array, index, .. } => out.push(AccessSite {
                    path: path.clone(),
                    kind: AccessKind::Load,
                    space: *space,
                    array: array.clone(),
                    index: index.clone(),
                    through: false,
                    enclosing: loops.clone(),
                    divergent,
                }),
                Stmt::Store { space, array, index, through, .. } => out.push(AccessSite {
                    path: path.clone(),
                    kind: AccessKind::Store,
                    space: *space,
                    array: array.clone(),
                    index: index.clone(),
                    through: *through,
                    enclosing: loops.clone(),
                    divergent,
                }),
                Stmt::Atomic { array, index, .. } => out.push(AccessSite {
                    path: path.clone(),
                    kind: AccessKind::Atomic,
                    space: MemSpace::Global,
                    array: array.clone(),
                    index: index.clone(),
                    through: false,
                    enclosing: loops.clone(),
                    divergent,
                }),
                Stmt::Clwb { array, index } => out.push(AccessSite {
                    path: path.clone(),
                    kind: AccessKind::Clwb,
                    space: MemSpace::Global,
                    array: array.clone(),
                    index: index.clone(),
                    through: false,
                    enclosing: loops.clone(),
                    divergent,
                }),
                Stmt::If { then_body, else_body, .. } => {
                    path.push(0);
                    walk(then_body, path, loops, true, out);
                    path.pop();
                    path.push(1);
                    walk(else_body, path, loops, true, out);
                    path.pop();
                }
                Stmt::Loop { iter, lo, hi, step, body, .. } => {
                    loops.push(LoopCtx { iter: *iter, lo: *lo, hi: *hi, step: *step });
                    path.push(0);
                    walk(body, path, loops, divergent, out);
                    path.pop();
                    loops.pop();
                }
                _ => {}
            }
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(&kernel.body, &mut Vec::new(), &mut Vec::new(), false, &mut out);
    out
}

/// Global stores (`st` and `st.wt`) in program order.
pub fn global_store_sites(kernel: &KernelProgram) -> Vec<AccessSite> {
    access_sites(kernel)
        .into_iter()
        .filter(|a| a.kind == AccessKind::Store && a.space == MemSpace::Global)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceUnavailable {
    pub reason: String,
}

impl fmt::Display for SliceUnavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "address slice unavailable: {}", self.reason)
    }
}

impl std::error::Error for SliceUnavailable {}

/// Minimal instruction sequence recomputing a store's address at the exit
/// block. Affine addresses slice to the empty list (the expression itself
/// re-evaluates there; iterator terms are recovered by replicating the loop
/// bounds, which the caller owns). Opaque addresses yield their use-define
/// chain, provided the chain never reads memory the kernel may overwrite.
pub fn slice_address(
    kernel: &KernelProgram,
    store: &AccessSite,
) -> Result<Vec<Stmt>, SliceUnavailable> {
    match &store.index {
        AddressExpr::Affine(_) => Ok(Vec::new()),
        AddressExpr::Opaque(r) => {
            let mut chain: Vec<(StmtPath, Stmt)> = Vec::new();
            let mut visited: Vec<RegId> = Vec::new();
            chase(kernel, *r, &mut chain, &mut visited)?;
            chain.sort_by(|(a, _), (b, _)| a.cmp(b));
            Ok(chain.into_iter().map(|(_, s)| s).collect())
        }
    }
}

/// All definition sites of a register, paired with loop/if nesting flags.
fn defs_of(kernel: &KernelProgram, reg: RegId) -> Vec<(StmtPath, Stmt, bool, bool)> {
    let mut defs = Vec::new();
    fn walk(
        body: &[StmtNode],
        path: &mut StmtPath,
        in_loop: bool,
        in_if: bool,
        reg: RegId,
        out: &mut Vec<(StmtPath, Stmt, bool, bool)>,
    ) {
        for (i, node) in body.iter().enumerate() {
            path.push(i);
            match &node.stmt {
                Stmt::Arith { dst, .. } | Stmt::Mov { dst, .. } | Stmt::Load { dst, .. }
                    if *dst == reg =>
                {
                    out.push((path.clone(), node.stmt.clone(), in_loop, in_if));
                }
                Stmt::If { then_body, else_body, .. } => {
                    path.push(0);
                    walk(then_body, path, in_loop, true, reg, out);
                    path.pop();
                    path.push(1);
                    walk(else_body, path, in_loop, true, reg, out);
                    path.pop();
                }
                Stmt::Loop { body, .. } => {
                    path.push(0);
                    walk(body, path, true, in_if, reg, out);
                    path.pop();
                }
                _ => {}
            }
            path.pop();
        }
    }
    walk(&kernel.body, &mut Vec::new(), false, false, reg, &mut defs);
    defs
}

fn chase(
    kernel: &KernelProgram,
    reg: RegId,
    chain: &mut Vec<(StmtPath, Stmt)>,
    visited: &mut Vec<RegId>,
) -> Result<(), SliceUnavailable> {
    if visited.contains(&reg) {
        return Ok(());
    }
    visited.push(reg);
    let defs = defs_of(kernel, reg);
    let name = kernel.reg_name(reg);
    if defs.is_empty() {
        return Err(SliceUnavailable { reason: format!("register `{name}` has no definition") });
    }
    if defs.len() > 1 {
        return Err(SliceUnavailable {
            reason: format!("register `{name}` has multiple definitions"),
        });
    }
    let (path, stmt, in_loop, in_if) = defs.into_iter().next().unwrap();
    if in_loop {
        return Err(SliceUnavailable {
            reason: format!("register `{name}` is defined inside a loop"),
        });
    }
    if in_if {
        return Err(SliceUnavailable {
            reason: format!("register `{name}` is defined under divergent control flow"),
        });
    }
    let operands: Vec<Operand> = match &stmt {
        Stmt::Arith { a, b, .. } => vec![*a, *b],
        Stmt::Mov { a, .. } => vec![*a],
        Stmt::Load { array, index, .. } => {
            // The chain reads memory: refuse if the kernel may overwrite it.
            if kernel_writes_array(kernel, array) {
                return Err(SliceUnavailable {
                    reason: format!(
                        "address depends on `{array}`, which the kernel overwrites"
                    ),
                });
            }
            match index {
                AddressExpr::Affine(e) if e.uses_iter() => {
                    return Err(SliceUnavailable {
                        reason: format!("register `{name}` loads a loop-varying address"),
                    })
                }
                AddressExpr::Affine(_) => Vec::new(),
                AddressExpr::Opaque(r2) => vec![Operand::Reg(*r2)],
            }
        }
        _ => Vec::new(),
    };
    for op in operands {
        match op {
            Operand::Reg(r2) => chase(kernel, r2, chain, visited)?,
            Operand::Iter(i) => {
                return Err(SliceUnavailable {
                    reason: format!(
                        "register `{name}` depends on loop iterator `{}`",
                        kernel.iter_name(i)
                    ),
                })
            }
            Operand::Imm(_) | Operand::Builtin(_) => {}
        }
    }
    chain.push((path, stmt));
    Ok(())
}

/// Whether any store or atomic in the kernel targets the array.
pub fn kernel_writes_array(kernel: &KernelProgram, array: &str) -> bool {
    let mut writes = false;
    kernel.visit(&mut |node| match &node.stmt {
        Stmt::Store { array: a, .. } | Stmt::Atomic { array: a, .. } if a == array => {
            writes = true;
        }
        _ => {}
    });
    writes
}

/// A register name not yet used by the kernel.
pub fn fresh_reg(kernel: &mut KernelProgram, base: &str) -> RegId {
    let mut name = base.to_string();
    let mut n = 0;
    while kernel.regs.contains(&name) {
        n += 1;
        name = format!("{base}{n}");
    }
    kernel.intern_reg(&name)
}

/// An iterator name not yet used by the kernel.
pub fn fresh_iter(kernel: &mut KernelProgram, base: &str) -> IterId {
    let mut name = base.to_string();
    let mut n = 0;
    while kernel.iters.contains(&name) {
        n += 1;
        name = format!("{base}{n}");
    }
    kernel.intern_iter(&name)
}
