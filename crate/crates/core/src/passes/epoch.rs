//! Epoch persistency at the three thread-hierarchy scopes.

use crate::lang::ast::*;
use crate::lang::cfg::ensure_postdominant_exit;
use crate::lang::slice::{
    fresh_iter, fresh_reg, global_store_sites, slice_address, AccessSite, SliceUnavailable,
};
use std::fmt;

#[derive(Debug)]
pub enum PassError {
    Slice(SliceUnavailable),
    Invalid(String),
}

impl fmt::Display for PassError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassError::Slice(s) => {
                write!(f, "{s}; use the wt or l2wb option for this kernel")
            }
            PassError::Invalid(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for PassError {}

impl From<SliceUnavailable> for PassError {
    fn from(s: SliceUnavailable) -> Self {
        PassError::Slice(s)
    }
}

pub fn persist_pair(d: &PersistencyDirective) -> Vec<StmtNode> {
    let mut out = Vec::new();
    if !d.durable_wpq {
        out.push(Stmt::Sfence.into());
        out.push(Stmt::Pcommit.into());
    }
    out.push(Stmt::Sfence.into());
    out
}

/// Emit the clwb sequence recomputing one store's address at the exit.
/// Affine addresses re-evaluate directly; iterator terms replicate their
/// loop bounds with fresh iterators; opaque addresses replicate the sliced
/// use-define chain into fresh registers.
fn clwb_for_site(kernel: &mut KernelProgram, site: &AccessSite) -> Result<Vec<StmtNode>, PassError> {
    match &site.index {
        AddressExpr::Affine(e) => {
            let mut expr = e.clone();
            let mut loops: Vec<(IterId, GridScalar, GridScalar, GridScalar)> = Vec::new();
            for iter in e.iter_vars() {
                let ctx = site
                    .enclosing
                    .iter()
                    .find(|l| l.iter == iter)
                    .ok_or_else(|| PassError::Invalid("iterator without enclosing loop".into()))?;
                let fresh = fresh_iter(kernel, "p");
                expr = expr.subst_iter(iter, &AffineExpr::var(AffVar::Iter(fresh)));
                loops.push((fresh, ctx.lo, ctx.hi, ctx.step));
            }
            let mut seq = vec![StmtNode::from(Stmt::Clwb {
                array: site.array.clone(),
                index: AddressExpr::Affine(expr),
            })];
            for (iter, lo, hi, step) in loops.into_iter().rev() {
                seq = vec![Stmt::Loop { iter, lo, hi, step, body: seq, pragma: None }.into()];
            }
            Ok(seq)
        }
        AddressExpr::Opaque(root) => {
            let chain = slice_address(kernel, site)?;
            // Replicate the chain into fresh registers.
            let mut rename: std::collections::BTreeMap<RegId, RegId> = Default::default();
            let mut seq: Vec<StmtNode> = Vec::new();
            let remap = |op: &Operand, rename: &std::collections::BTreeMap<RegId, RegId>| match op {
                Operand::Reg(r) => Operand::Reg(*rename.get(r).unwrap_or(r)),
                other => *other,
            };
            for stmt in chain {
                match stmt {
                    Stmt::Arith { dst, op, a, b } => {
                        let a = remap(&a, &rename);
                        let b = remap(&b, &rename);
                        let nd = fresh_reg(kernel, &format!("{}_x", kernel.reg_name(dst)));
                        rename.insert(dst, nd);
                        seq.push(Stmt::Arith { dst: nd, op, a, b }.into());
                    }
                    Stmt::Mov { dst, a } => {
                        let a = remap(&a, &rename);
                        let nd = fresh_reg(kernel, &format!("{}_x", kernel.reg_name(dst)));
                        rename.insert(dst, nd);
                        seq.push(Stmt::Mov { dst: nd, a }.into());
                    }
                    Stmt::Load { dst, space, array, index } => {
                        let index = match index {
                            AddressExpr::Opaque(r) => {
                                AddressExpr::Opaque(*rename.get(&r).unwrap_or(&r))
                            }
                            a => a,
                        };
                        let nd = fresh_reg(kernel, &format!("{}_x", kernel.reg_name(dst)));
                        rename.insert(dst, nd);
                        seq.push(Stmt::Load { dst: nd, space, array, index }.into());
                    }
                    other => {
                        return Err(PassError::Invalid(format!(
                            "unexpected statement in address chain: {other:?}"
                        )))
                    }
                }
            }
            let addr = *rename.get(root).unwrap_or(root);
            seq.push(
                Stmt::Clwb { array: site.array.clone(), index: AddressExpr::Opaque(addr) }.into(),
            );
            Ok(seq)
        }
    }
}

/// CTA-level epoch persistency (the clwb path is the paper's compiler
/// algorithm): create the post-dominant exit, replicate each global store's
/// address there, insert `clwb` per distinct slice, one trailing `sfence`,
/// and the `pcommit; sfence` pair when WPQs are volatile.
pub fn transform_epoch_cta(
    kernel: &KernelProgram,
    d: &PersistencyDirective,
) -> Result<KernelProgram, PassError> {
    assert_eq!(d.scope, Some(EpochScope::Cta));
    let mut k = kernel.clone();
    ensure_postdominant_exit(&mut k);
    match d.mech {
        Mech::Clwb => {
            let sites = global_store_sites(&k);
            let mut emitted: Vec<(String, AddressExpr)> = Vec::new();
            let mut tail: Vec<StmtNode> = Vec::new();
            for site in &sites {
                if site.through {
                    // Write-through stores are already durable inline.
                    continue;
                }
                let key = (site.array.clone(), site.index.clone());
                if emitted.contains(&key) {
                    continue;
                }
                emitted.push(key);
                tail.extend(clwb_for_site(&mut k, site)?);
            }
            if !tail.is_empty() {
                tail.push(Stmt::Sfence.into());
                if !d.durable_wpq {
                    tail.push(Stmt::Pcommit.into());
                    tail.push(Stmt::Sfence.into());
                }
                k.body.extend(tail);
            }
        }
        Mech::Wt => {
            rewrite_stores_wt(&mut k.body);
            k.body.push(Stmt::Sfence.into());
        }
        Mech::L2wb => {
            // The sweep must observe every warp's stores in L2 first.
            k.body.push(Stmt::Syncthreads.into());
            k.body.push(guarded_tid0(vec![Stmt::L2wb.into()]));
            k.body.extend(persist_pair(d));
        }
    }
    Ok(k)
}

pub fn guarded_tid0(body: Vec<StmtNode>) -> StmtNode {
    Stmt::If {
        cond: Cond { a: Operand::Builtin(Builtin::Tid), op: CmpOp::Eq, b: Operand::Imm(0) },
        then_body: body,
        else_body: Vec::new(),
    }
    .into()
}

pub fn rewrite_stores_wt(body: &mut [StmtNode]) {
    for node in body {
        match &mut node.stmt {
            Stmt::Store { space: MemSpace::Global, through, .. } => *through = true,
            Stmt::If { then_body, else_body, .. } => {
                rewrite_stores_wt(then_body);
                rewrite_stores_wt(else_body);
            }
            Stmt::Loop { body, .. } => rewrite_stores_wt(body),
            _ => {}
        }
    }
}

/// Kernel-level epoch persistency is host-side: after the launch, wait for
/// the kernel, write back the whole L2, and wait for that too. The sync
/// doubles as the persist barrier between consecutive launches.
pub fn transform_epoch_kernel(host: &HostScript, kernel: Option<&str>) -> HostScript {
    let mut steps: Vec<HostStepNode> = Vec::new();
    let mut i = 0;
    let src = &host.steps;
    while i < src.len() {
        let node = src[i].clone();
        let is_target = match &node.step {
            HostStep::LaunchKernel { kernel: k, .. } => {
                kernel.is_none() || kernel == Some(k.as_str())
            }
            _ => false,
        };
        steps.push(node);
        if is_target {
            // Reuse an existing sync right after the launch.
            if let Some(next) = src.get(i + 1) {
                if next.step == HostStep::DeviceSync {
                    steps.push(next.clone());
                    i += 1;
                } else {
                    steps.push(HostStep::DeviceSync.into());
                }
            } else {
                steps.push(HostStep::DeviceSync.into());
            }
            steps.push(HostStep::L2wbApi.into());
            steps.push(HostStep::DeviceSync.into());
        }
        i += 1;
    }
    HostScript { steps }
}

/// Shared arrays stored anywhere in the loop body (these need shadows).
pub fn shared_written_in(body: &[StmtNode]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    fn walk(body: &[StmtNode], out: &mut Vec<String>) {
        for node in body {
            match &node.stmt {
                Stmt::Store { space: MemSpace::Shared, array, .. } => {
                    if !out.contains(array) {
                        out.push(array.clone());
                    }
                }
                Stmt::If { then_body, else_body, .. } => {
                    walk(then_body, out);
                    walk(else_body, out);
                }
                Stmt::Loop { body, .. } => walk(body, out),
                _ => {}
            }
        }
    }
    walk(body, &mut out);
    out
}

pub fn shadow_name(shared: &str) -> String {
    format!("shadow_{shared}")
}

/// Per-CTA shadow extent, padded to a multiple of ctadim so cooperative
/// copy loops stride evenly.
pub fn shadow_slots(kernel: &KernelProgram, shared: &str, grid: &GridConfig) -> i64 {
    let decl = kernel
        .shared_decls
        .iter()
        .find(|(n, _)| n == shared)
        .expect("shadowed array is declared");
    let len = decl.1.eval(grid).max(0);
    let c = grid.cta_dim;
    (len + c - 1) / c * c
}

/// Mirror every shared store in `body` with a global store to the shadow
/// array at `ctaid*slots + same index`. Returns the rewritten body.
pub fn mirror_shared_stores(
    kernel: &mut KernelProgram,
    body: Vec<StmtNode>,
    shadows: &[(String, i64)],
    through: bool,
) -> Vec<StmtNode> {
    let mut out = Vec::new();
    for mut node in body {
        match &mut node.stmt {
            Stmt::Store { space: MemSpace::Shared, array, index, value, .. } => {
                let Some((_, slots)) = shadows.iter().find(|(n, _)| n == array) else {
                    out.push(node);
                    continue;
                };
                let shadow = shadow_name(array);
                let value = *value;
                let (mirror_index, prep) = match index {
                    AddressExpr::Affine(e) => {
                        let mut m = e.clone();
                        m = m.add(&AffineExpr {
                            base: GridScalar::default(),
                            terms: vec![(AffVar::Ctaid, GridScalar::constant(*slots))],
                        });
                        (AddressExpr::Affine(m), Vec::new())
                    }
                    AddressExpr::Opaque(r) => {
                        let base = fresh_reg(kernel, "shbase");
                        let addr = fresh_reg(kernel, "shaddr");
                        let prep: Vec<StmtNode> = vec![
                            Stmt::Arith {
                                dst: base,
                                op: BinOp::Mul,
                                a: Operand::Builtin(Builtin::Ctaid),
                                b: Operand::Imm(*slots),
                            }
                            .into(),
                            Stmt::Arith {
                                dst: addr,
                                op: BinOp::Add,
                                a: Operand::Reg(base),
                                b: Operand::Reg(*r),
                            }
                            .into(),
                        ];
                        (AddressExpr::Opaque(addr), prep)
                    }
                };
                out.push(node);
                out.extend(prep);
                out.push(
                    Stmt::Store {
                        space: MemSpace::Global,
                        array: shadow,
                        index: mirror_index,
                        value,
                        through,
                    }
                    .into(),
                );
            }
            Stmt::If { then_body, else_body, .. } => {
                let t = mirror_shared_stores(kernel, std::mem::take(then_body), shadows, through);
                let e = mirror_shared_stores(kernel, std::mem::take(else_body), shadows, through);
                *then_body = t;
                *else_body = e;
                out.push(node);
            }
            Stmt::Loop { body: b, .. } => {
                let nb = mirror_shared_stores(kernel, std::mem::take(b), shadows, through);
                *b = nb;
                out.push(node);
            }
            _ => out.push(node),
        }
    }
    out
}

/// Loop-level epoch persistency: shadow shared arrays into global memory,
/// persist each iteration's updates at the iteration tail, and fence the
/// epoch boundary.
pub fn transform_epoch_loop(
    unit: &ProgramUnit,
    kernel_name: &str,
    body_index: usize,
    d: &PersistencyDirective,
    grid: &GridConfig,
) -> Result<ProgramUnit, PassError> {
    assert_eq!(d.scope, Some(EpochScope::Loop));
    let mut unit = unit.clone();
    let kidx = unit
        .kernels
        .iter()
        .position(|k| k.name == kernel_name)
        .ok_or_else(|| PassError::Invalid(format!("unknown kernel `{kernel_name}`")))?;
    let mut k = unit.kernels[kidx].clone();

    let Some(StmtNode { stmt: Stmt::Loop { .. }, .. }) = k.body.get(body_index) else {
        return Err(PassError::Invalid(format!(
            "statement {body_index} of `{kernel_name}` is not a top-level loop"
        )));
    };

    // Shadow declarations for shared arrays the loop writes.
    let loop_body = match &k.body[body_index].stmt {
        Stmt::Loop { body, .. } => body.clone(),
        _ => unreachable!(),
    };
    let shared = shared_written_in(&loop_body);
    let shadows: Vec<(String, i64)> =
        shared.iter().map(|s| (s.clone(), shadow_slots(&k, s, grid))).collect();
    for (s, slots) in &shadows {
        let name = shadow_name(s);
        unit.aux_arrays.insert(name.clone(), AuxKind::Shadow);
        insert_alloc(&mut unit.host, &name, GridScalar::constant(slots * grid.grid_dim));
        k.params.push((name, ParamSpace::Global));
    }

    let through = d.mech == Mech::Wt;
    let mut new_body = mirror_shared_stores(&mut k, loop_body, &shadows, through);
    if through {
        rewrite_stores_wt(&mut new_body);
    }

    // Iteration tail: persist this epoch's updates, then the barrier fence.
    match d.mech {
        Mech::L2wb => {
            if !matches!(new_body.last().map(|n| &n.stmt), Some(Stmt::Syncthreads)) {
                new_body.push(Stmt::Syncthreads.into());
            }
            new_body.push(guarded_tid0(vec![Stmt::L2wb.into()]));
            new_body.extend(persist_pair(d));
        }
        Mech::Wt => {
            new_body.push(Stmt::Sfence.into());
        }
        Mech::Clwb => {
            // Persist each global line written this iteration, if the
            // addresses replay at the iteration tail.
            let probe = {
                let mut probe_kernel = k.clone();
                if let Stmt::Loop { body, .. } = &mut probe_kernel.body[body_index].stmt {
                    *body = new_body.clone();
                }
                probe_kernel
            };
            let mut tail: Vec<StmtNode> = Vec::new();
            let mut emitted: Vec<(String, AddressExpr)> = Vec::new();
            for site in global_store_sites(&probe) {
                if site.path.first() != Some(&body_index) || site.through {
                    continue;
                }
                match &site.index {
                    AddressExpr::Affine(_) => {}
                    AddressExpr::Opaque(_) => {
                        return Err(PassError::Slice(SliceUnavailable {
                            reason: format!(
                                "store to `{}` uses a computed address inside the epoch loop",
                                site.array
                            ),
                        }))
                    }
                }
                let key = (site.array.clone(), site.index.clone());
                if emitted.contains(&key) {
                    continue;
                }
                emitted.push(key);
                // Inner-loop iterators are dead at the tail; replicate those
                // domains. The epoch loop's own iterator is live here.
                let epoch_iter = match &k.body[body_index].stmt {
                    Stmt::Loop { iter, .. } => *iter,
                    _ => unreachable!(),
                };
                let mut site2 = site.clone();
                site2.enclosing.retain(|l| l.iter != epoch_iter);
                if let AddressExpr::Affine(e) = &site2.index {
                    let needs: Vec<IterId> =
                        e.iter_vars().into_iter().filter(|v| *v != epoch_iter).collect();
                    site2
                        .enclosing
                        .retain(|l| needs.contains(&l.iter));
                }
                tail.extend(clwb_for_site(&mut k, &site2)?);
            }
            new_body.extend(tail);
            new_body.push(Stmt::Sfence.into());
            if !d.durable_wpq {
                new_body.push(Stmt::Pcommit.into());
                new_body.push(Stmt::Sfence.into());
            }
        }
    }

    if let Stmt::Loop { body, .. } = &mut k.body[body_index].stmt {
        *body = new_body;
    }
    unit.kernels[kidx] = k;
    Ok(unit)
}

/// Insert an alloc before the first launch (aux arrays must exist when the
/// kernel runs).
pub fn insert_alloc(host: &mut HostScript, array: &str, size: GridScalar) {
    let pos = host
        .steps
        .iter()
        .position(|s| matches!(s.step, HostStep::LaunchKernel { .. }))
        .unwrap_or(host.steps.len());
    host.steps.insert(
        pos,
        HostStep::Alloc { array: array.to_string(), size }.into(),
    );
}
