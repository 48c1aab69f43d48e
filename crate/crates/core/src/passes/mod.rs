//! Pragma-driven instrumentation: strict persistency, the three epoch
//! scopes, durable transactions with undo logging, idempotency analysis and
//! kernel classification.

pub mod classify;
pub mod epoch;
pub mod idempotency;
pub mod strict;
pub mod tx;

#[cfg(test)]
mod tests;

pub use classify::{classify_kernel, KernelClass, KernelProfile};
pub use epoch::{transform_epoch_cta, transform_epoch_kernel, transform_epoch_loop, PassError};
pub use idempotency::{analyze_idempotency, AnalysisScope, IdemReason, IdempotencyResult};
pub use strict::transform_strict;
pub use tx::{
    transform_tx_cta, transform_tx_kernel, transform_tx_loop, LogLayout, ProtocolBug,
    RecoveryPolicy, TxOptions, TxOutcome,
};

use crate::lang::ast::*;
use crate::lang::slice::access_sites;

/// Result of applying a directive to a unit: the instrumented unit, the
/// recovery policy when the directive is transactional, and notes such as
/// the forced promotion of atomic kernels.
#[derive(Debug, Clone)]
pub struct Applied {
    pub unit: ProgramUnit,
    pub directive: PersistencyDirective,
    pub policy: Option<RecoveryPolicy>,
    pub idem: Option<IdempotencyResult>,
    pub notes: Vec<String>,
    pub log_words: i64,
}

fn kernel_has_atomics(kernel: &KernelProgram) -> bool {
    kernel.count_stmts(|s| matches!(s, Stmt::Atomic { .. })) > 0
}

/// The loop a loop-scope directive anchors on: the pragma-annotated loop if
/// the source carries one, otherwise the unique top-level loop.
pub fn anchored_loop_index(kernel: &KernelProgram) -> Result<usize, PassError> {
    let annotated: Vec<usize> = kernel
        .body
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match &n.stmt {
            Stmt::Loop { pragma: Some(_), .. } => Some(i),
            _ => None,
        })
        .collect();
    match annotated.as_slice() {
        [one] => return Ok(*one),
        [] => {}
        _ => {
            return Err(PassError::Invalid(format!(
                "kernel `{}` has multiple annotated loops",
                kernel.name
            )))
        }
    }
    let loops: Vec<usize> = kernel
        .body
        .iter()
        .enumerate()
        .filter_map(|(i, n)| matches!(n.stmt, Stmt::Loop { .. }).then_some(i))
        .collect();
    match loops.as_slice() {
        [one] => Ok(*one),
        [] => Err(PassError::Invalid(format!("kernel `{}` has no top-level loop", kernel.name))),
        _ => Err(PassError::Invalid(format!(
            "kernel `{}` has several top-level loops; annotate one with a loop pragma",
            kernel.name
        ))),
    }
}

/// Strip all pragmas from a unit, then re-anchor the applied directive so
/// the instrumented output documents its model and the simulator can find
/// the epoch loop.
fn set_anchor(unit: &mut ProgramUnit, kernel: &str, d: &PersistencyDirective, loop_idx: Option<usize>) {
    for k in &mut unit.kernels {
        k.pragma = None;
        fn clear(body: &mut [StmtNode]) {
            for n in body {
                match &mut n.stmt {
                    Stmt::Loop { pragma, body, .. } => {
                        *pragma = None;
                        clear(body);
                    }
                    Stmt::If { then_body, else_body, .. } => {
                        clear(then_body);
                        clear(else_body);
                    }
                    _ => {}
                }
            }
        }
        clear(&mut k.body);
    }
    for s in &mut unit.host.steps {
        if let HostStep::LaunchKernel { pragma, .. } = &mut s.step {
            *pragma = None;
        }
    }
    unit.directives = vec![*d];
    match (d.model, d.scope) {
        (Model::Epoch, Some(EpochScope::Kernel)) => {
            for s in &mut unit.host.steps {
                if let HostStep::LaunchKernel { kernel: k, pragma, .. } = &mut s.step {
                    if k == kernel {
                        *pragma = Some(0);
                        break;
                    }
                }
            }
        }
        (Model::Epoch, Some(EpochScope::Loop)) => {
            if let (Some(k), Some(idx)) = (unit.kernel_mut(kernel), loop_idx) {
                if let Some(StmtNode { stmt: Stmt::Loop { pragma, .. }, .. }) = k.body.get_mut(idx)
                {
                    *pragma = Some(0);
                }
            }
        }
        _ => {
            if let Some(k) = unit.kernel_mut(kernel) {
                k.pragma = Some(0);
            }
        }
    }
}

/// Apply one persistency/transaction directive to the unit's kernel.
/// Transactional CTA/loop scopes containing global atomics are forcibly
/// promoted to kernel scope, with a diagnostic note.
pub fn apply_directive(
    unit: &ProgramUnit,
    kernel_name: &str,
    directive: &PersistencyDirective,
    grid: &GridConfig,
    opts: &TxOptions,
) -> Result<Applied, PassError> {
    directive.validate().map_err(PassError::Invalid)?;
    let kernel = unit
        .kernel(kernel_name)
        .ok_or_else(|| PassError::Invalid(format!("unknown kernel `{kernel_name}`")))?;

    let mut d = *directive;
    let mut notes = Vec::new();

    // Atomics preclude CTA/loop transactions: re-execution would repeat
    // them. Promote to a kernel-level transaction.
    if d.tx
        && matches!(d.scope, Some(EpochScope::Cta) | Some(EpochScope::Loop))
        && kernel_has_atomics(kernel)
    {
        notes.push(format!(
            "kernel `{kernel_name}` uses global atomics; {} transaction promoted to kernel scope",
            d.scope.unwrap().name()
        ));
        d.scope = Some(EpochScope::Kernel);
        d.mech = Mech::L2wb;
    }

    let scope_for_idem = match (d.model, d.scope) {
        (Model::Strict, _) => AnalysisScope::Kernel,
        (Model::Epoch, Some(EpochScope::Kernel)) | (Model::Epoch, None) => AnalysisScope::Kernel,
        (Model::Epoch, Some(EpochScope::Cta)) => AnalysisScope::Cta,
        (Model::Epoch, Some(EpochScope::Loop)) => {
            AnalysisScope::LoopBody(anchored_loop_index(kernel)?)
        }
    };
    let idem = analyze_idempotency(unit, kernel, scope_for_idem, grid);

    let mut applied = match (d.model, d.scope, d.tx) {
        (Model::Strict, _, false) => {
            let k2 = transform_strict(kernel, &d);
            let mut out = unit.clone();
            *out.kernel_mut(kernel_name).unwrap() = k2;
            set_anchor(&mut out, kernel_name, &d, None);
            Applied { unit: out, directive: d, policy: None, idem: None, notes, log_words: 0 }
        }
        (Model::Epoch, Some(EpochScope::Kernel), false) => {
            let mut out = unit.clone();
            out.host = transform_epoch_kernel(&out.host, Some(kernel_name));
            set_anchor(&mut out, kernel_name, &d, None);
            Applied { unit: out, directive: d, policy: None, idem: None, notes, log_words: 0 }
        }
        (Model::Epoch, Some(EpochScope::Cta), false) => {
            let k2 = transform_epoch_cta(kernel, &d)?;
            let mut out = unit.clone();
            *out.kernel_mut(kernel_name).unwrap() = k2;
            set_anchor(&mut out, kernel_name, &d, None);
            Applied { unit: out, directive: d, policy: None, idem: None, notes, log_words: 0 }
        }
        (Model::Epoch, Some(EpochScope::Loop), false) => {
            let idx = anchored_loop_index(kernel)?;
            let mut out = transform_epoch_loop(unit, kernel_name, idx, &d, grid)?;
            set_anchor(&mut out, kernel_name, &d, Some(idx));
            Applied { unit: out, directive: d, policy: None, idem: None, notes, log_words: 0 }
        }
        (_, _, true) => {
            let scope = match (d.model, d.scope) {
                (Model::Strict, _) => {
                    return Err(PassError::Invalid(
                        "transactions pair with epoch scopes, not strict persistency".into(),
                    ))
                }
                (Model::Epoch, Some(s)) => s,
                (Model::Epoch, None) => EpochScope::Kernel,
            };
            let outcome = match scope {
                EpochScope::Kernel => {
                    transform_tx_kernel(unit, kernel_name, &d, &idem, grid, opts)?
                }
                EpochScope::Cta => transform_tx_cta(unit, kernel_name, &d, &idem, grid, opts)?,
                EpochScope::Loop => {
                    let idx = anchored_loop_index(kernel)?;
                    transform_tx_loop(unit, kernel_name, idx, &d, &idem, grid, opts)?
                }
            };
            let mut out = outcome.unit;
            let loop_idx = outcome.policy.loop_info.as_ref().map(|l| l.body_index);
            set_anchor(&mut out, kernel_name, &d, loop_idx);
            notes.extend(outcome.notes);
            Applied {
                unit: out,
                directive: d,
                policy: Some(outcome.policy),
                idem: None,
                notes,
                log_words: outcome.log_words,
            }
        }
        (Model::Epoch, None, false) => {
            return Err(PassError::Invalid("epoch persistency requires a scope".into()))
        }
    };
    for k in &mut applied.unit.kernels {
        k.renumber_locals();
    }
    applied.idem = Some(idem);
    Ok(applied)
}

/// Global stores appear only after every load in program order (the
/// streaming pattern where write-through beats write-back).
pub fn stores_are_trailing(kernel: &KernelProgram) -> bool {
    let sites = access_sites(kernel);
    let mut seen_store = false;
    for s in &sites {
        match s.kind {
            crate::lang::slice::AccessKind::Store if s.space == MemSpace::Global => {
                seen_store = true
            }
            crate::lang::slice::AccessKind::Load if s.space == MemSpace::Global && seen_store => {
                return false
            }
            _ => {}
        }
    }
    true
}
