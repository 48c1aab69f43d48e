//! Strict persistency: persist every global store in program order.

use crate::lang::ast::*;

/// With clwb, each global store is followed by `clwb(addr)`, then the
/// `sfence; pcommit` pair when WPQs are volatile, then `sfence`. With wt,
/// stores rewrite to `st.wt` and each is followed by a single `sfence`
/// (the write-through acknowledgement already implies NVM arrival).
pub fn transform_strict(kernel: &KernelProgram, d: &PersistencyDirective) -> KernelProgram {
    assert_eq!(d.model, Model::Strict);
    let mut k = kernel.clone();
    k.body = rewrite(std::mem::take(&mut k.body), d);
    k
}

fn persist_tail(d: &PersistencyDirective) -> Vec<StmtNode> {
    let mut out = Vec::new();
    if !d.durable_wpq {
        out.push(Stmt::Sfence.into());
        out.push(Stmt::Pcommit.into());
    }
    out.push(Stmt::Sfence.into());
    out
}

fn rewrite(body: Vec<StmtNode>, d: &PersistencyDirective) -> Vec<StmtNode> {
    let mut out = Vec::new();
    for mut node in body {
        match &mut node.stmt {
            Stmt::Store { space: MemSpace::Global, array, index, through, .. } => match d.mech {
                Mech::Wt => {
                    *through = true;
                    out.push(node);
                    out.push(Stmt::Sfence.into());
                }
                Mech::Clwb => {
                    let already_wt = *through;
                    let (array, index) = (array.clone(), index.clone());
                    out.push(node);
                    if already_wt {
                        // Write-through acks at NVM: a fence suffices.
                        out.push(Stmt::Sfence.into());
                    } else {
                        out.push(Stmt::Clwb { array, index }.into());
                        out.extend(persist_tail(d));
                    }
                }
                Mech::L2wb => unreachable!("strict persistency rejects l2wb"),
            },
            Stmt::If { then_body, else_body, .. } => {
                let t = rewrite(std::mem::take(then_body), d);
                let e = rewrite(std::mem::take(else_body), d);
                *then_body = t;
                *else_body = e;
                out.push(node);
            }
            Stmt::Loop { body, .. } => {
                let b = rewrite(std::mem::take(body), d);
                *body = b;
                out.push(node);
            }
            _ => out.push(node),
        }
    }
    out
}
