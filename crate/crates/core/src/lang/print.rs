//! Pretty-printer emitting the same kernel-language syntax the parser
//! accepts, so instrumented IR can be snapshot-tested and round-tripped.

use super::ast::*;
use std::fmt::Write;

fn grid_scalar_pieces(g: &GridScalar, suffix: &str, out: &mut Vec<(String, bool)>) {
    let comps: [(i64, &str); 4] = [
        (g.c, ""),
        (g.cd, "ctadim"),
        (g.gd, "griddim"),
        (g.both, "ctadim*griddim"),
    ];
    for (k, unit) in comps {
        if k == 0 {
            continue;
        }
        let mag = k.abs();
        let mut parts: Vec<String> = Vec::new();
        if unit.is_empty() && suffix.is_empty() {
            parts.push(mag.to_string());
        } else {
            if mag != 1 {
                parts.push(mag.to_string());
            }
            if !unit.is_empty() {
                parts.push(unit.to_string());
            }
            if !suffix.is_empty() {
                parts.push(suffix.to_string());
            }
        }
        out.push((parts.join("*"), k < 0));
    }
}

fn join_pieces(pieces: Vec<(String, bool)>) -> String {
    if pieces.is_empty() {
        return "0".to_string();
    }
    let mut s = String::new();
    for (i, (text, neg)) in pieces.into_iter().enumerate() {
        if i == 0 {
            if neg {
                s.push('-');
            }
            s.push_str(&text);
        } else {
            s.push_str(if neg { " - " } else { " + " });
            s.push_str(&text);
        }
    }
    s
}

pub fn print_grid_scalar(g: &GridScalar) -> String {
    let mut pieces = Vec::new();
    grid_scalar_pieces(g, "", &mut pieces);
    join_pieces(pieces)
}

pub fn print_affine(e: &AffineExpr, kernel: &KernelProgram) -> String {
    let mut pieces = Vec::new();
    grid_scalar_pieces(&e.base, "", &mut pieces);
    for (v, c) in &e.terms {
        let name = match v {
            AffVar::Tid => "tid".to_string(),
            AffVar::Ctaid => "ctaid".to_string(),
            AffVar::Iter(i) => kernel.iter_name(*i).to_string(),
        };
        grid_scalar_pieces(c, &name, &mut pieces);
    }
    join_pieces(pieces)
}

fn print_operand(op: &Operand, kernel: &KernelProgram) -> String {
    match op {
        Operand::Reg(r) => kernel.reg_name(*r).to_string(),
        Operand::Imm(v) => v.to_string(),
        Operand::Builtin(b) => b.name().to_string(),
        Operand::Iter(i) => kernel.iter_name(*i).to_string(),
    }
}

fn print_index(idx: &AddressExpr, kernel: &KernelProgram) -> String {
    match idx {
        AddressExpr::Affine(e) => print_affine(e, kernel),
        AddressExpr::Opaque(r) => kernel.reg_name(*r).to_string(),
    }
}

fn print_pragma(d: &PersistencyDirective) -> String {
    let mut s = String::from("#pragma gpu_pm ");
    match d.model {
        Model::Strict => s.push_str("strict"),
        Model::Epoch => {
            s.push_str("epoch ");
            s.push_str(d.scope.map(EpochScope::name).unwrap_or("cta"));
        }
    }
    write!(s, " {}", d.mech.name()).unwrap();
    if !d.durable_wpq {
        s.push_str(" pct");
    }
    if d.tx {
        s.push_str(" tx");
    }
    if d.idem {
        s.push_str(" idem");
    }
    s
}

fn print_body(
    body: &[StmtNode],
    kernel: &KernelProgram,
    directives: &[PersistencyDirective],
    indent: usize,
    out: &mut String,
) {
    let pad = "    ".repeat(indent);
    for node in body {
        match &node.stmt {
            Stmt::Arith { dst, op, a, b } => {
                writeln!(
                    out,
                    "{pad}{} = {} {}, {}",
                    kernel.reg_name(*dst),
                    op.mnemonic(),
                    print_operand(a, kernel),
                    print_operand(b, kernel)
                )
                .unwrap();
            }
            Stmt::Mov { dst, a } => {
                writeln!(out, "{pad}{} = mov {}", kernel.reg_name(*dst), print_operand(a, kernel))
                    .unwrap();
            }
            Stmt::Load { dst, array, index, .. } => {
                writeln!(
                    out,
                    "{pad}{} = ld {}[{}]",
                    kernel.reg_name(*dst),
                    array,
                    print_index(index, kernel)
                )
                .unwrap();
            }
            Stmt::Store { array, index, value, through, .. } => {
                writeln!(
                    out,
                    "{pad}{} {}[{}], {}",
                    if *through { "st.wt" } else { "st" },
                    array,
                    print_index(index, kernel),
                    print_operand(value, kernel)
                )
                .unwrap();
            }
            Stmt::Atomic { op, array, index, value } => {
                writeln!(
                    out,
                    "{pad}atom.{} {}[{}], {}",
                    op.mnemonic(),
                    array,
                    print_index(index, kernel),
                    print_operand(value, kernel)
                )
                .unwrap();
            }
            Stmt::Clwb { array, index } => {
                writeln!(out, "{pad}clwb {}[{}]", array, print_index(index, kernel)).unwrap();
            }
            Stmt::L2wb => writeln!(out, "{pad}l2wb").unwrap(),
            Stmt::Sfence => writeln!(out, "{pad}sfence").unwrap(),
            Stmt::Pcommit => writeln!(out, "{pad}pcommit").unwrap(),
            Stmt::Syncthreads => writeln!(out, "{pad}syncthreads").unwrap(),
            Stmt::Halt => writeln!(out, "{pad}halt").unwrap(),
            Stmt::If { cond, then_body, else_body } => {
                writeln!(
                    out,
                    "{pad}if {} {} {} {{",
                    print_operand(&cond.a, kernel),
                    cond.op.symbol(),
                    print_operand(&cond.b, kernel)
                )
                .unwrap();
                print_body(then_body, kernel, directives, indent + 1, out);
                if else_body.is_empty() {
                    writeln!(out, "{pad}}}").unwrap();
                } else {
                    writeln!(out, "{pad}}} else {{").unwrap();
                    print_body(else_body, kernel, directives, indent + 1, out);
                    writeln!(out, "{pad}}}").unwrap();
                }
            }
            Stmt::Loop { iter, lo, hi, step, body, pragma } => {
                if let Some(p) = pragma {
                    writeln!(out, "{pad}{}", print_pragma(&directives[*p])).unwrap();
                }
                writeln!(
                    out,
                    "{pad}loop {} = {} to {} step {} {{",
                    kernel.iter_name(*iter),
                    print_grid_scalar(lo),
                    print_grid_scalar(hi),
                    print_grid_scalar(step)
                )
                .unwrap();
                print_body(body, kernel, directives, indent + 1, out);
                writeln!(out, "{pad}}}").unwrap();
            }
        }
    }
}

pub fn print_kernel(
    kernel: &KernelProgram,
    directives: &[PersistencyDirective],
    out: &mut String,
) {
    if let Some(p) = kernel.pragma {
        writeln!(out, "{}", print_pragma(&directives[p])).unwrap();
    }
    let params = kernel
        .params
        .iter()
        .map(|(n, s)| {
            format!("{} {n}", if *s == ParamSpace::Global { "global" } else { "scalar" })
        })
        .collect::<Vec<_>>()
        .join(", ");
    writeln!(out, "kernel {}({params}) {{", kernel.name).unwrap();
    for (name, size) in &kernel.shared_decls {
        writeln!(out, "    shared {name}[{}]", print_grid_scalar(size)).unwrap();
    }
    print_body(&kernel.body, kernel, directives, 1, out);
    out.push_str("}\n");
}

fn aux_kind_name(kind: AuxKind) -> &'static str {
    match kind {
        AuxKind::UndoLog => "undo",
        AuxKind::Shadow => "shadow",
        AuxKind::Flag => "flag",
        AuxKind::Meta => "meta",
    }
}

/// Print a whole program unit. Anchors are emitted in table order (the
/// parser assigns directive ids in source order and requires the host block
/// to follow kernel definitions), so `parse(print(unit))` reproduces the
/// unit exactly for units whose directives are all anchored.
pub fn print_unit(unit: &ProgramUnit) -> String {
    let mut out = String::new();
    for kernel in &unit.kernels {
        print_kernel(kernel, &unit.directives, &mut out);
        out.push('\n');
    }
    if !unit.host.steps.is_empty() {
        out.push_str("host {\n");
        for node in &unit.host.steps {
            match &node.step {
                HostStep::Alloc { array, size } => {
                    match unit.aux_arrays.get(array) {
                        Some(kind) => writeln!(
                            out,
                            "    alloc {array}, {}, {}",
                            print_grid_scalar(size),
                            aux_kind_name(*kind)
                        )
                        .unwrap(),
                        None => {
                            writeln!(out, "    alloc {array}, {}", print_grid_scalar(size)).unwrap()
                        }
                    }
                }
                HostStep::MemcpyD2D { dst, src, size } => {
                    writeln!(out, "    memcpy {dst}, {src}, {}", print_grid_scalar(size)).unwrap()
                }
                HostStep::SetPersistentFlag { flag, value } => {
                    writeln!(out, "    flag {flag}, {value}").unwrap()
                }
                HostStep::LaunchKernel { kernel, grid, cta, pragma } => {
                    if let Some(p) = pragma {
                        writeln!(out, "    {}", print_pragma(&unit.directives[*p])).unwrap();
                    }
                    writeln!(out, "    launch {kernel}, grid={grid}, cta={cta}").unwrap()
                }
                HostStep::DeviceSync => out.push_str("    sync\n"),
                HostStep::L2wbApi => out.push_str("    l2wb\n"),
                HostStep::ConsumeOutput { array } => writeln!(out, "    consume {array}").unwrap(),
            }
        }
        out.push_str("}\n");
    }
    out
}

/// Print one kernel on its own.
pub fn print_kernel_standalone(kernel: &KernelProgram, directives: &[PersistencyDirective]) -> String {
    let mut out = String::new();
    print_kernel(kernel, directives, &mut out);
    out
}
