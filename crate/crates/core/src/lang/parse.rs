//! Recursive-descent parser for the kernel language and host scripts.
//!
//! The grammar is line oriented (one instruction per line) and documented in
//! `docs/lang.md`. Pragma lines bind to the next kernel definition, the next
//! kernel launch, or the next loop statement; ambiguous placement is an
//! error, never a guess.

use super::ast::*;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}:{}: {}", self.line, self.col, self.msg)
    }
}

impl std::error::Error for ParseError {}

const KEYWORDS: &[&str] = &[
    "kernel", "host", "shared", "global", "scalar", "ld", "st", "atom", "clwb", "l2wb", "sfence",
    "pcommit", "syncthreads", "halt", "if", "else", "loop", "to", "step", "mov", "add", "sub",
    "mul", "div", "mod", "min", "max", "and", "or", "xor", "shl", "shr", "tid", "ctaid", "ctadim",
    "griddim", "alloc", "memcpy", "flag", "launch", "sync", "consume", "grid", "cta",
];

fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(char),
    Cmp(CmpOp),
    Assign,
}

struct Line {
    num: u32,
    toks: Vec<(Tok, u32)>,
    pos: usize,
}

impl Line {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> u32 {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.num, col: self.col(), msg: msg.into() }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        match self.next() {
            Some(Tok::Punct(p)) if p == c => Ok(()),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                Err(self.err(format!("expected `{c}`")))
            }
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                Err(self.err("expected identifier"))
            }
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err("trailing tokens"))
        }
    }
}

fn lex_line(num: u32, text: &str) -> Result<Line, ParseError> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i];
        let col = (i + 1) as u32;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '/' && bytes.get(i + 1) == Some(&'/') {
            break;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = bytes[start..i].iter().collect();
            let v = s.parse::<i64>().map_err(|_| ParseError {
                line: num,
                col,
                msg: format!("bad integer literal `{s}`"),
            })?;
            toks.push((Tok::Int(v), col));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_' || bytes[i] == '.')
            {
                i += 1;
            }
            let s: String = bytes[start..i].iter().collect();
            toks.push((Tok::Ident(s), col));
            continue;
        }
        match c {
            '=' if bytes.get(i + 1) == Some(&'=') => {
                toks.push((Tok::Cmp(CmpOp::Eq), col));
                i += 2;
            }
            '!' if bytes.get(i + 1) == Some(&'=') => {
                toks.push((Tok::Cmp(CmpOp::Ne), col));
                i += 2;
            }
            '<' if bytes.get(i + 1) == Some(&'=') => {
                toks.push((Tok::Cmp(CmpOp::Le), col));
                i += 2;
            }
            '>' if bytes.get(i + 1) == Some(&'=') => {
                toks.push((Tok::Cmp(CmpOp::Ge), col));
                i += 2;
            }
            '<' => {
                toks.push((Tok::Cmp(CmpOp::Lt), col));
                i += 1;
            }
            '>' => {
                toks.push((Tok::Cmp(CmpOp::Gt), col));
                i += 1;
            }
            '=' => {
                toks.push((Tok::Assign, col));
                i += 1;
            }
            '(' | ')' | '{' | '}' | '[' | ']' | ',' | '+' | '-' | '*' => {
                toks.push((Tok::Punct(c), col));
                i += 1;
            }
            _ => {
                return Err(ParseError {
                    line: num,
                    col,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(Line { num, toks, pos: 0 })
}

/// What a pending pragma may legally bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Anchor {
    KernelDef,
    Launch,
    LoopStmt,
}

fn anchor_of(d: &PersistencyDirective) -> Anchor {
    match (d.model, d.scope) {
        (Model::Strict, _) => Anchor::KernelDef,
        (Model::Epoch, Some(EpochScope::Kernel)) => Anchor::Launch,
        (Model::Epoch, Some(EpochScope::Cta)) => Anchor::KernelDef,
        (Model::Epoch, Some(EpochScope::Loop)) => Anchor::LoopStmt,
        (Model::Epoch, None) => Anchor::KernelDef,
    }
}

struct Parser<'a> {
    lines: Vec<(u32, &'a str)>,
    idx: usize,
    unit: ProgramUnit,
    pending_pragma: Option<(usize, u32, Anchor)>,
}

/// Identifier environment while parsing one kernel body.
struct KernelEnv {
    kernel: KernelProgram,
    arrays: BTreeSet<String>,
    defined_regs: BTreeSet<RegId>,
    live_iters: Vec<IterId>,
}

impl KernelEnv {
    fn lookup_space(&self, name: &str) -> Option<MemSpace> {
        if self.kernel.shared_decls.iter().any(|(n, _)| n == name) {
            Some(MemSpace::Shared)
        } else if self.arrays.contains(name)
            || self
                .kernel
                .params
                .iter()
                .any(|(n, s)| n == name && *s == ParamSpace::Global)
        {
            Some(MemSpace::Global)
        } else {
            None
        }
    }
}

pub fn parse_program(text: &str) -> Result<ProgramUnit, ParseError> {
    let lines: Vec<(u32, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| ((i + 1) as u32, l))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with("//")
        })
        .collect();
    let mut p = Parser { lines, idx: 0, unit: ProgramUnit::default(), pending_pragma: None };
    p.parse_unit()?;
    Ok(p.unit)
}

impl<'a> Parser<'a> {
    fn take_line(&mut self) -> Option<(u32, &'a str)> {
        let l = self.lines.get(self.idx).copied();
        if l.is_some() {
            self.idx += 1;
        }
        l
    }

    fn pragma_err(&self, line: u32, msg: &str) -> ParseError {
        ParseError { line, col: 1, msg: msg.into() }
    }

    fn parse_unit(&mut self) -> Result<(), ParseError> {
        while let Some((num, raw)) = self.take_line() {
            let trimmed = raw.trim();
            if trimmed.starts_with("#pragma") {
                self.parse_pragma(num, trimmed)?;
                continue;
            }
            let mut line = lex_line(num, raw)?;
            match line.peek() {
                Some(Tok::Ident(s)) if s == "kernel" => {
                    if !self.unit.host.steps.is_empty() {
                        return Err(line.err("kernel definitions must precede the host block"));
                    }
                    line.next();
                    self.parse_kernel(&mut line)?;
                }
                Some(Tok::Ident(s)) if s == "host" => {
                    line.next();
                    line.expect_punct('{')?;
                    line.expect_end()?;
                    self.parse_host()?;
                }
                _ => return Err(line.err("expected `kernel` or `host` at top level")),
            }
        }
        if let Some((_, line, _)) = self.pending_pragma {
            return Err(self.pragma_err(line, "pragma has no valid anchor"));
        }
        Ok(())
    }

    fn parse_pragma(&mut self, num: u32, text: &str) -> Result<(), ParseError> {
        if self.pending_pragma.is_some() {
            return Err(self.pragma_err(num, "pragma has no valid anchor (two pragmas in a row)"));
        }
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() < 3 || words[0] != "#pragma" || words[1] != "gpu_pm" {
            return Err(self.pragma_err(num, "expected `#pragma gpu_pm <strict|epoch> ...`"));
        }
        let mut rest = &words[2..];
        let (model, scope) = match rest[0] {
            "strict" => {
                rest = &rest[1..];
                (Model::Strict, None)
            }
            "epoch" => {
                let scope = match rest.get(1) {
                    Some(&"kernel") => EpochScope::Kernel,
                    Some(&"cta") => EpochScope::Cta,
                    Some(&"loop") => EpochScope::Loop,
                    other => {
                        return Err(self.pragma_err(
                            num,
                            &format!(
                                "unknown epoch scope `{}`; expected kernel, cta or loop",
                                other.unwrap_or(&"")
                            ),
                        ))
                    }
                };
                rest = &rest[2..];
                (Model::Epoch, Some(scope))
            }
            other => {
                return Err(
                    self.pragma_err(num, &format!("unknown persistency model `{other}`"))
                )
            }
        };
        let default_mech = match scope {
            None | Some(EpochScope::Cta) => Mech::Clwb,
            Some(EpochScope::Kernel) | Some(EpochScope::Loop) => Mech::L2wb,
        };
        let mut d = PersistencyDirective {
            model,
            scope,
            mech: default_mech,
            durable_wpq: true,
            tx: false,
            idem: false,
        };
        for opt in rest {
            match *opt {
                "wt" => d.mech = Mech::Wt,
                "clwb" => d.mech = Mech::Clwb,
                "l2wb" => d.mech = Mech::L2wb,
                "pct" => d.durable_wpq = false,
                "tx" => d.tx = true,
                "idem" => d.idem = true,
                other => {
                    return Err(self.pragma_err(num, &format!("unknown pragma option `{other}`")))
                }
            }
        }
        d.validate().map_err(|e| self.pragma_err(num, &e))?;
        let id = self.unit.directives.len();
        self.unit.directives.push(d);
        self.pending_pragma = Some((id, num, anchor_of(&d)));
        Ok(())
    }

    fn take_pragma(&mut self, want: Anchor) -> Result<Option<usize>, ParseError> {
        match self.pending_pragma {
            Some((id, _, a)) if a == want => {
                self.pending_pragma = None;
                Ok(Some(id))
            }
            Some((_, line, a)) if a != want && want == Anchor::KernelDef => {
                // Launch/loop pragmas may skip over kernel definitions only
                // when they can still find their anchor later; a loop pragma
                // at top level never can.
                if a == Anchor::LoopStmt {
                    Err(self.pragma_err(line, "loop-scope pragma must precede a loop statement"))
                } else {
                    Ok(None)
                }
            }
            _ => Ok(None),
        }
    }

    fn parse_kernel(&mut self, header: &mut Line) -> Result<(), ParseError> {
        let name = header.expect_ident()?;
        if is_keyword(&name) {
            return Err(header.err(format!("`{name}` is a reserved word")));
        }
        header.expect_punct('(')?;
        let mut params = Vec::new();
        loop {
            match header.peek() {
                Some(Tok::Punct(')')) => {
                    header.next();
                    break;
                }
                Some(Tok::Ident(s)) if s == "global" || s == "scalar" => {
                    let space =
                        if s == "global" { ParamSpace::Global } else { ParamSpace::Scalar };
                    header.next();
                    let pname = header.expect_ident()?;
                    if is_keyword(&pname) {
                        return Err(header.err(format!("`{pname}` is a reserved word")));
                    }
                    params.push((pname, space));
                    if let Some(Tok::Punct(',')) = header.peek() {
                        header.next();
                    }
                }
                _ => return Err(header.err("expected `global <name>`, `scalar <name>` or `)`")),
            }
        }
        header.expect_punct('{')?;
        header.expect_end()?;

        let pragma = self.take_pragma(Anchor::KernelDef)?;
        if self.unit.kernels.iter().any(|k| k.name == name) {
            return Err(self.pragma_err(header.num, &format!("kernel `{name}` redefined")));
        }

        let arrays: BTreeSet<String> = params
            .iter()
            .filter(|(_, s)| *s == ParamSpace::Global)
            .map(|(n, _)| n.clone())
            .collect();
        let mut env = KernelEnv {
            kernel: KernelProgram {
                name,
                params,
                shared_decls: Vec::new(),
                body: Vec::new(),
                regs: Vec::new(),
                iters: Vec::new(),
                pragma,
            },
            arrays,
            defined_regs: BTreeSet::new(),
            live_iters: Vec::new(),
        };
        let (body, has_else) = self.parse_body(&mut env, true)?;
        if has_else {
            return Err(self.pragma_err(header.num, "`else` without matching `if`"));
        }
        let mut kernel = env.kernel;
        kernel.body = body;
        if let Some((id, line, anchor)) = self.pending_pragma {
            if anchor == Anchor::KernelDef && kernel.pragma.is_none() {
                // Paper style: pragma as the first line inside the body.
                kernel.pragma = Some(id);
                self.pending_pragma = None;
            } else if anchor != Anchor::Launch {
                let _ = id;
                return Err(self.pragma_err(line, "pragma has no valid anchor"));
            }
        }
        self.unit.kernels.push(kernel);
        Ok(())
    }

    /// Parse statements until the matching closer. Returns the body plus a
    /// flag telling whether the closer was `} else {` (only an `if` caller
    /// may accept that). `top` marks the kernel's outermost statement list,
    /// where `shared` declarations may appear.
    fn parse_body(
        &mut self,
        env: &mut KernelEnv,
        top: bool,
    ) -> Result<(Vec<StmtNode>, bool), ParseError> {
        let mut body = Vec::new();
        loop {
            let Some((num, raw)) = self.take_line() else {
                return Err(ParseError { line: 0, col: 1, msg: "unterminated block".into() });
            };
            let trimmed = raw.trim();
            if trimmed.starts_with("#pragma") {
                self.parse_pragma(num, trimmed)?;
                if let Some((_, line, anchor)) = self.pending_pragma {
                    if anchor == Anchor::Launch {
                        return Err(
                            self.pragma_err(line, "kernel-scope epoch pragma belongs in host code")
                        );
                    }
                }
                continue;
            }
            let mut line = lex_line(num, raw)?;
            if matches!(line.peek(), Some(Tok::Punct('}'))) {
                line.next();
                if line.at_end() {
                    return Ok((body, false));
                }
                match line.next() {
                    Some(Tok::Ident(s)) if s == "else" => {
                        line.expect_punct('{')?;
                        line.expect_end()?;
                        return Ok((body, true));
                    }
                    _ => return Err(line.err("expected end of line or `else {` after `}`")),
                }
            }
            let stmt = self.parse_stmt(env, &mut line, top)?;
            if let Some(stmt) = stmt {
                body.push(StmtNode { line: num, stmt });
            }
        }
    }

    fn parse_stmt(
        &mut self,
        env: &mut KernelEnv,
        line: &mut Line,
        top: bool,
    ) -> Result<Option<Stmt>, ParseError> {
        let head = match line.peek() {
            Some(Tok::Ident(s)) => s.clone(),
            _ => return Err(line.err("expected statement")),
        };
        match head.as_str() {
            "shared" => {
                line.next();
                if !top {
                    return Err(line.err("shared declarations must be at kernel top level"));
                }
                if !env.kernel.body.is_empty() {
                    return Err(line.err("shared declarations must precede statements"));
                }
                let name = line.expect_ident()?;
                if is_keyword(&name) || env.lookup_space(&name).is_some() {
                    return Err(line.err(format!("`{name}` already declared")));
                }
                line.expect_punct('[')?;
                let size = self.parse_grid_scalar(env, line)?;
                line.expect_punct(']')?;
                line.expect_end()?;
                env.kernel.shared_decls.push((name, size));
                Ok(None)
            }
            "st" | "st.wt" => {
                line.next();
                let through = head == "st.wt";
                let (array, index, space) = self.parse_mem_ref(env, line)?;
                if through && space != MemSpace::Global {
                    return Err(line.err("st.wt targets global memory"));
                }
                line.expect_punct(',')?;
                let value = self.parse_operand(env, line)?;
                line.expect_end()?;
                Ok(Some(Stmt::Store { space, array, index, value, through }))
            }
            "atom.add" | "atom.min" | "atom.max" => {
                line.next();
                let op = match head.as_str() {
                    "atom.add" => AtomicOp::Add,
                    "atom.min" => AtomicOp::Min,
                    _ => AtomicOp::Max,
                };
                let (array, index, space) = self.parse_mem_ref(env, line)?;
                if space != MemSpace::Global {
                    return Err(line.err("atomics target global memory"));
                }
                line.expect_punct(',')?;
                let value = self.parse_operand(env, line)?;
                line.expect_end()?;
                Ok(Some(Stmt::Atomic { op, array, index, value }))
            }
            "clwb" => {
                line.next();
                let (array, index, space) = self.parse_mem_ref(env, line)?;
                if space != MemSpace::Global {
                    return Err(line.err("clwb takes a global address"));
                }
                line.expect_end()?;
                Ok(Some(Stmt::Clwb { array, index }))
            }
            "l2wb" => {
                line.next();
                line.expect_end()?;
                Ok(Some(Stmt::L2wb))
            }
            "sfence" => {
                line.next();
                line.expect_end()?;
                Ok(Some(Stmt::Sfence))
            }
            "pcommit" => {
                line.next();
                line.expect_end()?;
                Ok(Some(Stmt::Pcommit))
            }
            "syncthreads" => {
                line.next();
                line.expect_end()?;
                Ok(Some(Stmt::Syncthreads))
            }
            "halt" => {
                line.next();
                line.expect_end()?;
                if !env.live_iters.is_empty() {
                    return Err(line.err("halt inside a loop is not supported"));
                }
                Ok(Some(Stmt::Halt))
            }
            "if" => {
                line.next();
                let a = self.parse_operand(env, line)?;
                let op = match line.next() {
                    Some(Tok::Cmp(op)) => op,
                    _ => return Err(line.err("expected comparison operator")),
                };
                let b = self.parse_operand(env, line)?;
                line.expect_punct('{')?;
                line.expect_end()?;
                let (then_body, has_else) = self.parse_body(env, false)?;
                let else_body = if has_else {
                    let (e, nested_else) = self.parse_body(env, false)?;
                    if nested_else {
                        return Err(line.err("`else` without matching `if`"));
                    }
                    e
                } else {
                    Vec::new()
                };
                Ok(Some(Stmt::If { cond: Cond { a, op, b }, then_body, else_body }))
            }
            "loop" => {
                line.next();
                let pragma = self.take_pragma(Anchor::LoopStmt)?;
                let iter_name = line.expect_ident()?;
                if is_keyword(&iter_name)
                    || env.lookup_space(&iter_name).is_some()
                    || env.kernel.iters.contains(&iter_name)
                {
                    return Err(line.err(format!("loop iterator `{iter_name}` shadows an existing name")));
                }
                match line.next() {
                    Some(Tok::Assign) => {}
                    _ => return Err(line.err("expected `=` after loop iterator")),
                }
                let lo = self.parse_grid_scalar(env, line)?;
                match line.next() {
                    Some(Tok::Ident(s)) if s == "to" => {}
                    _ => return Err(line.err("expected `to`")),
                }
                let hi = self.parse_grid_scalar(env, line)?;
                let step = match line.peek() {
                    Some(Tok::Ident(s)) if s == "step" => {
                        line.next();
                        self.parse_grid_scalar(env, line)?
                    }
                    _ => GridScalar::constant(1),
                };
                line.expect_punct('{')?;
                line.expect_end()?;
                let iter = env.kernel.intern_iter(&iter_name);
                env.live_iters.push(iter);
                let (body, has_else) = self.parse_body(env, false)?;
                if has_else {
                    return Err(line.err("`else` without matching `if`"));
                }
                env.live_iters.pop();
                Ok(Some(Stmt::Loop { iter, lo, hi, step, body, pragma }))
            }
            _ => {
                // `name = ...`: mov, arith or load.
                let dst_name = line.expect_ident()?;
                if is_keyword(&dst_name) {
                    return Err(line.err(format!("unknown statement `{dst_name}`")));
                }
                if env.lookup_space(&dst_name).is_some() || env.kernel.iters.contains(&dst_name) {
                    return Err(line.err(format!("`{dst_name}` is not assignable")));
                }
                match line.next() {
                    Some(Tok::Assign) => {}
                    _ => return Err(line.err("expected `=`")),
                }
                let dst = env.kernel.intern_reg(&dst_name);
                let op_name = line.expect_ident()?;
                let stmt = match op_name.as_str() {
                    "ld" => {
                        let (array, index, space) = self.parse_mem_ref(env, line)?;
                        Stmt::Load { dst, space, array, index }
                    }
                    "mov" => {
                        let a = self.parse_operand(env, line)?;
                        Stmt::Mov { dst, a }
                    }
                    "add" | "sub" | "mul" | "div" | "mod" | "min" | "max" | "and" | "or"
                    | "xor" | "shl" | "shr" => {
                        let op = match op_name.as_str() {
                            "add" => BinOp::Add,
                            "sub" => BinOp::Sub,
                            "mul" => BinOp::Mul,
                            "div" => BinOp::Div,
                            "mod" => BinOp::Mod,
                            "min" => BinOp::Min,
                            "max" => BinOp::Max,
                            "and" => BinOp::And,
                            "or" => BinOp::Or,
                            "xor" => BinOp::Xor,
                            "shl" => BinOp::Shl,
                            _ => BinOp::Shr,
                        };
                        let a = self.parse_operand(env, line)?;
                        line.expect_punct(',')?;
                        let b = self.parse_operand(env, line)?;
                        Stmt::Arith { dst, op, a, b }
                    }
                    other => return Err(line.err(format!("unknown operation `{other}`"))),
                };
                line.expect_end()?;
                env.defined_regs.insert(dst);
                Ok(Some(stmt))
            }
        }
    }

    fn parse_operand(&self, env: &KernelEnv, line: &mut Line) -> Result<Operand, ParseError> {
        match line.next() {
            Some(Tok::Punct('-')) => match line.next() {
                Some(Tok::Int(v)) => Ok(Operand::Imm(-v)),
                _ => Err(line.err("expected integer after `-`")),
            },
            Some(Tok::Int(v)) => Ok(Operand::Imm(v)),
            Some(Tok::Ident(s)) => match s.as_str() {
                "tid" => Ok(Operand::Builtin(Builtin::Tid)),
                "ctaid" => Ok(Operand::Builtin(Builtin::Ctaid)),
                "ctadim" => Ok(Operand::Builtin(Builtin::Ctadim)),
                "griddim" => Ok(Operand::Builtin(Builtin::Griddim)),
                _ => {
                    if let Some(i) = env.kernel.iters.iter().position(|n| *n == s) {
                        if !env.live_iters.contains(&i) {
                            return Err(line.err(format!("iterator `{s}` used outside its loop")));
                        }
                        return Ok(Operand::Iter(i));
                    }
                    if is_keyword(&s) || env.lookup_space(&s).is_some() {
                        return Err(line.err(format!("`{s}` is not a value operand")));
                    }
                    match env.kernel.regs.iter().position(|n| *n == s) {
                        Some(r) if env.defined_regs.contains(&r) => Ok(Operand::Reg(r)),
                        _ => Err(line.err(format!("use of undefined register `{s}`"))),
                    }
                }
            },
            _ => Err(line.err("expected operand")),
        }
    }

    /// `array [ index ]` where index is an affine expression or one register.
    fn parse_mem_ref(
        &self,
        env: &KernelEnv,
        line: &mut Line,
    ) -> Result<(String, AddressExpr, MemSpace), ParseError> {
        let array = line.expect_ident()?;
        let space = env
            .lookup_space(&array)
            .ok_or_else(|| line.err(format!("undeclared array `{array}`")))?;
        line.expect_punct('[')?;
        // Single register index => opaque address.
        if let Some(Tok::Ident(s)) = line.peek() {
            let s = s.clone();
            let is_reg = !is_keyword(&s)
                && env.lookup_space(&s).is_none()
                && !env.kernel.iters.contains(&s)
                && env.kernel.regs.contains(&s);
            if is_reg {
                let save = line.pos;
                line.next();
                if matches!(line.peek(), Some(Tok::Punct(']'))) {
                    line.next();
                    let r = env.kernel.regs.iter().position(|n| *n == s).unwrap();
                    if !env.defined_regs.contains(&r) {
                        return Err(line.err(format!("use of undefined register `{s}`")));
                    }
                    return Ok((array, AddressExpr::Opaque(r), space));
                }
                line.pos = save;
            }
        }
        let expr = self.parse_affine(env, line)?;
        line.expect_punct(']')?;
        Ok((array, AddressExpr::Affine(expr.normalize()), space))
    }

    /// Affine expression over tid/ctaid/iterators with +, -, * and parens;
    /// ctadim/griddim act as launch-time constants.
    fn parse_affine(&self, env: &KernelEnv, line: &mut Line) -> Result<AffineExpr, ParseError> {
        let mut acc = self.parse_affine_term(env, line)?;
        loop {
            match line.peek() {
                Some(Tok::Punct('+')) => {
                    line.next();
                    let t = self.parse_affine_term(env, line)?;
                    acc = acc.add(&t);
                }
                Some(Tok::Punct('-')) => {
                    line.next();
                    let t = self.parse_affine_term(env, line)?;
                    acc = acc.add(&t.neg());
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_affine_term(&self, env: &KernelEnv, line: &mut Line) -> Result<AffineExpr, ParseError> {
        let mut acc = self.parse_affine_atom(env, line)?;
        while let Some(Tok::Punct('*')) = line.peek() {
            line.next();
            let rhs = self.parse_affine_atom(env, line)?;
            acc = acc
                .mul(&rhs)
                .ok_or_else(|| line.err("index expression is not affine in tid/ctaid/iterators"))?;
        }
        Ok(acc)
    }

    fn parse_affine_atom(&self, env: &KernelEnv, line: &mut Line) -> Result<AffineExpr, ParseError> {
        match line.next() {
            Some(Tok::Punct('-')) => {
                let e = self.parse_affine_atom(env, line)?;
                Ok(e.neg())
            }
            Some(Tok::Int(v)) => Ok(AffineExpr::constant(v)),
            Some(Tok::Punct('(')) => {
                let e = self.parse_affine(env, line)?;
                line.expect_punct(')')?;
                Ok(e)
            }
            Some(Tok::Ident(s)) => match s.as_str() {
                "tid" => Ok(AffineExpr::var(AffVar::Tid)),
                "ctaid" => Ok(AffineExpr::var(AffVar::Ctaid)),
                "ctadim" => Ok(AffineExpr {
                    base: GridScalar { c: 0, cd: 1, gd: 0, both: 0 },
                    terms: vec![],
                }),
                "griddim" => Ok(AffineExpr {
                    base: GridScalar { c: 0, cd: 0, gd: 1, both: 0 },
                    terms: vec![],
                }),
                _ => {
                    if let Some(i) = env.kernel.iters.iter().position(|n| *n == s) {
                        if !env.live_iters.contains(&i) {
                            return Err(line.err(format!("iterator `{s}` used outside its loop")));
                        }
                        return Ok(AffineExpr::var(AffVar::Iter(i)));
                    }
                    Err(line.err(format!(
                        "`{s}` cannot appear in an affine index (use a register index instead)"
                    )))
                }
            },
            _ => Err(line.err("expected index expression")),
        }
    }

    /// Grid-scalar expression: ints, ctadim, griddim with +, -, *.
    fn parse_grid_scalar(&self, env: &KernelEnv, line: &mut Line) -> Result<GridScalar, ParseError> {
        let e = self.parse_affine(env, line)?;
        if !e.terms.is_empty() {
            return Err(line.err("expression must be launch-uniform (no tid/ctaid/iterators)"));
        }
        Ok(e.base)
    }

    fn parse_host(&mut self) -> Result<(), ParseError> {
        if !self.unit.host.steps.is_empty() {
            return Err(ParseError { line: 0, col: 1, msg: "duplicate host block".into() });
        }
        let empty_env = KernelEnv {
            kernel: KernelProgram {
                name: String::new(),
                params: Vec::new(),
                shared_decls: Vec::new(),
                body: Vec::new(),
                regs: Vec::new(),
                iters: Vec::new(),
                pragma: None,
            },
            arrays: BTreeSet::new(),
            defined_regs: BTreeSet::new(),
            live_iters: Vec::new(),
        };
        loop {
            let Some((num, raw)) = self.take_line() else {
                return Err(ParseError { line: 0, col: 1, msg: "unterminated host block".into() });
            };
            let trimmed = raw.trim();
            if trimmed.starts_with("#pragma") {
                self.parse_pragma(num, trimmed)?;
                if let Some((_, line, anchor)) = self.pending_pragma {
                    if anchor != Anchor::Launch {
                        return Err(self.pragma_err(
                            line,
                            "only kernel-scope epoch pragmas may anchor to a launch",
                        ));
                    }
                }
                continue;
            }
            let mut line = lex_line(num, raw)?;
            let step = match line.peek() {
                Some(Tok::Punct('}')) => {
                    line.next();
                    line.expect_end()?;
                    if let Some((_, pline, _)) = self.pending_pragma {
                        return Err(self.pragma_err(pline, "pragma has no valid anchor"));
                    }
                    return Ok(());
                }
                Some(Tok::Ident(s)) => {
                    let s = s.clone();
                    line.next();
                    match s.as_str() {
                        "alloc" => {
                            let array = line.expect_ident()?;
                            line.expect_punct(',')?;
                            let size = self.parse_grid_scalar(&empty_env, &mut line)?;
                            if let Some(Tok::Punct(',')) = line.peek() {
                                line.next();
                                let kind = match line.expect_ident()?.as_str() {
                                    "undo" => AuxKind::UndoLog,
                                    "shadow" => AuxKind::Shadow,
                                    "flag" => AuxKind::Flag,
                                    "meta" => AuxKind::Meta,
                                    other => {
                                        return Err(line.err(format!(
                                            "unknown aux kind `{other}` (undo/shadow/flag/meta)"
                                        )))
                                    }
                                };
                                self.unit.aux_arrays.insert(array.clone(), kind);
                                if kind == AuxKind::Flag && !self.unit.flag_arrays.contains(&array)
                                {
                                    self.unit.flag_arrays.push(array.clone());
                                }
                            }
                            HostStep::Alloc { array, size }
                        }
                        "memcpy" => {
                            let dst = line.expect_ident()?;
                            line.expect_punct(',')?;
                            let src = line.expect_ident()?;
                            line.expect_punct(',')?;
                            let size = self.parse_grid_scalar(&empty_env, &mut line)?;
                            HostStep::MemcpyD2D { dst, src, size }
                        }
                        "flag" => {
                            let flag = line.expect_ident()?;
                            line.expect_punct(',')?;
                            let v = line.expect_ident()?;
                            let value = match v.as_str() {
                                "Initial" => FlagState::Initial,
                                "InTx" => FlagState::InTx,
                                "Complete" => FlagState::Complete,
                                _ => return Err(line.err("flag value must be Initial, InTx or Complete")),
                            };
                            if !self.unit.flag_arrays.contains(&flag) {
                                self.unit.flag_arrays.push(flag.clone());
                            }
                            HostStep::SetPersistentFlag { flag, value }
                        }
                        "launch" => {
                            let kernel = line.expect_ident()?;
                            line.expect_punct(',')?;
                            match line.next() {
                                Some(Tok::Ident(g)) if g == "grid" => {}
                                _ => return Err(line.err("expected `grid=N`")),
                            }
                            match line.next() {
                                Some(Tok::Assign) => {}
                                _ => return Err(line.err("expected `=`")),
                            }
                            let grid = match line.next() {
                                Some(Tok::Int(v)) if v > 0 => v,
                                _ => return Err(line.err("grid must be a positive integer")),
                            };
                            line.expect_punct(',')?;
                            match line.next() {
                                Some(Tok::Ident(c)) if c == "cta" => {}
                                _ => return Err(line.err("expected `cta=N`")),
                            }
                            match line.next() {
                                Some(Tok::Assign) => {}
                                _ => return Err(line.err("expected `=`")),
                            }
                            let cta = match line.next() {
                                Some(Tok::Int(v)) if v > 0 => v,
                                _ => return Err(line.err("cta must be a positive integer")),
                            };
                            let pragma = self.take_pragma(Anchor::Launch)?;
                            HostStep::LaunchKernel { kernel, grid, cta, pragma }
                        }
                        "sync" => HostStep::DeviceSync,
                        "l2wb" => HostStep::L2wbApi,
                        "consume" => {
                            let array = line.expect_ident()?;
                            HostStep::ConsumeOutput { array }
                        }
                        other => return Err(line.err(format!("unknown host step `{other}`"))),
                    }
                }
                _ => return Err(line.err("expected host step")),
            };
            line.expect_end()?;
            self.unit.host.steps.push(HostStepNode { line: num, step });
        }
    }
}

/// Post-parse validation: launches reference defined kernels, global params
/// are allocated, sizes are sane.
pub fn validate_unit(unit: &ProgramUnit) -> Result<(), String> {
    for step in &unit.host.steps {
        if let HostStep::LaunchKernel { kernel, .. } = &step.step {
            let k = unit
                .kernel(kernel)
                .ok_or_else(|| format!("launch of undefined kernel `{kernel}`"))?;
            for (p, space) in &k.params {
                if *space == ParamSpace::Global && unit.host.alloc_size(p).is_none() {
                    return Err(format!(
                        "kernel `{}` parameter `{p}` has no matching alloc",
                        k.name
                    ));
                }
            }
        }
    }
    Ok(())
}
