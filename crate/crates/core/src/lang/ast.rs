//! IR for kernels, host scripts, and persistency directives.
//!
//! Kernels are kept in structured form (straight-line statements, `if`,
//! counted `loop`). Basic blocks, dominators and post-dominators are derived
//! views built by [`super::cfg`]. Source line numbers ride along on
//! [`StmtNode`]/[`HostStepNode`] for diagnostics but are ignored by equality
//! so that print/parse round-trips compare clean.

use std::collections::BTreeMap;
use std::fmt;

pub type RegId = usize;
pub type IterId = usize;

/// Implicitly defined read-only registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Builtin {
    Tid,
    Ctaid,
    Ctadim,
    Griddim,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Tid => "tid",
            Builtin::Ctaid => "ctaid",
            Builtin::Ctadim => "ctadim",
            Builtin::Griddim => "griddim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(RegId),
    Imm(i64),
    Builtin(Builtin),
    Iter(IterId),
}

/// An integer that may scale with the launch geometry:
/// `c + cd*ctadim + gd*griddim + both*ctadim*griddim`.
///
/// Loop bounds, shared-array extents and host allocation sizes are all
/// grid-scalars so corpus files stay valid under `--grid` overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GridScalar {
    pub c: i64,
    pub cd: i64,
    pub gd: i64,
    pub both: i64,
}

impl GridScalar {
    pub fn constant(c: i64) -> Self {
        GridScalar { c, cd: 0, gd: 0, both: 0 }
    }

    pub fn is_constant(&self) -> bool {
        self.cd == 0 && self.gd == 0 && self.both == 0
    }

    pub fn is_zero(&self) -> bool {
        *self == GridScalar::default()
    }

    pub fn eval(&self, grid: &GridConfig) -> i64 {
        self.c
            + self.cd * grid.cta_dim
            + self.gd * grid.grid_dim
            + self.both * grid.cta_dim * grid.grid_dim
    }

    pub fn add(&self, o: &GridScalar) -> GridScalar {
        GridScalar {
            c: self.c + o.c,
            cd: self.cd + o.cd,
            gd: self.gd + o.gd,
            both: self.both + o.both,
        }
    }

    pub fn neg(&self) -> GridScalar {
        GridScalar { c: -self.c, cd: -self.cd, gd: -self.gd, both: -self.both }
    }

    /// Product of two grid-scalars, `None` when the result would exceed
    /// degree one in either `ctadim` or `griddim`.
    pub fn mul(&self, o: &GridScalar) -> Option<GridScalar> {
        let mut r = GridScalar::default();
        let a = [self.c, self.cd, self.gd, self.both];
        let b = [o.c, o.cd, o.gd, o.both];
        // index -> (ctadim degree, griddim degree)
        let deg = [(0, 0), (1, 0), (0, 1), (1, 1)];
        for i in 0..4 {
            for j in 0..4 {
                let p = a[i] * b[j];
                if p == 0 {
                    continue;
                }
                let (dc, dg) = (deg[i].0 + deg[j].0, deg[i].1 + deg[j].1);
                match (dc, dg) {
                    (0, 0) => r.c += p,
                    (1, 0) => r.cd += p,
                    (0, 1) => r.gd += p,
                    (1, 1) => r.both += p,
                    _ => return None,
                }
            }
        }
        Some(r)
    }
}

/// Variables an affine address may be linear in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AffVar {
    Tid,
    Ctaid,
    Iter(IterId),
}

/// `base + sum(coef * var)` with grid-scalar coefficients; the terms are
/// kept sorted by variable so structurally equal expressions compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AffineExpr {
    pub base: GridScalar,
    pub terms: Vec<(AffVar, GridScalar)>,
}

impl AffineExpr {
    pub fn constant(c: i64) -> Self {
        AffineExpr { base: GridScalar::constant(c), terms: Vec::new() }
    }

    pub fn var(v: AffVar) -> Self {
        AffineExpr { base: GridScalar::default(), terms: vec![(v, GridScalar::constant(1))] }
    }

    pub fn normalize(mut self) -> Self {
        self.terms.sort_by_key(|(v, _)| *v);
        let mut out: Vec<(AffVar, GridScalar)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match out.last_mut() {
                Some((lv, lc)) if *lv == v => *lc = lc.add(&c),
                _ => out.push((v, c)),
            }
        }
        out.retain(|(_, c)| !c.is_zero());
        self.terms = out;
        self
    }

    pub fn add(&self, o: &AffineExpr) -> AffineExpr {
        let mut terms = self.terms.clone();
        terms.extend(o.terms.iter().cloned());
        AffineExpr { base: self.base.add(&o.base), terms }.normalize()
    }

    pub fn neg(&self) -> AffineExpr {
        AffineExpr {
            base: self.base.neg(),
            terms: self.terms.iter().map(|(v, c)| (*v, c.neg())).collect(),
        }
    }

    /// Multiply; fails when the product is no longer linear in the variables.
    pub fn mul(&self, o: &AffineExpr) -> Option<AffineExpr> {
        if !self.terms.is_empty() && !o.terms.is_empty() {
            return None;
        }
        let (scalar, linear) = if self.terms.is_empty() { (self, o) } else { (o, self) };
        let mut terms = Vec::with_capacity(linear.terms.len());
        for (v, c) in &linear.terms {
            terms.push((*v, c.mul(&scalar.base)?));
        }
        Some(AffineExpr { base: linear.base.mul(&scalar.base)?, terms }.normalize())
    }

    pub fn uses_iter(&self) -> bool {
        self.terms.iter().any(|(v, _)| matches!(v, AffVar::Iter(_)))
    }

    pub fn iter_vars(&self) -> Vec<IterId> {
        self.terms
            .iter()
            .filter_map(|(v, _)| match v {
                AffVar::Iter(i) => Some(*i),
                _ => None,
            })
            .collect()
    }

    /// Substitute an iterator with another affine expression.
    pub fn subst_iter(&self, iter: IterId, with: &AffineExpr) -> AffineExpr {
        let mut out = AffineExpr { base: self.base, terms: Vec::new() };
        for (v, c) in &self.terms {
            if *v == AffVar::Iter(iter) {
                let scaled = AffineExpr { base: *c, terms: vec![] }
                    .mul(with)
                    .expect("scaling affine by grid-scalar is linear");
                out = out.add(&scaled);
            } else {
                out.terms.push((*v, *c));
            }
        }
        out.normalize()
    }

    pub fn eval(&self, grid: &GridConfig, ctaid: i64, tid: i64, iters: &[i64]) -> i64 {
        let mut v = self.base.eval(grid);
        for (var, c) in &self.terms {
            let x = match var {
                AffVar::Tid => tid,
                AffVar::Ctaid => ctaid,
                AffVar::Iter(i) => iters[*i],
            };
            v += c.eval(grid) * x;
        }
        v
    }
}

/// Address of a memory operand: either an affine expression over
/// `{tid, ctaid, loop iterators}` or a register holding a computed value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddressExpr {
    Affine(AffineExpr),
    Opaque(RegId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemSpace {
    Global,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Min,
    Max,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Mod => "mod",
            BinOp::Min => "min",
            BinOp::Max => "max",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn apply(self, a: i64, b: i64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomicOp {
    Add,
    Min,
    Max,
}

impl AtomicOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AtomicOp::Add => "add",
            AtomicOp::Min => "min",
            AtomicOp::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cond {
    pub a: Operand,
    pub op: CmpOp,
    pub b: Operand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Arith { dst: RegId, op: BinOp, a: Operand, b: Operand },
    Mov { dst: RegId, a: Operand },
    Load { dst: RegId, space: MemSpace, array: String, index: AddressExpr },
    /// `through` selects `st.wt` (write-through, write-no-allocate).
    Store { space: MemSpace, array: String, index: AddressExpr, value: Operand, through: bool },
    Atomic { op: AtomicOp, array: String, index: AddressExpr, value: Operand },
    Clwb { array: String, index: AddressExpr },
    L2wb,
    Sfence,
    Pcommit,
    Syncthreads,
    Halt,
    If { cond: Cond, then_body: Vec<StmtNode>, else_body: Vec<StmtNode> },
    Loop {
        iter: IterId,
        lo: GridScalar,
        hi: GridScalar,
        step: GridScalar,
        body: Vec<StmtNode>,
        pragma: Option<usize>,
    },
}

/// Statement plus its source line. Equality ignores the line so print/parse
/// round-trips compare structurally.
#[derive(Debug, Clone)]
pub struct StmtNode {
    pub line: u32,
    pub stmt: Stmt,
}

impl PartialEq for StmtNode {
    fn eq(&self, other: &Self) -> bool {
        self.stmt == other.stmt
    }
}
impl Eq for StmtNode {}

impl From<Stmt> for StmtNode {
    fn from(stmt: Stmt) -> Self {
        StmtNode { line: 0, stmt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSpace {
    Global,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelProgram {
    pub name: String,
    pub params: Vec<(String, ParamSpace)>,
    pub shared_decls: Vec<(String, GridScalar)>,
    pub body: Vec<StmtNode>,
    /// Register names; `RegId` indexes this table.
    pub regs: Vec<String>,
    /// Loop iterator names; `IterId` indexes this table.
    pub iters: Vec<String>,
    pub pragma: Option<usize>,
}

impl KernelProgram {
    pub fn reg_name(&self, r: RegId) -> &str {
        &self.regs[r]
    }

    pub fn iter_name(&self, i: IterId) -> &str {
        &self.iters[i]
    }

    pub fn shared_names(&self) -> Vec<&str> {
        self.shared_decls.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn intern_reg(&mut self, name: &str) -> RegId {
        if let Some(i) = self.regs.iter().position(|r| r == name) {
            return i;
        }
        self.regs.push(name.to_string());
        self.regs.len() - 1
    }

    pub fn intern_iter(&mut self, name: &str) -> IterId {
        if let Some(i) = self.iters.iter().position(|r| r == name) {
            return i;
        }
        self.iters.push(name.to_string());
        self.iters.len() - 1
    }

    /// Visit every statement node, depth first, in program order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a StmtNode)) {
        fn walk<'a>(body: &'a [StmtNode], f: &mut dyn FnMut(&'a StmtNode)) {
            for node in body {
                f(node);
                match &node.stmt {
                    Stmt::If { then_body, else_body, .. } => {
                        walk(then_body, f);
                        walk(else_body, f);
                    }
                    Stmt::Loop { body, .. } => walk(body, f),
                    _ => {}
                }
            }
        }
        walk(&self.body, f)
    }

    /// Count statements matching a predicate anywhere in the kernel.
    pub fn count_stmts(&self, pred: impl Fn(&Stmt) -> bool) -> usize {
        let mut n = 0;
        self.visit(&mut |node| {
            if pred(&node.stmt) {
                n += 1;
            }
        });
        n
    }

    /// Renumber registers and iterators into first-occurrence order, the
    /// numbering a reparse of the printed kernel would assign. Passes call
    /// this after inserting instructions so print/parse round-trips hold.
    pub fn renumber_locals(&mut self) {
        let mut reg_order: Vec<RegId> = Vec::new();
        let mut iter_order: Vec<IterId> = Vec::new();
        self.visit(&mut |node| match &node.stmt {
            Stmt::Arith { dst, .. } | Stmt::Mov { dst, .. } | Stmt::Load { dst, .. } => {
                if !reg_order.contains(dst) {
                    reg_order.push(*dst);
                }
            }
            Stmt::Loop { iter, .. } => {
                if !iter_order.contains(iter) {
                    iter_order.push(*iter);
                }
            }
            _ => {}
        });
        // Unreferenced table entries go last, preserving relative order.
        for r in 0..self.regs.len() {
            if !reg_order.contains(&r) {
                reg_order.push(r);
            }
        }
        for i in 0..self.iters.len() {
            if !iter_order.contains(&i) {
                iter_order.push(i);
            }
        }
        let reg_map: Vec<RegId> = {
            let mut m = vec![0; self.regs.len()];
            for (new, old) in reg_order.iter().enumerate() {
                m[*old] = new;
            }
            m
        };
        let iter_map: Vec<IterId> = {
            let mut m = vec![0; self.iters.len()];
            for (new, old) in iter_order.iter().enumerate() {
                m[*old] = new;
            }
            m
        };
        fn remap_op(op: &mut Operand, regs: &[RegId], iters: &[IterId]) {
            match op {
                Operand::Reg(r) => *r = regs[*r],
                Operand::Iter(i) => *i = iters[*i],
                _ => {}
            }
        }
        fn remap_idx(idx: &mut AddressExpr, regs: &[RegId], iters: &[IterId]) {
            match idx {
                AddressExpr::Opaque(r) => *r = regs[*r],
                AddressExpr::Affine(e) => {
                    for (v, _) in &mut e.terms {
                        if let AffVar::Iter(i) = v {
                            *i = iters[*i];
                        }
                    }
                    e.terms.sort_by_key(|(v, _)| *v);
                }
            }
        }
        fn walk(body: &mut [StmtNode], regs: &[RegId], iters: &[IterId]) {
            for node in body {
                match &mut node.stmt {
                    Stmt::Arith { dst, a, b, .. } => {
                        *dst = regs[*dst];
                        remap_op(a, regs, iters);
                        remap_op(b, regs, iters);
                    }
                    Stmt::Mov { dst, a } => {
                        *dst = regs[*dst];
                        remap_op(a, regs, iters);
                    }
                    Stmt::Load { dst, index, .. } => {
                        *dst = regs[*dst];
                        remap_idx(index, regs, iters);
                    }
                    Stmt::Store { index, value, .. } | Stmt::Atomic { index, value, .. } => {
                        remap_idx(index, regs, iters);
                        remap_op(value, regs, iters);
                    }
                    Stmt::Clwb { index, .. } => remap_idx(index, regs, iters),
                    Stmt::If { cond, then_body, else_body } => {
                        remap_op(&mut cond.a, regs, iters);
                        remap_op(&mut cond.b, regs, iters);
                        walk(then_body, regs, iters);
                        walk(else_body, regs, iters);
                    }
                    Stmt::Loop { iter, body, .. } => {
                        *iter = iters[*iter];
                        walk(body, regs, iters);
                    }
                    _ => {}
                }
            }
        }
        let mut body = std::mem::take(&mut self.body);
        walk(&mut body, &reg_map, &iter_map);
        self.body = body;
        self.regs = reg_order.iter().map(|r| self.regs[*r].clone()).collect();
        self.iters = iter_order.iter().map(|i| self.iters[*i].clone()).collect();
    }
}

/// "Initial / inTx / Complete" transaction flag states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagState {
    Initial,
    InTx,
    Complete,
}

impl FlagState {
    pub fn as_word(self) -> i64 {
        match self {
            FlagState::Initial => 0,
            FlagState::InTx => 1,
            FlagState::Complete => 2,
        }
    }

    pub fn from_word(w: i64) -> Option<FlagState> {
        match w {
            0 => Some(FlagState::Initial),
            1 => Some(FlagState::InTx),
            2 => Some(FlagState::Complete),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlagState::Initial => "Initial",
            FlagState::InTx => "InTx",
            FlagState::Complete => "Complete",
        }
    }
}

impl fmt::Display for FlagState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostStep {
    Alloc { array: String, size: GridScalar },
    MemcpyD2D { dst: String, src: String, size: GridScalar },
    SetPersistentFlag { flag: String, value: FlagState },
    LaunchKernel { kernel: String, grid: i64, cta: i64, pragma: Option<usize> },
    DeviceSync,
    L2wbApi,
    ConsumeOutput { array: String },
}

#[derive(Debug, Clone)]
pub struct HostStepNode {
    pub line: u32,
    pub step: HostStep,
}

impl PartialEq for HostStepNode {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
    }
}
impl Eq for HostStepNode {}

impl From<HostStep> for HostStepNode {
    fn from(step: HostStep) -> Self {
        HostStepNode { line: 0, step }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HostScript {
    pub steps: Vec<HostStepNode>,
}

impl HostScript {
    pub fn alloc_size(&self, array: &str) -> Option<GridScalar> {
        self.steps.iter().find_map(|s| match &s.step {
            HostStep::Alloc { array: a, size } if a == array => Some(*size),
            _ => None,
        })
    }

    pub fn launches(&self) -> Vec<(usize, &HostStep)> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.step, HostStep::LaunchKernel { .. }))
            .map(|(i, s)| (i, &s.step))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub grid_dim: i64,
    pub cta_dim: i64,
    pub warp_size: i64,
}

impl GridConfig {
    pub fn new(grid_dim: i64, cta_dim: i64, warp_size: i64) -> Self {
        assert!(grid_dim > 0 && cta_dim > 0 && warp_size > 0);
        assert!(
            cta_dim % warp_size == 0,
            "ctaDim ({cta_dim}) must be a multiple of warpSize ({warp_size})"
        );
        GridConfig { grid_dim, cta_dim, warp_size }
    }

    pub fn warps_per_cta(&self) -> i64 {
        self.cta_dim / self.warp_size
    }

    pub fn total_threads(&self) -> i64 {
        self.grid_dim * self.cta_dim
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig::new(2, 8, 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Strict,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochScope {
    Kernel,
    Cta,
    Loop,
}

impl EpochScope {
    pub fn name(self) -> &'static str {
        match self {
            EpochScope::Kernel => "kernel",
            EpochScope::Cta => "cta",
            EpochScope::Loop => "loop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mech {
    Wt,
    Clwb,
    L2wb,
}

impl Mech {
    pub fn name(self) -> &'static str {
        match self {
            Mech::Wt => "wt",
            Mech::Clwb => "clwb",
            Mech::L2wb => "l2wb",
        }
    }
}

/// One parsed `gpu_pm` pragma.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersistencyDirective {
    pub model: Model,
    pub scope: Option<EpochScope>,
    pub mech: Mech,
    /// `false` when the `pct` option asks for volatile WPQs plus pcommit.
    pub durable_wpq: bool,
    pub tx: bool,
    pub idem: bool,
}

impl PersistencyDirective {
    pub fn strict(mech: Mech) -> Self {
        PersistencyDirective {
            model: Model::Strict,
            scope: None,
            mech,
            durable_wpq: true,
            tx: false,
            idem: false,
        }
    }

    pub fn epoch(scope: EpochScope, mech: Mech) -> Self {
        PersistencyDirective {
            model: Model::Epoch,
            scope: Some(scope),
            mech,
            durable_wpq: true,
            tx: false,
            idem: false,
        }
    }

    pub fn with_pct(mut self) -> Self {
        self.durable_wpq = false;
        self
    }

    pub fn with_tx(mut self) -> Self {
        self.tx = true;
        self
    }

    pub fn with_idem(mut self) -> Self {
        self.idem = true;
        self
    }

    /// Model/scope/mech consistency rules.
    pub fn validate(&self) -> Result<(), String> {
        match self.model {
            Model::Strict => {
                if self.scope.is_some() {
                    return Err("strict persistency takes no epoch scope".into());
                }
                if self.mech == Mech::L2wb {
                    return Err("strict persistency supports only wt or clwb".into());
                }
            }
            Model::Epoch => match self.scope {
                None => return Err("epoch persistency requires a scope".into()),
                Some(EpochScope::Kernel) if self.mech != Mech::L2wb => {
                    return Err("kernel-level epochs persist via l2wb only".into())
                }
                _ => {}
            },
        }
        if self.idem && !self.tx {
            return Err("idem only applies to durable transactions (tx)".into());
        }
        Ok(())
    }

    /// Short label following the reporting convention, e.g. `EP_C_clwb_pct`
    /// or `Undo_C_wt_idem`.
    pub fn label(&self) -> String {
        let mut s = if self.tx {
            match (self.model, self.scope) {
                (Model::Epoch, Some(EpochScope::Kernel)) => "Undo_K".to_string(),
                (Model::Epoch, Some(EpochScope::Cta)) => format!("Undo_C_{}", self.mech.name()),
                (Model::Epoch, Some(EpochScope::Loop)) => format!("Undo_L_{}", self.mech.name()),
                (Model::Epoch, None) | (Model::Strict, _) => {
                    format!("Undo_SP_{}", self.mech.name())
                }
            }
        } else {
            match (self.model, self.scope) {
                (Model::Strict, _) => format!("SP_{}", self.mech.name()),
                (Model::Epoch, Some(EpochScope::Kernel)) => "EP_K".to_string(),
                (Model::Epoch, Some(EpochScope::Cta)) => format!("EP_C_{}", self.mech.name()),
                (Model::Epoch, Some(EpochScope::Loop)) => format!("EP_L_{}", self.mech.name()),
                (Model::Epoch, None) => "EP".to_string(),
            }
        };
        if !self.durable_wpq {
            s.push_str("_pct");
        }
        if self.idem {
            s.push_str("_idem");
        }
        s
    }
}

/// Role of an array added by an instrumentation pass. Arrays carrying one of
/// these roles are excluded from oracle comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    UndoLog,
    Shadow,
    Flag,
    Meta,
}

/// A parsed program unit: kernels, the host script that drives them, and the
/// pragmas bound to their anchors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProgramUnit {
    pub kernels: Vec<KernelProgram>,
    pub host: HostScript,
    pub directives: Vec<PersistencyDirective>,
    /// Arrays living in the persistent flag region.
    pub flag_arrays: Vec<String>,
    /// Instrumentation-owned arrays, by role.
    pub aux_arrays: BTreeMap<String, AuxKind>,
}

impl ProgramUnit {
    pub fn kernel(&self, name: &str) -> Option<&KernelProgram> {
        self.kernels.iter().find(|k| k.name == name)
    }

    pub fn kernel_mut(&mut self, name: &str) -> Option<&mut KernelProgram> {
        self.kernels.iter_mut().find(|k| k.name == name)
    }

    /// Data arrays: allocated arrays that are not instrumentation-owned.
    pub fn data_arrays(&self) -> Vec<String> {
        self.host
            .steps
            .iter()
            .filter_map(|s| match &s.step {
                HostStep::Alloc { array, .. } if !self.aux_arrays.contains_key(array) => {
                    Some(array.clone())
                }
                _ => None,
            })
            .collect()
    }

    pub fn is_flag_array(&self, name: &str) -> bool {
        self.flag_arrays.iter().any(|f| f == name)
    }

    /// Grid configuration of the first launch, with the default warp size.
    pub fn default_grid(&self) -> Option<GridConfig> {
        self.host.steps.iter().find_map(|s| match &s.step {
            HostStep::LaunchKernel { grid, cta, .. } => Some(GridConfig::new(*grid, *cta, 4)),
            _ => None,
        })
    }

    /// Drop directives no statement references anymore and renumber the
    /// remaining anchors. Passes call this after consuming a pragma so
    /// printed output still round-trips.
    pub fn gc_directives(&mut self) {
        let mut used: Vec<usize> = Vec::new();
        let mut collect = |p: &Option<usize>| {
            if let Some(id) = p {
                if !used.contains(id) {
                    used.push(*id);
                }
            }
        };
        for k in &self.kernels {
            collect(&k.pragma);
            k.visit(&mut |node| {
                if let Stmt::Loop { pragma, .. } = &node.stmt {
                    collect(pragma);
                }
            });
        }
        for s in &self.host.steps {
            if let HostStep::LaunchKernel { pragma, .. } = &s.step {
                collect(pragma);
            }
        }
        used.sort_unstable();
        let table: Vec<PersistencyDirective> = used.iter().map(|i| self.directives[*i]).collect();
        let renumber = |p: &mut Option<usize>| {
            if let Some(id) = p {
                *id = used.iter().position(|u| u == id).unwrap();
            }
        };
        for k in &mut self.kernels {
            renumber(&mut k.pragma);
            fn walk(body: &mut [StmtNode], f: &dyn Fn(&mut Option<usize>)) {
                for node in body {
                    match &mut node.stmt {
                        Stmt::Loop { pragma, body, .. } => {
                            f(pragma);
                            walk(body, f);
                        }
                        Stmt::If { then_body, else_body, .. } => {
                            walk(then_body, f);
                            walk(else_body, f);
                        }
                        _ => {}
                    }
                }
            }
            walk(&mut k.body, &renumber);
        }
        for s in &mut self.host.steps {
            if let HostStep::LaunchKernel { pragma, .. } = &mut s.step {
                renumber(pragma);
            }
        }
        self.directives = table;
    }
}
