//! Control-flow view of a structured kernel: basic blocks, dominator and
//! post-dominator trees, and natural-loop nesting.
//!
//! The structured AST stays the primary representation; the CFG is a derived
//! analysis artifact used by the instrumentation passes (post-dominant exit
//! placement) and by tests that cross-check dominance facts against brute
//! force.

use super::ast::*;

pub type BlockId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Jump(BlockId),
    /// Conditional branch; loop headers use the iterator bound condition.
    Branch { then_to: BlockId, else_to: BlockId },
    Halt,
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Straight-line statements only (control constructs become edges).
    pub stmts: Vec<Stmt>,
    pub term: Terminator,
}

#[derive(Debug, Clone)]
pub struct CfgLoop {
    pub iter: IterId,
    pub header: BlockId,
    pub latch: BlockId,
    pub exit: BlockId,
    pub body_blocks: Vec<BlockId>,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub entry: BlockId,
    pub succs: Vec<Vec<BlockId>>,
    pub preds: Vec<Vec<BlockId>>,
    /// Immediate dominator per block (entry has none).
    pub idom: Vec<Option<BlockId>>,
    /// Immediate post-dominator per block computed toward the halt blocks.
    pub ipdom: Vec<Option<BlockId>>,
    pub loops: Vec<CfgLoop>,
    /// Non-fatal diagnostics (unreachable blocks and the like).
    pub warnings: Vec<String>,
}

struct Lowering {
    blocks: Vec<BasicBlock>,
    loops: Vec<CfgLoop>,
}

impl Lowering {
    fn new_block(&mut self) -> BlockId {
        let id = self.blocks.len();
        self.blocks.push(BasicBlock { id, stmts: Vec::new(), term: Terminator::Halt });
        id
    }

    /// Lower a statement list starting in `cur`; returns the block control
    /// falls out of, or `None` if the list ends in `halt`.
    fn lower_body(&mut self, body: &[StmtNode], mut cur: BlockId, depth: usize) -> Option<BlockId> {
        for (pos, node) in body.iter().enumerate() {
            match &node.stmt {
                Stmt::Halt => {
                    self.blocks[cur].term = Terminator::Halt;
                    if pos + 1 < body.len() {
                        // Dead code after halt still gets a (disconnected)
                        // block so the unreachable diagnostic fires.
                        let dead = self.new_block();
                        self.lower_body(&body[pos + 1..], dead, depth);
                    }
                    return None;
                }
                Stmt::If { cond: _, then_body, else_body } => {
                    let then_entry = self.new_block();
                    let else_entry = self.new_block();
                    self.blocks[cur].term =
                        Terminator::Branch { then_to: then_entry, else_to: else_entry };
                    let then_out = self.lower_body(then_body, then_entry, depth);
                    let else_out = self.lower_body(else_body, else_entry, depth);
                    match (then_out, else_out) {
                        (None, None) => {
                            if pos + 1 < body.len() {
                                let dead = self.new_block();
                                self.lower_body(&body[pos + 1..], dead, depth);
                            }
                            return None;
                        }
                        _ => {
                            let join = self.new_block();
                            if let Some(b) = then_out {
                                self.blocks[b].term = Terminator::Jump(join);
                            }
                            if let Some(b) = else_out {
                                self.blocks[b].term = Terminator::Jump(join);
                            }
                            cur = join;
                        }
                    }
                }
                Stmt::Loop { iter, body, .. } => {
                    let header = self.new_block();
                    let body_entry = self.new_block();
                    let exit = self.new_block();
                    self.blocks[cur].term = Terminator::Jump(header);
                    self.blocks[header].term =
                        Terminator::Branch { then_to: body_entry, else_to: exit };
                    let first_body_block = self.blocks.len() - 2;
                    let body_out = self
                        .lower_body(body, body_entry, depth + 1)
                        .expect("halt inside a loop is rejected at parse time");
                    self.blocks[body_out].term = Terminator::Jump(header);
                    let body_blocks: Vec<BlockId> =
                        (first_body_block..self.blocks.len()).filter(|b| *b != exit).collect();
                    self.loops.push(CfgLoop {
                        iter: *iter,
                        header,
                        latch: body_out,
                        exit,
                        body_blocks,
                        depth: depth + 1,
                    });
                    cur = exit;
                }
                s => self.blocks[cur].stmts.push(s.clone()),
            }
        }
        Some(cur)
    }
}

/// Build the CFG with successor/predecessor maps, dominator and
/// post-dominator trees, and loop nesting.
pub fn build_cfg(kernel: &KernelProgram) -> Cfg {
    let mut lowering = Lowering { blocks: Vec::new(), loops: Vec::new() };
    let entry = lowering.new_block();
    if let Some(out) = lowering.lower_body(&kernel.body, entry, 0) {
        lowering.blocks[out].term = Terminator::Halt;
    }
    let blocks = lowering.blocks;
    let n = blocks.len();

    let mut succs = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    for b in &blocks {
        let targets: Vec<BlockId> = match &b.term {
            Terminator::Jump(t) => vec![*t],
            Terminator::Branch { then_to, else_to } => vec![*then_to, *else_to],
            Terminator::Halt => vec![],
        };
        for t in targets {
            succs[b.id].push(t);
            preds[t].push(b.id);
        }
    }

    let mut warnings = Vec::new();
    let reachable = reach_from(entry, &succs, n);
    for b in 0..n {
        if !reachable[b] {
            warnings.push(format!("block {b} is unreachable"));
        }
    }

    let idom = immediate_dominators(entry, &succs, &preds, n);
    let ipdom = immediate_postdominators(&blocks, &succs, &preds, n);

    Cfg { blocks, entry, succs, preds, idom, ipdom, loops: lowering.loops, warnings }
}

fn reach_from(start: BlockId, succs: &[Vec<BlockId>], n: usize) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    while let Some(b) = stack.pop() {
        if seen[b] {
            continue;
        }
        seen[b] = true;
        stack.extend(succs[b].iter().copied());
    }
    seen
}

/// Iterative dominator computation (Cooper/Harvey/Kennedy) over a reverse
/// post-order of the forward graph.
fn immediate_dominators(
    entry: BlockId,
    succs: &[Vec<BlockId>],
    preds: &[Vec<BlockId>],
    n: usize,
) -> Vec<Option<BlockId>> {
    let rpo = reverse_postorder(entry, succs, n);
    let mut order = vec![usize::MAX; n];
    for (i, b) in rpo.iter().enumerate() {
        order[*b] = i;
    }
    let mut idom: Vec<Option<BlockId>> = vec![None; n];
    idom[entry] = Some(entry);
    let mut changed = true;
    while changed {
        changed = false;
        for &b in rpo.iter().skip(1) {
            let mut new_idom: Option<BlockId> = None;
            for &p in &preds[b] {
                if idom[p].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => p,
                    Some(cur) => intersect(cur, p, &idom, &order),
                });
            }
            if let Some(ni) = new_idom {
                if idom[b] != Some(ni) {
                    idom[b] = Some(ni);
                    changed = true;
                }
            }
        }
    }
    idom[entry] = None;
    idom
}

fn intersect(a: BlockId, b: BlockId, idom: &[Option<BlockId>], order: &[usize]) -> BlockId {
    let (mut x, mut y) = (a, b);
    while x != y {
        while order[x] > order[y] {
            x = idom[x].expect("dominator chain reaches entry");
        }
        while order[y] > order[x] {
            y = idom[y].expect("dominator chain reaches entry");
        }
    }
    x
}

fn reverse_postorder(entry: BlockId, succs: &[Vec<BlockId>], n: usize) -> Vec<BlockId> {
    let mut visited = vec![false; n];
    let mut post = Vec::with_capacity(n);
    // Iterative DFS with explicit stack of (block, next-successor-index).
    let mut stack: Vec<(BlockId, usize)> = vec![(entry, 0)];
    visited[entry] = true;
    while let Some((b, i)) = stack.pop() {
        if i < succs[b].len() {
            stack.push((b, i + 1));
            let s = succs[b][i];
            if !visited[s] {
                visited[s] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(b);
        }
    }
    post.reverse();
    post
}

/// Post-dominators via the dominator algorithm on the reversed graph with a
/// virtual exit joining every halt block. Returned vector maps each block to
/// its immediate post-dominator; halt blocks map to `None`.
fn immediate_postdominators(
    blocks: &[BasicBlock],
    succs: &[Vec<BlockId>],
    preds: &[Vec<BlockId>],
    n: usize,
) -> Vec<Option<BlockId>> {
    // Virtual exit gets id n.
    let vx = n;
    let mut rsuccs = vec![Vec::new(); n + 1];
    let mut rpreds = vec![Vec::new(); n + 1];
    for b in 0..n {
        for &p in &preds[b] {
            rsuccs[b].push(p);
            rpreds[p].push(b);
        }
    }
    for b in blocks {
        if matches!(b.term, Terminator::Halt) {
            rsuccs[vx].push(b.id);
            rpreds[b.id].push(vx);
        }
    }
    let _ = succs;
    let idom_rev = immediate_dominators(vx, &rsuccs, &rpreds, n + 1);
    (0..n)
        .map(|b| match idom_rev[b] {
            Some(x) if x != vx => Some(x),
            _ => None,
        })
        .collect()
}

impl Cfg {
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.idom[cur] {
                Some(next) if next != cur => cur = next,
                _ => return false,
            }
        }
    }

    pub fn post_dominates(&self, a: BlockId, b: BlockId) -> bool {
        if a == b {
            return true;
        }
        let mut cur = b;
        while let Some(next) = self.ipdom[cur] {
            if next == a {
                return true;
            }
            cur = next;
        }
        false
    }

    /// Blocks ending in `halt`.
    pub fn halt_blocks(&self) -> Vec<BlockId> {
        self.blocks
            .iter()
            .filter(|b| matches!(b.term, Terminator::Halt))
            .map(|b| b.id)
            .collect()
    }

    /// Maximum loop nesting depth.
    pub fn max_loop_depth(&self) -> usize {
        self.loops.iter().map(|l| l.depth).max().unwrap_or(0)
    }

    /// The unique exit block if one exists and post-dominates everything.
    pub fn postdominant_exit(&self) -> Option<BlockId> {
        let halts = self.halt_blocks();
        if halts.len() != 1 {
            return None;
        }
        let exit = halts[0];
        let reachable = reach_from(self.entry, &self.succs, self.blocks.len());
        for b in 0..self.blocks.len() {
            if reachable[b] && !self.post_dominates(exit, b) {
                return None;
            }
        }
        Some(exit)
    }
}

/// Rewrite early `halt`s so the kernel has a single exit at the end of its
/// body, then return the exit block id in the rebuilt CFG. The rewrite is
/// the structured equivalent of creating a post-dominant block and
/// redirecting every halt path through it; straight-line kernels come back
/// unchanged.
pub fn ensure_postdominant_exit(kernel: &mut KernelProgram) -> BlockId {
    kernel.body = normalize_exits(std::mem::take(&mut kernel.body));
    let cfg = build_cfg(kernel);
    cfg.postdominant_exit()
        .expect("exit normalization produces a single post-dominant exit")
}

/// Remove `halt` statements by restructuring with explicit continuations:
/// any path that halted now runs to the end of the kernel body with the
/// remaining statements folded into the non-halting branches. Trailing
/// halts simply disappear (the end of the body is the implicit halt).
fn normalize_exits(body: Vec<StmtNode>) -> Vec<StmtNode> {
    normalize(body, Vec::new())
}

fn contains_halt(body: &[StmtNode]) -> bool {
    body.iter().any(|n| match &n.stmt {
        Stmt::Halt => true,
        Stmt::If { then_body, else_body, .. } => {
            contains_halt(then_body) || contains_halt(else_body)
        }
        // Parser rejects halt inside loops.
        _ => false,
    })
}

/// Returns a list equivalent to `body` followed by `cont`, with every halt
/// eliminated. Reaching the end of the returned list is the kernel exit.
fn normalize(body: Vec<StmtNode>, cont: Vec<StmtNode>) -> Vec<StmtNode> {
    let mut out: Vec<StmtNode> = Vec::new();
    let mut iter = body.into_iter();
    while let Some(node) = iter.next() {
        match node.stmt {
            Stmt::Halt => return out,
            Stmt::If { cond, then_body, else_body } => {
                let rest: Vec<StmtNode> = iter.collect();
                if contains_halt(&then_body) || contains_halt(&else_body) {
                    // The continuation is duplicated into both arms so that
                    // halting paths end exactly where the kernel ends.
                    let mut rc = rest;
                    rc.extend(cont);
                    let t = normalize(then_body, rc.clone());
                    let e = normalize(else_body, rc);
                    out.push(StmtNode {
                        line: node.line,
                        stmt: Stmt::If { cond, then_body: t, else_body: e },
                    });
                } else {
                    let t = normalize(then_body, Vec::new());
                    let e = normalize(else_body, Vec::new());
                    out.push(StmtNode {
                        line: node.line,
                        stmt: Stmt::If { cond, then_body: t, else_body: e },
                    });
                    out.extend(normalize(rest, cont));
                }
                return out;
            }
            _ => out.push(node),
        }
    }
    if !cont.is_empty() {
        out.extend(normalize(cont, Vec::new()));
    }
    out
}
