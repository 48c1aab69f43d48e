//! Static idempotency analysis with undo-log minimization.
//!
//! The verdict is conservative: a region is declared non-idempotent if it
//! contains a global atomic, if any store's address range may intersect any
//! load's address range over the region's thread/iteration domain, or if
//! any address is opaque (may-alias). Alias analysis is exact over affine
//! index sets: at desk scale the domains enumerate completely, so affine
//! kernels get exact answers and opaque ones fall back to whole arrays.
//!
//! Shared-memory conflicts count against idempotency even though this
//! toolkit's interpreter zeroes scratchpad deterministically: real
//! scratchpad holds garbage across re-executions, so the conservative
//! verdict is the sound one. Soundness is one-directional by design:
//! statically idempotent regions must pass the dynamic double-execution
//! oracle, never the reverse.

use crate::lang::ast::*;
use crate::lang::slice::{access_sites, AccessKind, AccessSite};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdemReason {
    Clean,
    HasAtomic,
    AntiDependency,
    OpaqueAlias,
}

impl IdemReason {
    pub fn name(self) -> &'static str {
        match self {
            IdemReason::Clean => "clean",
            IdemReason::HasAtomic => "hasAtomic",
            IdemReason::AntiDependency => "antiDependency",
            IdemReason::OpaqueAlias => "opaqueAlias",
        }
    }
}

/// Which region of the kernel is being analyzed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisScope {
    Kernel,
    Cta,
    /// Body of the top-level loop at this index.
    LoopBody(usize),
}

#[derive(Debug, Clone)]
pub struct IdempotencyResult {
    pub idempotent: bool,
    pub reason: IdemReason,
    /// Global locations that must be undo-logged: a static
    /// over-approximation of the overwritten live-in set.
    pub must_log: BTreeMap<String, BTreeSet<i64>>,
    /// Store/atomic sites whose pre-images the device-side logger copies.
    pub must_log_sites: Vec<AccessSite>,
}

impl IdempotencyResult {
    pub fn must_log_words(&self) -> usize {
        self.must_log.values().map(BTreeSet::len).sum()
    }

    pub fn must_log_bytes(&self) -> usize {
        self.must_log_words() * 8
    }
}

/// Concrete index set of one access over its thread/iteration domain.
/// `ctas` restricts the CTA dimension; enclosing loop domains multiply in.
/// Iterators of loops *outside* the analyzed region are already handled by
/// the caller restricting `site.enclosing`.
fn enumerate_affine(
    e: &AffineExpr,
    grid: &GridConfig,
    ctas: &[i64],
    enclosing: &[crate::lang::slice::LoopCtx],
) -> BTreeSet<i64> {
    let mut out = BTreeSet::new();
    let mut iter_vals: Vec<(IterId, Vec<i64>)> = Vec::new();
    for l in enclosing {
        let (lo, hi, step) = (l.lo.eval(grid), l.hi.eval(grid), l.step.eval(grid));
        let vals: Vec<i64> = if step > 0 { (lo..hi).step_by(step as usize).collect() } else { vec![] };
        iter_vals.push((l.iter, vals));
    }
    // Cartesian product over enclosing loops; desk-scale domains are tiny.
    fn rec(
        e: &AffineExpr,
        grid: &GridConfig,
        ctas: &[i64],
        iters: &[(IterId, Vec<i64>)],
        bound: &mut Vec<(IterId, i64)>,
        out: &mut BTreeSet<i64>,
    ) {
        match iters.split_first() {
            None => {
                let mut ivec = vec![0i64; bound.iter().map(|(i, _)| i + 1).max().unwrap_or(0)];
                for (i, v) in bound.iter() {
                    ivec[*i] = *v;
                }
                for &cta in ctas {
                    for tid in 0..grid.cta_dim {
                        out.insert(e.eval(grid, cta, tid, &ivec));
                    }
                }
            }
            Some(((iter, vals), rest)) => {
                for &v in vals {
                    bound.push((*iter, v));
                    rec(e, grid, ctas, rest, bound, out);
                    bound.pop();
                }
            }
        }
    }
    rec(e, grid, ctas, &iter_vals, &mut Vec::new(), &mut out);
    out
}

fn array_len(unit: &ProgramUnit, grid: &GridConfig, array: &str) -> i64 {
    unit.host.alloc_size(array).map(|s| s.eval(grid)).unwrap_or(0)
}

/// Key identifying an alias class: global arrays by name, shared arrays by
/// (name, cta).
type ClassKey = (String, Option<i64>);

struct SiteSets {
    loads: BTreeMap<ClassKey, BTreeSet<i64>>,
    stores: BTreeMap<ClassKey, BTreeSet<i64>>,
}

/// Analyze one region of the kernel. The spec's conservative rules, in
/// order: atomics, affine store/load intersection, opaque addresses.
pub fn analyze_idempotency(
    unit: &ProgramUnit,
    kernel: &KernelProgram,
    scope: AnalysisScope,
    grid: &GridConfig,
) -> IdempotencyResult {
    let all_sites = access_sites(kernel);
    // Restrict to the region. For a loop body the anchored loop's iterator
    // still spans its full domain: the union over iterations bounds what
    // re-executing any one iteration can touch.
    let sites: Vec<AccessSite> = match scope {
        AnalysisScope::Kernel | AnalysisScope::Cta => all_sites,
        AnalysisScope::LoopBody(idx) => {
            all_sites.into_iter().filter(|s| s.path.first() == Some(&idx)).collect()
        }
    };

    let ctas: Vec<i64> = (0..grid.grid_dim).collect();
    let has_atomic = sites.iter().any(|s| s.kind == AccessKind::Atomic);
    let has_opaque = sites
        .iter()
        .any(|s| s.kind != AccessKind::Clwb && matches!(s.index, AddressExpr::Opaque(_)));

    // Conflict detection over exact affine sets, per CTA instance (shared
    // arrays never alias across CTAs; global conflicts within one CTA are
    // what re-execution of that CTA can corrupt, and the kernel scope takes
    // the union across CTAs which adds any cross-CTA overlap).
    let mut definite_conflict = false;
    let per_cta_groups: Vec<Vec<i64>> = match scope {
        AnalysisScope::Kernel => vec![ctas.clone()],
        AnalysisScope::Cta | AnalysisScope::LoopBody(_) => {
            ctas.iter().map(|c| vec![*c]).collect()
        }
    };

    let mut must_log: BTreeMap<String, BTreeSet<i64>> = BTreeMap::new();
    let mut must_log_sites: Vec<AccessSite> = Vec::new();
    let mut log_site_paths: BTreeSet<Vec<usize>> = BTreeSet::new();

    for group in &per_cta_groups {
        let mut sets = SiteSets { loads: BTreeMap::new(), stores: BTreeMap::new() };
        for site in &sites {
            let AddressExpr::Affine(e) = &site.index else { continue };
            let idxs = enumerate_affine(e, grid, group, &site.enclosing);
            let key: ClassKey = match site.space {
                MemSpace::Global => (site.array.clone(), None),
                MemSpace::Shared => (site.array.clone(), Some(group[0])),
            };
            match site.kind {
                AccessKind::Load => {
                    sets.loads.entry(key).or_default().extend(idxs);
                }
                AccessKind::Store | AccessKind::Atomic => {
                    sets.stores.entry(key).or_default().extend(idxs);
                }
                AccessKind::Clwb => {}
            }
        }
        for (key, stores) in &sets.stores {
            if let Some(loads) = sets.loads.get(key) {
                let inter: BTreeSet<i64> = stores.intersection(loads).copied().collect();
                if !inter.is_empty() {
                    definite_conflict = true;
                    if key.1.is_none() {
                        must_log.entry(key.0.clone()).or_default().extend(inter);
                    }
                }
            }
        }
    }

    // Opaque accesses widen the log conservatively.
    if has_opaque || has_atomic {
        let opaque_load = sites.iter().any(|s| {
            s.kind == AccessKind::Load && matches!(s.index, AddressExpr::Opaque(_))
        });
        for site in &sites {
            let widen = match (site.kind, &site.index) {
                // Opaque store or atomic target: whole array.
                (AccessKind::Store | AccessKind::Atomic, AddressExpr::Opaque(_)) => true,
                // Affine atomic: its exact range is read-modify-written.
                (AccessKind::Atomic, AddressExpr::Affine(_)) => true,
                // Any opaque load may read any stored location.
                (AccessKind::Store, AddressExpr::Affine(_)) if opaque_load => true,
                _ => false,
            };
            if widen && site.space == MemSpace::Global {
                let set = must_log.entry(site.array.clone()).or_default();
                match &site.index {
                    AddressExpr::Affine(e) => {
                        set.extend(enumerate_affine(e, grid, &ctas, &site.enclosing))
                    }
                    AddressExpr::Opaque(_) => {
                        set.extend(0..array_len(unit, grid, &site.array));
                    }
                }
            }
        }
    }

    // Sites the device-side logger mirrors: every global store/atomic whose
    // target set intersects must_log.
    for site in &sites {
        if site.space != MemSpace::Global
            || !matches!(site.kind, AccessKind::Store | AccessKind::Atomic)
        {
            continue;
        }
        let hit = match &site.index {
            AddressExpr::Opaque(_) => must_log.contains_key(&site.array),
            AddressExpr::Affine(e) => match must_log.get(&site.array) {
                None => false,
                Some(set) => {
                    enumerate_affine(e, grid, &ctas, &site.enclosing)
                        .intersection(set)
                        .next()
                        .is_some()
                }
            },
        };
        if hit && log_site_paths.insert(site.path.clone()) {
            must_log_sites.push(site.clone());
        }
    }

    let reason = if has_atomic {
        IdemReason::HasAtomic
    } else if definite_conflict {
        IdemReason::AntiDependency
    } else if has_opaque {
        IdemReason::OpaqueAlias
    } else {
        IdemReason::Clean
    };
    let idempotent = reason == IdemReason::Clean;
    if idempotent {
        must_log.clear();
        must_log_sites.clear();
    }
    IdempotencyResult { idempotent, reason, must_log, must_log_sites }
}

/// All global arrays the kernel writes (store or atomic targets), with
/// their full extents: the default undo-log contents when no minimization
/// is requested.
pub fn written_arrays(
    unit: &ProgramUnit,
    kernel: &KernelProgram,
    grid: &GridConfig,
) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for site in access_sites(kernel) {
        if site.space == MemSpace::Global
            && matches!(site.kind, AccessKind::Store | AccessKind::Atomic)
        {
            out.insert(site.array.clone(), array_len(unit, grid, &site.array));
        }
    }
    out
}

/// Arrays the kernel reads (for the unified-memory logging switch).
pub fn read_arrays(
    unit: &ProgramUnit,
    kernel: &KernelProgram,
    grid: &GridConfig,
) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for site in access_sites(kernel) {
        if site.space == MemSpace::Global && site.kind == AccessKind::Load {
            out.insert(site.array.clone(), array_len(unit, grid, &site.array));
        }
    }
    out
}
