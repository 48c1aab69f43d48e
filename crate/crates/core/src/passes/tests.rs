use super::*;
use crate::corpus;
use crate::lang::ast::*;
use crate::lang::parse::parse_program;
use crate::lang::print::print_unit;
use crate::refexec::{self, region::Region, Space};

fn dir(label: &str) -> PersistencyDirective {
    crate::driver::parse_directive_label(label)
        .unwrap_or_else(|| panic!("bad directive label {label}"))
}

fn apply(unit: &ProgramUnit, kernel: &str, label: &str, grid: &GridConfig) -> Applied {
    apply_directive(unit, kernel, &dir(label), grid, &TxOptions::default())
        .unwrap_or_else(|e| panic!("{label} on {kernel}: {e}"))
}

fn kinds(body: &[StmtNode]) -> Vec<&'static str> {
    body.iter()
        .map(|n| match &n.stmt {
            Stmt::Arith { .. } => "arith",
            Stmt::Mov { .. } => "mov",
            Stmt::Load { .. } => "ld",
            Stmt::Store { through: true, .. } => "st.wt",
            Stmt::Store { .. } => "st",
            Stmt::Atomic { .. } => "atom",
            Stmt::Clwb { .. } => "clwb",
            Stmt::L2wb => "l2wb",
            Stmt::Sfence => "sfence",
            Stmt::Pcommit => "pcommit",
            Stmt::Syncthreads => "sync",
            Stmt::Halt => "halt",
            Stmt::If { .. } => "if",
            Stmt::Loop { .. } => "loop",
        })
        .collect()
}

#[test]
fn idempotency_lbm_cta_clean() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let k = unit.kernel("lbm").unwrap();
    let r = analyze_idempotency(&unit, k, AnalysisScope::Cta, &grid);
    assert!(r.idempotent);
    assert_eq!(r.reason, IdemReason::Clean);
    assert!(r.must_log.is_empty());
}

#[test]
fn idempotency_histo1_has_atomic() {
    let e = corpus::entry("mini-histo").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let k = unit.kernel("histo1").unwrap();
    let r = analyze_idempotency(&unit, k, AnalysisScope::Kernel, &grid);
    assert!(!r.idempotent);
    assert_eq!(r.reason, IdemReason::HasAtomic);
    // The atomic target is opaque: the whole bins array must be logged.
    assert_eq!(r.must_log["bins"].len(), 4);
}

#[test]
fn idempotency_bfs1_anti_dependency_with_partial_log() {
    let e = corpus::entry("mini-bfs1").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let k = unit.kernel("bfs1").unwrap();
    let r = analyze_idempotency(&unit, k, AnalysisScope::Kernel, &grid);
    assert!(!r.idempotent);
    assert_eq!(r.reason, IdemReason::AntiDependency);
    let dist_len = unit.host.alloc_size("dist").unwrap().eval(&grid);
    let logged = &r.must_log["dist"];
    assert!(!logged.is_empty());
    assert!((logged.len() as i64) < dist_len, "must-log is a strict subset");
    // Exactly the frontier half.
    assert_eq!(logged.len() as i64, dist_len / 2);
    assert!(!r.must_log.contains_key("edge_w"));
}

#[test]
fn idempotency_tpacf_not_idempotent() {
    let e = corpus::entry("mini-tpacf").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let k = unit.kernel("tpacf").unwrap();
    let r = analyze_idempotency(&unit, k, AnalysisScope::Kernel, &grid);
    assert!(!r.idempotent);
    assert!(matches!(r.reason, IdemReason::AntiDependency | IdemReason::OpaqueAlias));
}

#[test]
fn idempotency_stencil_and_histo2_clean() {
    for name in ["mini-stencil", "mini-histo2"] {
        let e = corpus::entry(name).unwrap();
        let unit = e.parse();
        let grid = e.default_grid();
        let k = unit.kernel(e.kernel).unwrap();
        let r = analyze_idempotency(&unit, k, AnalysisScope::Cta, &grid);
        assert!(r.idempotent, "{name} is idempotent");
    }
}

/// Static idempotent verdicts must be confirmed by the dynamic oracle on
/// every corpus input (one-directional soundness).
#[test]
fn static_idempotence_implies_dynamic() {
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        let k = unit.kernel(e.kernel).unwrap();
        for seed in [1u64, 2, 3] {
            let input = e.input(&unit, &grid, seed);
            let kr = analyze_idempotency(&unit, k, AnalysisScope::Kernel, &grid);
            if kr.idempotent {
                let region = Region::Kernel { kernel: e.kernel.into() };
                assert!(
                    refexec::run_region_twice(&unit, &region, grid, &input).unwrap(),
                    "{}: static kernel idempotence must hold dynamically",
                    e.name
                );
            }
            let cr = analyze_idempotency(&unit, k, AnalysisScope::Cta, &grid);
            if cr.idempotent {
                for cta in 0..grid.grid_dim {
                    let region = Region::Cta { kernel: e.kernel.into(), cta };
                    assert!(
                        refexec::run_region_twice(&unit, &region, grid, &input).unwrap(),
                        "{}: static CTA idempotence must hold dynamically",
                        e.name
                    );
                }
            }
        }
    }
}

/// Dynamic overwritten live-ins are always covered by the static must-log,
/// and affine corpus kernels match exactly.
#[test]
fn must_log_covers_dynamic_live_in() {
    let affine_exact = ["mini-lbm", "mini-histo2", "mini-stencil", "mini-bfs1"];
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        let k = unit.kernel(e.kernel).unwrap();
        let stat = analyze_idempotency(&unit, k, AnalysisScope::Kernel, &grid);
        for seed in [5u64, 6] {
            let input = e.input(&unit, &grid, seed);
            let region = Region::Kernel { kernel: e.kernel.into() };
            let dyn_rec = refexec::record_rw_sets(&unit, &region, grid, &input).unwrap();
            let dyn_global: Vec<(&String, i64)> = dyn_rec
                .overwritten_live_in
                .iter()
                .filter_map(|(s, a, i)| (*s == Space::Global).then_some((a, *i)))
                .collect();
            for (array, idx) in &dyn_global {
                assert!(
                    stat.must_log.get(*array).is_some_and(|set| set.contains(idx)),
                    "{}: dynamic live-in {array}[{idx}] must be in must_log",
                    e.name
                );
            }
            if affine_exact.contains(&e.name) {
                let stat_words: usize = stat.must_log.values().map(|s| s.len()).sum();
                assert_eq!(
                    stat_words,
                    dyn_global.len(),
                    "{}: affine kernels get exact must-log",
                    e.name
                );
            }
        }
    }
}

#[test]
fn strict_leaves_storeless_kernel_unchanged() {
    let unit =
        parse_program("kernel k(global a) {\n    x = ld a[tid]\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=8\n}\n")
            .unwrap();
    let k = unit.kernel("k").unwrap();
    let out = transform_strict(k, &dir("SP_clwb_pct"));
    assert_eq!(out.body, k.body);
}

#[test]
fn strict_clwb_follows_every_store() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "lbm", "SP_clwb_pct", &grid);
    let body = &a.unit.kernel("lbm").unwrap().body;
    let tail = &kinds(body)[5..];
    assert_eq!(
        tail,
        ["st", "clwb", "sfence", "pcommit", "sfence", "st", "clwb", "sfence", "pcommit", "sfence"],
        "per-store persist sequence"
    );
    // Durable WPQs drop the pcommit pair.
    let a2 = apply(&unit, "lbm", "SP_clwb", &grid);
    let tail2 = &kinds(&a2.unit.kernel("lbm").unwrap().body)[5..];
    assert_eq!(tail2, ["st", "clwb", "sfence", "st", "clwb", "sfence"]);
}

#[test]
fn strict_wt_rewrites_stores_without_clwb() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "lbm", "SP_wt", &grid);
    let k = a.unit.kernel("lbm").unwrap();
    assert_eq!(k.count_stmts(|s| matches!(s, Stmt::Store { through: true, .. })), 2);
    assert_eq!(k.count_stmts(|s| matches!(s, Stmt::Store { through: false, .. })), 0);
    assert_eq!(k.count_stmts(|s| matches!(s, Stmt::Clwb { .. })), 0);
}

#[test]
fn epoch_cta_clwb_matches_compiler_algorithm() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "lbm", "EP_C_clwb_pct", &grid);
    let body = &a.unit.kernel("lbm").unwrap().body;
    let ks = kinds(body);
    // Exit block: one clwb per distinct store slice, one trailing sfence,
    // then the pcommit pair for volatile WPQs.
    assert_eq!(&ks[7..], ["clwb", "clwb", "sfence", "pcommit", "sfence"]);
    assert_eq!(ks.iter().filter(|k| **k == "clwb").count(), 2);
}

#[test]
fn epoch_cta_clwb_on_computed_overwritten_address_fails() {
    let unit = parse_program(
        "kernel k(global idx, global out) {\n    a = ld idx[tid]\n    st idx[tid], 0\n    st out[a], 1\n}\n\nhost {\n    alloc idx, ctadim\n    alloc out, 64\n    launch k, grid=1, cta=8\n}\n",
    )
    .unwrap();
    let err = apply_directive(
        &unit,
        "k",
        &dir("EP_C_clwb"),
        &GridConfig::new(1, 8, 4),
        &TxOptions::default(),
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("wt or l2wb"), "diagnostic recommends fallback: {msg}");
}

#[test]
fn epoch_cta_equals_strict_for_trailing_store() {
    let e = corpus::entry("mini-stencil").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let ep = apply(&unit, "stencil", "EP_C_clwb_pct", &grid);
    let sp = apply(&unit, "stencil", "SP_clwb_pct", &grid);
    assert_eq!(
        ep.unit.kernel("stencil").unwrap().body,
        sp.unit.kernel("stencil").unwrap().body,
        "one trailing store: CTA-level epoch degenerates to strict"
    );
}

#[test]
fn epoch_kernel_inserts_sync_l2wb_sync() {
    let e = corpus::entry("mini-histo").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "histo1", "EP_K", &grid);
    let steps: Vec<&HostStep> = a.unit.host.steps.iter().map(|s| &s.step).collect();
    let launch =
        steps.iter().position(|s| matches!(s, HostStep::LaunchKernel { .. })).unwrap();
    assert!(matches!(steps[launch + 1], HostStep::DeviceSync));
    assert!(matches!(steps[launch + 2], HostStep::L2wbApi));
    assert!(matches!(steps[launch + 3], HostStep::DeviceSync));
}

#[test]
fn epoch_kernel_two_launches_get_barriers() {
    let unit = parse_program(
        "kernel k(global a) {\n    st a[tid], 1\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=4\n    launch k, grid=1, cta=4\n}\n",
    )
    .unwrap();
    let host = transform_epoch_kernel(&unit.host, Some("k"));
    let ks: Vec<&HostStep> = host.steps.iter().map(|s| &s.step).collect();
    assert_eq!(ks.iter().filter(|s| matches!(s, HostStep::L2wbApi)).count(), 2);
    let first = ks.iter().position(|s| matches!(s, HostStep::LaunchKernel { .. })).unwrap();
    let second = ks
        .iter()
        .enumerate()
        .skip(first + 1)
        .find(|(_, s)| matches!(s, HostStep::LaunchKernel { .. }))
        .map(|(i, _)| i)
        .unwrap();
    assert!(ks[first + 1..second].iter().any(|s| matches!(s, HostStep::DeviceSync)));
}

#[test]
fn epoch_kernel_no_launches_unchanged() {
    let host = HostScript {
        steps: vec![HostStep::Alloc { array: "a".into(), size: GridScalar::constant(4) }.into()],
    };
    assert_eq!(transform_epoch_kernel(&host, None), host);
}

#[test]
fn epoch_loop_tpacf_builds_shadow_and_tail() {
    let e = corpus::entry("mini-tpacf").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "tpacf", "EP_L_l2wb_pct", &grid);
    assert_eq!(a.unit.aux_arrays.get("shadow_sh"), Some(&AuxKind::Shadow));
    let k = a.unit.kernel("tpacf").unwrap();
    let anchored = k
        .body
        .iter()
        .find_map(|n| match &n.stmt {
            Stmt::Loop { pragma: Some(_), body, .. } => Some(body),
            _ => None,
        })
        .expect("anchored loop kept its pragma");
    // The inner-loop shared store gains exactly one shadow mirror.
    fn count_stores(body: &[StmtNode], array: &str, n: &mut usize) {
        for node in body {
            match &node.stmt {
                Stmt::Store { array: a, .. } if a == array => *n += 1,
                Stmt::If { then_body, else_body, .. } => {
                    count_stores(then_body, array, n);
                    count_stores(else_body, array, n);
                }
                Stmt::Loop { body, .. } => count_stores(body, array, n),
                _ => {}
            }
        }
    }
    let mut mirrors = 0;
    count_stores(anchored, "shadow_sh", &mut mirrors);
    assert_eq!(mirrors, 1);
    // Iteration tail: guarded l2wb, then sfence; pcommit; sfence.
    let tail = kinds(anchored);
    assert_eq!(&tail[tail.len() - 4..], ["if", "sfence", "pcommit", "sfence"]);
    match &anchored[anchored.len() - 4].stmt {
        Stmt::If { then_body, .. } => assert_eq!(kinds(then_body), ["l2wb"]),
        other => panic!("expected guarded l2wb, got {other:?}"),
    }
}

#[test]
fn epoch_loop_without_shared_has_no_shadow() {
    let unit = parse_program(
        "kernel k(global out) {\n    loop i = 0 to 4 step 1 {\n        st out[i*ctadim + tid], i\n    }\n}\n\nhost {\n    alloc out, 4*ctadim\n    launch k, grid=1, cta=8\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 8, 4);
    let a = apply(&unit, "k", "EP_L_wt", &grid);
    assert!(a.unit.aux_arrays.is_empty(), "no shadow for a loop without shared memory");
    let k = a.unit.kernel("k").unwrap();
    assert_eq!(k.count_stmts(|s| matches!(s, Stmt::Store { through: true, .. })), 1);
    // One fence at the iteration tail.
    let body = match &k.body[0].stmt {
        Stmt::Loop { body, .. } => body,
        _ => panic!(),
    };
    assert_eq!(kinds(body), ["st.wt", "sfence"]);
}

#[test]
fn tx_cta_log_path_matches_figure_shape() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    // Without the idem option the transaction always logs.
    let a = apply(&unit, "lbm", "Undo_C_clwb_pct", &grid);
    let k = a.unit.kernel("lbm").unwrap();
    assert_eq!(
        kinds(&k.body),
        [
            "ld", "ld", // input loads
            "ld", "st.wt", "ld", "st.wt", // two log entries
            "arith", "arith", "arith", // compute overlaps the log persist
            "sfence", "pcommit", "sfence", // log fence pair
            "sync", // logs are durable
            "if",   // thread 0 raises InTx
            "st", "st", // outputs
            "clwb", "clwb", // output persist
            "sfence", "pcommit", "sfence", // output fence pair
            "sync", // CTA is done
            "if"    // thread 0 completes
        ],
    );
    assert_eq!(a.log_words, 2 * grid.total_threads());
    let policy = a.policy.unwrap();
    assert!(policy.uses_undo_log && !policy.idempotent_reexec);
}

#[test]
fn tx_cta_idem_path_has_no_log_and_races_flag() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "lbm", "Undo_C_clwb_pct_idem", &grid);
    let k = a.unit.kernel("lbm").unwrap();
    assert_eq!(
        kinds(&k.body),
        [
            "ld", "ld", // input loads
            "st.wt", "sfence", "pcommit", "sfence", // every thread raises InTx
            "arith", "arith", "arith", // compute
            "st", "st", "clwb", "clwb", // outputs and their persist
            "sfence", "pcommit", "sfence", // output fence pair
            "sync", "if" // thread 0 completes
        ],
    );
    assert_eq!(a.log_words, 0);
    assert!(!a.unit.aux_arrays.contains_key("undo_log"));
    let policy = a.policy.unwrap();
    assert!(policy.idempotent_reexec && !policy.uses_undo_log);
}

#[test]
fn tx_kernel_idempotent_drops_memcpy() {
    let e = corpus::entry("mini-histo2").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "histo2", "Undo_K_idem", &grid);
    let steps: Vec<&HostStep> = a.unit.host.steps.iter().map(|s| &s.step).collect();
    assert!(
        !steps.iter().any(|s| matches!(s, HostStep::MemcpyD2D { .. })),
        "idempotent kernel needs no undo copy"
    );
    let flags =
        steps.iter().filter(|s| matches!(s, HostStep::SetPersistentFlag { .. })).count();
    assert_eq!(flags, 2);
    assert_eq!(a.log_words, 0);

    // The non-idem variant logs the whole output.
    let b = apply(&unit, "histo2", "Undo_K", &grid);
    assert!(b.unit.host.steps.iter().any(|s| matches!(&s.step, HostStep::MemcpyD2D { .. })));
    assert_eq!(b.log_words, grid.cta_dim);
}

#[test]
fn tx_kernel_bfs1_reduced_log_is_prefix_of_dist() {
    let e = corpus::entry("mini-bfs1").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let full = apply(&unit, "bfs1", "Undo_K", &grid);
    let reduced = apply(&unit, "bfs1", "Undo_K_idem", &grid);
    assert!(reduced.log_words > 0);
    assert!(
        reduced.log_words < full.log_words,
        "idempotency analysis shrinks the log ({} < {})",
        reduced.log_words,
        full.log_words
    );
    assert_eq!(reduced.log_words, grid.total_threads(), "exactly the frontier half");
}

#[test]
fn tx_cta_with_atomics_promotes_to_kernel_scope() {
    let e = corpus::entry("mini-histo").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "histo1", "Undo_C_wt", &grid);
    assert!(a.notes.iter().any(|n| n.contains("promoted to kernel scope")), "{:?}", a.notes);
    assert_eq!(a.policy.unwrap().scope, EpochScope::Kernel);
}

#[test]
fn tx_loop_tpacf_matches_figure_shape() {
    let e = corpus::entry("mini-tpacf").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let a = apply(&unit, "tpacf", "Undo_L_l2wb_pct", &grid);
    let policy = a.policy.clone().unwrap();
    let li = policy.loop_info.unwrap();
    let k = a.unit.kernel("tpacf").unwrap();
    let body = match &k.body[li.body_index].stmt {
        Stmt::Loop { body, .. } => body,
        other => panic!("expected the transactional loop, got {other:?}"),
    };
    let ks = kinds(body);
    // Prologue: shadow->log copy loop, last-iteration meta copy, fence
    // pair, barrier, guarded InTx, fence pair.
    assert_eq!(
        &ks[..10],
        ["loop", "ld", "st.wt", "sfence", "pcommit", "sfence", "sync", "if", "sfence", "pcommit"]
    );
    // Tail: guarded l2wb, last_iter write-through, fence pair, barrier,
    // guarded Complete, fence pair.
    let n = ks.len();
    assert_eq!(
        &ks[n - 10..],
        ["if", "st.wt", "sfence", "pcommit", "sfence", "sync", "if", "sfence", "pcommit", "sfence"]
    );
    assert!(policy.uses_undo_log);
    assert_eq!(li.lo, 0);
    assert_eq!(li.step, grid.cta_dim);
    assert_eq!(li.sentinel, -grid.cta_dim);
    assert!(a.log_words > 0);
}

#[test]
fn corpus_transforms_round_trip_through_printer() {
    let labels = [
        "SP_wt",
        "SP_clwb_pct",
        "EP_C_wt",
        "EP_C_clwb_pct",
        "EP_K",
        "Undo_K",
        "Undo_C_wt",
        "Undo_C_clwb_pct_idem",
        "Undo_L_l2wb_pct",
        "EP_L_wt",
    ];
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        for label in labels {
            let applied = match apply_directive(
                &unit,
                e.kernel,
                &dir(label),
                &grid,
                &TxOptions::default(),
            ) {
                Ok(a) => a,
                Err(_) => continue,
            };
            let printed = print_unit(&applied.unit);
            let reparsed = parse_program(&printed).unwrap_or_else(|err| {
                panic!("{label} on {}: reparse failed: {err}\n{printed}", e.name)
            });
            assert_eq!(applied.unit, reparsed, "{label} on {}\n{printed}", e.name);
        }
    }
}

/// The heart of the compiler contract: for every corpus kernel, every
/// applicable directive and several inputs, a failure-free run of the
/// instrumented program leaves the data arrays exactly as the
/// uninstrumented oracle does.
#[test]
fn instrumented_programs_preserve_semantics() {
    let labels = [
        "SP_wt",
        "SP_clwb",
        "SP_clwb_pct",
        "EP_K",
        "EP_C_wt",
        "EP_C_clwb",
        "EP_C_clwb_pct",
        "EP_C_l2wb",
        "EP_L_wt",
        "EP_L_l2wb_pct",
        "Undo_K",
        "Undo_K_idem",
        "Undo_C_wt",
        "Undo_C_clwb_pct",
        "Undo_C_wt_idem",
        "Undo_L_l2wb_pct",
        "Undo_L_wt",
    ];
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        let data = unit.data_arrays();
        for label in labels {
            let applied = match apply_directive(
                &unit,
                e.kernel,
                &dir(label),
                &grid,
                &TxOptions::default(),
            ) {
                Ok(a) => a,
                Err(_) => continue,
            };
            for seed in [41u64, 42] {
                let input = e.input(&unit, &grid, seed);
                let oracle = refexec::run_reference(&unit, grid, &input).unwrap();
                let got = refexec::run_reference(&applied.unit, grid, &input)
                    .unwrap_or_else(|f| panic!("{label} on {}: fault {f}", e.name));
                if let Some((a, i, x, y)) = got.diff_on(&oracle, data.iter().map(String::as_str))
                {
                    panic!("{label} on {}: {a}[{i}] = {x:?}, oracle has {y:?}", e.name);
                }
            }
        }
    }
}

/// Transaction-ordering shape on the instrumented straight-line body: log
/// persists precede the InTx write, which precedes every output store, and
/// output persists precede Complete.
#[test]
fn tx_ordering_shape_holds() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    for label in ["Undo_C_wt", "Undo_C_clwb_pct", "Undo_C_wt_idem"] {
        let a = apply(&unit, "lbm", label, &grid);
        let body = &a.unit.kernel("lbm").unwrap().body;
        let mut last_log_write = None;
        let mut log_fence = None;
        let mut intx_at = None;
        let mut first_output_store = None;
        let mut last_output_persist = None;
        let mut complete_at = None;
        for (i, node) in body.iter().enumerate() {
            match &node.stmt {
                Stmt::Store { array, .. } if array == "undo_log" => last_log_write = Some(i),
                Stmt::Store { array, value: Operand::Imm(v), .. } if array == "txflag" => {
                    if *v == FlagState::InTx.as_word() {
                        intx_at = Some(i);
                    }
                }
                Stmt::If { then_body, .. } => {
                    for n2 in then_body {
                        if let Stmt::Store { array, value: Operand::Imm(v), .. } = &n2.stmt {
                            if array == "txflag" {
                                if *v == FlagState::InTx.as_word() {
                                    intx_at = Some(i);
                                } else if *v == FlagState::Complete.as_word() {
                                    complete_at = Some(i);
                                }
                            }
                        }
                    }
                }
                Stmt::Store { array, through, .. } if array == "cells_out" => {
                    if first_output_store.is_none() {
                        first_output_store = Some(i);
                    }
                    if *through {
                        last_output_persist = Some(i);
                    }
                }
                Stmt::Clwb { .. } => last_output_persist = Some(i),
                Stmt::Sfence if intx_at.is_none() => log_fence = Some(i),
                _ => {}
            }
        }
        let intx = intx_at.expect("InTx write present");
        let complete = complete_at.expect("Complete write present");
        let first_store = first_output_store.expect("output stores present");
        assert!(intx < first_store, "{label}: InTx precedes every output store");
        if a.policy.as_ref().unwrap().uses_undo_log {
            let lw = last_log_write.expect("log writes present");
            let lf = log_fence.expect("log fence present");
            assert!(lw < lf && lf < intx, "{label}: log persisted before InTx");
        }
        let persist = last_output_persist.expect("output persist present");
        assert!(persist < complete, "{label}: outputs persist before Complete");
    }
}

#[test]
fn classify_thresholds() {
    let p = KernelProfile { kernel_cycles: 0, mean_cta_cycles: 0, ctas: 0 };
    assert_eq!(classify_kernel(&p, 100), KernelClass::S);
    let p = KernelProfile { kernel_cycles: 50, mean_cta_cycles: 50, ctas: 1 };
    assert_eq!(classify_kernel(&p, 100), KernelClass::S);
    let p = KernelProfile { kernel_cycles: 300, mean_cta_cycles: 80, ctas: 4 };
    assert_eq!(classify_kernel(&p, 100), KernelClass::LS);
    let p = KernelProfile { kernel_cycles: 300, mean_cta_cycles: 200, ctas: 1 };
    assert_eq!(classify_kernel(&p, 100), KernelClass::LL);
}

#[test]
fn trailing_store_detection() {
    let lbm = corpus::entry("mini-lbm").unwrap().parse();
    assert!(stores_are_trailing(lbm.kernel("lbm").unwrap()));
    let bfs2 = corpus::entry("mini-bfs2").unwrap().parse();
    assert!(stores_are_trailing(bfs2.kernel("bfs2").unwrap()));
}
