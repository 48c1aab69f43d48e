use super::*;
use crate::corpus;
use crate::driver::parse_directive_label;
use crate::passes::{apply_directive, ProtocolBug, TxOptions};

fn applied_for(
    name: &str,
    label: &str,
    opts: &TxOptions,
) -> (ProgramUnit, Applied, GridConfig, MemoryImage) {
    let e = corpus::entry(name).unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let input = e.input(&unit, &grid, 77);
    let applied =
        apply_directive(&unit, e.kernel, &parse_directive_label(label).unwrap(), &grid, opts)
            .unwrap_or_else(|err| panic!("{label} on {name}: {err}"));
    (unit, applied, grid, input)
}

fn sweep(
    name: &str,
    label: &str,
    opts: &TxOptions,
) -> (SweepSummary, ProgramUnit, Applied, GridConfig, MemoryImage) {
    let (unit, applied, grid, input) = applied_for(name, label, opts);
    let cfg = MachineConfig::default();
    let summary = sweep_crash_points(
        &unit,
        &applied,
        &grid,
        &cfg,
        &input,
        &SweepOptions { sampling: Sampling::Exhaustive, seed: 5, bundle_dir: None },
    )
    .unwrap();
    (summary, unit, applied, grid, input)
}

#[test]
fn crash_at_end_all_flags_complete_no_actions() {
    let (_, applied, grid, input) = applied_for("mini-lbm", "Undo_C_wt", &TxOptions::default());
    let cfg = MachineConfig::default();
    let outcome = memsim::simulate(&applied.unit, grid, &cfg, &input, 3, None).unwrap();
    let policy = applied.policy.as_ref().unwrap();
    let (recovered, marks, actions) =
        recover(&outcome.persistent_image, policy, &grid).unwrap();
    // The loop tail of a CTA transaction leaves every flag Complete, so
    // recovery does nothing but the per-CTA resume checks.
    assert!(marks.is_empty(), "all flags Complete: nothing to re-execute, got {actions:?}");
    assert_eq!(recovered, outcome.persistent_image);
}

#[test]
fn resume_with_no_marks_is_identity() {
    let (_, applied, grid, input) = applied_for("mini-lbm", "Undo_C_wt", &TxOptions::default());
    let policy = applied.policy.as_ref().unwrap();
    let mut base = input.clone();
    refexec::ensure_allocs(&applied.unit, &grid, &mut base);
    let out = resume(&base, &[], &applied.unit, policy, &grid).unwrap();
    assert_eq!(out, base);
}

#[test]
fn recovery_is_idempotent_for_undo_policies() {
    let (_, applied, grid, input) = applied_for("mini-lbm", "Undo_C_wt", &TxOptions::default());
    let cfg = MachineConfig::default();
    let outcome = memsim::simulate(&applied.unit, grid, &cfg, &input, 9, None).unwrap();
    let policy = applied.policy.as_ref().unwrap();
    let map = memsim::AddrMap::build(&applied.unit, &grid, &cfg);
    // A crash point in the middle of the run, then recovery re-entered.
    let mid = outcome.trace[outcome.trace.len() / 2].event;
    let persistent =
        memsim::replay_prefix(&map, &input, &applied.unit.flag_arrays, &outcome.trace, mid);
    let (once, _, _) = recover(&persistent, policy, &grid).unwrap();
    let (twice, _, _) = recover(&once, policy, &grid).unwrap();
    assert_eq!(once, twice, "recover must be idempotent (crash during recovery)");
}

#[test]
fn exhaustive_sweep_lbm_undo_c_wt_passes() {
    let (summary, ..) = sweep("mini-lbm", "Undo_C_wt", &TxOptions::default());
    assert_eq!(summary.mode, SweepMode::Recovery);
    assert!(summary.points_tested > 50, "expected many crash points");
    assert_eq!(
        summary.failures,
        0,
        "first failure: {:?}",
        summary.first_failure.map(|f| (f.crash_at, f.mismatch))
    );
    assert!(summary.ordering.ok());
    assert!((summary.pass_rate - 1.0).abs() < 1e-12);
}

#[test]
fn exhaustive_sweep_lbm_undo_c_wt_idem_passes() {
    let (summary, ..) = sweep("mini-lbm", "Undo_C_wt_idem", &TxOptions::default());
    assert_eq!(summary.failures, 0, "{:?}", summary.first_failure.map(|f| f.mismatch));
}

#[test]
fn exhaustive_sweep_histo1_undo_k_passes() {
    let (summary, ..) = sweep("mini-histo", "Undo_K", &TxOptions::default());
    assert_eq!(summary.failures, 0, "{:?}", summary.first_failure.map(|f| f.mismatch));
}

#[test]
fn exhaustive_sweep_bfs1_undo_k_reduced_log_passes() {
    let (summary, _, applied, ..) = sweep("mini-bfs1", "Undo_K_idem", &TxOptions::default());
    assert!(applied.log_words > 0, "bfs1 still needs a (reduced) log");
    assert_eq!(summary.failures, 0, "{:?}", summary.first_failure.map(|f| f.mismatch));
}

#[test]
fn exhaustive_sweep_tpacf_undo_l_passes() {
    let (summary, ..) = sweep("mini-tpacf", "Undo_L_l2wb_pct", &TxOptions::default());
    assert_eq!(
        summary.failures,
        0,
        "first failure: {:?}",
        summary.first_failure.map(|f| (f.crash_at, f.mismatch))
    );
    assert!(summary.ordering.ok(), "{:?}", summary.ordering.violations);
}

#[test]
fn sweep_without_tx_runs_ordering_mode() {
    let (summary, ..) = sweep("mini-lbm", "EP_C_clwb", &TxOptions::default());
    assert_eq!(summary.mode, SweepMode::OrderingOnly);
    assert!(summary.note.as_deref().unwrap_or("").contains("not guaranteed"));
    assert!(summary.ordering.ok());
}

#[test]
fn canary_flag_before_log_detected() {
    let opts = TxOptions { bug: Some(ProtocolBug::FlagBeforeLog), ..Default::default() };
    let (summary, ..) = sweep("mini-bfs1", "Undo_K", &opts);
    assert!(
        summary.failures > 0,
        "a flag raised before the log persists must fail some crash point"
    );
}

#[test]
fn canary_missing_output_persist_detected() {
    let opts = TxOptions { bug: Some(ProtocolBug::MissingOutputPersist), ..Default::default() };
    let (summary, ..) = sweep("mini-lbm", "Undo_C_clwb", &opts);
    assert!(summary.failures > 0, "unpersisted outputs must fail at least one crash point");
}

#[test]
fn canary_missing_pcommit_detected() {
    let opts = TxOptions { bug: Some(ProtocolBug::MissingPcommit), ..Default::default() };
    let (summary, ..) = sweep("mini-lbm", "Undo_C_clwb_pct", &opts);
    assert!(
        summary.failures > 0,
        "volatile WPQs without pcommit must fail at least one crash point"
    );
}

#[test]
fn canary_unpersisted_log_detected() {
    let opts = TxOptions { bug: Some(ProtocolBug::UnpersistedLog), ..Default::default() };
    let (summary, ..) = sweep("mini-bfs1", "Undo_C_wt", &opts);
    assert!(summary.failures > 0, "a volatile undo log must fail at least one crash point");
}

#[test]
fn canaries_pass_without_bugs() {
    // The same kernels and directives recover everywhere when the protocol
    // is intact, so the canary failures above implicate the injected bugs.
    for (name, label) in [
        ("mini-bfs1", "Undo_K"),
        ("mini-lbm", "Undo_C_clwb"),
        ("mini-lbm", "Undo_C_clwb_pct"),
        ("mini-bfs1", "Undo_C_wt"),
    ] {
        let (summary, ..) = sweep(name, label, &TxOptions::default());
        assert_eq!(
            summary.failures,
            0,
            "{label} on {name}: {:?}",
            summary.first_failure.map(|f| (f.crash_at, f.mismatch))
        );
    }
}

#[test]
fn ordering_checks_hold_across_seeds() {
    for seed in 0..4u64 {
        for (name, label) in
            [("mini-lbm", "SP_wt"), ("mini-lbm", "SP_clwb_pct"), ("mini-tpacf", "EP_L_l2wb_pct")]
        {
            let (unit, applied, grid, input) = applied_for(name, label, &TxOptions::default());
            let _ = unit;
            let mut cfg = MachineConfig::default();
            cfg.wpq_durable = applied.directive.durable_wpq;
            let outcome =
                memsim::simulate(&applied.unit, grid, &cfg, &input, seed, None).unwrap();
            let report = ordering::check_ordering(&outcome, &applied.directive);
            assert!(report.ok(), "{label} on {name} seed {seed}: {:?}", report.violations);
        }
    }
}

#[test]
fn bundle_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (unit, applied, grid, input) = applied_for("mini-lbm", "Undo_C_wt", &TxOptions::default());
    let cfg = MachineConfig::default();
    let outcome = memsim::simulate(&applied.unit, grid, &cfg, &input, 5, None).unwrap();
    bundle::write_bundle(dir.path(), &unit, &applied, &grid, &cfg, &input, 5, 42, &outcome)
        .unwrap();
    let b = bundle::read_bundle(dir.path()).unwrap();
    assert_eq!(b.original, unit);
    assert_eq!(b.instrumented, applied.unit);
    assert_eq!(b.crash_at, 42);
    assert_eq!(b.seed, 5);
    assert_eq!(b.directive_label, applied.directive.label());
    assert_eq!(b.grid, grid);
    assert_eq!(b.input, input);
}
