use super::*;
use crate::corpus;
use crate::lang::ast::*;
use crate::lang::parse::parse_program;
use region::{record_rw_sets, run_region_twice, Region};

fn img_of(pairs: &[(&str, Vec<i64>)]) -> MemoryImage {
    let mut img = MemoryImage::new();
    for (n, v) in pairs {
        img.set_array(n, v.clone());
    }
    img
}

#[test]
fn no_store_kernel_is_identity() {
    let unit = parse_program(
        "kernel k(global a) {\n    x = ld a[tid]\n    y = add x, 1\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=8\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 8, 4);
    let input = img_of(&[("a", (0..8).collect())]);
    let out = run_reference(&unit, grid, &input).unwrap();
    assert_eq!(out.arrays["a"], input.arrays["a"]);
}

#[test]
fn mini_histo_matches_scalar_histogram() {
    let e = corpus::entry("mini-histo").unwrap();
    let unit = e.parse();
    let grid = GridConfig::new(1, 8, 4);
    let input = e.input(&unit, &grid, 7);
    let out = run_reference(&unit, grid, &input).unwrap();
    // Independent oracle: direct scalar loop over the 8 samples.
    let mut bins = [0i64; 4];
    for &s in &input.arrays["samples"] {
        bins[(s.rem_euclid(4)) as usize] += 1;
    }
    assert_eq!(out.arrays["bins"], bins.to_vec());
    assert_eq!(bins.iter().sum::<i64>(), 8);
}

#[test]
fn mini_lbm_matches_scalar_evaluation() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = GridConfig::new(2, 8, 4);
    let input = e.input(&unit, &grid, 11);
    let out = run_reference(&unit, grid, &input).unwrap();
    let n = (grid.total_threads()) as usize;
    let cin = &input.arrays["cells_in"];
    for g in 0..n {
        let (lo, hi) = (cin[g], cin[n + g]);
        assert_eq!(out.arrays["cells_out"][g], lo * 3 + hi, "low half at {g}");
        assert_eq!(out.arrays["cells_out"][n + g], hi - lo, "high half at {g}");
    }
}

#[test]
fn out_of_bounds_reports_thread_coordinates() {
    let unit = parse_program(
        "kernel k(global a) {\n    st a[tid + 100], 1\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=8\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 8, 4);
    let err = run_reference(&unit, grid, &MemoryImage::new()).unwrap_err();
    match err {
        crate::exec::ExecFault::OutOfBounds { array, index, cta, tid } => {
            assert_eq!(array, "a");
            assert_eq!(index, 100);
            assert_eq!((cta, tid), (0, 0));
        }
        other => panic!("expected out-of-bounds, got {other}"),
    }
}

#[test]
fn divergent_barrier_faults() {
    let unit = parse_program(
        "kernel k(global a) {\n    if tid == 0 {\n        syncthreads\n    }\n    st a[tid], 1\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=8\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 8, 4);
    let err = run_reference(&unit, grid, &MemoryImage::new()).unwrap_err();
    assert!(matches!(err, crate::exec::ExecFault::BarrierDivergence { .. }));
}

#[test]
fn reference_is_deterministic() {
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        let input = e.input(&unit, &grid, 23);
        let a = run_reference(&unit, grid, &input).unwrap();
        let b = run_reference(&unit, grid, &input).unwrap();
        assert_eq!(a, b, "{} must be deterministic", e.name);
    }
}

#[test]
fn read_only_region_is_idempotent() {
    let unit = parse_program(
        "kernel k(global a) {\n    x = ld a[tid]\n}\n\nhost {\n    alloc a, ctadim\n    launch k, grid=1, cta=8\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 8, 4);
    let img = img_of(&[("a", (0..8).collect())]);
    let r = Region::Cta { kernel: "k".into(), cta: 0 };
    assert!(run_region_twice(&unit, &r, grid, &img).unwrap());
}

#[test]
fn lbm_cta_is_idempotent() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let input = e.input(&unit, &grid, 3);
    for cta in 0..grid.grid_dim {
        let r = Region::Cta { kernel: "lbm".into(), cta };
        assert!(run_region_twice(&unit, &r, grid, &input).unwrap());
    }
}

#[test]
fn tpacf_loop_iteration_is_not_idempotent() {
    let e = corpus::entry("mini-tpacf").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let input = e.input(&unit, &grid, 5);
    // The pragma-anchored loop is the second top-level statement after the
    // init loop and barrier.
    let k = unit.kernel("tpacf").unwrap();
    let body_index = k
        .body
        .iter()
        .position(|n| matches!(&n.stmt, Stmt::Loop { pragma: Some(_), .. }))
        .expect("anchored loop");
    let r = Region::LoopIter { kernel: "tpacf".into(), body_index, cta: 0, iter_value: 0 };
    assert!(!run_region_twice(&unit, &r, grid, &input).unwrap());
}

#[test]
fn atomic_region_reported_non_idempotent_without_execution() {
    let e = corpus::entry("mini-histo").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let r = Region::Kernel { kernel: "histo1".into() };
    // Even on an empty image: atomics short-circuit before execution.
    assert!(!run_region_twice(&unit, &r, grid, &MemoryImage::new()).unwrap());
}

#[test]
fn store_only_region_has_empty_live_in() {
    let unit = parse_program(
        "kernel k(global out) {\n    st out[tid], 9\n}\n\nhost {\n    alloc out, ctadim\n    launch k, grid=1, cta=4\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 4, 4);
    let r = Region::Kernel { kernel: "k".into() };
    let rec = record_rw_sets(&unit, &r, grid, &MemoryImage::new()).unwrap();
    assert_eq!(rec.write_set.len(), 4);
    assert!(rec.overwritten_live_in.is_empty());
}

#[test]
fn increment_region_live_in_is_the_incremented_cells() {
    let unit = parse_program(
        "kernel k(global x) {\n    v = ld x[tid]\n    w = add v, 1\n    st x[tid], w\n}\n\nhost {\n    alloc x, ctadim\n    launch k, grid=1, cta=4\n    sync\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 4, 4);
    let r = Region::Kernel { kernel: "k".into() };
    let rec = record_rw_sets(&unit, &r, grid, &MemoryImage::new()).unwrap();
    let want: std::collections::BTreeSet<Loc> =
        (0..4).map(|i| (Space::Global, "x".to_string(), i)).collect();
    assert_eq!(rec.overwritten_live_in, want);
}

#[test]
fn bfs1_live_in_is_strictly_smaller_than_input_extent() {
    let e = corpus::entry("mini-bfs1").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let input = e.input(&unit, &grid, 9);
    let r = Region::Kernel { kernel: "bfs1".into() };
    let rec = record_rw_sets(&unit, &r, grid, &input).unwrap();
    let dist_live_in: Vec<&Loc> = rec
        .overwritten_live_in
        .iter()
        .filter(|(s, a, _)| *s == Space::Global && a == "dist")
        .collect();
    let dist_len = input.arrays["dist"].len();
    assert!(!dist_live_in.is_empty());
    assert!(dist_live_in.len() < dist_len, "live-in must be a strict subset of dist");
    // Exactly the frontier half is overwritten.
    assert_eq!(dist_live_in.len(), dist_len / 2);
}

#[test]
fn live_in_locations_are_read_before_first_write() {
    for e in corpus::CORPUS {
        let unit = e.parse();
        let grid = e.default_grid();
        let input = e.input(&unit, &grid, 31);
        let r = Region::Kernel { kernel: e.kernel.to_string() };
        let rec = record_rw_sets(&unit, &r, grid, &input).unwrap();
        for loc in &rec.overwritten_live_in {
            let first_read = rec.events.iter().position(|(ev, l)| *ev == AccessEvent::Read && l == loc);
            let first_write =
                rec.events.iter().position(|(ev, l)| *ev == AccessEvent::Write && l == loc);
            match (first_read, first_write) {
                (Some(r), Some(w)) => {
                    assert!(r < w, "{}: {loc:?} must be read before first write", e.name)
                }
                _ => panic!("{}: live-in {loc:?} missing read or write", e.name),
            }
        }
    }
}

#[test]
fn image_text_round_trips() {
    let mut img = img_of(&[("a", vec![1, -2, 3]), ("flagv", vec![0, 1, 2])]);
    img.flag_region.insert("flagv".into());
    let text = img.to_text();
    assert!(text.contains("!flagv,1,InTx"));
    let back = MemoryImage::from_text(&text).unwrap();
    assert_eq!(img, back);
}

#[test]
fn memcpy_copies_prefix() {
    let unit = parse_program(
        "host {\n    alloc a, 4\n    alloc b, 4\n    memcpy b, a, 2\n}\n",
    )
    .unwrap();
    let grid = GridConfig::new(1, 4, 4);
    let input = img_of(&[("a", vec![5, 6, 7, 8]), ("b", vec![0, 0, 0, 9])]);
    let out = run_reference(&unit, grid, &input).unwrap();
    assert_eq!(out.arrays["b"], vec![5, 6, 0, 9]);
}
