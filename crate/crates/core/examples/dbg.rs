use gpupm::corpus;
use gpupm::driver::parse_directive_label;
use gpupm::memsim::{simulate, MachineConfig};
use gpupm::passes::{apply_directive, TxOptions};

fn main() {
    let e = corpus::entry("mini-lbm").unwrap();
    let unit = e.parse();
    let grid = e.default_grid();
    let input = e.input(&unit, &grid, 17);
    let mut cfg = MachineConfig::default();
    cfg.wpq_durable = false;
    let base = simulate(&unit, grid, &cfg, &input, 8, None).unwrap();
    println!("baseline cycles={} writes={}", base.stats.cycles, base.stats.nvm_line_writes);
    for label in ["SP_clwb_pct", "EP_C_clwb_pct", "SP_wt", "EP_C_wt"] {
        let d = parse_directive_label(label).unwrap();
        let a = apply_directive(&unit, "lbm", &d, &grid, &TxOptions::default()).unwrap();
        let out = simulate(&a.unit, grid, &cfg, &input, 8, None).unwrap();
        println!(
            "{label}: cycles={} writes={} clwb={} pcommit={} events={}",
            out.stats.cycles, out.stats.nvm_line_writes, out.stats.clwb_count,
            out.stats.pcommit_count, out.total_events
        );
    }
}
