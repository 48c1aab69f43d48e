//! Repro bundles: everything needed to replay one failing crash point with
//! a single CLI command.

use crate::lang::ast::{GridConfig, ProgramUnit};
use crate::lang::print::print_unit;
use crate::memsim::{MachineConfig, SimOutcome};
use crate::passes::Applied;
use crate::refexec::MemoryImage;
use std::fs;
use std::path::{Path, PathBuf};

pub struct Bundle {
    pub original: ProgramUnit,
    pub instrumented: ProgramUnit,
    pub grid: GridConfig,
    pub cfg: MachineConfig,
    pub input: MemoryImage,
    pub seed: u64,
    pub crash_at: u64,
    pub directive_label: String,
    pub kernel: String,
}

#[allow(clippy::too_many_arguments)]
pub fn write_bundle(
    dir: &Path,
    original: &ProgramUnit,
    applied: &Applied,
    grid: &GridConfig,
    cfg: &MachineConfig,
    input: &MemoryImage,
    seed: u64,
    crash_at: u64,
    outcome: &SimOutcome,
) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("original.gk"), print_unit(original))?;
    fs::write(dir.join("program.gk"), print_unit(&applied.unit))?;
    fs::write(dir.join("input.img"), input.to_text())?;
    fs::write(dir.join("machine.cfg"), cfg.to_text())?;
    fs::write(dir.join("trace.txt"), outcome.trace_text())?;
    let kernel = applied
        .policy
        .as_ref()
        .map(|p| p.kernel.clone())
        .unwrap_or_else(|| original.kernels.first().map(|k| k.name.clone()).unwrap_or_default());
    let meta = format!(
        "directive={}\nkernel={}\ngrid={}x{}\nwarp={}\nseed={}\ncrashAt={}\n",
        applied.directive.label(),
        kernel,
        grid.grid_dim,
        grid.cta_dim,
        grid.warp_size,
        seed,
        crash_at
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(dir.to_path_buf())
}

pub fn read_bundle(dir: &Path) -> Result<Bundle, String> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| format!("reading {name}: {e}"))
    };
    let original = crate::lang::parse_program(&read("original.gk")?)
        .map_err(|e| format!("original.gk: {e}"))?;
    let instrumented =
        crate::lang::parse_program(&read("program.gk")?).map_err(|e| format!("program.gk: {e}"))?;
    let input = MemoryImage::from_text(&read("input.img")?)?;
    let cfg = MachineConfig::from_text(&read("machine.cfg")?)?;
    let meta = read("meta.txt")?;
    let mut directive_label = String::new();
    let mut kernel = String::new();
    let mut seed = 0u64;
    let mut crash_at = 0u64;
    let mut grid_dim = 1i64;
    let mut cta_dim = 4i64;
    let mut warp = 4i64;
    for line in meta.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "directive" => directive_label = v.to_string(),
            "kernel" => kernel = v.to_string(),
            "seed" => seed = v.parse().map_err(|_| "bad seed")?,
            "crashAt" => crash_at = v.parse().map_err(|_| "bad crashAt")?,
            "warp" => warp = v.parse().map_err(|_| "bad warp")?,
            "grid" => {
                let (g, c) = v.split_once('x').ok_or("bad grid")?;
                grid_dim = g.parse().map_err(|_| "bad grid")?;
                cta_dim = c.parse().map_err(|_| "bad grid")?;
            }
            _ => {}
        }
    }
    Ok(Bundle {
        original,
        instrumented,
        grid: GridConfig::new(grid_dim, cta_dim, warp),
        cfg,
        input,
        seed,
        crash_at,
        directive_label,
        kernel,
    })
}
