//! The bundled mini-kernel corpus and its seeded input generators.
//!
//! Sources live under `corpus/` in the repository root and are embedded
//! here so tests and the experiment driver agree on inputs byte for byte.

use crate::lang::ast::{GridConfig, ProgramUnit};
use crate::lang::parse::{parse_program, validate_unit};
use crate::refexec::MemoryImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gen {
    /// Uniform words in `[lo, hi)`.
    Random { lo: i64, hi: i64 },
    /// `base + i`.
    Ramp { base: i64 },
    Zeros,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub kernel: &'static str,
    pub source: &'static str,
    pub gens: &'static [(&'static str, Gen)],
}

pub const CORPUS: &[CorpusEntry] = &[
    CorpusEntry {
        name: "mini-lbm",
        kernel: "lbm",
        source: include_str!("../../../corpus/mini_lbm.gk"),
        gens: &[("cells_in", Gen::Random { lo: 0, hi: 64 })],
    },
    CorpusEntry {
        name: "mini-histo",
        kernel: "histo1",
        source: include_str!("../../../corpus/mini_histo.gk"),
        gens: &[("samples", Gen::Random { lo: 0, hi: 32 })],
    },
    CorpusEntry {
        name: "mini-histo2",
        kernel: "histo2",
        source: include_str!("../../../corpus/mini_histo2.gk"),
        gens: &[("partial", Gen::Random { lo: 0, hi: 16 })],
    },
    CorpusEntry {
        name: "mini-stencil",
        kernel: "stencil",
        source: include_str!("../../../corpus/mini_stencil.gk"),
        gens: &[("field", Gen::Random { lo: 0, hi: 96 })],
    },
    CorpusEntry {
        name: "mini-tpacf",
        kernel: "tpacf",
        source: include_str!("../../../corpus/mini_tpacf.gk"),
        gens: &[("points", Gen::Random { lo: 0, hi: 64 })],
    },
    CorpusEntry {
        name: "mini-bfs1",
        kernel: "bfs1",
        source: include_str!("../../../corpus/mini_bfs1.gk"),
        gens: &[
            ("dist", Gen::Random { lo: 0, hi: 64 }),
            ("edge_w", Gen::Random { lo: 0, hi: 16 }),
        ],
    },
    CorpusEntry {
        name: "mini-bfs2",
        kernel: "bfs2",
        source: include_str!("../../../corpus/mini_bfs2.gk"),
        gens: &[("frontier", Gen::Random { lo: 0, hi: 64 })],
    },
];

pub fn entry(name: &str) -> Option<&'static CorpusEntry> {
    CORPUS.iter().find(|e| e.name == name || e.kernel == name)
}

impl CorpusEntry {
    pub fn parse(&self) -> ProgramUnit {
        let unit = parse_program(self.source).expect("corpus sources parse");
        validate_unit(&unit).expect("corpus sources validate");
        unit
    }

    pub fn default_grid(&self) -> GridConfig {
        self.parse().default_grid().expect("corpus host script launches")
    }

    /// Seeded input image: generator-listed arrays get data, everything
    /// else the host script allocates starts zeroed.
    pub fn input(&self, unit: &ProgramUnit, grid: &GridConfig, seed: u64) -> MemoryImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = MemoryImage::new();
        crate::refexec::ensure_allocs(unit, grid, &mut img);
        for (array, gen) in self.gens {
            let len = img.len_of(array).unwrap_or(0);
            let vals: Vec<i64> = match gen {
                Gen::Random { lo, hi } => (0..len).map(|_| rng.gen_range(*lo..*hi)).collect(),
                Gen::Ramp { base } => (0..len as i64).map(|i| base + i).collect(),
                Gen::Zeros => vec![0; len],
            };
            img.set_array(array, vals);
        }
        img
    }
}
