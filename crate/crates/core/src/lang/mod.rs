//! Front end and IR for the miniature SIMT kernel language plus the
//! host-script language, with the CFG utilities the instrumentation
//! passes rely on.

pub mod ast;
pub mod cfg;
pub mod parse;
pub mod print;
pub mod slice;

#[cfg(test)]
mod tests;

pub use ast::*;
pub use cfg::Cfg;
pub use parse::{parse_program, ParseError};
pub use print::print_unit;
