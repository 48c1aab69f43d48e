//! Experiment orchestration, directive naming, reports and the model
//! recommender.

pub mod experiment;
pub mod recommend;
pub mod report;
pub mod spec;

use crate::lang::ast::*;

/// Parse a reporting-convention label such as `SP_wt`, `EP_C_clwb_pct`,
/// `Undo_K`, or `Undo_C_wt_idem` into a directive. `Baseline` is not a
/// directive; callers treat it separately.
pub fn parse_directive_label(label: &str) -> Option<PersistencyDirective> {
    let mut parts: Vec<&str> = label.split('_').collect();
    let mut idem = false;
    let mut pct = false;
    if parts.last() == Some(&"idem") {
        idem = true;
        parts.pop();
    }
    if parts.last() == Some(&"pct") {
        pct = true;
        parts.pop();
    }
    let mech = match parts.last() {
        Some(&"wt") => {
            parts.pop();
            Some(Mech::Wt)
        }
        Some(&"clwb") => {
            parts.pop();
            Some(Mech::Clwb)
        }
        Some(&"l2wb") => {
            parts.pop();
            Some(Mech::L2wb)
        }
        _ => None,
    };
    let mut d = match parts.as_slice() {
        ["SP"] => PersistencyDirective::strict(mech.unwrap_or(Mech::Clwb)),
        ["EP", s] | ["Undo", s] => {
            let scope = match *s {
                "K" => EpochScope::Kernel,
                "C" => EpochScope::Cta,
                "L" => EpochScope::Loop,
                _ => return None,
            };
            let default_mech = match scope {
                EpochScope::Kernel | EpochScope::Loop => Mech::L2wb,
                EpochScope::Cta => Mech::Clwb,
            };
            let mut d = PersistencyDirective::epoch(scope, mech.unwrap_or(default_mech));
            if parts[0] == "Undo" {
                d = d.with_tx();
            }
            d
        }
        _ => return None,
    };
    if pct {
        d = d.with_pct();
    }
    if idem {
        d = d.with_idem();
    }
    d.validate().ok()?;
    Some(d)
}
