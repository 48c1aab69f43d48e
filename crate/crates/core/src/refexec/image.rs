//! Flat memory image: named arrays of words plus the persistent flag
//! region, with the line-oriented text serialization used for golden files.

use crate::lang::ast::FlagState;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Arrays of 64-bit words keyed by name. Flag arrays live in `arrays` too;
/// `flag_region` names which ones carry transaction-flag semantics.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryImage {
    pub arrays: BTreeMap<String, Vec<i64>>,
    pub flag_region: BTreeSet<String>,
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ensure_array(&mut self, name: &str, len: usize) {
        let a = self.arrays.entry(name.to_string()).or_default();
        if a.len() < len {
            a.resize(len, 0);
        }
    }

    pub fn set_array(&mut self, name: &str, values: Vec<i64>) {
        self.arrays.insert(name.to_string(), values);
    }

    pub fn len_of(&self, name: &str) -> Option<usize> {
        self.arrays.get(name).map(Vec::len)
    }

    pub fn flag_state(&self, flag: &str, index: usize) -> Option<FlagState> {
        let w = *self.arrays.get(flag)?.get(index)?;
        FlagState::from_word(w)
    }

    pub fn flag_word(&self, flag: &str, index: usize) -> Option<i64> {
        self.arrays.get(flag)?.get(index).copied()
    }

    /// Compare the named arrays; returns the first mismatch as
    /// `(array, index, left, right)`.
    pub fn diff_on<'a>(
        &self,
        other: &MemoryImage,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Option<(String, usize, Option<i64>, Option<i64>)> {
        for name in names {
            let a = self.arrays.get(name);
            let b = other.arrays.get(name);
            let n = a.map_or(0, |v| v.len()).max(b.map_or(0, |v| v.len()));
            for i in 0..n {
                let x = a.and_then(|v| v.get(i)).copied();
                let y = b.and_then(|v| v.get(i)).copied();
                if x != y {
                    return Some((name.to_string(), i, x, y));
                }
            }
        }
        None
    }

    /// Line-oriented text form: `name,index,value` for ordinary words and
    /// `!name,index,state` for words in the flag region. Bit-exact and
    /// sorted, suitable for golden files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, vals) in &self.arrays {
            let is_flag = self.flag_region.contains(name);
            for (i, v) in vals.iter().enumerate() {
                if is_flag {
                    match FlagState::from_word(*v) {
                        Some(s) => writeln!(out, "!{name},{i},{s}").unwrap(),
                        None => writeln!(out, "!{name},{i},{v}").unwrap(),
                    }
                } else {
                    writeln!(out, "{name},{i},{v}").unwrap();
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MemoryImage, String> {
        let mut img = MemoryImage::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest, flag) = match line.strip_prefix('!') {
                Some(r) => {
                    let mut it = r.splitn(3, ',');
                    (it.next(), (it.next(), it.next()), true)
                }
                None => {
                    let mut it = line.splitn(3, ',');
                    (it.next(), (it.next(), it.next()), false)
                }
            };
            let (Some(name), (Some(idx), Some(val))) = (name, rest) else {
                return Err(format!("line {}: expected name,index,value", n + 1));
            };
            let idx: usize =
                idx.parse().map_err(|_| format!("line {}: bad index `{idx}`", n + 1))?;
            let word: i64 = match val {
                "Initial" => 0,
                "InTx" => 1,
                "Complete" => 2,
                v => v.parse().map_err(|_| format!("line {}: bad value `{v}`", n + 1))?,
            };
            img.ensure_array(name, idx + 1);
            img.arrays.get_mut(name).unwrap()[idx] = word;
            if flag {
                img.flag_region.insert(name.to_string());
            }
        }
        Ok(img)
    }
}
