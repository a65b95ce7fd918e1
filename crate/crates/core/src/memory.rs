//! The memory bank and its long-/short-term reference schedule.
//!
//! Query frame `t` reads frames `0` and `5` (long-term) and `t − 5`, `t − 3`,
//! `t − 1` (short-term). The bank keeps exactly the entries some later query
//! can still select and drops the rest on insertion.

use alloc::vec::Vec;

use crate::encoder::FeatureMap;
use crate::error::{arg_err, shape_err};
use crate::matching::LabelMap;
use crate::{Error, Result};

/// Long-term reference frames.
pub const LONG_TERM: [usize; 2] = [0, 5];
/// Short-term references are `t − k` for each `k` here.
pub const SHORT_TERM_OFFSETS: [usize; 3] = [5, 3, 1];

/// Which part of the schedule is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryMode {
    #[default]
    Both,
    LongOnly,
    ShortOnly,
}

impl MemoryMode {
    fn long(self) -> bool {
        self != MemoryMode::ShortOnly
    }

    fn short(self) -> bool {
        self != MemoryMode::LongOnly
    }
}

/// Reference frames for query frame `t` under the full schedule.
pub fn select_references(t: usize) -> Result<Vec<usize>> {
    select_references_with(t, MemoryMode::Both)
}

/// Reference frames for query frame `t` under `mode`: ascending, unique, all
/// below `t`. Never empty for `t ≥ 1`, since frame 0 (long) and `t − 1`
/// (short) always qualify.
pub fn select_references_with(t: usize, mode: MemoryMode) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(arg_err!("frame 0 has no earlier frame to reference"));
    }
    let mut out = Vec::with_capacity(5);
    if mode.long() {
        out.extend(LONG_TERM.iter().copied().filter(|&i| i < t));
    }
    if mode.short() {
        out.extend(SHORT_TERM_OFFSETS.iter().filter_map(|&k| t.checked_sub(k)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Whether any query after frame `last` can select frame `i` under `mode`.
fn selectable_after(i: usize, last: usize, mode: MemoryMode) -> bool {
    let long = mode.long() && LONG_TERM.contains(&i);
    // i = t' − k for some offset k and some t' > last.
    let short = mode.short() && SHORT_TERM_OFFSETS.iter().any(|&k| i + k > last);
    long || short
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub frame: usize,
    pub key: FeatureMap,
    pub value: LabelMap,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    mode: MemoryMode,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(mode: MemoryMode) -> Self {
        Self {
            mode,
            entries: Vec::new(),
        }
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    /// Appends frame `t` and evicts every entry no later query can select.
    pub fn update(&mut self, t: usize, key: FeatureMap, value: LabelMap) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if t <= last.frame {
                return Err(Error::OutOfOrder {
                    frame: t,
                    last: last.frame,
                });
            }
            let first = &self.entries[0];
            if key.dims() != first.key.dims() {
                return Err(shape_err!(
                    "key {:?} does not match bank keys {:?}",
                    key.dims(),
                    first.key.dims()
                ));
            }
            if value.dims() != first.value.dims() {
                return Err(shape_err!(
                    "value {:?} does not match bank values {:?}",
                    value.dims(),
                    first.value.dims()
                ));
            }
        }
        if (key.height(), key.width()) != (value.height(), value.width()) {
            return Err(shape_err!(
                "key {:?} and value {:?} grids differ",
                key.dims(),
                value.dims()
            ));
        }
        self.entries.push(MemoryEntry { frame: t, key, value });
        let mode = self.mode;
        self.entries.retain(|e| selectable_after(e.frame, t, mode));
        Ok(())
    }

    /// Entries read by query frame `t`, in ascending frame order. Fails if the
    /// schedule names a frame that was never inserted.
    pub fn references(&self, t: usize) -> Result<Vec<&MemoryEntry>> {
        select_references_with(t, self.mode)?
            .into_iter()
            .map(|i| {
                self.entries
                    .iter()
                    .find(|e| e.frame == i)
                    .ok_or_else(|| arg_err!("frame {} is not in the memory bank", i))
            })
            .collect()
    }
}
