//! The volatile/durable split: per-SM L1 tag arrays (write-evict), a
//! partitioned write-back write-allocate L2 with dirty bits, per-controller
//! write-pending queues, and the NVM word image underneath.

use super::config::MachineConfig;
use crate::lang::ast::{GridConfig, HostStep, ProgramUnit};
use crate::refexec::MemoryImage;
use std::collections::{BTreeMap, VecDeque};

pub type Word = i64;
pub type LineId = i64;

/// Line-aligned layout of every allocated array in a flat word space.
#[derive(Debug, Clone)]
pub struct AddrMap {
    /// `(name, base word, length in words)`, sorted by name.
    pub arrays: Vec<(String, i64, i64)>,
    pub total_words: i64,
    words_per_line: i64,
}

impl AddrMap {
    pub fn build(unit: &ProgramUnit, grid: &GridConfig, cfg: &MachineConfig) -> AddrMap {
        let wpl = cfg.words_per_line();
        let mut sizes: BTreeMap<String, i64> = BTreeMap::new();
        for step in &unit.host.steps {
            if let HostStep::Alloc { array, size } = &step.step {
                let len = size.eval(grid).max(0);
                let e = sizes.entry(array.clone()).or_insert(0);
                *e = (*e).max(len);
            }
        }
        for f in &unit.flag_arrays {
            sizes.entry(f.clone()).or_insert(1);
        }
        let mut arrays = Vec::new();
        let mut base = 0i64;
        for (name, len) in sizes {
            arrays.push((name, base, len));
            base += (len.max(1) + wpl - 1) / wpl * wpl;
        }
        AddrMap { arrays, total_words: base, words_per_line: wpl }
    }

    pub fn base_len(&self, name: &str) -> Option<(i64, i64)> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, b, l)| (*b, *l))
    }

    pub fn word_addr(&self, name: &str, index: i64) -> Option<i64> {
        let (base, len) = self.base_len(name)?;
        (index >= 0 && index < len).then_some(base + index)
    }

    pub fn array_of(&self, addr: i64) -> Option<(&str, i64)> {
        self.arrays
            .iter()
            .find(|(_, b, l)| addr >= *b && addr < b + l)
            .map(|(n, b, _)| (n.as_str(), addr - b))
    }

    pub fn line_of(&self, addr: i64) -> LineId {
        addr / self.words_per_line
    }

    pub fn line_base(&self, line: LineId) -> i64 {
        line * self.words_per_line
    }
}

/// Why a line entered the persistence domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    Wt,
    Clwb,
    L2wb,
    Eviction,
    WpqDrain,
}

impl Cause {
    pub fn name(self) -> &'static str {
        match self {
            Cause::Wt => "wt",
            Cause::Clwb => "clwb",
            Cause::L2wb => "l2wb",
            Cause::Eviction => "eviction",
            Cause::WpqDrain => "wpqDrain",
        }
    }
}

/// Attribution of the newest write a durability event carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub cta: i64,
    pub warp: i64,
    /// Iteration ordinal of the anchored epoch loop, when applicable.
    pub epoch: Option<u64>,
}

pub const HOST_ORIGIN: Origin = Origin { cta: -1, warp: -1, epoch: None };

#[derive(Debug, Clone)]
struct L2Line {
    words: Vec<Word>,
    dirty: bool,
    last_writer: Option<Origin>,
    version: u64,
    lru: u64,
}

#[derive(Debug, Clone)]
pub struct WpqEntry {
    pub line: LineId,
    pub words: Vec<(i64, Word)>,
    pub cause: Cause,
    pub origin: Option<Origin>,
    pub version: u64,
    pub insert_time: u64,
    pub drain_time: u64,
    /// Event index assigned when the insertion was processed.
    pub insert_event: u64,
}

#[derive(Debug, Default)]
pub struct Controller {
    pub queue: VecDeque<WpqEntry>,
    pub drain_tail: u64,
}

/// A push the caller must register (trace + event accounting).
#[derive(Debug, Clone)]
pub struct Push {
    pub controller: usize,
    pub entry: WpqEntry,
}

pub struct Machine {
    pub cfg: MachineConfig,
    pub map: AddrMap,
    pub nvm: Vec<Word>,
    partitions: Vec<BTreeMap<LineId, L2Line>>,
    l1: Vec<BTreeMap<LineId, u64>>,
    pub controllers: Vec<Controller>,
    /// L2 accesses stall until an in-progress l2wb scan finishes.
    pub l2_blocked_until: u64,
    version_counter: u64,
    lru_counter: u64,
}

impl Machine {
    pub fn new(cfg: &MachineConfig, map: AddrMap, input: &MemoryImage) -> Machine {
        let mut nvm = vec![0; map.total_words.max(1) as usize];
        for (name, base, len) in &map.arrays {
            if let Some(vals) = input.arrays.get(name) {
                for (i, v) in vals.iter().take(*len as usize).enumerate() {
                    nvm[(*base + i as i64) as usize] = *v;
                }
            }
        }
        Machine {
            cfg: cfg.clone(),
            map,
            nvm,
            partitions: (0..cfg.partitions()).map(|_| BTreeMap::new()).collect(),
            l1: (0..cfg.num_sms).map(|_| BTreeMap::new()).collect(),
            controllers: (0..cfg.num_controllers).map(|_| Controller::default()).collect(),
            l2_blocked_until: 0,
            version_counter: 0,
            lru_counter: 0,
        }
    }

    pub fn partition_of(&self, line: LineId) -> usize {
        (line.rem_euclid(self.cfg.partitions())) as usize
    }

    pub fn controller_of(&self, line: LineId) -> usize {
        self.partition_of(line) % self.cfg.num_controllers as usize
    }

    fn set_of(&self, line: LineId) -> i64 {
        let sets = (self.cfg.l2_lines_per_partition() / self.cfg.l2_assoc).max(1);
        (line / self.cfg.partitions()).rem_euclid(sets)
    }

    fn next_lru(&mut self) -> u64 {
        self.lru_counter += 1;
        self.lru_counter
    }

    fn next_version(&mut self) -> u64 {
        self.version_counter += 1;
        self.version_counter
    }

    /// Newest value visible to the device: L2, then pending WPQ entries
    /// (memory-controller forwarding), then NVM.
    pub fn read_word_coherent(&self, addr: i64) -> Word {
        let line = self.map.line_of(addr);
        if let Some(l) = self.partitions[self.partition_of(line)].get(&line) {
            return l.words[(addr - self.map.line_base(line)) as usize];
        }
        let ctrl = &self.controllers[self.controller_of(line)];
        for e in ctrl.queue.iter().rev() {
            if e.line == line {
                if let Some((_, v)) = e.words.iter().rev().find(|(a, _)| *a == addr) {
                    return *v;
                }
            }
        }
        self.nvm[addr as usize]
    }

    pub fn l2_has(&self, line: LineId) -> bool {
        self.partitions[self.partition_of(line)].contains_key(&line)
    }

    pub fn l2_line_dirty(&self, line: LineId) -> bool {
        self.partitions[self.partition_of(line)]
            .get(&line)
            .is_some_and(|l| l.dirty)
    }

    pub fn dirty_line_count(&self) -> usize {
        self.partitions.iter().map(|p| p.values().filter(|l| l.dirty).count()).sum()
    }

    pub fn wpq_depths(&self) -> Vec<usize> {
        self.controllers.iter().map(|c| c.queue.len()).collect()
    }

    fn full_line_words(&self, line: LineId) -> Vec<(i64, Word)> {
        let base = self.map.line_base(line);
        let l = self.partitions[self.partition_of(line)].get(&line).unwrap();
        l.words
            .iter()
            .enumerate()
            .map(|(i, v)| (base + i as i64, *v))
            .collect()
    }

    /// Bring a line into L2 (allocate-on-miss); returns the evicted dirty
    /// victim, if any, as a pending push.
    fn allocate(&mut self, line: LineId, now: u64) -> Option<Push> {
        if self.l2_has(line) {
            return None;
        }
        let base = self.map.line_base(line);
        let wpl = self.cfg.words_per_line();
        let words: Vec<Word> = (0..wpl).map(|i| self.read_word_coherent_or_zero(base + i)).collect();
        let lru = self.next_lru();
        let p = self.partition_of(line);
        let set = self.set_of(line);
        // Evict the LRU way of this set when full.
        let mut victim: Option<LineId> = None;
        {
            let part = &self.partitions[p];
            let in_set: Vec<(&LineId, &L2Line)> =
                part.iter().filter(|(l, _)| self.set_of(**l) == set).collect();
            if in_set.len() as i64 >= self.cfg.l2_assoc {
                victim = in_set.iter().min_by_key(|(_, l)| l.lru).map(|(id, _)| **id);
            }
        }
        let mut push = None;
        if let Some(v) = victim {
            let old = self.partitions[p].remove(&v).unwrap();
            if old.dirty {
                let vb = self.map.line_base(v);
                let words: Vec<(i64, Word)> =
                    old.words.iter().enumerate().map(|(i, w)| (vb + i as i64, *w)).collect();
                push = Some(Push {
                    controller: self.controller_of(v),
                    entry: WpqEntry {
                        line: v,
                        words,
                        cause: Cause::Eviction,
                        origin: old.last_writer,
                        version: old.version,
                        insert_time: now,
                        drain_time: 0,
                        insert_event: 0,
                    },
                });
            }
        }
        self.partitions[p].insert(
            line,
            L2Line { words, dirty: false, last_writer: None, version: 0, lru },
        );
        push
    }

    fn read_word_coherent_or_zero(&self, addr: i64) -> Word {
        if addr < 0 || addr as usize >= self.nvm.len() {
            return 0;
        }
        self.read_word_coherent(addr)
    }

    /// Device load of a set of addresses by one SM. Returns (values, cost,
    /// evictions to register).
    pub fn load(&mut self, sm: usize, addrs: &[i64], now: u64) -> (Vec<Word>, u64, Vec<Push>) {
        let mut pushes = Vec::new();
        let mut lines: Vec<LineId> = addrs.iter().map(|a| self.map.line_of(*a)).collect();
        lines.sort_unstable();
        lines.dedup();
        let mut cost = 0u64;
        for line in lines {
            let lru = self.next_lru();
            if let Some(r) = self.l1[sm].get_mut(&line) {
                *r = lru;
                cost = cost.max(self.cfg.lat_l1);
                continue;
            }
            let line_cost = if self.l2_has(line) {
                self.cfg.lat_l2
            } else {
                if let Some(p) = self.allocate(line, now) {
                    pushes.push(p);
                }
                self.cfg.lat_l2 + self.cfg.read_latency()
            };
            // Touch L2 recency.
            let p = self.partition_of(line);
            if let Some(l) = self.partitions[p].get_mut(&line) {
                l.lru = lru;
            }
            cost = cost.max(line_cost);
            // Fill the L1 tag (clean; capacity-bounded LRU).
            if self.l1[sm].len() as i64 >= self.cfg.l1_lines() {
                if let Some((&victim, _)) = self.l1[sm].iter().min_by_key(|(_, r)| **r) {
                    self.l1[sm].remove(&victim);
                }
            }
            self.l1[sm].insert(line, lru);
        }
        let values = addrs.iter().map(|a| self.read_word_coherent(*a)).collect();
        (values, cost, pushes)
    }

    /// Write-back write-allocate store of (addr, value) pairs; write-evict
    /// invalidates the SM's L1 tags. Returns (ack cost, evictions).
    pub fn store(
        &mut self,
        sm: usize,
        writes: &[(i64, Word)],
        origin: Origin,
        now: u64,
    ) -> (u64, Vec<Push>) {
        let mut pushes = Vec::new();
        let mut cost = 0u64;
        let mut lines: Vec<LineId> = writes.iter().map(|(a, _)| self.map.line_of(*a)).collect();
        lines.sort_unstable();
        lines.dedup();
        for &line in &lines {
            self.l1[sm].remove(&line);
            let line_cost = if self.l2_has(line) {
                self.cfg.lat_l2
            } else {
                if let Some(p) = self.allocate(line, now) {
                    pushes.push(p);
                }
                self.cfg.lat_l2 + self.cfg.read_latency()
            };
            cost = cost.max(line_cost);
        }
        for (addr, val) in writes {
            let line = self.map.line_of(*addr);
            let version = self.next_version();
            let lru = self.next_lru();
            let base = self.map.line_base(line);
            let p = self.partition_of(line);
            let l = self.partitions[p].get_mut(&line).expect("allocated above");
            l.words[(*addr - base) as usize] = *val;
            l.dirty = true;
            l.last_writer = Some(origin);
            l.version = version;
            l.lru = lru;
        }
        (cost, pushes)
    }

    /// Write-through store of one lane's word: update any cached copy and
    /// clean it, then enqueue the write (no combining). The entry carries
    /// the whole line when a dirty cached copy was folded in.
    pub fn store_wt(&mut self, sm: usize, addr: i64, val: Word, origin: Origin) -> Push {
        let line = self.map.line_of(addr);
        self.l1[sm].remove(&line);
        let version = self.next_version();
        let p = self.partition_of(line);
        let words = if let Some(l) = self.partitions[p].get_mut(&line) {
            let base = line * self.cfg.words_per_line();
            l.words[(addr - base) as usize] = val;
            l.last_writer = Some(origin);
            l.version = version;
            let was_dirty = l.dirty;
            l.dirty = false;
            if was_dirty {
                self.full_line_words(line)
            } else {
                vec![(addr, val)]
            }
        } else {
            vec![(addr, val)]
        };
        Push {
            controller: self.controller_of(line),
            entry: WpqEntry {
                line,
                words,
                cause: Cause::Wt,
                origin: Some(origin),
                version,
                insert_time: 0,
                drain_time: 0,
                insert_event: 0,
            },
        }
    }

    /// Atomic read-modify-write of one word at L2.
    pub fn atomic_rmw(
        &mut self,
        sm: usize,
        addr: i64,
        f: impl Fn(Word) -> Word,
        origin: Origin,
        now: u64,
    ) -> (u64, Vec<Push>) {
        let line = self.map.line_of(addr);
        let mut pushes = Vec::new();
        let cost = if self.l2_has(line) {
            self.cfg.lat_l2
        } else {
            if let Some(p) = self.allocate(line, now) {
                pushes.push(p);
            }
            self.cfg.lat_l2 + self.cfg.read_latency()
        };
        self.l1[sm].remove(&line);
        let version = self.next_version();
        let lru = self.next_lru();
        let base = self.map.line_base(line);
        let p = self.partition_of(line);
        let l = self.partitions[p].get_mut(&line).unwrap();
        let old = l.words[(addr - base) as usize];
        l.words[(addr - base) as usize] = f(old);
        l.dirty = true;
        l.last_writer = Some(origin);
        l.version = version;
        l.lru = lru;
        (cost, pushes)
    }

    /// clwb: a dirty line moves to its controller's WPQ and is retained
    /// clean; a clean or absent line just acknowledges.
    pub fn clwb_line(&mut self, line: LineId) -> Option<Push> {
        let p = self.partition_of(line);
        let dirty = self.partitions[p].get(&line).is_some_and(|l| l.dirty);
        if !dirty {
            return None;
        }
        let words = self.full_line_words(line);
        let l = self.partitions[p].get_mut(&line).unwrap();
        l.dirty = false;
        let (origin, version) = (l.last_writer, l.version);
        Some(Push {
            controller: self.controller_of(line),
            entry: WpqEntry {
                line,
                words,
                cause: Cause::Clwb,
                origin,
                version,
                insert_time: 0,
                drain_time: 0,
                insert_event: 0,
            },
        })
    }

    /// l2wb: every partition scans all its lines and writes back the dirty
    /// ones. Returns (pushes in deterministic order, per-partition scan
    /// cost in cycles).
    pub fn l2wb_scan(&mut self, cause: Cause) -> (Vec<Push>, u64) {
        let mut pushes = Vec::new();
        let scan = self.cfg.l2_lines_per_partition() as u64;
        for p in 0..self.partitions.len() {
            let dirty: Vec<LineId> = self.partitions[p]
                .iter()
                .filter(|(_, l)| l.dirty)
                .map(|(id, _)| *id)
                .collect();
            for line in dirty {
                let words = self.full_line_words(line);
                let l = self.partitions[p].get_mut(&line).unwrap();
                l.dirty = false;
                let (origin, version) = (l.last_writer, l.version);
                pushes.push(Push {
                    controller: self.controller_of(line),
                    entry: WpqEntry {
                        line,
                        words,
                        cause,
                        origin,
                        version,
                        insert_time: 0,
                        drain_time: 0,
                        insert_event: 0,
                    },
                });
            }
        }
        (pushes, scan)
    }

    /// Write words directly into NVM (host-side persistent writes), and
    /// keep any cached copy coherent without cleaning other words.
    pub fn host_write(&mut self, writes: &[(i64, Word)]) {
        for (addr, val) in writes {
            self.nvm[*addr as usize] = *val;
            let line = self.map.line_of(*addr);
            let base = self.map.line_base(line);
            let p = self.partition_of(line);
            if let Some(l) = self.partitions[p].get_mut(&line) {
                l.words[(*addr - base) as usize] = *val;
            }
        }
    }

    /// Insert into the controller FIFO with depth stalling; returns the
    /// (insert, drain) times.
    pub fn wpq_insert(&mut self, push: &mut Push, earliest: u64) -> (u64, u64) {
        let cfg_depth = self.cfg.wpq_depth as usize;
        let write_lat = self.cfg.write_latency();
        let ctrl = &mut self.controllers[push.controller];
        let free_at = if ctrl.queue.len() >= cfg_depth {
            ctrl.queue[ctrl.queue.len() - cfg_depth].drain_time
        } else {
            0
        };
        let insert = earliest.max(free_at);
        let drain = insert.max(ctrl.drain_tail) + write_lat;
        ctrl.drain_tail = drain;
        push.entry.insert_time = insert;
        push.entry.drain_time = drain;
        ctrl.queue.push_back(push.entry.clone());
        (insert, drain)
    }

    /// Earliest pending drain across controllers.
    pub fn next_drain(&self) -> Option<(usize, u64)> {
        self.controllers
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.queue.front().map(|e| (i, e.drain_time)))
            .min_by_key(|(i, t)| (*t, *i))
    }

    /// Pop and apply the oldest entry of one controller to NVM.
    pub fn drain_one(&mut self, ctrl: usize) -> WpqEntry {
        let e = self.controllers[ctrl].queue.pop_front().expect("drain on empty queue");
        for (addr, val) in &e.words {
            self.nvm[*addr as usize] = *val;
        }
        e
    }

    pub fn all_wpqs_empty(&self) -> bool {
        self.controllers.iter().all(|c| c.queue.is_empty())
    }

    /// The volatile view: NVM overlaid with every cached line.
    pub fn volatile_image(&self, flags: &[String]) -> MemoryImage {
        let mut words = self.nvm.clone();
        // Pending WPQ writes are newer than NVM.
        for c in &self.controllers {
            for e in &c.queue {
                for (addr, val) in &e.words {
                    words[*addr as usize] = *val;
                }
            }
        }
        for p in &self.partitions {
            for (line, l) in p {
                let base = self.map.line_base(*line);
                for (i, v) in l.words.iter().enumerate() {
                    let a = (base + i as i64) as usize;
                    if a < words.len() {
                        words[a] = *v;
                    }
                }
            }
        }
        self.words_to_image(&words, flags)
    }

    /// What survives a crash right now: NVM plus the durable WPQ contents
    /// when WPQs sit inside the persistence domain.
    pub fn persistent_image(&self, flags: &[String]) -> MemoryImage {
        let mut words = self.nvm.clone();
        if self.cfg.wpq_durable {
            for c in &self.controllers {
                for e in &c.queue {
                    for (addr, val) in &e.words {
                        words[*addr as usize] = *val;
                    }
                }
            }
        }
        self.words_to_image(&words, flags)
    }

    fn words_to_image(&self, words: &[Word], flags: &[String]) -> MemoryImage {
        let mut img = MemoryImage::new();
        for (name, base, len) in &self.map.arrays {
            let vals = words[*base as usize..(*base + *len) as usize].to_vec();
            img.set_array(name, vals);
        }
        for f in flags {
            img.flag_region.insert(f.clone());
        }
        img
    }
}
