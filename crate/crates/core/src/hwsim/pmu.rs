//! Per-SM performance monitoring unit: eight multiplexed 32-bit counters,
//! a window cycle counter and an eight-entry output ring.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const PMU_COUNTERS: usize = 8;
pub const PMU_LINES: usize = 8;
pub const PMU_BUFFER_ENTRIES: usize = 8;
/// Bytes per buffer entry: a 32-bit timestamp and eight 32-bit metrics.
pub const PMU_ENTRY_BYTES: usize = 4 + 4 * PMU_COUNTERS;

pub type Metrics = [u32; PMU_COUNTERS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmuPacket {
    pub sm_id: u32,
    /// Launch ordinal of the kernel the window belongs to, latched at
    /// dispatch.
    pub kernel: u32,
    /// Window ordinal within the running kernel.
    pub ts: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Counted,
    /// A frozen window is waiting for buffer space; the SM did not advance.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmuState {
    pub sm_id: u32,
    pub kernel: u32,
    /// Event line feeding each counter.
    pub mux_select: [u8; PMU_COUNTERS],
    pub counters: Metrics,
    pub window_cycles: u32,
    /// Cycles elapsed in the current window.
    pub cycle_count: u32,
    /// Ordinal of the current window.
    pub window: u32,
    /// Sticky: some counter saturated.
    pub overflow: bool,
    pub out_buffer: VecDeque<PmuPacket>,
    /// A frozen packet that found the buffer full.
    pub pending: Option<PmuPacket>,
    pub stall_cycles: u64,
    /// Sum of every frozen metric since construction.
    pub emitted: [u64; PMU_COUNTERS],
}

impl PmuState {
    /// PMU with counter `c` wired to line `c`.
    pub fn new(sm_id: u32, window_cycles: u32) -> Self {
        assert!(window_cycles > 0, "window_cycles must be positive");
        let mut mux_select = [0u8; PMU_COUNTERS];
        for (c, m) in mux_select.iter_mut().enumerate() {
            *m = c as u8;
        }
        PmuState {
            sm_id,
            kernel: 0,
            mux_select,
            counters: [0; PMU_COUNTERS],
            window_cycles,
            cycle_count: 0,
            window: 0,
            overflow: false,
            out_buffer: VecDeque::with_capacity(PMU_BUFFER_ENTRIES),
            pending: None,
            stall_cycles: 0,
            emitted: [0; PMU_COUNTERS],
        }
    }

    fn bump(&mut self, c: usize, by: u32) {
        match self.counters[c].checked_add(by) {
            Some(v) => self.counters[c] = v,
            None => {
                self.counters[c] = u32::MAX;
                self.overflow = true;
            }
        }
    }

    /// One cycle. Bit `l` of `lines` is event line `l`. Closing the window
    /// freezes the counters into a packet.
    pub fn step(&mut self, lines: u8) -> StepOutcome {
        if self.pending.is_some() && !self.retry_pending() {
            self.stall_cycles += 1;
            return StepOutcome::Stalled;
        }
        for c in 0..PMU_COUNTERS {
            let l = self.mux_select[c];
            if (l as usize) < PMU_LINES && lines & (1 << l) != 0 {
                self.bump(c, 1);
            }
        }
        self.cycle_count += 1;
        if self.cycle_count == self.window_cycles {
            self.freeze();
        }
        StepOutcome::Counted
    }

    /// Advances `cycles ≤ window_cycles − cycle_count` cycles at once with
    /// line `l` asserted on the first `min(asserted[l], cycles)` of them.
    /// Same effect as the corresponding [`step`](Self::step) calls, minus the
    /// window close.
    pub fn advance(&mut self, cycles: u32, asserted: &[u64; PMU_LINES]) {
        assert!(cycles <= self.window_cycles - self.cycle_count, "advance crosses a window boundary");
        for c in 0..PMU_COUNTERS {
            let l = self.mux_select[c] as usize;
            if l < PMU_LINES {
                self.bump(c, asserted[l].min(cycles as u64) as u32);
            }
        }
        self.cycle_count += cycles;
    }

    /// Closes the current window (regular boundary or kernel end) and
    /// queues its packet. Returns `false` when the buffer was full and the
    /// packet is held as pending.
    pub fn freeze(&mut self) -> bool {
        let packet = PmuPacket { sm_id: self.sm_id, kernel: self.kernel, ts: self.window, metrics: self.counters };
        for (e, v) in self.emitted.iter_mut().zip(&self.counters) {
            *e += *v as u64;
        }
        self.counters = [0; PMU_COUNTERS];
        self.cycle_count = 0;
        self.window += 1;
        if self.out_buffer.len() < PMU_BUFFER_ENTRIES {
            self.out_buffer.push_back(packet);
            true
        } else {
            self.pending = Some(packet);
            false
        }
    }

    /// Kernel end: flushes a partial window, if any cycles ran in it.
    pub fn finish(&mut self) -> bool {
        if self.cycle_count > 0 {
            self.freeze()
        } else {
            true
        }
    }

    /// Moves the pending packet into the buffer if there is room.
    pub fn retry_pending(&mut self) -> bool {
        match self.pending {
            Some(p) if self.out_buffer.len() < PMU_BUFFER_ENTRIES => {
                self.out_buffer.push_back(p);
                self.pending = None;
                true
            }
            Some(_) => false,
            None => true,
        }
    }

    pub fn pop_packet(&mut self) -> Option<PmuPacket> {
        self.out_buffer.pop_front()
    }

    /// Prepares for a new kernel: counters and window ordinal restart.
    pub fn reset_kernel(&mut self, kernel: u32) {
        self.kernel = kernel;
        self.counters = [0; PMU_COUNTERS];
        self.cycle_count = 0;
        self.window = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_asserted_cycles() {
        let mut p = PmuState::new(0, 100);
        for c in 0..100 {
            p.step(if c < 10 { 1 } else { 0 });
        }
        let pkt = p.pop_packet().unwrap();
        assert_eq!(pkt.metrics[0], 10);
        assert_eq!(pkt.ts, 0);
        assert_eq!(p.cycle_count, 0);
    }

    #[test]
    fn saturates_with_sticky_overflow() {
        let mut p = PmuState::new(0, 10);
        p.counters[0] = u32::MAX;
        p.step(1);
        assert_eq!(p.counters[0], u32::MAX);
        assert!(p.overflow);
        p.step(0);
        assert!(p.overflow);
    }

    #[test]
    fn partial_last_window() {
        let w = 16;
        let mut p = PmuState::new(3, w);
        for _ in 0..3 * w + 5 {
            p.step(0b11);
        }
        p.finish();
        let pkts: Vec<_> = std::iter::from_fn(|| p.pop_packet()).collect();
        assert_eq!(pkts.len(), 4);
        assert_eq!(pkts[3].metrics[1], 5);
        assert_eq!(pkts[3].ts, 3);
        assert!(pkts.iter().all(|k| k.sm_id == 3));
    }

    #[test]
    fn full_buffer_stalls_instead_of_dropping() {
        let mut p = PmuState::new(0, 1);
        for _ in 0..PMU_BUFFER_ENTRIES {
            assert_eq!(p.step(1), StepOutcome::Counted);
        }
        assert_eq!(p.step(1), StepOutcome::Counted);
        assert!(p.pending.is_some());
        assert_eq!(p.step(1), StepOutcome::Stalled);
        assert_eq!(p.stall_cycles, 1);
        p.pop_packet();
        assert_eq!(p.step(1), StepOutcome::Counted);
        assert_eq!(p.out_buffer.len(), PMU_BUFFER_ENTRIES);
        assert_eq!(p.out_buffer.back().unwrap().ts, PMU_BUFFER_ENTRIES as u32);
    }

    #[test]
    fn mux_routes_lines() {
        let mut p = PmuState::new(0, 4);
        p.mux_select = [7, 7, 0, 0, 1, 1, 8, 8];
        for _ in 0..4 {
            p.step(0b1000_0001);
        }
        assert_eq!(p.pop_packet().unwrap().metrics, [4, 4, 4, 4, 0, 0, 0, 0]);
    }
}
