//! On-chip validator: timestamp-tagged aggregation of PMU packets and the
//! per-window threshold comparison.

use serde::{Deserialize, Serialize};

use super::pmu::{Metrics, PmuPacket, PMU_COUNTERS, PMU_ENTRY_BYTES};
use super::HwSimError;

pub const DEFAULT_CACHE_ENTRIES: usize = 8;
/// Golden entries prefetched ahead of the check, half the PMU buffer.
pub const FETCH_BUFFER_ENTRIES: usize = 4;
pub const FETCH_BUFFER_BYTES: usize = FETCH_BUFFER_ENTRIES * PMU_ENTRY_BYTES;

/// Cache tag. Timestamps restart with every kernel, so they are qualified by
/// the kernel's launch ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowTag {
    pub kernel: u32,
    pub ts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggCacheEntry {
    pub tag: WindowTag,
    pub metrics_acc: Metrics,
    /// PMUs still expected for this window.
    pub act: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub tag: WindowTag,
    pub aggregate: Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggCache {
    pub capacity: usize,
    pub entries: Vec<AggCacheEntry>,
}

impl AggCache {
    pub fn new(capacity: usize) -> Self {
        AggCache { capacity, entries: Vec::with_capacity(capacity) }
    }

    /// Folds `packet` into the entry for its window. A miss allocates with
    /// `act = active` and counts the packet; the entry is evicted into a
    /// [`WindowCheck`] when `act` reaches zero.
    pub fn receive(&mut self, packet: &PmuPacket, active: u8) -> Result<Option<WindowCheck>, HwSimError> {
        let tag = WindowTag { kernel: packet.kernel, ts: packet.ts };
        let idx = match self.entries.iter().position(|e| e.tag == tag) {
            Some(i) => i,
            None => {
                if active == 0 {
                    return Err(HwSimError::NoActivePmus(tag));
                }
                if self.entries.len() >= self.capacity {
                    return Err(HwSimError::CacheCapacityExceeded { capacity: self.capacity, tag });
                }
                self.entries.push(AggCacheEntry { tag, metrics_acc: [0; PMU_COUNTERS], act: active });
                self.entries.len() - 1
            }
        };
        let e = &mut self.entries[idx];
        for (acc, v) in e.metrics_acc.iter_mut().zip(&packet.metrics) {
            *acc = acc.saturating_add(*v);
        }
        e.act -= 1;
        if e.act == 0 {
            let e = self.entries.remove(idx);
            return Ok(Some(WindowCheck { tag, aggregate: e.metrics_acc }));
        }
        Ok(None)
    }

    /// Drops every entry of `kernel`.
    pub fn purge(&mut self, kernel: u32) {
        self.entries.retain(|e| e.tag.kernel != kernel);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WindowOutcome {
    Pass,
    /// Indices of the metrics whose distance exceeded their threshold.
    Flag(Vec<usize>),
}

/// Flags iff some metric differs from its golden value by strictly more than
/// its threshold.
pub fn compare_window(aggregate: &Metrics, golden: &Metrics, tau: &[f64; PMU_COUNTERS]) -> WindowOutcome {
    let over: Vec<usize> = (0..PMU_COUNTERS)
        .filter(|&m| (aggregate[m] as f64 - golden[m] as f64).abs() > tau[m])
        .collect();
    if over.is_empty() {
        WindowOutcome::Pass
    } else {
        WindowOutcome::Flag(over)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(sm: u32, ts: u32, m: Metrics) -> PmuPacket {
        PmuPacket { sm_id: sm, kernel: 0, ts, metrics: m }
    }

    #[test]
    fn aggregates_on_last_packet() {
        let mut c = AggCache::new(DEFAULT_CACHE_ENTRIES);
        assert_eq!(c.receive(&pkt(0, 5, [1, 2, 3, 4, 5, 6, 7, 8]), 2).unwrap(), None);
        let chk = c.receive(&pkt(1, 5, [10, 20, 30, 40, 50, 60, 70, 80]), 2).unwrap().unwrap();
        assert_eq!(chk.aggregate, [11, 22, 33, 44, 55, 66, 77, 88]);
        assert_eq!(chk.tag, WindowTag { kernel: 0, ts: 5 });
        assert!(c.entries.is_empty());
    }

    #[test]
    fn withheld_packet_blocks_check() {
        let mut c = AggCache::new(DEFAULT_CACHE_ENTRIES);
        for sm in 0..14 {
            assert_eq!(c.receive(&pkt(sm, 0, [1; 8]), 15).unwrap(), None);
        }
        assert_eq!(c.entries[0].act, 1);
    }

    #[test]
    fn capacity_overflow_is_an_error() {
        let mut c = AggCache::new(2);
        c.receive(&pkt(0, 0, [0; 8]), 2).unwrap();
        c.receive(&pkt(0, 1, [0; 8]), 2).unwrap();
        assert!(matches!(c.receive(&pkt(0, 2, [0; 8]), 2), Err(HwSimError::CacheCapacityExceeded { .. })));
        c.receive(&pkt(1, 0, [0; 8]), 2).unwrap().unwrap();
        c.receive(&pkt(0, 2, [0; 8]), 2).unwrap();
    }

    #[test]
    fn kernels_do_not_share_entries() {
        let mut c = AggCache::new(4);
        c.receive(&pkt(0, 0, [1; 8]), 2).unwrap();
        c.receive(&PmuPacket { kernel: 1, ..pkt(0, 0, [1; 8]) }, 2).unwrap();
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn threshold_is_strict() {
        let g = [100; 8];
        let tau = [5.0; 8];
        let mut a = g;
        assert_eq!(compare_window(&a, &g, &tau), WindowOutcome::Pass);
        a[3] = 105;
        assert_eq!(compare_window(&a, &g, &tau), WindowOutcome::Pass);
        a[3] = 106;
        assert_eq!(compare_window(&a, &g, &tau), WindowOutcome::Flag(vec![3]));
        a[0] = 94;
        assert_eq!(compare_window(&a, &g, &tau), WindowOutcome::Flag(vec![0, 3]));
    }

    #[test]
    fn fetch_buffer_is_half_the_pmu_buffer() {
        assert_eq!(FETCH_BUFFER_BYTES, 144);
        assert_eq!(super::super::pmu::PMU_BUFFER_ENTRIES * PMU_ENTRY_BYTES, 288);
    }
}
