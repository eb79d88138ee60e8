//! Upstream H-tree with credit flow control and the downstream broadcast path.
//!
//! A packet sent at cycle `s` occupies a slot in the receiving buffer immediately and may leave it
//! at `s + latency`. Credits return the cycle the packet leaves; routers are stepped root first, so
//! a returned credit is usable by the child in the same cycle.

use std::collections::VecDeque;

use sparsenn_core::numerics::WideAccumulator;

use crate::arch::{arbitrate, ArchConfig, Flit, Packet, PacketKind, Payload, RouterState, TieBreak, ROUTER_RADIX};

pub(crate) struct UpTree {
    /// Leaves first, root last.
    pub levels: Vec<Vec<RouterState>>,
    latency: u64,
    credits_per_link: usize,
}

pub(crate) struct Step {
    pub out: Option<Packet>,
    pub hops: u64,
}

impl UpTree {
    pub fn new(arch: &ArchConfig, latency: u64) -> Self {
        let levels = arch
            .routers_per_level()
            .iter()
            .enumerate()
            .map(|(l, &n)| (0..n).map(|i| RouterState::new(l + 1, i, arch.credits_per_link)).collect())
            .collect();
        UpTree { levels, latency, credits_per_link: arch.credits_per_link }
    }

    pub fn can_inject(&self, pe: usize) -> bool {
        self.levels[0][pe / ROUTER_RADIX].ports[pe % ROUTER_RADIX].credits > 0
    }

    pub fn inject(&mut self, pe: usize, packet: Packet, now: u64) {
        let port = &mut self.levels[0][pe / ROUTER_RADIX].ports[pe % ROUTER_RADIX];
        debug_assert!(port.credits > 0);
        port.credits -= 1;
        port.buffer.push_back(Flit { packet, ready_at: now + self.latency });
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().flatten().all(RouterState::is_empty)
    }

    /// Credits held by each sender plus the slots its packets occupy equal the link's credit budget.
    pub fn credits_conserved(&self) -> bool {
        self.levels
            .iter()
            .flatten()
            .flat_map(|r| r.ports.iter())
            .all(|p| p.credits + p.buffer.len() == self.credits_per_link)
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for r in self.levels.iter().rev().flatten().filter(|r| !r.is_empty()) {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        if s.is_empty() {
            s.push_str("all router buffers empty\n");
        }
        s
    }

    /// Moves `packet` from a router at `level` to its parent, or out of the root.
    fn forward(&mut self, level: usize, index: usize, packet: Packet, now: u64, step: &mut Step) {
        step.hops += 1;
        if level + 1 == self.levels.len() {
            step.out = Some(packet);
            return;
        }
        let port = &mut self.levels[level + 1][index / ROUTER_RADIX].ports[index % ROUTER_RADIX];
        port.credits -= 1;
        port.buffer.push_back(Flit { packet, ready_at: now + self.latency });
    }

    fn has_room_above(&self, level: usize, index: usize, root_can_send: bool) -> bool {
        if level + 1 == self.levels.len() {
            root_can_send
        } else {
            self.levels[level + 1][index / ROUTER_RADIX].ports[index % ROUTER_RADIX].credits > 0
        }
    }

    /// Smallest-index arbitration at every router, root first.
    pub fn step_arbitrate(&mut self, now: u64, tie: TieBreak, root_can_send: bool) -> Step {
        let mut step = Step { out: None, hops: 0 };
        for level in (0..self.levels.len()).rev() {
            for index in 0..self.levels[level].len() {
                if !self.has_room_above(level, index, root_can_send) {
                    continue;
                }
                let router = &mut self.levels[level][index];
                let candidates: [Option<usize>; ROUTER_RADIX] =
                    std::array::from_fn(|p| router.ports[p].eligible_head(now).map(|f| f.packet.index));
                let Some(win) = arbitrate(&candidates, tie) else { continue };
                let port = &mut router.ports[win];
                let flit = port.buffer.pop_front().expect("eligible head vanished");
                port.credits += 1;
                self.forward(level, index, flit.packet, now, &mut step);
            }
        }
        step
    }

    /// In-network accumulation: a router fires once all four ports hold the same row.
    pub fn step_reduce(&mut self, now: u64, root_can_send: bool) -> Step {
        let mut step = Step { out: None, hops: 0 };
        for level in (0..self.levels.len()).rev() {
            for index in 0..self.levels[level].len() {
                if !self.has_room_above(level, index, root_can_send) {
                    continue;
                }
                let router = &mut self.levels[level][index];
                let heads: Vec<Packet> = router.ports.iter().filter_map(|p| p.eligible_head(now)).map(|f| f.packet).collect();
                if heads.len() < ROUTER_RADIX {
                    continue;
                }
                let row = heads[0].index;
                assert!(heads.iter().all(|h| h.index == row), "partial sums out of row order at {router}");
                let mut sum = WideAccumulator::zero(heads[0].partial().expect("non-partial packet in reduction").frac_bits);
                for h in &heads {
                    sum.merge(h.partial().expect("non-partial packet in reduction"));
                }
                for port in router.ports.iter_mut() {
                    port.buffer.pop_front();
                    port.credits += 1;
                }
                let packet = Packet {
                    kind: PacketKind::PartialSum,
                    index: row,
                    payload: Payload::Partial(sum),
                    source_pe: heads[0].source_pe,
                };
                self.forward(level, index, packet, now, &mut step);
            }
        }
        step
    }
}

/// Root-to-leaves broadcast: one packet per cycle, one cycle per level, credit per PE queue.
pub(crate) struct DownPath {
    in_flight: VecDeque<(u64, Packet)>,
    credits: Vec<usize>,
    latency: u64,
}

impl DownPath {
    pub fn new(arch: &ArchConfig, queue_free: impl Fn(usize) -> usize) -> Self {
        DownPath {
            in_flight: VecDeque::new(),
            credits: (0..arch.num_pes).map(queue_free).collect(),
            latency: arch.tree_levels().expect("validated arch") as u64,
        }
    }

    pub fn can_send(&self) -> bool {
        self.credits.iter().all(|&c| c > 0)
    }

    pub fn send(&mut self, packet: Packet, now: u64) {
        self.credits.iter_mut().for_each(|c| *c -= 1);
        self.in_flight.push_back((now + self.latency, packet));
    }

    pub fn arrival(&mut self, now: u64) -> Option<Packet> {
        if self.in_flight.front().is_some_and(|(t, _)| *t <= now) {
            self.in_flight.pop_front().map(|(_, p)| p)
        } else {
            None
        }
    }

    pub fn return_credit(&mut self, pe: usize) {
        self.credits[pe] += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.in_flight.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sparsenn_core::numerics::{FxScalar, QFormat};

    fn act(index: usize, pe: usize) -> Packet {
        Packet {
            kind: PacketKind::ActBroadcast,
            index,
            payload: Payload::Value(FxScalar::new(1, QFormat::default())),
            source_pe: pe,
        }
    }

    #[test]
    fn credits_conserved_under_random_traffic() {
        let arch = ArchConfig::with_pes(16);
        let mut tree = UpTree::new(&arch, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pending: Vec<usize> = vec![0; 16];
        let mut next = 0;
        let (mut injected, mut out) = (0, 0);
        for now in 0..2000u64 {
            let stall = rng.random_bool(0.3);
            let step = tree.step_arbitrate(now, TieBreak::LowestPort, !stall);
            out += usize::from(step.out.is_some());
            assert!(tree.credits_conserved());
            for pe in 0..16 {
                if now < 1000 && rng.random_bool(0.03) {
                    pending[pe] += 1;
                }
                if pending[pe] > 0 && tree.can_inject(pe) {
                    tree.inject(pe, act(next, pe), now);
                    next += 1;
                    pending[pe] -= 1;
                    injected += 1;
                }
            }
            assert!(tree.credits_conserved());
            for r in tree.levels.iter().flatten() {
                assert!(r.ports.iter().all(|p| p.buffer.len() <= arch.router_buffer_depth));
            }
        }
        assert!(pending.iter().all(|&p| p == 0));
        assert_eq!(injected, out);
        assert!(tree.is_empty());
    }

    #[test]
    fn single_stream_sustains_one_per_cycle() {
        let arch = ArchConfig::default();
        let mut tree = UpTree::new(&arch, arch.router_pipeline_depth as u64);
        let mut outs = Vec::new();
        let mut next = 0;
        for now in 0..200u64 {
            if let Some(p) = tree.step_arbitrate(now, TieBreak::LowestPort, true).out {
                outs.push((now, p.index));
            }
            if next < 100 && tree.can_inject(5) {
                tree.inject(5, act(next, 5), now);
                next += 1;
            }
        }
        assert_eq!(outs.len(), 100);
        // Three hops of four cycles each, then one packet per cycle.
        assert_eq!(outs[0].0, 12);
        assert_eq!(outs[99].0, 111);
    }

    #[test]
    fn smallest_index_leaves_first() {
        let arch = ArchConfig::with_pes(4);
        let mut tree = UpTree::new(&arch, 1);
        tree.inject(0, act(9, 0), 0);
        tree.inject(1, act(3, 1), 0);
        tree.inject(2, act(5, 2), 0);
        let order: Vec<usize> = (1..4).filter_map(|t| tree.step_arbitrate(t, TieBreak::LowestPort, true).out).map(|p| p.index).collect();
        assert_eq!(order, vec![3, 5, 9]);
    }
}
