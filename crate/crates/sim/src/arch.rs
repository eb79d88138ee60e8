//! Structural description of the PE array and the radix-4 H-tree.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use sparsenn_core::numerics::{FxScalar, WideAccumulator};

use crate::SimError;

pub const ROUTER_RADIX: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemCapacities {
    pub w_bytes: usize,
    pub u_bytes: usize,
    pub v_bytes: usize,
}

impl Default for MemCapacities {
    fn default() -> Self {
        MemCapacities { w_bytes: 128 * 1024, u_bytes: 8 * 1024, v_bytes: 8 * 1024 }
    }
}

/// Mapping of V onto the array.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VSchedule {
    /// Column `j` of V lives with activation `j`; partial sums reduce in the tree.
    #[default]
    Column,
    /// Row `k` of V lives on PE `k mod P`; activations are broadcast as in the W phase.
    Row,
}

/// Winner among equal activation indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestPort,
    HighestPort,
}

/// Order in which a PE hands its local nonzeros to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InjectionOrder {
    /// Leading-nonzero scan, ascending slot order.
    #[default]
    Ascending,
    /// Seeded permutation per PE and phase.
    Shuffled { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub num_pes: usize,
    pub router_buffer_depth: usize,
    pub credits_per_link: usize,
    pub act_queue_depth: usize,
    pub activation_regs_per_pe: usize,
    pub pe_pipeline_depth: usize,
    /// Stages per hop; the V phase adds one accumulation stage.
    pub router_pipeline_depth: usize,
    pub clock_period_ns: f64,
    pub mem_capacities: MemCapacities,
    pub v_schedule: VSchedule,
    pub tie_break: TieBreak,
    pub injection_order: InjectionOrder,
    /// Cycles after which a phase is declared deadlocked.
    pub cycle_cap: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            num_pes: 64,
            router_buffer_depth: 4,
            credits_per_link: 4,
            act_queue_depth: 64,
            activation_regs_per_pe: 64,
            pe_pipeline_depth: 5,
            router_pipeline_depth: 4,
            clock_period_ns: 2.0,
            mem_capacities: MemCapacities::default(),
            v_schedule: VSchedule::Column,
            tie_break: TieBreak::LowestPort,
            injection_order: InjectionOrder::Ascending,
            cycle_cap: 50_000_000,
        }
    }
}

impl ArchConfig {
    pub fn with_pes(num_pes: usize) -> Self {
        ArchConfig { num_pes, ..ArchConfig::default() }
    }

    /// `log4(P)`, or `None` when `P` is not a positive power of four.
    pub fn tree_levels(&self) -> Option<usize> {
        let mut p = self.num_pes;
        let mut levels = 0;
        while p > 1 && p.is_multiple_of(ROUTER_RADIX) {
            p /= ROUTER_RADIX;
            levels += 1;
        }
        (p == 1 && levels >= 1).then_some(levels)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.tree_levels().is_none() {
            return bad(format!("num_pes must be a power of 4 and at least 4, got {}", self.num_pes));
        }
        for (name, v) in [
            ("router_buffer_depth", self.router_buffer_depth),
            ("credits_per_link", self.credits_per_link),
            ("act_queue_depth", self.act_queue_depth),
            ("activation_regs_per_pe", self.activation_regs_per_pe),
            ("pe_pipeline_depth", self.pe_pipeline_depth),
            ("router_pipeline_depth", self.router_pipeline_depth),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.credits_per_link > self.router_buffer_depth {
            return bad(format!(
                "credits_per_link ({}) exceeds router_buffer_depth ({})",
                self.credits_per_link, self.router_buffer_depth
            ));
        }
        if !(self.clock_period_ns.is_finite() && self.clock_period_ns > 0.0) {
            return bad(format!("clock_period_ns must be positive, got {}", self.clock_period_ns));
        }
        if self.cycle_cap == 0 {
            return bad("cycle_cap must be at least 1".into());
        }
        Ok(())
    }

    /// Number of routers in each level, leaves first.
    pub fn routers_per_level(&self) -> Vec<usize> {
        let levels = self.tree_levels().unwrap_or(0);
        (1..=levels).map(|l| self.num_pes / ROUTER_RADIX.pow(l as u32)).collect()
    }

    pub fn total_routers(&self) -> usize {
        self.routers_per_level().iter().sum()
    }

    /// Local slots needed for a vector of `len` elements.
    pub fn slots_for(&self, len: usize) -> usize {
        len.div_ceil(self.num_pes)
    }
}

/// Owner of output row `j` (W rows, U rows, activations).
pub fn map_row(j: usize, p: usize) -> usize {
    j % p
}

/// Owner of column `j` of V.
pub fn map_col(j: usize, p: usize) -> usize {
    j % p
}

/// Position of `j` inside its owner's local storage.
pub fn local_slot(j: usize, p: usize) -> usize {
    j / p
}

pub fn global_index(pe: usize, slot: usize, p: usize) -> usize {
    slot * p + pe
}

pub trait Nonzero {
    fn is_nonzero(&self) -> bool;
}

impl Nonzero for bool {
    fn is_nonzero(&self) -> bool {
        *self
    }
}

impl Nonzero for i16 {
    fn is_nonzero(&self) -> bool {
        *self != 0
    }
}

impl Nonzero for f64 {
    fn is_nonzero(&self) -> bool {
        *self != 0.0
    }
}

/// Leading nonzero detector: the first nonzero position at or after `start`.
pub fn lnzd<T: Nonzero>(xs: &[T], start: usize) -> Option<usize> {
    xs.get(start..)?.iter().position(Nonzero::is_nonzero).map(|i| i + start)
}

/// Port whose candidate carries the smallest index.
pub fn arbitrate(candidates: &[Option<usize>], tie: TieBreak) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (port, idx) in candidates.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        let better = match best {
            None => true,
            Some((b, _)) if idx < b => true,
            Some((b, _)) => idx == b && tie == TieBreak::HighestPort,
        };
        if better {
            best = Some((idx, port));
        }
    }
    best.map(|(_, port)| port)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    ActBroadcast,
    PartialSum,
    VResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Value(FxScalar),
    Partial(WideAccumulator),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub kind: PacketKind,
    pub index: usize,
    pub payload: Payload,
    pub source_pe: usize,
}

impl Packet {
    pub fn value(&self) -> Option<FxScalar> {
        match self.payload {
            Payload::Value(v) => Some(v),
            Payload::Partial(_) => None,
        }
    }

    pub fn partial(&self) -> Option<WideAccumulator> {
        match self.payload {
            Payload::Partial(a) => Some(a),
            Payload::Value(_) => None,
        }
    }
}

/// A buffered packet and the first cycle it may leave the buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flit {
    pub packet: Packet,
    pub ready_at: u64,
}

/// Input buffer of one child port together with the credit counter its sender holds.
#[derive(Clone, Debug)]
pub struct PortState {
    pub buffer: VecDeque<Flit>,
    pub credits: usize,
}

impl PortState {
    fn new(credits: usize) -> Self {
        PortState { buffer: VecDeque::with_capacity(credits), credits }
    }

    pub fn eligible_head(&self, now: u64) -> Option<&Flit> {
        self.buffer.front().filter(|f| f.ready_at <= now)
    }
}

#[derive(Clone, Debug)]
pub struct RouterState {
    /// 1 for leaves, `tree_levels` for the root.
    pub level: usize,
    pub index: usize,
    pub ports: [PortState; ROUTER_RADIX],
}

impl RouterState {
    pub fn new(level: usize, index: usize, credits: usize) -> Self {
        RouterState { level, index, ports: std::array::from_fn(|_| PortState::new(credits)) }
    }

    pub fn occupancy(&self) -> usize {
        self.ports.iter().map(|p| p.buffer.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy() == 0
    }

    /// Parent router index and the port this router feeds.
    pub fn parent(&self) -> (usize, usize) {
        (self.index / ROUTER_RADIX, self.index % ROUTER_RADIX)
    }
}

impl fmt::Display for RouterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "router L{}#{}:", self.level, self.index)?;
        for (i, p) in self.ports.iter().enumerate() {
            let heads: Vec<String> =
                p.buffer.iter().map(|fl| format!("{:?}{}@{}", fl.packet.kind, fl.packet.index, fl.ready_at)).collect();
            write!(f, " p{i}[credits={} buf={}]", p.credits, heads.join(","))?;
        }
        Ok(())
    }
}

/// Mutable state of one processing element.
#[derive(Clone, Debug)]
pub struct PeState {
    pub id: usize,
    regfiles: [Vec<i16>; 2],
    src: usize,
    pub act_queue: VecDeque<Packet>,
    /// One bit per locally mapped output row.
    pub predictor_bank: Vec<bool>,
    pub lnzd_cursor: usize,
}

impl PeState {
    pub fn new(id: usize, regs: usize) -> Self {
        PeState {
            id,
            regfiles: [vec![0; regs], vec![0; regs]],
            src: 0,
            act_queue: VecDeque::new(),
            predictor_bank: Vec::new(),
            lnzd_cursor: 0,
        }
    }

    pub fn src_regfile(&self) -> &[i16] {
        &self.regfiles[self.src]
    }

    pub fn src_regfile_mut(&mut self) -> &mut [i16] {
        &mut self.regfiles[self.src]
    }

    pub fn dst_regfile_mut(&mut self) -> &mut [i16] {
        &mut self.regfiles[1 - self.src]
    }

    pub fn swap_regfiles(&mut self) {
        self.src = 1 - self.src;
    }
}
