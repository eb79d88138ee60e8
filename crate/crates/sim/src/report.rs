//! Phase and run reports, with CSV export.

use std::fmt;
use std::io::Write;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use sparsenn_core::model::fx::{FxVector, InferenceMode};
use sparsenn_core::PredictorMask;

use crate::energy::EnergyConfig;
use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    V,
    U,
    W,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::V => "V",
            Phase::U => "U",
            Phase::W => "W",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounters {
    pub w_mem_reads: u64,
    pub u_mem_reads: u64,
    pub v_mem_reads: u64,
    pub macs: u64,
    pub regfile_ops: u64,
    pub router_hops: u64,
    pub queue_ops: u64,
    pub saturations: u64,
}

impl EventCounters {
    pub fn uv_mem_reads(&self) -> u64 {
        self.u_mem_reads + self.v_mem_reads
    }
}

impl AddAssign for EventCounters {
    fn add_assign(&mut self, o: Self) {
        self.w_mem_reads += o.w_mem_reads;
        self.u_mem_reads += o.u_mem_reads;
        self.v_mem_reads += o.v_mem_reads;
        self.macs += o.macs;
        self.regfile_ops += o.regfile_ops;
        self.router_hops += o.router_hops;
        self.queue_ops += o.queue_ops;
        self.saturations += o.saturations;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: Phase,
    pub cycles: u64,
    /// MAC-issue cycles per PE.
    pub busy: Vec<u64>,
    pub injected_packets: u64,
    /// Packet indices in the order every PE received them.
    pub delivered: Vec<usize>,
    /// `va` codes for V, predictor bits for U, output codes for W.
    pub outputs: Vec<i16>,
    pub events: EventCounters,
}

impl PhaseResult {
    pub fn max_busy(&self) -> u64 {
        self.busy.iter().copied().max().unwrap_or(0)
    }

    /// Mean fraction of cycles in which a PE issued a MAC.
    pub fn utilization(&self) -> f64 {
        if self.cycles == 0 || self.busy.is_empty() {
            return 0.0;
        }
        self.busy.iter().sum::<u64>() as f64 / (self.busy.len() as f64 * self.cycles as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub phases: Vec<PhaseResult>,
    pub va: Option<FxVector>,
    pub mask: Option<PredictorMask>,
    pub output: FxVector,
}

impl LayerReport {
    pub fn cycles(&self) -> u64 {
        self.phases.iter().map(|p| p.cycles).sum()
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseResult> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn events(&self) -> EventCounters {
        let mut e = EventCounters::default();
        for p in &self.phases {
            e += p.events;
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: InferenceMode,
    pub num_pes: usize,
    pub layers: Vec<LayerReport>,
    pub total_cycles: u64,
}

pub const CSV_HEADER: [&str; 15] = [
    "layer",
    "phase",
    "cycles",
    "utilization",
    "w_mem_reads",
    "u_mem_reads",
    "v_mem_reads",
    "macs",
    "regfile_ops",
    "router_hops",
    "queue_ops",
    "saturations",
    "energy_pj",
    "power_mw",
    "mode",
];

impl SimReport {
    pub fn logits(&self) -> &FxVector {
        &self.layers.last().expect("report without layers").output
    }

    pub fn events(&self) -> EventCounters {
        let mut e = EventCounters::default();
        for l in &self.layers {
            e += l.events();
        }
        e
    }

    pub fn phases(&self) -> impl Iterator<Item = (usize, &PhaseResult)> {
        self.layers.iter().flat_map(|l| l.phases.iter().map(move |p| (l.layer, p)))
    }

    /// One row per layer and phase. Energy columns are empty without an energy config.
    pub fn write_csv<W: Write>(&self, out: W, energy: Option<&EnergyConfig>) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for (layer, p) in self.phases() {
            let e = &p.events;
            let (energy_pj, power) = match energy {
                Some(cfg) => {
                    let pj = cfg.event_energy_pj(e);
                    (format!("{pj:.3}"), format!("{:.6}", cfg.power_mw(pj, p.cycles)))
                }
                None => (String::new(), String::new()),
            };
            w.write_record([
                layer.to_string(),
                p.phase.to_string(),
                p.cycles.to_string(),
                format!("{:.6}", p.utilization()),
                e.w_mem_reads.to_string(),
                e.u_mem_reads.to_string(),
                e.v_mem_reads.to_string(),
                e.macs.to_string(),
                e.regfile_ops.to_string(),
                e.router_hops.to_string(),
                e.queue_ops.to_string(),
                e.saturations.to_string(),
                energy_pj,
                power,
                self.mode.as_str().to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
