//! Event-count energy model.

use serde::{Deserialize, Serialize};

use crate::report::{EventCounters, SimReport};
use crate::SimError;

/// Per-event energies in pJ. The defaults are illustrative, not measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub w_mem_read: f64,
    pub u_mem_read: f64,
    pub v_mem_read: f64,
    pub mac: f64,
    pub regfile_op: f64,
    pub router_hop: f64,
    pub queue_op: f64,
    pub clock_period_ns: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            w_mem_read: 20.0,
            u_mem_read: 2.0,
            v_mem_read: 2.0,
            mac: 1.0,
            regfile_op: 0.2,
            router_hop: 0.5,
            queue_op: 0.2,
            clock_period_ns: 2.0,
        }
    }
}

impl EnergyConfig {
    pub fn zero() -> Self {
        EnergyConfig {
            w_mem_read: 0.0,
            u_mem_read: 0.0,
            v_mem_read: 0.0,
            mac: 0.0,
            regfile_op: 0.0,
            router_hop: 0.0,
            queue_op: 0.0,
            clock_period_ns: 2.0,
        }
    }

    /// Large-memory reads dominate everything else.
    pub fn w_read_dominated() -> Self {
        EnergyConfig { w_mem_read: 100.0, u_mem_read: 1.0, v_mem_read: 1.0, mac: 0.5, regfile_op: 0.05, router_hop: 0.05, queue_op: 0.05, clock_period_ns: 2.0 }
    }

    pub fn scaled(&self, k: f64) -> Self {
        EnergyConfig {
            w_mem_read: self.w_mem_read * k,
            u_mem_read: self.u_mem_read * k,
            v_mem_read: self.v_mem_read * k,
            mac: self.mac * k,
            regfile_op: self.regfile_op * k,
            router_hop: self.router_hop * k,
            queue_op: self.queue_op * k,
            clock_period_ns: self.clock_period_ns,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("w_mem_read", self.w_mem_read),
            ("u_mem_read", self.u_mem_read),
            ("v_mem_read", self.v_mem_read),
            ("mac", self.mac),
            ("regfile_op", self.regfile_op),
            ("router_hop", self.router_hop),
            ("queue_op", self.queue_op),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Config(format!("energy {name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.clock_period_ns.is_finite() && self.clock_period_ns > 0.0) {
            return Err(SimError::Config(format!("clock_period_ns must be positive, got {}", self.clock_period_ns)));
        }
        Ok(())
    }

    pub fn event_energy_pj(&self, e: &EventCounters) -> f64 {
        e.w_mem_reads as f64 * self.w_mem_read
            + e.u_mem_reads as f64 * self.u_mem_read
            + e.v_mem_reads as f64 * self.v_mem_read
            + e.macs as f64 * self.mac
            + e.regfile_ops as f64 * self.regfile_op
            + e.router_hops as f64 * self.router_hop
            + e.queue_ops as f64 * self.queue_op
    }

    /// pJ per ns is mW.
    pub fn power_mw(&self, energy_pj: f64, cycles: u64) -> f64 {
        if cycles == 0 {
            return 0.0;
        }
        energy_pj / (cycles as f64 * self.clock_period_ns)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub cycles: u64,
    pub energy_uj: f64,
    pub power_mw: f64,
}

pub fn energy_report(report: &SimReport, cfg: &EnergyConfig) -> EnergyReport {
    let pj = cfg.event_energy_pj(&report.events());
    EnergyReport { cycles: report.total_cycles, energy_uj: pj * 1e-6, power_mw: cfg.power_mw(pj, report.total_cycles) }
}
