//! Phase engine: V, U and W phases over the PE array, and whole-network runs.

use std::collections::VecDeque;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsenn_core::model::fx::{finish_neuron, FxLayer, FxPredictor, FxVector, InferenceMode, QuantizedNetwork};
use sparsenn_core::numerics::{requantize_code, FxScalar, QFormat, SaturationCounter, WideAccumulator};
use sparsenn_core::PredictorMask;

use crate::arch::{
    global_index, lnzd, local_slot, map_row, ArchConfig, InjectionOrder, Packet, PacketKind, Payload, PeState,
    VSchedule,
};
use crate::network::{DownPath, UpTree};
use crate::report::{EventCounters, LayerReport, Phase, PhaseResult, SimReport};
use crate::SimError;

/// Checks that every layer of `net` fits the array's storage.
pub fn validate_network(arch: &ArchConfig, net: &QuantizedNetwork) -> Result<(), SimError> {
    arch.validate()?;
    let p = arch.num_pes;
    let regs = arch.activation_regs_per_pe;
    let cap = |limit: &str, required: usize, available: usize| {
        if required > available {
            Err(SimError::Capacity { limit: limit.to_string(), required, available })
        } else {
            Ok(())
        }
    };
    let caps = &arch.mem_capacities;
    for (l, layer) in net.layers.iter().enumerate() {
        let (m, n) = layer.w.shape();
        cap(&format!("activation registers per PE (layer {l} input)"), n.div_ceil(p), regs)?;
        cap(&format!("activation registers per PE (layer {l} output)"), m.div_ceil(p), regs)?;
        cap(&format!("W memory bytes per PE (layer {l})"), m.div_ceil(p) * n * 2, caps.w_bytes)?;
        if let Some(pred) = &layer.predictor {
            let r = pred.v.rows;
            cap(&format!("U memory bytes per PE (layer {l})"), m.div_ceil(p) * r * 2, caps.u_bytes)?;
            let v_bytes = match arch.v_schedule {
                VSchedule::Column => n.div_ceil(p) * r * 2,
                VSchedule::Row => r.div_ceil(p) * n * 2,
            };
            cap(&format!("V memory bytes per PE (layer {l})"), v_bytes, caps.v_bytes)?;
            cap(&format!("act_queue depth (layer {l} rank)"), r, arch.act_queue_depth)?;
        }
    }
    Ok(())
}

/// Cycle count and per-PE work of one broadcast round.
struct Broadcast {
    cycles: u64,
    busy: Vec<u64>,
    injected: u64,
    delivered: Vec<usize>,
    events: EventCounters,
}

/// The PE array, its ping-pong activation registers and the currently loaded activation vector.
pub struct Machine {
    arch: ArchConfig,
    pub pes: Vec<PeState>,
    act_format: QFormat,
    act_len: usize,
    /// Distinguishes phases when seeding shuffled injection orders.
    phase_serial: u64,
}

impl Machine {
    pub fn new(arch: ArchConfig) -> Result<Self, SimError> {
        arch.validate()?;
        let pes = (0..arch.num_pes).map(|i| PeState::new(i, arch.activation_regs_per_pe)).collect();
        Ok(Machine { arch, pes, act_format: QFormat::default(), act_len: 0, phase_serial: 0 })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn p(&self) -> usize {
        self.arch.num_pes
    }

    /// Distributes `x` over the source register files by `map_row`.
    pub fn load_input(&mut self, x: &FxVector) -> Result<(), SimError> {
        let p = self.p();
        if x.len().div_ceil(p) > self.arch.activation_regs_per_pe {
            return Err(SimError::Capacity {
                limit: "activation registers per PE (input)".into(),
                required: x.len().div_ceil(p),
                available: self.arch.activation_regs_per_pe,
            });
        }
        for pe in &mut self.pes {
            pe.src_regfile_mut().fill(0);
        }
        for (j, &code) in x.codes.iter().enumerate() {
            self.pes[map_row(j, p)].src_regfile_mut()[local_slot(j, p)] = code;
        }
        self.act_format = x.format;
        self.act_len = x.len();
        Ok(())
    }

    /// The activation vector currently held in the source register files.
    pub fn activations(&self) -> FxVector {
        let p = self.p();
        let codes = (0..self.act_len).map(|j| self.pes[map_row(j, p)].src_regfile()[local_slot(j, p)]).collect();
        FxVector { codes, format: self.act_format }
    }

    fn local_rows(&self, pe: usize, m: usize) -> usize {
        let p = self.p();
        if pe < m {
            (m - pe).div_ceil(p)
        } else {
            0
        }
    }

    /// Nonzero source slots of `pe` in injection order.
    fn local_nonzeros(&self, pe: usize) -> Vec<usize> {
        let regs = self.pes[pe].src_regfile();
        let mut slots = Vec::new();
        let mut cursor = 0;
        while let Some(s) = lnzd(regs, cursor) {
            slots.push(s);
            cursor = s + 1;
        }
        if let InjectionOrder::Shuffled { seed } = self.arch.injection_order {
            let stream = (self.phase_serial << 20) ^ pe as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            slots.shuffle(&mut rng);
        }
        slots
    }

    fn act_packets(&self) -> Vec<VecDeque<Packet>> {
        let p = self.p();
        (0..p)
            .map(|pe| {
                self.local_nonzeros(pe)
                    .into_iter()
                    .map(|s| Packet {
                        kind: PacketKind::ActBroadcast,
                        index: global_index(pe, s, p),
                        payload: Payload::Value(FxScalar::new(self.pes[pe].src_regfile()[s], self.act_format)),
                        source_pe: pe,
                    })
                    .collect()
            })
            .collect()
    }

    /// Sets every predictor bit for a layer of `m` rows.
    pub fn set_dense_banks(&mut self, m: usize) {
        for pe in 0..self.p() {
            let rows = self.local_rows(pe, m);
            self.pes[pe].predictor_bank = vec![true; rows];
        }
    }

    /// Predictor bank contents as a mask over the `m` output rows.
    pub fn predictor_mask(&self, m: usize) -> PredictorMask {
        let p = self.p();
        PredictorMask { bits: (0..m).map(|i| self.pes[map_row(i, p)].predictor_bank[local_slot(i, p)]).collect() }
    }

    /// Broadcasts `injections` through the arbitrated tree. Each delivered packet costs a PE one
    /// cycle per set bit of `banks[pe]` (at least one cycle). With `retain`, packets stay queued.
    fn broadcast(
        &mut self,
        phase: Phase,
        mut injections: Vec<VecDeque<Packet>>,
        banks: &[Vec<bool>],
        retain: bool,
        drain: u64,
        mut mac: impl FnMut(usize, usize, &Packet),
    ) -> Result<Broadcast, SimError> {
        let p = self.p();
        let arch = self.arch.clone();
        let total: usize = injections.iter().map(VecDeque::len).sum();
        let down_hops = arch.total_routers() as u64;
        let mut up = UpTree::new(&arch, arch.router_pipeline_depth as u64);
        let mut down = DownPath::new(&arch, |pe| arch.act_queue_depth - self.pes[pe].act_queue.len());
        let mut busy = vec![0u64; p];
        let mut current: Vec<Option<(Packet, usize)>> = vec![None; p];
        let mut processed = vec![0usize; p];
        let mut delivered = Vec::with_capacity(total);
        let mut ev = EventCounters::default();
        if total == 0 {
            return Ok(Broadcast { cycles: drain, busy, injected: 0, delivered, events: ev });
        }
        let mut now = 0u64;
        loop {
            let step = up.step_arbitrate(now, arch.tie_break, down.can_send());
            ev.router_hops += step.hops;
            if let Some(pk) = step.out {
                down.send(pk, now);
                ev.router_hops += down_hops;
            }
            if !up.credits_conserved() {
                return Err(SimError::Config(format!("credit invariant broken at cycle {now}\n{}", up.dump())));
            }
            while let Some(pk) = down.arrival(now) {
                for pe in &mut self.pes {
                    pe.act_queue.push_back(pk);
                }
                ev.queue_ops += p as u64;
                delivered.push(pk.index);
            }
            if !retain {
                for pe in 0..p {
                    if current[pe].is_none() {
                        if let Some(pk) = self.pes[pe].act_queue.pop_front() {
                            ev.queue_ops += 1;
                            down.return_credit(pe);
                            match lnzd(&banks[pe], 0) {
                                Some(row) => current[pe] = Some((pk, row)),
                                None => processed[pe] += 1,
                            }
                        }
                    }
                    if let Some((pk, row)) = current[pe] {
                        mac(pe, row, &pk);
                        busy[pe] += 1;
                        ev.macs += 1;
                        self.pes[pe].lnzd_cursor = row + 1;
                        match lnzd(&banks[pe], row + 1) {
                            Some(next) => current[pe] = Some((pk, next)),
                            None => {
                                current[pe] = None;
                                processed[pe] += 1;
                            }
                        }
                    }
                }
            }
            for (pe, queue) in injections.iter_mut().enumerate() {
                if !queue.is_empty() && up.can_inject(pe) {
                    up.inject(pe, queue.pop_front().expect("non-empty"), now);
                    ev.regfile_ops += 1;
                }
            }
            let done = if retain { delivered.len() == total } else { processed.iter().all(|&c| c == total) };
            if done {
                debug_assert!(up.is_empty() && down.is_empty());
                return Ok(Broadcast { cycles: now + 1 + drain, busy, injected: total as u64, delivered, events: ev });
            }
            now += 1;
            if now >= arch.cycle_cap {
                return Err(SimError::Deadlock { phase, cycle: now, dump: up.dump() });
            }
        }
    }

    /// Low-rank projection `va = V a`; results are queued at every PE.
    pub fn run_v_phase(&mut self, pred: &FxPredictor) -> Result<(PhaseResult, FxVector), SimError> {
        self.phase_serial += 1;
        let (r, n) = pred.v.shape();
        if n != self.act_len {
            return Err(SimError::Input(format!("V has {n} columns, activations have {}", self.act_len)));
        }
        if r > self.arch.act_queue_depth {
            return Err(SimError::Capacity { limit: "act_queue depth".into(), required: r, available: self.arch.act_queue_depth });
        }
        let (result, va) = match self.arch.v_schedule {
            VSchedule::Column => self.v_phase_column(pred)?,
            VSchedule::Row => self.v_phase_row(pred)?,
        };
        debug!("V phase: r={r} n={n} cycles={} util={:.3}", result.cycles, result.utilization());
        Ok((result, va))
    }

    fn v_phase_column(&mut self, pred: &FxPredictor) -> Result<(PhaseResult, FxVector), SimError> {
        let p = self.p();
        let r = pred.v.rows;
        let arch = self.arch.clone();
        let frac = WideAccumulator::for_product(pred.v.format, self.act_format).frac_bits;
        let columns: Vec<Vec<usize>> = (0..p).map(|pe| self.local_nonzeros(pe)).collect();
        let mut accs = vec![vec![WideAccumulator::zero(frac); r]; p];
        // (next column position, next row) per PE.
        let mut cursor = vec![(0usize, 0usize); p];
        let mut outbox: Vec<VecDeque<(u64, Packet)>> = vec![VecDeque::new(); p];
        let partial = |pe: usize, k: usize, acc: WideAccumulator| Packet {
            kind: PacketKind::PartialSum,
            index: k,
            payload: Payload::Partial(acc),
            source_pe: pe,
        };
        for pe in 0..p {
            if columns[pe].is_empty() {
                outbox[pe].extend((0..r).map(|k| (0, partial(pe, k, WideAccumulator::zero(frac)))));
            }
        }
        let mut up = UpTree::new(&arch, arch.router_pipeline_depth as u64 + 1);
        let mut down = DownPath::new(&arch, |pe| arch.act_queue_depth - self.pes[pe].act_queue.len());
        let down_hops = arch.total_routers() as u64;
        let mut sat = SaturationCounter::default();
        let mut va = vec![None; r];
        let mut delivered = Vec::with_capacity(r);
        let mut busy = vec![0u64; p];
        let mut ev = EventCounters::default();
        let mut now = 0u64;
        loop {
            let step = up.step_reduce(now, down.can_send());
            ev.router_hops += step.hops;
            if let Some(pk) = step.out {
                let acc = pk.partial().expect("reduction yields partial sums");
                let (code, s) = requantize_code(acc, pred.va_format);
                sat.record(s);
                let result = Packet {
                    kind: PacketKind::VResult,
                    index: pk.index,
                    payload: Payload::Value(FxScalar::new(code, pred.va_format)),
                    source_pe: pk.source_pe,
                };
                down.send(result, now);
                ev.router_hops += down_hops;
            }
            if !up.credits_conserved() {
                return Err(SimError::Config(format!("credit invariant broken at cycle {now}\n{}", up.dump())));
            }
            while let Some(pk) = down.arrival(now) {
                for pe in &mut self.pes {
                    pe.act_queue.push_back(pk);
                }
                ev.queue_ops += p as u64;
                va[pk.index] = pk.value().map(|v| v.code);
                delivered.push(pk.index);
            }
            for pe in 0..p {
                let (pos, k) = cursor[pe];
                let Some(&slot) = columns[pe].get(pos) else { continue };
                let j = global_index(pe, slot, p);
                if k == 0 {
                    ev.regfile_ops += 1;
                }
                accs[pe][k].mac(pred.v.get(k, j), self.pes[pe].src_regfile()[slot]);
                busy[pe] += 1;
                ev.macs += 1;
                ev.v_mem_reads += 1;
                if pos + 1 == columns[pe].len() {
                    outbox[pe].push_back((now + arch.pe_pipeline_depth as u64, partial(pe, k, accs[pe][k])));
                }
                cursor[pe] = if k + 1 == r { (pos + 1, 0) } else { (pos, k + 1) };
            }
            for pe in 0..p {
                if outbox[pe].front().is_some_and(|(t, _)| *t <= now) && up.can_inject(pe) {
                    let (_, pk) = outbox[pe].pop_front().expect("non-empty");
                    up.inject(pe, pk, now);
                }
            }
            if delivered.len() == r {
                break;
            }
            now += 1;
            if now >= arch.cycle_cap {
                return Err(SimError::Deadlock { phase: Phase::V, cycle: now, dump: up.dump() });
            }
        }
        ev.saturations = sat.count();
        let codes: Vec<i16> = va.into_iter().map(|c| c.expect("every row delivered")).collect();
        let result = PhaseResult {
            phase: Phase::V,
            cycles: now + 1,
            busy,
            injected_packets: (p * r) as u64,
            delivered,
            outputs: codes.clone(),
            events: ev,
        };
        Ok((result, FxVector { codes, format: pred.va_format }))
    }

    /// Comparison mode: V rows live on PEs like W rows; the result is gathered and rebroadcast.
    fn v_phase_row(&mut self, pred: &FxPredictor) -> Result<(PhaseResult, FxVector), SimError> {
        let p = self.p();
        let r = pred.v.rows;
        let frac = WideAccumulator::for_product(pred.v.format, self.act_format).frac_bits;
        let banks: Vec<Vec<bool>> = (0..p).map(|pe| vec![true; self.local_rows(pe, r)]).collect();
        let mut accs: Vec<Vec<WideAccumulator>> = banks.iter().map(|b| vec![WideAccumulator::zero(frac); b.len()]).collect();
        let injections = self.act_packets();
        let v = &pred.v;
        let compute = self.broadcast(Phase::V, injections, &banks, false, self.arch.pe_pipeline_depth as u64, |pe, row, pk| {
            let code = pk.value().expect("activation packet").code;
            accs[pe][row].mac(v.get(global_index(pe, row, p), pk.index), code);
        })?;
        let mut sat = SaturationCounter::default();
        let mut codes = vec![0i16; r];
        let results: Vec<VecDeque<Packet>> = (0..p)
            .map(|pe| {
                accs[pe]
                    .iter()
                    .enumerate()
                    .map(|(slot, &acc)| {
                        let k = global_index(pe, slot, p);
                        let (code, s) = requantize_code(acc, pred.va_format);
                        sat.record(s);
                        codes[k] = code;
                        Packet {
                            kind: PacketKind::VResult,
                            index: k,
                            payload: Payload::Value(FxScalar::new(code, pred.va_format)),
                            source_pe: pe,
                        }
                    })
                    .collect()
            })
            .collect();
        let empty = vec![Vec::new(); p];
        let gather = self.broadcast(Phase::V, results, &empty, true, 0, |_, _, _| {})?;
        let mut events = compute.events;
        events.v_mem_reads = compute.events.macs;
        events += gather.events;
        events.saturations = sat.count();
        let result = PhaseResult {
            phase: Phase::V,
            cycles: compute.cycles + gather.cycles,
            busy: compute.busy,
            injected_packets: compute.injected + gather.injected,
            delivered: gather.delivered,
            outputs: codes.clone(),
            events,
        };
        Ok((result, FxVector { codes, format: pred.va_format }))
    }

    /// Predictor bits `U va > 0` from the queued V results; written to each PE's bank.
    pub fn run_u_phase(&mut self, pred: &FxPredictor) -> Result<(PhaseResult, PredictorMask), SimError> {
        let p = self.p();
        let (m, r) = pred.u.shape();
        let drain = self.arch.pe_pipeline_depth as u64;
        let mut busy = vec![0u64; p];
        let mut span = 0u64;
        let mut ev = EventCounters::default();
        for pe in 0..p {
            let rows = self.local_rows(pe, m);
            let frac = self.pes[pe]
                .act_queue
                .front()
                .and_then(Packet::value)
                .map(|v| WideAccumulator::for_product(pred.u.format, v.format).frac_bits)
                .unwrap_or(0);
            let mut accs = vec![WideAccumulator::zero(frac); rows];
            let mut t = 0u64;
            for _ in 0..r {
                let pk = self.pes[pe].act_queue.pop_front().expect("U phase needs r queued V results");
                assert_eq!(pk.kind, PacketKind::VResult, "unexpected packet in U phase queue");
                ev.queue_ops += 1;
                let va = pk.value().expect("V result carries a value").code;
                for (slot, acc) in accs.iter_mut().enumerate() {
                    acc.mac(pred.u.get(global_index(pe, slot, p), pk.index), va);
                }
                busy[pe] += rows as u64;
                t += rows.max(1) as u64;
            }
            span = span.max(t);
            ev.macs += busy[pe];
            ev.u_mem_reads += busy[pe];
            ev.regfile_ops += rows as u64;
            self.pes[pe].predictor_bank = accs.iter().map(|a| a.acc > 0).collect();
            self.pes[pe].lnzd_cursor = 0;
        }
        let mask = self.predictor_mask(m);
        let result = PhaseResult {
            phase: Phase::U,
            cycles: span + drain,
            busy,
            injected_packets: 0,
            delivered: Vec::new(),
            outputs: mask.bits.iter().map(|&b| i16::from(b)).collect(),
            events: ev,
        };
        Ok((result, mask))
    }

    /// Masked `W a` from the predictor banks; outputs land in the destination registers, which then
    /// become the source for the next layer.
    pub fn run_w_phase(&mut self, layer: &FxLayer, apply_relu: bool) -> Result<(PhaseResult, FxVector), SimError> {
        self.phase_serial += 1;
        let p = self.p();
        let (m, n) = layer.w.shape();
        if n != self.act_len {
            return Err(SimError::Input(format!("W has {n} columns, activations have {}", self.act_len)));
        }
        if m.div_ceil(p) > self.arch.activation_regs_per_pe {
            return Err(SimError::Capacity {
                limit: "activation registers per PE (output)".into(),
                required: m.div_ceil(p),
                available: self.arch.activation_regs_per_pe,
            });
        }
        for pe in 0..p {
            let rows = self.local_rows(pe, m);
            if self.pes[pe].predictor_bank.len() != rows {
                return Err(SimError::Input(format!(
                    "PE {pe} predictor bank has {} bits for {rows} local rows",
                    self.pes[pe].predictor_bank.len()
                )));
            }
        }
        let frac = layer.w_accumulator(self.act_format).frac_bits;
        let banks: Vec<Vec<bool>> = self.pes.iter().map(|pe| pe.predictor_bank.clone()).collect();
        let mut accs: Vec<Vec<WideAccumulator>> = banks.iter().map(|b| vec![WideAccumulator::zero(frac); b.len()]).collect();
        let injections = self.act_packets();
        let w = &layer.w;
        let bc = self.broadcast(Phase::W, injections, &banks, false, self.arch.pe_pipeline_depth as u64, |pe, row, pk| {
            let code = pk.value().expect("activation packet").code;
            accs[pe][row].mac(w.get(global_index(pe, row, p), pk.index), code);
        })?;
        let mut ev = bc.events;
        ev.w_mem_reads = ev.macs;
        let mut sat = SaturationCounter::default();
        let mut codes = vec![0i16; m];
        for pe in 0..p {
            let state = &mut self.pes[pe];
            state.dst_regfile_mut().fill(0);
            for (slot, acc) in accs[pe].iter().enumerate() {
                let code = if banks[pe][slot] { finish_neuron(*acc, layer.out_format, apply_relu, &mut sat) } else { 0 };
                state.dst_regfile_mut()[slot] = code;
                codes[global_index(pe, slot, p)] = code;
            }
            ev.regfile_ops += accs[pe].len() as u64;
            state.swap_regfiles();
        }
        ev.saturations = sat.count();
        self.act_format = layer.out_format;
        self.act_len = m;
        debug!("W phase: {m}x{n} packets={} cycles={} util={:.3}", bc.injected, bc.cycles, bc.busy.iter().sum::<u64>() as f64 / (p as f64 * bc.cycles as f64));
        let result = PhaseResult {
            phase: Phase::W,
            cycles: bc.cycles,
            busy: bc.busy,
            injected_packets: bc.injected,
            delivered: bc.delivered,
            outputs: codes.clone(),
            events: ev,
        };
        Ok((result, FxVector { codes, format: layer.out_format }))
    }
}

/// Runs every layer of `net` on `input`. Phases are barrier-separated, so layer cycles add up.
pub fn run_network(
    net: &QuantizedNetwork,
    input: &FxVector,
    arch: &ArchConfig,
    mode: InferenceMode,
) -> Result<SimReport, SimError> {
    validate_network(arch, net)?;
    if input.format != net.input_format {
        return Err(SimError::Input(format!("input format {} differs from network input format {}", input.format, net.input_format)));
    }
    let n0 = net.layers.first().map(|l| l.w.cols).unwrap_or(0);
    if input.len() != n0 {
        return Err(SimError::Input(format!("input has {} values, first layer expects {n0}", input.len())));
    }
    let mut machine = Machine::new(arch.clone())?;
    machine.load_input(input)?;
    let last = net.layers.len().saturating_sub(1);
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let mut phases = Vec::with_capacity(3);
        let (mut va, mut mask) = (None, None);
        match (&layer.predictor, mode) {
            (Some(pred), InferenceMode::UvOn) => {
                let (pv, v) = machine.run_v_phase(pred)?;
                let (pu, bits) = machine.run_u_phase(pred)?;
                phases.extend([pv, pu]);
                va = Some(v);
                mask = Some(bits);
            }
            _ => machine.set_dense_banks(layer.w.rows),
        }
        let (pw, output) = machine.run_w_phase(layer, l != last)?;
        phases.push(pw);
        layers.push(LayerReport { layer: l, phases, va, mask, output });
    }
    let total_cycles = layers.iter().map(LayerReport::cycles).sum();
    Ok(SimReport { mode, num_pes: arch.num_pes, layers, total_cycles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsenn_core::model::fx::FxMatrix;
    use sparsenn_core::NetworkSpec;

    fn q(f: u32) -> QFormat {
        QFormat::new(f).unwrap()
    }

    fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> i16) -> FxMatrix {
        let codes = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        FxMatrix { rows, cols, codes, format: q(10) }
    }

    fn predictor(m: usize, n: usize, r: usize, u: i16) -> FxPredictor {
        FxPredictor {
            u: matrix(m, r, |_, _| u),
            v: matrix(r, n, |k, j| (k as i16 + 1) * if j % 2 == 0 { 3 } else { -1 }),
            va_format: q(8),
        }
    }

    fn machine(p: usize, x: &[i16]) -> Machine {
        let mut m = Machine::new(ArchConfig::with_pes(p)).unwrap();
        m.load_input(&FxVector { codes: x.to_vec(), format: q(8) }).unwrap();
        m
    }

    #[test]
    fn hand_stepped_v_phase_on_four_pes() {
        // One nonzero per PE, r = 2, a single root router.
        //   cycles 0,1   every PE issues the MACs for rows 0 and 1
        //   cycles 5,6   partial sums leave the 5-deep PE pipeline and enter the root
        //   cycles 10,11 the root (4 + 1 accumulate stages) reduces rows 0 and 1
        //   cycles 11,12 the results reach the PEs one level below
        let mut m = machine(4, &[100, -50, 25, 7]);
        let pred = predictor(4, 4, 2, 1);
        let (res, va) = m.run_v_phase(&pred).unwrap();
        assert_eq!(res.cycles, 13);
        assert_eq!(res.busy, vec![2; 4]);
        assert_eq!(res.delivered, vec![0, 1]);
        let mut sat = SaturationCounter::default();
        let golden = sparsenn_core::model::fx::golden_va(&pred, &m.activations(), &mut sat);
        assert_eq!(va, golden);
        assert!(m.pes.iter().all(|pe| pe.act_queue.len() == 2));
    }

    #[test]
    fn zero_input_v_phase_does_no_work() {
        let mut m = machine(16, &[0; 40]);
        let (res, va) = m.run_v_phase(&predictor(8, 40, 3, 1)).unwrap();
        assert_eq!(va.codes, vec![0; 3]);
        assert!(res.busy.iter().all(|&b| b == 0));
        assert_eq!(res.events.v_mem_reads, 0);
    }

    #[test]
    fn zero_u_gives_zero_bits() {
        let mut m = machine(4, &[3, 0, 9, -2, 5, 1]);
        let pred = predictor(10, 6, 2, 0);
        m.run_v_phase(&pred).unwrap();
        let (_, mask) = m.run_u_phase(&pred).unwrap();
        assert_eq!(mask.bits, vec![false; 10]);
        assert!(m.pes.iter().all(|pe| pe.act_queue.is_empty()));
    }

    #[test]
    fn u_phase_busy_is_rank_times_local_rows() {
        let x: Vec<i16> = (0..64).map(|i| i as i16 - 20).collect();
        let mut m = machine(64, &x);
        let pred = predictor(64, 64, 15, 2);
        m.run_v_phase(&pred).unwrap();
        let (res, _) = m.run_u_phase(&pred).unwrap();
        assert_eq!(res.busy, vec![15; 64]);
        assert_eq!(res.cycles, 15 + 5);
    }

    #[test]
    fn all_zero_mask_skips_w() {
        let mut m = machine(4, &[1, 2, 3, 4, 5]);
        let layer = FxLayer { w: matrix(9, 5, |i, j| (i * 7 + j) as i16), predictor: None, out_format: q(6) };
        m.set_dense_banks(9);
        for pe in &mut m.pes {
            pe.predictor_bank.iter_mut().for_each(|b| *b = false);
        }
        let (res, out) = m.run_w_phase(&layer, true).unwrap();
        assert!(res.busy.iter().all(|&b| b == 0));
        assert_eq!(res.events.w_mem_reads, 0);
        assert_eq!(out.codes, vec![0; 9]);
    }

    #[test]
    fn w_phase_follows_work_law() {
        let x: Vec<i16> = (0..20).map(|i| if i % 3 == 0 { 0 } else { i as i16 }).collect();
        let nnz = x.iter().filter(|&&c| c != 0).count() as u64;
        let mut m = machine(4, &x);
        let layer = FxLayer { w: matrix(13, 20, |i, j| (i as i16 - 6) * (j as i16 % 5)), predictor: None, out_format: q(4) };
        m.set_dense_banks(13);
        m.pes[1].predictor_bank[1] = false;
        let pops: Vec<u64> = m.pes.iter().map(|pe| pe.predictor_bank.iter().filter(|&&b| b).count() as u64).collect();
        let (res, _) = m.run_w_phase(&layer, true).unwrap();
        for pe in 0..4 {
            assert_eq!(res.busy[pe], nnz * pops[pe]);
        }
        assert!(res.cycles >= res.max_busy() + 5);
        let mut sorted = res.delivered.clone();
        sorted.sort_unstable();
        let expect: Vec<usize> = (0..20).filter(|j| x[*j] != 0).collect();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn capacity_is_named() {
        let spec = NetworkSpec::dense(vec![300, 4]).unwrap();
        let net = QuantizedNetwork {
            spec,
            input_format: q(8),
            layers: vec![FxLayer { w: matrix(4, 300, |_, _| 1), predictor: None, out_format: q(8) }],
        };
        let err = validate_network(&ArchConfig::with_pes(4), &net).unwrap_err();
        match err {
            SimError::Capacity { limit, required, available } => {
                assert!(limit.contains("activation registers"));
                assert_eq!((required, available), (75, 64));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
