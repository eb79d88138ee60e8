//! The harness commands. Each writes its artifacts and a manifest into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsenn_core::checkpoint::{load_params, save_params};
use sparsenn_core::data::{load_amat, load_idx};
use sparsenn_core::model::fx::{forward_fx_golden, quantize_network, FxVector, InferenceMode, QuantizedNetwork};
use sparsenn_core::numerics::SaturationCounter;
use sparsenn_core::train::{evaluate, init_params, train, PredictorMode, TrainError, TrainReport};
use sparsenn_core::{Dataset, NetworkParams, SynthSpec};
use sparsenn_sim::{map_row, run_network, EnergyConfig, Phase, SimReport};

use crate::config::{ConfigError, DatasetConfig, ExperimentConfig};
use crate::manifest::Manifest;

pub const CHECKPOINT: &str = "checkpoint.spnn";
pub const TRAIN_CSV_PREFIX: [&str; 3] = ["epoch", "loss", "ter"];
pub const SWEEP_CSV_HEADER: [&str; 7] = ["mode", "rank", "epoch", "loss", "ter", "rho_mean", "params"];
pub const SIM_LAYER_CSV_HEADER: [&str; 15] = [
    "layer",
    "rho",
    "uv_off_cycles",
    "uv_on_cycles",
    "cycle_reduction",
    "w_off_cycles",
    "w_on_cycles",
    "w_cycle_reduction",
    "law_reduction",
    "predictor_cycles",
    "uv_off_energy_pj",
    "uv_on_energy_pj",
    "uv_off_power_mw",
    "uv_on_power_mw",
    "power_ratio",
];

/// Training and test splits described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic { train, test, noise, prototypes, background } => {
            let spec = SynthSpec {
                n: train + test,
                dim: cfg.network.layer_sizes[0],
                classes: *cfg.network.layer_sizes.last().expect("validated"),
                noise: *noise,
                prototypes: *prototypes,
                background: *background,
            };
            spec.generate(cfg.seed).split_at(*train)
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
            let tr = load_idx(train_images, train_labels).context("loading training IDX files")?;
            let te = load_idx(test_images, test_labels).context("loading test IDX files")?;
            (limit(tr, *train_limit), limit(te, *test_limit))
        }
        DatasetConfig::Amat { train, test, train_limit, test_limit } => {
            let tr = load_amat(train).context("loading training amat file")?;
            let te = load_amat(test).context("loading test amat file")?;
            (limit(tr, *train_limit), limit(te, *test_limit))
        }
    };
    let dim = cfg.network.layer_sizes[0];
    if train.dim != dim || test.dim != dim {
        return Err(ConfigError::Invalid(format!("dataset dimension {} does not match input layer {dim}", train.dim)).into());
    }
    Ok((train, test))
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => d.take(n),
        None => d,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train_csv_header(predicted_layers: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = TRAIN_CSV_PREFIX.iter().map(|s| s.to_string()).collect();
    h.extend(predicted_layers.iter().map(|l| format!("rho_layer{l}")));
    h
}

/// Per-epoch `(epoch, loss, TER, ρ per predicted layer)`.
pub fn write_train_csv(path: &Path, report: &TrainReport, predicted_layers: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(train_csv_header(predicted_layers))?;
    for e in &report.epochs {
        let mut row = vec![e.epoch.to_string(), format!("{:.6}", e.loss), format!("{:.4}", e.ter)];
        match &e.rho {
            Some(rho) => row.extend(rho.iter().map(|r| format!("{r:.6}"))),
            None => row.extend(predicted_layers.iter().map(|_| String::new())),
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub report: TrainReport,
}

/// Trains from scratch and writes the checkpoint, the JSON report and the epoch CSV.
pub fn cmd_train(cfg: &ExperimentConfig, config_text: &str, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let (train_set, test_set) = load_dataset(cfg)?;
    let spec = cfg.network.spec()?;
    let hyper = cfg.train.hyper(cfg.seed);
    let mut params = init_params(&spec, cfg.seed)?;
    let predicted: Vec<usize> = spec.predictor_layers.iter().copied().collect();
    let mut manifest = Manifest::new("train", config_text, cfg.seed);
    let report = match train(&mut params, &train_set, Some(&test_set), &hyper) {
        Ok(r) => r,
        Err(TrainError::Diverged { epoch, report }) => {
            let path = out.join("train_report.json");
            write_json(&path, &report)?;
            manifest.add_file(&path)?;
            manifest.write(out)?;
            return Err(TrainError::Diverged { epoch, report }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join(CHECKPOINT);
    let meta = json!({
        "seed": cfg.seed,
        "predictor_mode": hyper.predictor_mode.as_str(),
        "config_sha256": manifest.config_sha256,
    });
    save_params(&ckpt, &params, &meta)?;
    let report_path = out.join("train_report.json");
    write_json(&report_path, &report)?;
    let csv_path = out.join("train.csv");
    write_train_csv(&csv_path, &report, &predicted)?;
    for p in [ckpt.clone(), sparsenn_core::checkpoint::sidecar_path(&ckpt), report_path, csv_path] {
        manifest.add_file(&p)?;
    }
    manifest.write(out)?;
    Ok(TrainOutcome { params, report })
}

pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<NetworkParams> {
    let (params, _) = load_params(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let spec = cfg.network.spec()?;
    if params.spec != spec {
        return Err(ConfigError::Invalid(format!(
            "checkpoint network {:?} (rank {}) does not match config {:?} (rank {})",
            params.spec.layer_sizes, params.spec.rank, spec.layer_sizes, spec.rank
        ))
        .into());
    }
    Ok(params)
}

pub fn quantize(cfg: &ExperimentConfig, params: &NetworkParams, train_set: &Dataset) -> Result<(QuantizedNetwork, u64)> {
    let mut sat = SaturationCounter::default();
    let n = cfg.simulate.calibration.min(train_set.len());
    let net = quantize_network(params, (0..n).map(|i| train_set.sample(i)), &mut sat)?;
    Ok((net, sat.count()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor_mode: PredictorMode,
    pub float_ter: f64,
    pub rho: Option<Vec<f64>>,
    /// Error rate of the bit-exact fixed-point model per inference mode.
    pub fixed_point_ter: Vec<(InferenceMode, f64)>,
    pub weight_saturations: u64,
}

pub fn cmd_eval(cfg: &ExperimentConfig, config_text: &str, checkpoint: &Path, out: &Path, mode: PredictorMode) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let (train_set, test_set) = load_dataset(cfg)?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let ev = evaluate(&params, &test_set, mode)?;
    let (net, weight_saturations) = quantize(cfg, &params, &train_set)?;
    let mut fixed_point_ter = Vec::new();
    for &m in &cfg.simulate.modes {
        let mut wrong = 0usize;
        for (x, label) in test_set.iter() {
            let mut sat = SaturationCounter::default();
            let xq = net.quantize_input(x, &mut sat)?;
            if argmax(&forward_fx_golden(&net, &xq, m).logits().codes) != label {
                wrong += 1;
            }
        }
        fixed_point_ter.push((m, 100.0 * wrong as f64 / test_set.len() as f64));
    }
    let report = EvalReport { predictor_mode: mode, float_ter: ev.ter, rho: ev.rho, fixed_point_ter, weight_saturations };
    let path = out.join("eval_report.json");
    write_json(&path, &report)?;
    let mut manifest = Manifest::new("eval", config_text, cfg.seed);
    manifest.add_file(&path)?;
    manifest.write(out)?;
    Ok(report)
}

fn argmax(codes: &[i16]) -> usize {
    codes.iter().enumerate().fold(0, |best, (i, &c)| if c > codes[best] { i } else { best })
}

/// Per-layer totals over all simulated samples, both modes side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: usize,
    /// Mean predicted sparsity under uv_on (0 for layers without a predictor).
    pub rho: f64,
    pub uv_off_cycles: u64,
    pub uv_on_cycles: u64,
    pub cycle_reduction: f64,
    pub w_off_cycles: u64,
    pub w_on_cycles: u64,
    pub w_cycle_reduction: f64,
    /// `1 - Σ nnz_on·maxpop / Σ nnz_off·maxrows`: the reduction the work law predicts.
    pub law_reduction: Option<f64>,
    pub predictor_cycles: u64,
    pub uv_off_energy_pj: f64,
    pub uv_on_energy_pj: f64,
    pub uv_off_power_mw: f64,
    pub uv_on_power_mw: f64,
    pub power_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub samples: usize,
    pub num_pes: usize,
    pub layers: Vec<LayerComparison>,
    pub total: LayerComparison,
    /// Samples whose simulated logits equal the golden model in every mode.
    pub golden_matches: usize,
}

/// Largest number of set predictor bits held by one PE.
pub fn max_popcount(bits: &[bool], p: usize) -> u64 {
    let mut per_pe = vec![0u64; p];
    for (i, &b) in bits.iter().enumerate() {
        per_pe[map_row(i, p)] += u64::from(b);
    }
    per_pe.into_iter().max().unwrap_or(0)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Compares paired uv_on / uv_off runs layer by layer.
pub fn compare(on: &[SimReport], off: &[SimReport], energy: &EnergyConfig) -> (Vec<LayerComparison>, LayerComparison) {
    let n_layers = on.first().map(|r| r.layers.len()).unwrap_or(0);
    let p = on.first().map(|r| r.num_pes).unwrap_or(1);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (mut c_on, mut c_off, mut w_on, mut w_off, mut pred) = (0u64, 0u64, 0u64, 0u64, 0u64);
        let (mut e_on, mut e_off, mut law_on, mut law_off, mut rho) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (a, b) in on.iter().zip(off) {
            let (la, lb) = (&a.layers[l], &b.layers[l]);
            c_on += la.cycles();
            c_off += lb.cycles();
            let (wa, wb) = (la.phase(Phase::W).expect("W phase"), lb.phase(Phase::W).expect("W phase"));
            w_on += wa.cycles;
            w_off += wb.cycles;
            pred += la.phases.iter().filter(|ph| ph.phase != Phase::W).map(|ph| ph.cycles).sum::<u64>();
            e_on += energy.event_energy_pj(&la.events());
            e_off += energy.event_energy_pj(&lb.events());
            let m = la.output.len();
            let max_rows = m.div_ceil(p) as u64;
            let max_pop = la.mask.as_ref().map(|mk| max_popcount(&mk.bits, p)).unwrap_or(max_rows);
            law_on += (wa.injected_packets * max_pop.max(1)) as f64;
            law_off += (wb.injected_packets * max_rows.max(1)) as f64;
            rho += la.mask.as_ref().map(|mk| mk.sparsity()).unwrap_or(0.0);
        }
        let pw_on = energy.power_mw(e_on, c_on);
        let pw_off = energy.power_mw(e_off, c_off);
        layers.push(LayerComparison {
            layer: l,
            rho: rho / on.len().max(1) as f64,
            uv_off_cycles: c_off,
            uv_on_cycles: c_on,
            cycle_reduction: 1.0 - ratio(c_on as f64, c_off as f64),
            w_off_cycles: w_off,
            w_on_cycles: w_on,
            w_cycle_reduction: 1.0 - ratio(w_on as f64, w_off as f64),
            law_reduction: Some(1.0 - ratio(law_on, law_off)),
            predictor_cycles: pred,
            uv_off_energy_pj: e_off,
            uv_on_energy_pj: e_on,
            uv_off_power_mw: pw_off,
            uv_on_power_mw: pw_on,
            power_ratio: ratio(pw_on, pw_off),
        });
    }
    let sum = |f: fn(&LayerComparison) -> u64| layers.iter().map(f).sum::<u64>();
    let sumf = |f: fn(&LayerComparison) -> f64| layers.iter().map(f).sum::<f64>();
    let (c_on, c_off) = (sum(|l| l.uv_on_cycles), sum(|l| l.uv_off_cycles));
    let (w_on, w_off) = (sum(|l| l.w_on_cycles), sum(|l| l.w_off_cycles));
    let (e_on, e_off) = (sumf(|l| l.uv_on_energy_pj), sumf(|l| l.uv_off_energy_pj));
    let (pw_on, pw_off) = (energy.power_mw(e_on, c_on), energy.power_mw(e_off, c_off));
    let predicted: Vec<&LayerComparison> = layers.iter().filter(|l| l.predictor_cycles > 0).collect();
    let total = LayerComparison {
        layer: n_layers,
        rho: ratio(predicted.iter().map(|l| l.rho).sum(), predicted.len() as f64),
        uv_off_cycles: c_off,
        uv_on_cycles: c_on,
        cycle_reduction: 1.0 - ratio(c_on as f64, c_off as f64),
        w_off_cycles: w_off,
        w_on_cycles: w_on,
        w_cycle_reduction: 1.0 - ratio(w_on as f64, w_off as f64),
        law_reduction: None,
        predictor_cycles: sum(|l| l.predictor_cycles),
        uv_off_energy_pj: e_off,
        uv_on_energy_pj: e_on,
        uv_off_power_mw: pw_off,
        uv_on_power_mw: pw_on,
        power_ratio: ratio(pw_on, pw_off),
    };
    (layers, total)
}

fn comparison_row(name: String, l: &LayerComparison) -> Vec<String> {
    vec![
        name,
        format!("{:.6}", l.rho),
        l.uv_off_cycles.to_string(),
        l.uv_on_cycles.to_string(),
        format!("{:.6}", l.cycle_reduction),
        l.w_off_cycles.to_string(),
        l.w_on_cycles.to_string(),
        format!("{:.6}", l.w_cycle_reduction),
        l.law_reduction.map(|r| format!("{r:.6}")).unwrap_or_default(),
        l.predictor_cycles.to_string(),
        format!("{:.3}", l.uv_off_energy_pj),
        format!("{:.3}", l.uv_on_energy_pj),
        format!("{:.6}", l.uv_off_power_mw),
        format!("{:.6}", l.uv_on_power_mw),
        format!("{:.6}", l.power_ratio),
    ]
}

pub fn write_sim_layer_csv(path: &Path, summary: &SimSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SIM_LAYER_CSV_HEADER)?;
    for l in &summary.layers {
        w.write_record(comparison_row(l.layer.to_string(), l))?;
    }
    w.write_record(comparison_row("total".into(), &summary.total))?;
    w.flush()?;
    Ok(())
}

/// Reports of one inference mode, one per sample.
pub type ModeRuns = (InferenceMode, Vec<SimReport>);

/// Runs `modes` over the first `samples` test inputs. Returns the per-mode reports.
pub fn simulate_samples(
    cfg: &ExperimentConfig,
    net: &QuantizedNetwork,
    test_set: &Dataset,
    modes: &[InferenceMode],
) -> Result<(Vec<ModeRuns>, usize)> {
    let n = cfg.simulate.samples.min(test_set.len());
    let mut runs: Vec<ModeRuns> = modes.iter().map(|&m| (m, Vec::with_capacity(n))).collect();
    let mut golden_matches = 0;
    for i in 0..n {
        let mut sat = SaturationCounter::default();
        let x: FxVector = net.quantize_input(test_set.sample(i), &mut sat)?;
        let mut all_match = true;
        for (mode, reports) in runs.iter_mut() {
            let report = run_network(net, &x, &cfg.arch, *mode)?;
            all_match &= report.logits() == forward_fx_golden(net, &x, *mode).logits();
            reports.push(report);
        }
        golden_matches += usize::from(all_match);
    }
    Ok((runs, golden_matches))
}

pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    config_text: &str,
    checkpoint: &Path,
    out: &Path,
    modes: &[InferenceMode],
) -> Result<Option<SimSummary>> {
    fs::create_dir_all(out)?;
    let (train_set, test_set) = load_dataset(cfg)?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let (net, _) = quantize(cfg, &params, &train_set)?;
    sparsenn_sim::validate_network(&cfg.arch, &net)?;
    let (runs, golden_matches) = simulate_samples(cfg, &net, &test_set, modes)?;
    if golden_matches != runs.first().map(|r| r.1.len()).unwrap_or(0) {
        bail!("simulator diverged from the fixed-point golden model on {} samples", runs[0].1.len() - golden_matches);
    }
    let mut manifest = Manifest::new("simulate", config_text, cfg.seed);
    for (mode, reports) in &runs {
        let json_path = out.join(format!("sim_{}.json", mode.as_str()));
        write_json(&json_path, reports)?;
        let csv_path = out.join(format!("sim_phases_{}.csv", mode.as_str()));
        let mut buf = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            let mut one = Vec::new();
            r.write_csv(&mut one, Some(&cfg.energy))?;
            let text = String::from_utf8(one)?;
            let body = if i == 0 { text.as_str() } else { text.split_once('\n').map(|(_, b)| b).unwrap_or("") };
            buf.extend_from_slice(body.as_bytes());
        }
        fs::write(&csv_path, buf)?;
        manifest.add_file(&json_path)?;
        manifest.add_file(&csv_path)?;
    }
    let on = runs.iter().find(|(m, _)| *m == InferenceMode::UvOn);
    let off = runs.iter().find(|(m, _)| *m == InferenceMode::UvOff);
    let summary = match (on, off) {
        (Some((_, on)), Some((_, off))) => {
            let (layers, total) = compare(on, off, &cfg.energy);
            let summary = SimSummary { samples: on.len(), num_pes: cfg.arch.num_pes, layers, total, golden_matches };
            let csv_path = out.join("sim_layers.csv");
            write_sim_layer_csv(&csv_path, &summary)?;
            let json_path = out.join("sim_summary.json");
            write_json(&json_path, &summary)?;
            manifest.add_file(&csv_path)?;
            manifest.add_file(&json_path)?;
            Some(summary)
        }
        _ => None,
    };
    manifest.write(out)?;
    Ok(summary)
}

/// Trains one network per (mode, rank) and tabulates TER and sparsity per epoch.
pub fn cmd_sweep(cfg: &ExperimentConfig, config_text: &str, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let (train_set, test_set) = load_dataset(cfg)?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SWEEP_CSV_HEADER)?;
    for &mode in &cfg.sweep.modes {
        for &rank in &cfg.sweep.ranks {
            let mut net_cfg = cfg.network.clone();
            net_cfg.rank = rank;
            let spec = net_cfg.spec()?;
            if spec.predictor_layers.iter().any(|&l| {
                let (m, n) = spec.layer_shape(l);
                rank >= m.min(n)
            }) {
                return Err(ConfigError::Invalid(format!("sweep rank {rank} too large for the network")).into());
            }
            let mut hyper = cfg.train.hyper(cfg.seed);
            hyper.predictor_mode = mode;
            let mut params = init_params(&spec, cfg.seed)?;
            let report = train(&mut params, &train_set, Some(&test_set), &hyper)?;
            let n_params: usize = params.layers.iter().map(|l| l.predictor.as_ref().map(|p| p.u.as_slice().len() + p.v.as_slice().len()).unwrap_or(0)).sum();
            for e in &report.epochs {
                let rho = e.rho.as_ref().map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64);
                w.write_record([
                    mode.as_str().to_string(),
                    rank.to_string(),
                    e.epoch.to_string(),
                    format!("{:.6}", e.loss),
                    format!("{:.4}", e.ter),
                    rho.map(|r| format!("{r:.6}")).unwrap_or_default(),
                    n_params.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    drop(w);
    let mut manifest = Manifest::new("sweep", config_text, cfg.seed);
    manifest.add_file(&path)?;
    manifest.write(out)?;
    Ok(path)
}

/// Markdown summary of whatever artifacts exist in `out`.
pub fn cmd_report(out: &Path) -> Result<String> {
    let mut md = String::from("# Experiment report\n");
    let mut found = false;
    if let Ok(text) = fs::read_to_string(out.join("train_report.json")) {
        let report: TrainReport = serde_json::from_str(&text)?;
        if let Some(last) = report.last() {
            found = true;
            md.push_str(&format!(
                "\n## Training ({})\n\n| epochs | loss | TER (%) | rho per layer |\n|---|---|---|---|\n| {} | {:.4} | {:.2} | {} |\n",
                report.predictor_mode.as_str(),
                report.epochs.len(),
                last.loss,
                last.ter,
                last.rho.as_ref().map(|r| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")).unwrap_or_else(|| "-".into())
            ));
        }
    }
    if let Ok(mut rdr) = csv::Reader::from_path(out.join("sweep.csv")) {
        found = true;
        md.push_str("\n## Rank sweep (final epoch)\n\n| mode | rank | TER (%) | mean rho |\n|---|---|---|---|\n");
        let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
        for (i, row) in rows.iter().enumerate() {
            let last = rows.get(i + 1).is_none_or(|next| next[0] != row[0] || next[1] != row[1]);
            if last {
                md.push_str(&format!("| {} | {} | {} | {} |\n", &row[0], &row[1], &row[4], &row[5]));
            }
        }
    }
    if let Ok(text) = fs::read_to_string(out.join("sim_summary.json")) {
        found = true;
        let s: SimSummary = serde_json::from_str(&text)?;
        md.push_str(&format!(
            "\n## Simulation ({} samples, {} PEs)\n\n| layer | rho | cycle reduction | W-phase reduction | power ratio |\n|---|---|---|---|---|\n",
            s.samples, s.num_pes
        ));
        for l in s.layers.iter().chain(std::iter::once(&s.total)) {
            let name = if l.layer == s.layers.len() { "total".to_string() } else { l.layer.to_string() };
            md.push_str(&format!(
                "| {name} | {:.3} | {:.1}% | {:.1}% | {:.3} |\n",
                l.rho,
                100.0 * l.cycle_reduction,
                100.0 * l.w_cycle_reduction,
                l.power_ratio
            ));
        }
    }
    if !found {
        bail!("no artifacts found in {}", out.display());
    }
    fs::write(out.join("report.md"), &md)?;
    Ok(md)
}
