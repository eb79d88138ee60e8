mod common;

use common::random_case;
use sparsenn_core::model::fx::{forward_fx_golden, InferenceMode};
use sparsenn_sim::{run_network, ArchConfig, InjectionOrder, Phase, TieBreak};

fn assert_matches_golden(seed: u64, p: usize, mode: InferenceMode) {
    let (net, x) = random_case(seed, 90);
    let golden = forward_fx_golden(&net, &x, mode);
    let report = run_network(&net, &x, &ArchConfig::with_pes(p), mode).unwrap();
    assert_eq!(report.layers.len(), golden.layers.len());
    for (sim, gold) in report.layers.iter().zip(&golden.layers) {
        assert_eq!(sim.output, gold.output, "seed {seed} P {p} {mode} layer {}", sim.layer);
        assert_eq!(sim.va, gold.va, "seed {seed} P {p} {mode} layer {}", sim.layer);
        assert_eq!(sim.mask, gold.mask, "seed {seed} P {p} {mode} layer {}", sim.layer);
    }
    let sats: u64 = report.events().saturations;
    assert_eq!(sats, golden.saturations.count(), "seed {seed}");
}

#[test]
fn bit_identical_to_golden_model() {
    let mut cases = 0;
    for seed in 0..60u64 {
        for (k, p) in [4, 16, 64].into_iter().enumerate() {
            let mode = if (seed + k as u64).is_multiple_of(2) { InferenceMode::UvOn } else { InferenceMode::UvOff };
            assert_matches_golden(seed, p, mode);
            cases += 1;
        }
    }
    assert!(cases >= 100);
}

#[test]
fn order_does_not_change_outputs() {
    for seed in 100..125u64 {
        let (net, x) = random_case(seed, 70);
        for p in [4, 16] {
            let base = ArchConfig::with_pes(p);
            let flipped = ArchConfig {
                tie_break: TieBreak::HighestPort,
                injection_order: InjectionOrder::Shuffled { seed: seed * 31 + 7 },
                ..base.clone()
            };
            let a = run_network(&net, &x, &base, InferenceMode::UvOn).unwrap();
            let b = run_network(&net, &x, &flipped, InferenceMode::UvOn).unwrap();
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.output, lb.output);
                assert_eq!(la.va, lb.va);
                assert_eq!(la.mask, lb.mask);
            }
        }
    }
}

#[test]
fn every_pe_receives_each_nonzero_once() {
    for seed in 200..220u64 {
        let (net, x) = random_case(seed, 80);
        let report = run_network(&net, &x, &ArchConfig::with_pes(16), InferenceMode::UvOn).unwrap();
        let mut input = x.clone();
        for layer in &report.layers {
            let w = layer.phase(Phase::W).unwrap();
            let mut got = w.delivered.clone();
            got.sort_unstable();
            let want: Vec<usize> = (0..input.len()).filter(|&j| input.codes[j] != 0).collect();
            assert_eq!(got, want);
            assert_eq!(w.injected_packets as usize, w.delivered.len());
            if let Some(v) = layer.phase(Phase::V) {
                let mut rows = v.delivered.clone();
                rows.sort_unstable();
                assert_eq!(rows, (0..v.outputs.len()).collect::<Vec<_>>());
            }
            input = layer.output.clone();
        }
    }
}

#[test]
fn identical_runs_are_identical() {
    let (net, x) = random_case(7, 90);
    let arch = ArchConfig { injection_order: InjectionOrder::Shuffled { seed: 3 }, ..ArchConfig::with_pes(16) };
    let a = run_network(&net, &x, &arch, InferenceMode::UvOn).unwrap();
    let b = run_network(&net, &x, &arch, InferenceMode::UvOn).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn single_layer_report_has_one_w_phase() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let net = common::random_net(&mut rng, &[20, 5], 2);
    let x = common::random_input(&mut rng, 20, 0.3);
    for mode in [InferenceMode::UvOn, InferenceMode::UvOff] {
        let report = run_network(&net, &x, &ArchConfig::with_pes(4), mode).unwrap();
        assert_eq!(report.layers.len(), 1);
        assert_eq!(report.layers[0].phases.len(), 1);
        assert_eq!(report.layers[0].phases[0].phase, Phase::W);
        assert_eq!(report.total_cycles, report.layers[0].phases[0].cycles);
    }
}
