//! End-to-end behaviour of the federation engine on small synthetic federations.

use fibecfed_core::config::{parse_config, ExperimentConfig, Mode};
use fibecfed_core::curriculum::{num_batches, pace_count};
use fibecfed_core::experiment::{build_federation, execute, CSV_HEADER};
use fibecfed_core::federation::{frozen_adapter_digest, GalPayload, Simulation};

const SMALL: &str = r#"
seed = 21

[federation]
num_devices = 4
sampled_per_round = 2
rounds = 5
local_iterations = 1
lr = 0.02

[curriculum]
batch_size = 4

[gal]
t_warm = 1
lipschitz_samples = 8

[mask]
t_prime = 2

[data]
num_classes = 3
dim = 4
per_class = 20

[model]
hidden = [4, 4]
"#;

fn small(mode: Mode) -> ExperimentConfig {
    let mut cfg = parse_config(SMALL).unwrap();
    cfg.mode = mode;
    cfg
}

fn simulation(cfg: &ExperimentConfig) -> Simulation {
    let (net, devices) = build_federation(cfg).unwrap();
    Simulation::new(cfg.federation_config(), net, devices).unwrap()
}

#[test]
fn gal_does_not_depend_on_the_curriculum() {
    let a = execute(&small(Mode::Fibecfed)).unwrap();
    let b = execute(&small(Mode::NoCurriculum)).unwrap();
    assert_eq!(a.summary.gal.gal_layers, b.summary.gal.gal_layers);
    assert_eq!(a.summary.gal.n_star, b.summary.gal.n_star);
    assert_eq!(a.summary.mean_rho, b.summary.mean_rho);
}

#[test]
fn baseline_syncs_every_layer_without_warmup() {
    let r = execute(&small(Mode::FedavgLora)).unwrap();
    assert_eq!(r.summary.gal.gal_layers, vec![0, 1, 2]);
    assert_eq!(r.summary.warmup_epochs, 0);
    assert_eq!(r.summary.params.frozen, 0);
}

#[test]
fn no_mask_mode_leaves_local_layers_unrestricted() {
    let sim = simulation(&small(Mode::NoMask));
    assert!(sim.devices().iter().all(|d| d.mask.is_unrestricted()));
    let sim = simulation(&small(Mode::Fibecfed));
    for d in sim.devices() {
        for l in 0..d.net.num_layers() {
            assert_eq!(d.mask.layer(l).is_none(), sim.server().gal.contains(l));
        }
    }
}

#[test]
fn curriculum_grows_monotonically_per_device() {
    let cfg = small(Mode::Fibecfed);
    let sim = simulation(&cfg);
    let pacing = sim.config().pacing();
    for d in sim.devices() {
        let counts: Vec<usize> = (0..cfg.federation.rounds).map(|t| pace_count(&pacing, t, d.n_k).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert_eq!(*counts.last().unwrap(), num_batches(d.n_k, cfg.curriculum.batch_size));
        assert!(d.order.windows(2).all(|w| {
            let (a, b) = (&d.batch_scores[w[0]], &d.batch_scores[w[1]]);
            a.score < b.score || (a.score == b.score && a.batch_id < b.batch_id)
        }));
    }
}

#[test]
fn partial_sync_sends_fewer_bytes() {
    let fib = execute(&small(Mode::Fibecfed)).unwrap();
    let avg = execute(&small(Mode::FedavgLora)).unwrap();
    let layers = 3;
    for (f, a) in fib.output.reports.iter().zip(&avg.output.reports) {
        assert_eq!(f.sampled, a.sampled);
        assert_eq!(f.bytes_down, f.bytes_up);
        if fib.summary.gal.gal_layers.len() < layers {
            assert!(f.bytes_down < a.bytes_down);
        } else {
            assert_eq!(f.bytes_down, a.bytes_down);
        }
    }
}

#[test]
fn zero_rounds_yield_a_header_only_csv() {
    let mut cfg = small(Mode::Fibecfed);
    cfg.federation.rounds = 0;
    let r = execute(&cfg).unwrap();
    assert_eq!(r.csv, format!("{CSV_HEADER}\n"));
    assert!(r.output.reports.is_empty());
    assert_eq!(r.summary.final_accuracy, None);
}

#[test]
fn frozen_state_never_changes_and_uploads_hold_only_gal_layers() {
    let cfg = small(Mode::Fibecfed);
    let mut sim = simulation(&cfg);
    let gal = sim.server().gal.clone();
    let before: Vec<_> = sim
        .devices()
        .iter()
        .map(|d| (d.net.frozen_digest(), frozen_adapter_digest(&d.net, &gal, &d.mask)))
        .collect();
    while !sim.is_finished() {
        let (report, payloads) = sim.run_round().unwrap();
        assert_eq!(payloads.len(), report.sampled.len());
        for bytes in &payloads {
            let p = GalPayload::from_bytes(bytes).unwrap();
            let layers: Vec<usize> = p.layers.iter().map(|(l, _)| *l).collect();
            assert_eq!(layers, gal.gal_layers);
        }
        for (d, want) in sim.devices().iter().zip(&before) {
            assert_eq!((d.net.frozen_digest(), frozen_adapter_digest(&d.net, &gal, &d.mask)), *want);
        }
    }
}

#[test]
fn runs_are_reproducible() {
    for mode in Mode::ALL {
        let a = execute(&small(mode)).unwrap();
        let b = execute(&small(mode)).unwrap();
        assert_eq!(a.csv, b.csv, "{mode}");
        assert_eq!(a.output.global_history, b.output.global_history);
    }
}

#[test]
fn accuracies_are_fractions() {
    let r = execute(&small(Mode::Fibecfed)).unwrap();
    for rep in &r.output.reports {
        assert!((0.0..=1.0).contains(&rep.weighted_test_acc));
        assert!((0.0..=1.0).contains(&rep.server_view_acc));
        assert!(rep.train_loss.is_finite() && rep.train_loss > 0.0);
    }
}

#[test]
fn shipped_desk_config_is_the_default() {
    let shipped = parse_config(include_str!("../../../configs/desk.toml")).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
    parse_config(include_str!("../../../configs/smoke.toml")).unwrap();
}
