//! Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::Instant;

use fibecfed_core::config::{ExperimentConfig, Mode};
use fibecfed_core::curriculum::{pace_count, Pace, PacingConfig};
use fibecfed_core::experiment::{build_federation, metrics_csv, parse_metrics, rounds_to_target};
use fibecfed_core::federation::{
    comm_bytes, fedavg_gal, frozen_adapter_digest, sample_devices, streams, GalPayload, RoundReport, Simulation,
};
use fibecfed_core::fisher::sample_fim_diag;
use fibecfed_core::gal::{adversarial_noise, eigengap_rank, GalDecision, NoiseConfig};
use fibecfed_core::lora::{LoraLayer, LoraNetwork};
use fibecfed_core::numeric::{dot, finite_diff_gradient, norm2, Matrix, SimRng};
use fibecfed_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4f64.max(1e-3 * b.abs())
}

fn random_net(rng: &mut SimRng) -> LoraNetwork {
    loop {
        let input = 2 + rng.index(5);
        let hidden: Vec<usize> = (0..2).map(|_| 2 + rng.index(7)).collect();
        let classes = 2 + rng.index(4);
        let rank = 1 + rng.index(2);
        let mut net = LoraNetwork::init(input, &hidden, classes, rank, rng).unwrap();
        if net.lora_len() > 200 {
            continue;
        }
        let p: Vec<f64> = net.lora_params().iter().map(|_| 0.3 * rng.normal()).collect();
        net.set_lora_params(&p).unwrap();
        return net;
    }
}

fn with_base(net: &LoraNetwork, l: usize, w: &[f64]) -> LoraNetwork {
    let layer = net.layer(l);
    let base = Matrix::from_vec(layer.d_out(), layer.d_in(), w.to_vec()).unwrap();
    let mut probe = net.clone();
    *probe.layer_mut(l) =
        LoraLayer::new(base, layer.bias().to_vec(), layer.a().clone(), layer.b().clone(), layer.activation()).unwrap();
    probe
}

fn gradient_and_fim_oracle() -> Result<Outcome> {
    let mut rng = SimRng::new(101);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..50 {
        let net = random_net(&mut rng);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let label = rng.index(net.num_classes());
        let analytic = net.backward(&x, label)?.lora_flat();
        let params = net.lora_params();
        let oracle = finite_diff_gradient(
            |p| {
                let mut probe = net.clone();
                probe.set_lora_params(p).unwrap();
                probe.loss(&x, label).unwrap()
            },
            &params,
            1e-6,
        )?;
        let fim = sample_fim_diag(&net, &x, label)?;
        let mut pairs: Vec<(f64, f64)> = analytic.into_iter().zip(oracle).collect();
        for l in 0..net.num_layers() {
            let w = net.layer(l).w_base().data().to_vec();
            let dw = finite_diff_gradient(|w| with_base(&net, l, w).loss(&x, label).unwrap(), &w, 1e-6)?;
            pairs.extend(fim.layer(l).iter().zip(dw).map(|(f, g)| (*f, g * g)));
        }
        for (a, o) in pairs {
            worst = worst.max((a - o).abs());
            failures += usize::from(!close(a, o));
        }
    }
    Ok(outcome(failures == 0, format!("50 nets, {failures} mismatches, max abs diff {worst:.2e}")))
}

fn curriculum_schedule() -> Result<Outcome> {
    let cfg = PacingConfig { beta: 0.6, alpha: 0.8, pace: Pace::Linear, batch_size: 1, total_rounds: 100 };
    let n_k = 10;
    let mut ok = pace_count(&cfg, 0, n_k)? == 6 && pace_count(&cfg, 60, n_k)? == 9;
    ok &= (80..100).map(|t| pace_count(&cfg, t, n_k)).collect::<Result<Vec<_>>>()?.iter().all(|&c| c == 10);

    let mut rng = SimRng::new(202);
    let mut violations = 0;
    for _ in 0..1000 {
        let cfg = PacingConfig {
            beta: rng.uniform(),
            alpha: 0.05 + 0.95 * rng.uniform(),
            pace: [Pace::Linear, Pace::Sqrt, Pace::Exp][rng.index(3)],
            batch_size: 1 + rng.index(16),
            total_rounds: 1 + rng.index(200),
        };
        let n_k = cfg.batch_size + rng.index(500);
        let counts = (0..cfg.total_rounds).map(|t| pace_count(&cfg, t, n_k)).collect::<Result<Vec<_>>>()?;
        violations += usize::from(!counts.windows(2).all(|w| w[0] <= w[1]));
    }
    Ok(outcome(ok && violations == 0, format!("examples {}, {violations} of 1000 random schedules non-monotone", if ok { "6/9/10" } else { "wrong" })))
}

fn noise_closed_form() -> Result<Outcome> {
    let gamma = 0.1;
    let cfg = NoiseConfig::new(gamma, 2.0)?;
    let mut rng = SimRng::new(303);
    let mut worst_norm = 0.0f64;
    let mut wins = 0;
    let mut redrawn = 0;
    for _ in 0..100 {
        let (net, x, label, g) = loop {
            let net = random_net(&mut rng);
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
            let label = rng.index(net.num_classes());
            let g = net.backward(&x, label)?.d_input;
            // a vanishing input gradient has no loss-increasing direction
            if norm2(&g) > 0.0 {
                break (net, x, label, g);
            }
            redrawn += 1;
        };
        let eps = adversarial_noise(&net, &x, label, &cfg)?.noise;
        worst_norm = worst_norm.max((norm2(&eps) - gamma).abs());
        let best = dot(&g, &eps);
        let beaten = (0..100).all(|_| {
            let d: Vec<f64> = (0..g.len()).map(|_| rng.normal()).collect();
            let n = norm2(&d);
            let random: Vec<f64> = d.iter().map(|v| gamma * v / n).collect();
            best >= dot(&g, &random)
        });
        wins += usize::from(beaten);
    }
    Ok(outcome(
        worst_norm <= 1e-8 && wins >= 95,
        format!(
            "max | |eps|_2 - gamma | {worst_norm:.1e}, beats 100 random perturbations in {wins}/100 trials ({redrawn} zero-gradient draws replaced)"
        ),
    ))
}

fn eigengap_oracle() -> Result<Outcome> {
    let mut rng = SimRng::new(404);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = 1 + rng.index(40);
        let mut spectrum: Vec<f64> = (0..len).map(|_| 10.0 * rng.normal()).collect();
        spectrum.sort_by(f64::total_cmp);
        let lipschitz = rng.uniform() * 2.0;
        let mut want = len;
        for r in 1..len {
            if spectrum[r] - spectrum[r - 1] > 4.0 * lipschitz {
                want = r;
                break;
            }
        }
        mismatches += usize::from(eigengap_rank(&spectrum, lipschitz)? != want);
    }
    Ok(outcome(mismatches == 0, format!("{mismatches} mismatches on 1000 spectra")))
}

/// Plain federated LoRA written out step by step: every adapter is shared,
/// batches run in natural order, the server averages with `n_k` weights.
fn reference_fedavg_lora(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let (initial, devices) = build_federation(cfg)?;
    let f = &cfg.federation;
    let b = cfg.curriculum.batch_size;
    let mut global = initial.lora_params();
    let mut history = vec![global.clone()];
    for t in 0..f.rounds {
        let sampled = sample_devices(f.num_devices, f.sampled_per_round, &mut SimRng::stream(cfg.seed, streams::ROUND | t as u64))?;
        let mut uploads = Vec::new();
        for &k in &sampled {
            let train = &devices[k].train;
            let mut net = initial.clone();
            net.set_lora_params(&global)?;
            for _ in 0..f.local_iterations {
                for chunk in train.chunks(b) {
                    let mut grad = vec![0.0; net.lora_len()];
                    for s in chunk {
                        for (acc, g) in grad.iter_mut().zip(net.backward(&s.features, s.label)?.lora_flat()) {
                            *acc += g;
                        }
                    }
                    let p: Vec<f64> = net.lora_params().iter().zip(&grad).map(|(p, g)| p - f.lr * g).collect();
                    net.set_lora_params(&p)?;
                }
            }
            uploads.push((train.len(), net.lora_params()));
        }
        let m: usize = uploads.iter().map(|(n, _)| n).sum();
        let mut next = vec![0.0; global.len()];
        for (n, p) in &uploads {
            let w = *n as f64 / m as f64;
            for (o, v) in next.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        global = next;
        history.push(global.clone());
    }
    Ok(history)
}

fn fedavg_oracle(desk: &ExperimentConfig) -> Result<Outcome> {
    let mut rng = SimRng::new(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let devices = 1 + rng.index(10);
        let len = 1 + rng.index(30);
        let updates: Vec<(usize, Vec<f64>)> =
            (0..devices).map(|_| (1 + rng.index(500), (0..len).map(|_| 5.0 * rng.normal()).collect())).collect();
        let got = fedavg_gal(&updates)?;
        let m: f64 = updates.iter().map(|(n, _)| *n as f64).sum();
        for (i, g) in got.iter().enumerate() {
            let want: f64 = updates.iter().map(|(n, p)| *n as f64 * p[i]).sum::<f64>() / m;
            worst = worst.max((g - want).abs());
        }
    }

    let mut cfg = desk.clone();
    cfg.mode = Mode::FedavgLora;
    cfg.federation.rounds = 10;
    let (net, devices) = build_federation(&cfg)?;
    let mut sim = Simulation::new(cfg.federation_config(), net, devices)?;
    let mut engine = vec![sim.server().global.clone()];
    while !sim.is_finished() {
        sim.run_round()?;
        engine.push(sim.server().global.clone());
    }
    let reference = reference_fedavg_lora(&cfg)?;
    let bitwise = engine.len() == reference.len()
        && engine.iter().zip(&reference).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok(outcome(
        worst <= 1e-12 && bitwise,
        format!(
            "brute-force max diff {worst:.1e} on 100 cases; {} rounds of the baseline trajectory {} the reference",
            cfg.federation.rounds,
            if bitwise { "equal (0 ulp)" } else { "differ from" }
        ),
    ))
}

fn communication_ratio() -> Result<Outcome> {
    let net = LoraNetwork::init(8, &[8; 23], 8, 2, &mut SimRng::new(6))?;
    let sizes: Vec<usize> = net.layers().iter().map(|l| l.lora_len()).collect();
    let full = GalDecision::all_layers(24, 1.0);
    let partial = GalDecision { gal_layers: (6..24).collect(), n_star: 18, ..full.clone() };
    let (down, up) = comm_bytes(&sizes, &partial, 10);
    let (full_down, full_up) = comm_bytes(&sizes, &full, 10);
    let ratio = down as f64 / full_down as f64;
    let ratio_up = up as f64 / full_up as f64;
    Ok(outcome(ratio == 0.75 && ratio_up == 0.75, format!("ratio {ratio:.3} down, {ratio_up:.3} up ({down} / {full_down} bytes)")))
}

struct Audit {
    frozen_ok: bool,
    payload_ok: bool,
}

fn run_audited(cfg: &ExperimentConfig) -> Result<(Vec<RoundReport>, Audit)> {
    let (net, devices) = build_federation(cfg)?;
    let mut sim = Simulation::new(cfg.federation_config(), net, devices)?;
    let gal = sim.server().gal.clone();
    let digests = |sim: &Simulation| -> Vec<_> {
        sim.devices().iter().map(|d| (d.net.frozen_digest(), frozen_adapter_digest(&d.net, &gal, &d.mask))).collect()
    };
    let before = digests(&sim);
    let mut audit = Audit { frozen_ok: true, payload_ok: true };
    let mut reports = Vec::new();
    while !sim.is_finished() {
        let (report, payloads) = sim.run_round()?;
        for bytes in &payloads {
            let p = GalPayload::from_bytes(bytes)?;
            audit.payload_ok &= p.layers.iter().map(|(l, _)| *l).eq(gal.gal_layers.iter().copied());
        }
        audit.frozen_ok &= digests(&sim) == before;
        reports.push(report);
    }
    Ok((reports, audit))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> ExitCode {
    let desk = ExperimentConfig::default();
    let mut results: Vec<(&str, Result<Outcome>, f64)> = Vec::new();
    let mut timed = |name, f: &dyn Fn() -> Result<Outcome>| {
        let start = Instant::now();
        let r = f();
        results.push((name, r, start.elapsed().as_secs_f64()));
    };

    timed("1 gradient/FIM oracle", &gradient_and_fim_oracle);
    timed("2 curriculum schedule", &curriculum_schedule);
    timed("3 noise closed form", &noise_closed_form);
    timed("4 eigengap oracle", &eigengap_oracle);
    timed("5 fedavg oracle", &|| fedavg_oracle(&desk));
    timed("6 communication ratio", &communication_ratio);

    let start = Instant::now();
    let mut finals = (Vec::new(), Vec::new());
    let mut rtt = (Vec::new(), Vec::new());
    let mut audit = Audit { frozen_ok: true, payload_ok: true };
    let mut first_csv = None;
    let mut per_seed = Vec::new();
    let e2e: Result<()> = (|| {
        for seed in 0..5u64 {
            let mut cfg = desk.clone();
            cfg.seed = seed;
            cfg.mode = Mode::FedavgLora;
            let (base, _) = run_audited(&cfg)?;
            cfg.mode = Mode::Fibecfed;
            let (fib, a) = run_audited(&cfg)?;
            audit.frozen_ok &= a.frozen_ok;
            audit.payload_ok &= a.payload_ok;
            let csv = metrics_csv(&fib, false);
            if seed == 0 {
                first_csv = Some(csv.clone());
            }
            let (rb, rf) = (parse_metrics(&metrics_csv(&base, false))?, parse_metrics(&csv)?);
            let (fb, ff) = (rb.last().map_or(0.0, |r| r.accuracy), rf.last().map_or(0.0, |r| r.accuracy));
            let target = fb - 0.02;
            let (tb, tf) = (rounds_to_target(&rb, target), rounds_to_target(&rf, target));
            per_seed.push(format!("seed {seed}: fedavg-lora {fb:.4} @{tb:?}, fibecfed {ff:.4} @{tf:?}"));
            finals.0.push(fb);
            finals.1.push(ff);
            rtt.0.push(tb.map_or(f64::INFINITY, |v| v as f64));
            rtt.1.push(tf.map_or(f64::INFINITY, |v| v as f64));
        }
        Ok(())
    })();
    let e2e_secs = start.elapsed().as_secs_f64();
    match e2e {
        Ok(()) => {
            let (fb, ff) = (median(finals.0), median(finals.1));
            let (tb, tf) = (median(rtt.0), median(rtt.1));
            let pass = ff >= fb - 0.01 && tf < tb && e2e_secs < 1800.0;
            for line in &per_seed {
                println!("    {line}");
            }
            results.push((
                "7 directional end-to-end",
                Ok(outcome(pass, format!("median final fibecfed {ff:.4} vs fedavg-lora {fb:.4}; median rounds-to-target {tf} vs {tb}"))),
                e2e_secs,
            ));
            results.push((
                "8 frozen-parameter audit",
                Ok(outcome(
                    audit.frozen_ok && audit.payload_ok,
                    format!(
                        "frozen digests {}, uploads {}",
                        if audit.frozen_ok { "unchanged every round" } else { "CHANGED" },
                        if audit.payload_ok { "carry only GAL layers" } else { "carry non-GAL layers" }
                    ),
                )),
                0.0,
            ));
        }
        Err(e) => {
            results.push(("7 directional end-to-end", Err(e), e2e_secs));
            results.push(("8 frozen-parameter audit", Ok(outcome(false, "end-to-end runs failed")), 0.0));
        }
    }

    let start = Instant::now();
    let determinism: Result<Outcome> = (|| {
        let mut cfg = desk.clone();
        cfg.seed = 0;
        cfg.mode = Mode::Fibecfed;
        let (again, _) = run_audited(&cfg)?;
        let rerun = metrics_csv(&again, false);
        let same = first_csv.as_deref() == Some(rerun.as_str());
        Ok(outcome(same, format!("{} bytes, {}", rerun.len(), if same { "byte-identical" } else { "differ" })))
    })();
    results.push(("9 determinism", determinism, start.elapsed().as_secs_f64()));

    let mut failed = 0;
    for (name, r, secs) in results {
        match r {
            Ok(o) => {
                failed += usize::from(!o.pass);
                println!("{} {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: error: {e} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
