//! The federated protocol: init phase, curriculum-driven masked local rounds,
//! GAL-restricted aggregation and communication accounting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::curriculum::{num_batches, pace_count, select_batches, sort_batches, PacingConfig};
use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::fisher::{device_fim, momentum_update, neuron_scores, score_batches, BatchScore, FimDiag};
use crate::gal::{device_layer_scores, lossless_analysis, DeviceGalStats, GalDecision, LosslessSettings, NoiseConfig};
use crate::lora::LoraNetwork;
use crate::mask::{build_mask, masked_param_count, ratio_from_analysis, NeuronMask, ParamCount};
use crate::numeric::SimRng;

const PAYLOAD_MAGIC: &[u8; 4] = b"FBGP";

/// RNG stream tags; each purpose gets its own stream under the run seed.
pub mod streams {
    pub const NETWORK: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SPLIT: u64 = 4 << 32;
    pub const ANALYSIS: u64 = 5 << 32;
    pub const ROUND: u64 = 6 << 32;
}

/// Which of the three proposed components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub curriculum: bool,
    /// Off means every layer is synchronized and the init analysis is skipped.
    pub gal_selection: bool,
    pub masks: bool,
}

impl Components {
    pub const ALL: Components = Components { curriculum: true, gal_selection: true, masks: true };
    pub const NONE: Components = Components { curriculum: false, gal_selection: false, masks: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_devices: usize,
    pub sampled_per_round: usize,
    pub rounds: usize,
    pub local_iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub alpha: f64,
    pub pace: crate::curriculum::Pace,
    pub noise: NoiseConfig,
    pub mu: f64,
    pub gamma_m: f64,
    pub t_warm: usize,
    pub t_prime: usize,
    pub lipschitz_samples: usize,
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
    pub components: Components,
}

impl FederationConfig {
    pub fn pacing(&self) -> PacingConfig {
        PacingConfig {
            beta: self.beta,
            alpha: self.alpha,
            pace: self.pace,
            batch_size: self.batch_size,
            total_rounds: self.rounds.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.num_devices == 0 {
            return bad("federation.num_devices", "must be at least 1".into());
        }
        if self.sampled_per_round == 0 || self.sampled_per_round > self.num_devices {
            return bad(
                "federation.sampled_per_round",
                format!("must lie in [1, num_devices = {}], got {}", self.num_devices, self.sampled_per_round),
            );
        }
        if self.local_iterations == 0 {
            return bad("federation.local_iterations", "must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("federation.lr", format!("must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("curriculum.batch_size", "must be at least 1".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("curriculum.beta", format!("must lie in (0, 1], got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("curriculum.alpha", format!("must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.noise.noise_budget > 0.0 && self.noise.noise_budget.is_finite()) {
            return bad("gal.noise_budget", format!("must be positive, got {}", self.noise.noise_budget));
        }
        if !(self.noise.p_norm >= 1.0 && self.noise.p_norm.is_finite()) {
            return bad("gal.p_norm", format!("must be at least 1, got {}", self.noise.p_norm));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("gal.mu", format!("must be positive, got {}", self.mu));
        }
        if !(0.0..=1.0).contains(&self.gamma_m) {
            return bad("mask.gamma_m", format!("must lie in [0, 1], got {}", self.gamma_m));
        }
        if self.t_prime == 0 {
            return bad("mask.t_prime", "must be at least 1".into());
        }
        if self.lipschitz_samples < 2 {
            return bad("gal.lipschitz_samples", "must be at least 2".into());
        }
        if self.rank == 0 {
            return bad("model.rank", "must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("model.hidden", "layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Local data of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub net: LoraNetwork,
    /// Difficulty of each batch on the initial model, by batch id.
    pub batch_scores: Vec<BatchScore>,
    /// Batch ids in training order (ascending difficulty with the curriculum on).
    pub order: Vec<usize>,
    pub mask: NeuronMask,
    /// Local update ratio `ρ` of each layer.
    pub rho: Vec<f64>,
    pub n_k: usize,
    pub data: DeviceData,
}

fn batch(train: &[Sample], batch_id: usize, batch_size: usize) -> &[Sample] {
    let start = batch_id * batch_size;
    &train[start..(start + batch_size).min(train.len())]
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Flattened adapters of the GAL layers, in layer order.
    pub global: Vec<f64>,
    pub gal: GalDecision,
    pub round: usize,
}

/// A device's upload: its GAL-layer adapters only.
#[derive(Debug, Clone, PartialEq)]
pub struct GalPayload {
    pub device: usize,
    pub n_k: usize,
    /// `(layer index, A then B row-major)` for each GAL layer.
    pub layers: Vec<(usize, Vec<f64>)>,
}

impl GalPayload {
    pub fn from_network(device: usize, n_k: usize, net: &LoraNetwork, gal: &GalDecision) -> Self {
        let flat = net.lora_params();
        let ranges = net.lora_ranges();
        let layers = gal.gal_layers.iter().map(|&l| (l, flat[ranges[l].clone()].to_vec())).collect();
        Self { device, n_k, layers }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn value_count(&self) -> usize {
        self.layers.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(PAYLOAD_MAGIC);
        w.u32(self.device as u32);
        w.u32(self.n_k as u32);
        w.u32(self.layers.len() as u32);
        for (l, v) in &self.layers {
            w.u32(*l as u32);
            w.u32(v.len() as u32);
            w.f64s(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_magic(bytes, PAYLOAD_MAGIC)?;
        let device = r.usize()?;
        let n_k = r.usize()?;
        let count = r.usize()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let l = r.usize()?;
            let len = r.usize()?;
            layers.push((l, r.f64s(len)?));
        }
        r.finish()?;
        Ok(Self { device, n_k, layers })
    }
}

/// Writes the GAL-layer adapters from `global` into `net`.
pub fn install_gal(net: &mut LoraNetwork, gal: &GalDecision, global: &[f64]) -> Result<()> {
    let ranges = net.lora_ranges();
    let expected: usize = gal.gal_layers.iter().map(|&l| ranges[l].len()).sum();
    ensure!(global.len() == expected, Shape, "global GAL vector has {} entries, expected {expected}", global.len());
    let mut flat = net.lora_params();
    let mut offset = 0;
    for &l in &gal.gal_layers {
        let r = ranges[l].clone();
        flat[r.clone()].copy_from_slice(&global[offset..offset + r.len()]);
        offset += r.len();
    }
    net.set_lora_params(&flat)
}

/// Uniform sample of `count` distinct device ids, ascending.
pub fn sample_devices(num_devices: usize, count: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    ensure!(count <= num_devices, Contract, "cannot sample {count} of {num_devices} devices");
    let mut ids: Vec<usize> = (0..num_devices).collect();
    rng.shuffle(&mut ids);
    ids.truncate(count);
    ids.sort_unstable();
    Ok(ids)
}

/// `Σ (n_k/m)·P_k` over the participants, `m = Σ n_k`, accumulated in the
/// given order.
pub fn fedavg_gal(updates: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    ensure!(!updates.is_empty(), Contract, "no updates to aggregate");
    let len = updates[0].1.len();
    ensure!(updates.iter().all(|(_, p)| p.len() == len), Shape, "updates have different lengths");
    let total: usize = updates.iter().map(|(n, _)| n).sum();
    ensure!(total > 0, Contract, "total sample weight is zero");
    let m = total as f64;
    let mut out = vec![0.0; len];
    for (n, p) in updates {
        let w = *n as f64 / m;
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Bytes moved per direction in one round: `sampled × Σ_{GAL} (|A|+|B|) × 8`.
pub fn comm_bytes(layer_sizes: &[usize], gal: &GalDecision, sampled: usize) -> (u64, u64) {
    let per_device: usize = gal.gal_layers.iter().map(|&l| layer_sizes[l]).sum();
    let bytes = (sampled * per_device * 8) as u64;
    (bytes, bytes)
}

/// SHA-256 over every adapter entry that must never change on a device:
/// non-GAL layers' `B` rows whose neuron is masked off, and `A` when the
/// whole layer is masked off.
pub fn frozen_adapter_digest(net: &LoraNetwork, gal: &GalDecision, mask: &NeuronMask) -> [u8; 32] {
    let mut h = Sha256::new();
    for (l, layer) in net.layers().iter().enumerate() {
        if gal.contains(l) {
            continue;
        }
        let Some(rows) = mask.layer(l) else { continue };
        if !rows.iter().any(|&r| r) {
            for v in layer.a().data() {
                h.update(v.to_le_bytes());
            }
        }
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| !r) {
            for v in layer.b().row(i) {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitReport {
    pub gal: GalDecision,
    /// Sample-weighted mean `ρ` per layer over devices.
    pub mean_rho: Vec<f64>,
    pub params: ParamCount,
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub train_loss: f64,
    pub weighted_test_acc: f64,
    pub server_view_acc: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub init: InitReport,
    pub reports: Vec<RoundReport>,
    /// Server GAL vector before round 0 and after every round.
    pub global_history: Vec<Vec<f64>>,
}

struct LocalOutcome {
    payload: Vec<u8>,
    loss_sum: f64,
    samples_seen: usize,
}

/// One device's tuning round: GAL sync, then `local_iterations` passes over
/// the curriculum-selected batches with masked SGD on the summed batch gradient.
pub fn local_round(
    device: &mut DeviceState,
    gal: &GalDecision,
    global: &[f64],
    t: usize,
    cfg: &FederationConfig,
) -> Result<(GalPayload, f64, usize)> {
    install_gal(&mut device.net, gal, global)?;
    let total = num_batches(device.n_k, cfg.batch_size);
    let count = if cfg.components.curriculum { pace_count(&cfg.pacing(), t, device.n_k)? } else { total };
    let selected = select_batches(&device.order, count)?;
    let mask = if device.mask.is_unrestricted() { None } else { Some(&device.mask) };

    let mut loss_sum = 0.0;
    let mut seen = 0;
    for _ in 0..cfg.local_iterations {
        for &b in &selected {
            let batch = batch(&device.data.train, b, cfg.batch_size);
            let (g, loss) = device.net.batch_gradients(batch)?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite(format!("device {} round {t} batch {b}: loss {loss}", device.id)));
            }
            device.net.apply_update(&g, cfg.lr, mask)?;
            loss_sum += loss;
            seen += batch.len();
        }
    }
    Ok((GalPayload::from_network(device.id, device.n_k, &device.net, gal), loss_sum, seen))
}

struct DeviceInit {
    state: DeviceState,
    stats: Option<DeviceGalStats>,
    fim: Option<FimDiag>,
    layer_rho: Vec<f64>,
}

fn init_device(id: usize, data: DeviceData, initial: &LoraNetwork, cfg: &FederationConfig) -> Result<DeviceInit> {
    let n_k = data.train.len();
    let batch_scores = score_batches(initial, &data.train, cfg.batch_size)?;
    let order = if cfg.components.curriculum { sort_batches(&batch_scores) } else { (0..batch_scores.len()).collect() };
    let layers = initial.num_layers();
    let mut state = DeviceState {
        id,
        net: initial.clone(),
        batch_scores,
        order,
        mask: NeuronMask::unrestricted(layers),
        rho: vec![1.0; layers],
        n_k,
        data,
    };
    if !cfg.components.gal_selection {
        return Ok(DeviceInit { state, stats: None, fim: None, layer_rho: vec![1.0; layers] });
    }

    let p0 = initial.lora_params();
    let epochs = cfg.t_warm.max(if cfg.components.masks { cfg.t_prime } else { 0 });
    let mut fim: Option<FimDiag> = None;
    let mut snapshot = (cfg.t_warm == 0).then(|| state.net.clone());
    for epoch in 0..epochs {
        if cfg.components.masks && epoch < cfg.t_prime {
            let fresh = device_fim(&state.net, &state.data.train)?;
            fim = Some(momentum_update(fim.as_ref(), &fresh, cfg.gamma_m)?);
        }
        for b in 0..num_batches(n_k, cfg.batch_size) {
            let (g, loss) = state.net.batch_gradients(batch(&state.data.train, b, cfg.batch_size))?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite(format!("device {id} warmup epoch {epoch}: loss {loss}")));
            }
            state.net.apply_update(&g, cfg.lr, None)?;
        }
        if epoch + 1 == cfg.t_warm {
            snapshot = Some(state.net.clone());
        }
    }
    let warmed = snapshot.expect("snapshot taken at t_warm");

    let mut rng = SimRng::stream(cfg.seed, streams::ANALYSIS | id as u64);
    let settings = LosslessSettings { lipschitz_samples: cfg.lipschitz_samples };
    let analysis = lossless_analysis(&warmed, &p0, &state.data.train, &settings, &mut rng)?;
    let layer_scores = device_layer_scores(&warmed, &state.data.train, &cfg.noise)?;
    let layer_rho: Vec<f64> = (0..layers).map(|l| ratio_from_analysis(&analysis, l)).collect();
    state.rho = layer_rho.clone();
    let stats = DeviceGalStats {
        device: id,
        n_k,
        r_k: analysis.whole.r,
        rank_k: analysis.whole.rank,
        lipschitz: analysis.whole.lipschitz,
        layer_scores,
    };
    Ok(DeviceInit { state, stats: Some(stats), fim, layer_rho })
}

/// Init phase: batch scoring, warmup with momentum FIM, lossless analysis,
/// GAL selection at the server and per-device masks for the local layers.
pub fn init_phase(
    devices: Vec<DeviceData>,
    initial: &LoraNetwork,
    cfg: &FederationConfig,
) -> Result<(ServerState, Vec<DeviceState>, InitReport)> {
    cfg.validate()?;
    ensure!(
        devices.len() == cfg.num_devices,
        Contract,
        "{} device datasets for {} devices",
        devices.len(),
        cfg.num_devices
    );
    for (k, d) in devices.iter().enumerate() {
        if d.train.len() < cfg.batch_size || d.test.is_empty() {
            return Err(Error::config(
                "data",
                format!("device {k} has {} train / {} test samples; needs a full batch and a test sample", d.train.len(), d.test.len()),
            ));
        }
    }

    let inits: Vec<DeviceInit> = devices
        .into_par_iter()
        .enumerate()
        .map(|(k, d)| init_device(k, d, initial, cfg))
        .collect::<Result<_>>()?;

    let layers = initial.num_layers();
    let gal = if cfg.components.gal_selection {
        let stats = inits.iter().map(|i| i.stats.clone().expect("analysis ran")).collect();
        GalDecision::decide(stats, layers, cfg.mu)?
    } else {
        GalDecision::all_layers(layers, cfg.mu)
    };

    let mut states = Vec::with_capacity(inits.len());
    let mut weighted_rho = vec![0.0; layers];
    let mut params = ParamCount { trainable: 0, frozen: 0 };
    let total_n: usize = inits.iter().map(|i| i.state.n_k).sum();
    for init in inits {
        let mut state = init.state;
        if cfg.components.masks {
            if let Some(fim) = &init.fim {
                let mut layers_mask = Vec::with_capacity(layers);
                for l in 0..layers {
                    if gal.contains(l) {
                        layers_mask.push(None);
                    } else {
                        layers_mask.push(Some(build_mask(&neuron_scores(fim, l)?, init.layer_rho[l])?));
                    }
                }
                state.mask = NeuronMask::new(layers_mask);
            }
        }
        for (w, r) in weighted_rho.iter_mut().zip(&state.rho) {
            *w += state.n_k as f64 / total_n as f64 * r;
        }
        let c = masked_param_count(&state.net, &gal, &state.mask);
        params.trainable += c.trainable;
        params.frozen += c.frozen;
        states.push(state);
    }

    let payloads: Vec<GalPayload> = states.iter().map(|s| GalPayload::from_network(s.id, s.n_k, &s.net, &gal)).collect();
    let first = payloads[0].flat();
    let global = if payloads.iter().all(|p| p.flat() == first) {
        first
    } else {
        fedavg_gal(&payloads.iter().map(|p| (p.n_k, p.flat())).collect::<Vec<_>>())?
    };

    let warmup_epochs = if cfg.components.gal_selection { cfg.t_warm.max(if cfg.components.masks { cfg.t_prime } else { 0 }) } else { 0 };
    let report = InitReport { gal: gal.clone(), mean_rho: weighted_rho, params, warmup_epochs };
    Ok((ServerState { global, gal, round: 0 }, states, report))
}

/// Step-wise driver over the whole protocol.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: FederationConfig,
    initial: LoraNetwork,
    server: ServerState,
    devices: Vec<DeviceState>,
    init: InitReport,
}

impl Simulation {
    pub fn new(cfg: FederationConfig, initial: LoraNetwork, devices: Vec<DeviceData>) -> Result<Self> {
        let (server, devices, init) = init_phase(devices, &initial, &cfg)?;
        Ok(Self { cfg, initial, server, devices, init })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn init_report(&self) -> &InitReport {
        &self.init
    }

    pub fn initial_network(&self) -> &LoraNetwork {
        &self.initial
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.cfg.rounds
    }

    /// Runs the next round; also returns the serialized uploads, in device order.
    pub fn run_round(&mut self) -> Result<(RoundReport, Vec<Vec<u8>>)> {
        ensure!(!self.is_finished(), Contract, "all {} rounds already ran", self.cfg.rounds);
        let start = Instant::now();
        let t = self.server.round;
        let mut rng = SimRng::stream(self.cfg.seed, streams::ROUND | t as u64);
        let sampled = sample_devices(self.cfg.num_devices, self.cfg.sampled_per_round, &mut rng)?;

        let (cfg, gal, global) = (&self.cfg, &self.server.gal, &self.server.global);
        let outcomes: Vec<LocalOutcome> = self
            .devices
            .par_iter_mut()
            .filter(|d| sampled.binary_search(&d.id).is_ok())
            .map(|d| {
                let (payload, loss_sum, samples_seen) = local_round(d, gal, global, t, cfg)?;
                Ok(LocalOutcome { payload: payload.to_bytes(), loss_sum, samples_seen })
            })
            .collect::<Result<_>>()?;

        let mut updates = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            let p = GalPayload::from_bytes(&o.payload)?;
            let layers: Vec<usize> = p.layers.iter().map(|(l, _)| *l).collect();
            ensure!(layers == gal.gal_layers, Contract, "device {} uploaded layers {layers:?}", p.device);
            updates.push((p.n_k, p.flat()));
        }
        self.server.global = fedavg_gal(&updates)?;
        self.server.round += 1;

        let loss_sum: f64 = outcomes.iter().map(|o| o.loss_sum).sum();
        let seen: usize = outcomes.iter().map(|o| o.samples_seen).sum();
        let (weighted_test_acc, server_view_acc) = self.evaluate()?;
        let sizes: Vec<usize> = self.initial.layers().iter().map(|l| l.lora_len()).collect();
        let (bytes_down, bytes_up) = comm_bytes(&sizes, &self.server.gal, sampled.len());
        let report = RoundReport {
            round: t,
            sampled,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            weighted_test_acc,
            server_view_acc,
            bytes_down,
            bytes_up,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        Ok((report, outcomes.into_iter().map(|o| o.payload).collect()))
    }

    /// Personalized accuracy (device layers plus global GAL) weighted by test
    /// size, and the accuracy of the initial network carrying the global GAL.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (gal, global) = (&self.server.gal, &self.server.global);
        let mut server_net = self.initial.clone();
        install_gal(&mut server_net, gal, global)?;
        let counts: Vec<(usize, usize, usize)> = self
            .devices
            .par_iter()
            .map(|d| {
                let mut net = d.net.clone();
                install_gal(&mut net, gal, global)?;
                let mut personal = 0;
                let mut server = 0;
                for s in &d.data.test {
                    personal += usize::from(net.predict(&s.features)? == s.label);
                    server += usize::from(server_net.predict(&s.features)? == s.label);
                }
                Ok((personal, server, d.data.test.len()))
            })
            .collect::<Result<_>>()?;
        let total: usize = counts.iter().map(|c| c.2).sum();
        let personal: usize = counts.iter().map(|c| c.0).sum();
        let server: usize = counts.iter().map(|c| c.1).sum();
        Ok((personal as f64 / total as f64, server as f64 / total as f64))
    }
}

/// Init phase then every tuning round.
pub fn run(cfg: &FederationConfig, initial: LoraNetwork, devices: Vec<DeviceData>) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg.clone(), initial, devices)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut global_history = vec![sim.server().global.clone()];
    while !sim.is_finished() {
        let (report, _) = sim.run_round()?;
        reports.push(report);
        global_history.push(sim.server().global.clone());
    }
    Ok(RunOutput { init: sim.init.clone(), reports, global_history })
}
