//! Global aggregation layer (GAL) selection.
//!
//! Layers are ranked by how strongly their hidden states react to a
//! loss-maximizing input perturbation. How many of them get synchronized is
//! decided by the eigengap rule on the local-loss Hessian: the first index
//! whose consecutive eigenvalue gap exceeds four times the Lipschitz constant
//! of `δ ↦ H·δ − ∇L(P_T + δ)` marks the part of the spectrum that can be
//! dropped without loss.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::lora::LoraNetwork;
use crate::numeric::{default_step, eigh_symmetric, finite_diff_hessian, norm2, Matrix, SimRng};

/// Relative threshold below which a Hessian eigenvalue counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub noise_budget: f64,
    pub p_norm: f64,
}

impl NoiseConfig {
    pub fn new(noise_budget: f64, p_norm: f64) -> Result<Self> {
        let cfg = Self { noise_budget, p_norm };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.noise_budget > 0.0 && self.noise_budget.is_finite(), Contract, "noise budget must be positive");
        ensure!(self.p_norm >= 1.0 && self.p_norm.is_finite(), Contract, "p must be a finite value >= 1");
        Ok(())
    }

    /// Conjugate exponent, `1/p + 1/q = 1`. Infinite for `p = 1`.
    pub fn q_norm(&self) -> f64 {
        if self.p_norm == 1.0 {
            f64::INFINITY
        } else {
            self.p_norm / (self.p_norm - 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOutcome {
    pub noise: Vec<f64>,
    /// Set when the gradient vanished and no direction could be chosen.
    pub degenerate: bool,
}

/// Maximizer of `εᵀg` over `‖ε‖_p ≤ γ`:
/// `γ · sign(g)|g|^(q−1) / (‖g‖_q^q)^(1/p)`.
pub fn dual_norm_noise(g: &[f64], cfg: &NoiseConfig) -> NoiseOutcome {
    let peak = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return NoiseOutcome { noise: vec![0.0; g.len()], degenerate: true };
    }
    let gamma = cfg.noise_budget;
    if cfg.p_norm == 1.0 {
        let top = g.iter().position(|v| v.abs() == peak).unwrap();
        let mut noise = vec![0.0; g.len()];
        noise[top] = gamma * g[top].signum();
        return NoiseOutcome { noise, degenerate: false };
    }
    let q = cfg.q_norm();
    // the closed form is invariant to positive rescaling of g
    let scaled: Vec<f64> = g.iter().map(|v| v / peak).collect();
    let denom = scaled.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / cfg.p_norm);
    let noise = scaled.iter().map(|v| gamma * v.signum() * v.abs().powf(q - 1.0) / denom).collect();
    NoiseOutcome { noise, degenerate: false }
}

/// Loss-maximizing input perturbation within the `ℓ_p` budget.
pub fn adversarial_noise(net: &LoraNetwork, s: &[f64], label: usize, cfg: &NoiseConfig) -> Result<NoiseOutcome> {
    cfg.validate()?;
    let g = net.backward(s, label)?.d_input;
    ensure!(g.iter().all(|v| v.is_finite()), NonFinite, "input gradient is not finite");
    Ok(dual_norm_noise(&g, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiff {
    pub values: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// `(‖h_l(s+ε)‖ − ‖h_l(s)‖) / ‖h_l(s)‖` for every layer. A layer whose clean
/// output is all zero scores 0 and is flagged.
pub fn layer_relative_diff(net: &LoraNetwork, s: &[f64], eps: &[f64]) -> Result<LayerDiff> {
    ensure!(s.len() == eps.len(), Shape, "sample has {} features, noise {}", s.len(), eps.len());
    let clean = net.forward(s, None)?;
    let perturbed: Vec<f64> = s.iter().zip(eps).map(|(a, b)| a + b).collect();
    let noisy = net.forward(&perturbed, None)?;
    let mut values = Vec::with_capacity(clean.hidden.len());
    let mut degenerate = Vec::with_capacity(clean.hidden.len());
    for (h, h_eps) in clean.hidden.iter().zip(&noisy.hidden) {
        let base = norm2(h);
        if base == 0.0 {
            values.push(0.0);
            degenerate.push(true);
        } else {
            values.push((norm2(h_eps) - base) / base);
            degenerate.push(false);
        }
    }
    Ok(LayerDiff { values, degenerate })
}

/// Mean per-layer sensitivity over a device's local samples.
pub fn device_layer_scores(net: &LoraNetwork, samples: &[Sample], cfg: &NoiseConfig) -> Result<Vec<f64>> {
    ensure!(!samples.is_empty(), Contract, "layer scores need at least one local sample");
    let mut acc = vec![0.0; net.num_layers()];
    for s in samples {
        let noise = adversarial_noise(net, &s.features, s.label, cfg)?;
        let diff = layer_relative_diff(net, &s.features, &noise.noise)?;
        for (a, v) in acc.iter_mut().zip(diff.values) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Sample-count weighted average of per-device layer scores.
pub fn aggregate_layer_scores(per_device: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    ensure!(!per_device.is_empty(), Contract, "no device scores to aggregate");
    let layers = per_device[0].1.len();
    ensure!(per_device.iter().all(|(_, s)| s.len() == layers), Shape, "devices report different layer counts");
    let total: usize = per_device.iter().map(|(n, _)| n).sum();
    ensure!(total > 0, Contract, "total sample count is zero");
    let mut out = vec![0.0; layers];
    for (n, scores) in per_device {
        for (o, s) in out.iter_mut().zip(scores) {
            *o += *n as f64 * s;
        }
    }
    Ok(out.into_iter().map(|v| v / total as f64).collect())
}

fn sample_in_ball(center: &[f64], radius: f64, rng: &mut SimRng) -> Vec<f64> {
    let dir: Vec<f64> = (0..center.len()).map(|_| rng.normal()).collect();
    let n = norm2(&dir);
    let r = radius * rng.uniform().powf(1.0 / center.len().max(1) as f64);
    center.iter().zip(&dir).map(|(c, d)| c + r * d / n.max(f64::MIN_POSITIVE)).collect()
}

/// Largest observed difference quotient `‖g(x)−g(y)‖ / ‖x−y‖` over pairs of
/// points drawn uniformly from a ball. Coincident pairs are skipped.
pub fn lipschitz_estimate<G>(mut g: G, center: &[f64], radius: f64, samples: usize, rng: &mut SimRng) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    ensure!(samples >= 2, Contract, "need at least two sample points, got {samples}");
    ensure!(radius > 0.0 && radius.is_finite(), Contract, "radius must be positive, got {radius}");
    let points: Vec<Vec<f64>> = (0..samples).map(|_| sample_in_ball(center, radius, rng)).collect();
    let values = points.iter().map(|p| g(p)).collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for i in 0..samples {
        for j in (i + 1)..samples {
            let dx = norm2(&points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dx == 0.0 {
                continue;
            }
            let dg = norm2(&values[i].iter().zip(&values[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
            let ratio = dg / dx;
            ensure!(ratio.is_finite(), NonFinite, "non-finite difference quotient");
            best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
        }
    }
    best.ok_or_else(|| Error::Estimation("every sampled pair coincided".into()))
}

/// First 1-based `r` with `λ_{r+1} − λ_r > 4·lipschitz`; `R` when no gap qualifies.
pub fn eigengap_rank(eigenvalues: &[f64], lipschitz: f64) -> Result<usize> {
    ensure!(!eigenvalues.is_empty(), Contract, "eigengap rule needs a non-empty spectrum");
    let threshold = 4.0 * lipschitz;
    Ok(eigenvalues
        .windows(2)
        .position(|w| w[1] - w[0] > threshold)
        .map_or(eigenvalues.len(), |i| i + 1))
}

/// Eigenvalues that carry numerical rank, `|λ| > 1e-8·max|λ|`, kept ascending.
pub fn rank_spectrum(eigenvalues: &[f64]) -> Vec<f64> {
    let peak = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Vec::new();
    }
    eigenvalues.iter().copied().filter(|v| v.abs() > RANK_TOLERANCE * peak).collect()
}

/// Eigengap outcome for one Hessian (whole model or one layer block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCut {
    /// Eigengap index `r`, 1-based.
    pub r: usize,
    /// Numerical rank `R`.
    pub rank: usize,
    pub lipschitz: f64,
}

impl SpectrumCut {
    /// `1 − r/R`
    pub fn keep_ratio(&self) -> f64 {
        1.0 - self.r as f64 / self.rank as f64
    }

    fn from_eigenvalues(eigenvalues: &[f64], lipschitz: f64) -> Result<Self> {
        let spectrum = rank_spectrum(eigenvalues);
        if spectrum.is_empty() {
            // flat loss surface: no confident cut
            return Ok(Self { r: 1, rank: 1, lipschitz });
        }
        Ok(Self { r: eigengap_rank(&spectrum, lipschitz)?, rank: spectrum.len(), lipschitz })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosslessSettings {
    /// Points drawn in the Lipschitz ball.
    pub lipschitz_samples: usize,
}

impl Default for LosslessSettings {
    fn default() -> Self {
        Self { lipschitz_samples: 64 }
    }
}

/// Hessian spectrum analysis of one device's local loss at the warmed-up
/// adapters, for the whole model and for each layer's diagonal block.
#[derive(Debug, Clone, PartialEq)]
pub struct LosslessAnalysis {
    pub hessian: Matrix,
    pub eigenvalues: Vec<f64>,
    pub whole: SpectrumCut,
    pub layers: Vec<SpectrumCut>,
}

/// Runs the eigengap analysis for a device.
///
/// `net` holds the warmed-up adapters `P_T`; `initial` is `P_0` in flat order.
/// The Hessian is the finite-difference Jacobian of the mean analytic adapter
/// gradient. Lipschitz constants are estimated in the ball of radius `‖Δ‖`
/// centred at `Δ = P_0 − P_T`, per layer on that layer's coordinates only.
pub fn lossless_analysis(
    net: &LoraNetwork,
    initial: &[f64],
    samples: &[Sample],
    settings: &LosslessSettings,
    rng: &mut SimRng,
) -> Result<LosslessAnalysis> {
    let warmed = net.lora_params();
    ensure!(initial.len() == warmed.len(), Shape, "initial adapters have {} entries, network {}", initial.len(), warmed.len());
    ensure!(!samples.is_empty(), Contract, "lossless analysis needs local samples");

    let mut probe = net.clone();
    let mut grad_at = |theta: &[f64]| -> Result<Vec<f64>> {
        probe.set_lora_params(theta)?;
        probe.mean_lora_gradient(samples)
    };
    let hessian = finite_diff_hessian(&mut grad_at, &warmed, default_step(&warmed))?;
    let (eigenvalues, _) = eigh_symmetric(&hessian)?;

    let delta: Vec<f64> = initial.iter().zip(&warmed).map(|(a, b)| a - b).collect();
    let ranges = net.lora_ranges();

    let whole_lip = estimate_base_lipschitz(&hessian, &warmed, &delta, 0..warmed.len(), settings, rng, &mut grad_at)?;
    let whole = SpectrumCut::from_eigenvalues(&eigenvalues, whole_lip)?;

    let mut layers = Vec::with_capacity(ranges.len());
    for range in ranges {
        let block = hessian.principal_block(range.start, range.end);
        let (block_eigs, _) = eigh_symmetric(&block)?;
        let lip = estimate_base_lipschitz(&hessian, &warmed, &delta, range, settings, rng, &mut grad_at)?;
        layers.push(SpectrumCut::from_eigenvalues(&block_eigs, lip)?);
    }
    Ok(LosslessAnalysis { hessian, eigenvalues, whole, layers })
}

/// Lipschitz constant of `δ ↦ H·δ − ∇L(P_T + δ)` restricted to the
/// coordinates in `range`. A zero displacement gives a single-point domain
/// and a constant of zero.
fn estimate_base_lipschitz<G>(
    hessian: &Matrix,
    warmed: &[f64],
    delta: &[f64],
    range: std::ops::Range<usize>,
    settings: &LosslessSettings,
    rng: &mut SimRng,
    grad_at: &mut G,
) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let center = &delta[range.clone()];
    let radius = norm2(center);
    if radius == 0.0 {
        return Ok(0.0);
    }
    let block = hessian.principal_block(range.start, range.end);
    let base = |d: &[f64]| -> Result<Vec<f64>> {
        let mut theta = warmed.to_vec();
        for (t, v) in theta[range.clone()].iter_mut().zip(d) {
            *t += v;
        }
        let grad = grad_at(&theta)?;
        Ok(block.matvec(d).into_iter().zip(&grad[range.clone()]).map(|(h, g)| h - g).collect())
    };
    lipschitz_estimate(base, center, radius, settings.lipschitz_samples, rng)
}

/// Per-device inputs to the GAL size rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceRank {
    pub n_k: usize,
    pub r_k: usize,
    pub rank_k: usize,
}

/// `N* = round((μ/N)·Σ n_k·(1 − r_k/R_k)·L)`, clamped to `[1, L]`.
pub fn gal_count(per_device: &[DeviceRank], num_layers: usize, mu: f64) -> Result<usize> {
    ensure!(num_layers >= 1, Contract, "model has no layers");
    ensure!(mu > 0.0 && mu.is_finite(), Contract, "mu must be positive, got {mu}");
    ensure!(!per_device.is_empty(), Contract, "no devices reported ranks");
    for d in per_device {
        ensure!(d.rank_k >= 1 && d.r_k <= d.rank_k, Contract, "invalid ranks r={} R={}", d.r_k, d.rank_k);
    }
    let total: usize = per_device.iter().map(|d| d.n_k).sum();
    ensure!(total > 0, Contract, "total sample count is zero");
    let weighted: f64 = per_device
        .iter()
        .map(|d| d.n_k as f64 * (1.0 - d.r_k as f64 / d.rank_k as f64) * num_layers as f64)
        .sum();
    let raw = mu / total as f64 * weighted;
    Ok((raw.round() as usize).clamp(1, num_layers))
}

/// Indices of the `n_star` highest scores (ties to the lower index), ascending.
pub fn select_gal(scores: &[f64], n_star: usize) -> Result<Vec<usize>> {
    ensure!(n_star <= scores.len(), Contract, "cannot select {n_star} of {} layers", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..n_star].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceGalStats {
    pub device: usize,
    pub n_k: usize,
    pub r_k: usize,
    pub rank_k: usize,
    pub lipschitz: f64,
    pub layer_scores: Vec<f64>,
}

/// Server-side outcome of GAL selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalDecision {
    pub gal_layers: Vec<usize>,
    pub n_star: usize,
    pub mu: f64,
    pub global_scores: Vec<f64>,
    pub devices: Vec<DeviceGalStats>,
}

impl GalDecision {
    /// Every layer synchronized, as in plain federated LoRA.
    pub fn all_layers(num_layers: usize, mu: f64) -> Self {
        Self {
            gal_layers: (0..num_layers).collect(),
            n_star: num_layers,
            mu,
            global_scores: Vec::new(),
            devices: Vec::new(),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.gal_layers.binary_search(&layer).is_ok()
    }

    /// Builds the decision from per-device scores and ranks.
    pub fn decide(devices: Vec<DeviceGalStats>, num_layers: usize, mu: f64) -> Result<Self> {
        let scores: Vec<(usize, Vec<f64>)> = devices.iter().map(|d| (d.n_k, d.layer_scores.clone())).collect();
        let global_scores = aggregate_layer_scores(&scores)?;
        let ranks: Vec<DeviceRank> =
            devices.iter().map(|d| DeviceRank { n_k: d.n_k, r_k: d.r_k, rank_k: d.rank_k }).collect();
        let n_star = gal_count(&ranks, num_layers, mu)?;
        let gal_layers = select_gal(&global_scores, n_star)?;
        Ok(Self { gal_layers, n_star, mu, global_scores, devices })
    }
}
