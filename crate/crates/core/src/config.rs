//! Experiment configuration: a TOML document with one table per component.
//!
//! Every key is optional; missing keys take the desk-scale defaults. Unknown
//! keys, type errors and cross-field violations are rejected with the dotted
//! name of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::Pace;
use crate::error::{Error, Result};
use crate::federation::{Components, FederationConfig};
use crate::gal::NoiseConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Fibecfed,
    NoCurriculum,
    FullSync,
    NoMask,
    FedavgLora,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Fibecfed, Mode::NoCurriculum, Mode::FullSync, Mode::NoMask, Mode::FedavgLora];

    pub fn components(self) -> Components {
        match self {
            Mode::Fibecfed => Components::ALL,
            Mode::NoCurriculum => Components { curriculum: false, ..Components::ALL },
            Mode::FullSync => Components { gal_selection: false, ..Components::ALL },
            Mode::NoMask => Components { masks: false, ..Components::ALL },
            Mode::FedavgLora => Components::NONE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fibecfed => "fibecfed",
            Mode::NoCurriculum => "no-curriculum",
            Mode::FullSync => "full-sync",
            Mode::NoMask => "no-mask",
            Mode::FedavgLora => "fedavg-lora",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected one of fibecfed, no-curriculum, full-sync, no-mask, fedavg-lora)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_devices: usize,
    pub sampled_per_round: usize,
    pub rounds: usize,
    pub local_iterations: usize,
    pub lr: f64,
    /// Write measured wall time into the metrics; off keeps reruns byte-identical.
    pub record_wall_time: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self { num_devices: 20, sampled_per_round: 5, rounds: 60, local_iterations: 2, lr: 0.01, record_wall_time: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub beta: f64,
    pub alpha: f64,
    pub pace: Pace,
    pub batch_size: usize,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self { beta: 0.6, alpha: 0.8, pace: Pace::Linear, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalSection {
    pub noise_budget: f64,
    pub p_norm: f64,
    pub mu: f64,
    /// Local warmup epochs before the Hessian analysis.
    pub t_warm: usize,
    pub lipschitz_samples: usize,
}

impl Default for GalSection {
    fn default() -> Self {
        Self { noise_budget: 0.1, p_norm: 2.0, mu: 1.0, t_warm: 3, lipschitz_samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub gamma_m: f64,
    /// Epochs of momentum FIM accumulation.
    pub t_prime: usize,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self { gamma_m: 0.9, t_prime: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub class_sep: f64,
    pub dirichlet_alpha: f64,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { num_classes: 10, dim: 16, per_class: 200, class_sep: 3.0, dirichlet_alpha: 1.0, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub rank: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![16, 16], rank: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub federation: FederationSection,
    pub curriculum: CurriculumSection,
    pub gal: GalSection,
    pub mask: MaskSection,
    pub data: DataSection,
    pub model: ModelSection,
}

impl ExperimentConfig {
    /// Full scale: 100 devices, 10 per round, 100 rounds, 10000 samples.
    pub fn full_scale_preset() -> Self {
        Self {
            federation: FederationSection {
                num_devices: 100,
                sampled_per_round: 10,
                rounds: 100,
                local_iterations: 2,
                lr: 4e-4,
                record_wall_time: false,
            },
            data: DataSection { per_class: 1000, ..DataSection::default() },
            ..Self::default()
        }
    }

    /// Smallest shard that still leaves a full batch after the train/test split.
    pub fn min_shard_size(&self) -> usize {
        let b = self.curriculum.batch_size as f64;
        (b / self.data.train_fraction).ceil() as usize + 1
    }

    pub fn total_samples(&self) -> usize {
        self.data.num_classes * self.data.per_class
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            num_devices: self.federation.num_devices,
            sampled_per_round: self.federation.sampled_per_round,
            rounds: self.federation.rounds,
            local_iterations: self.federation.local_iterations,
            lr: self.federation.lr,
            batch_size: self.curriculum.batch_size,
            beta: self.curriculum.beta,
            alpha: self.curriculum.alpha,
            pace: self.curriculum.pace,
            noise: NoiseConfig { noise_budget: self.gal.noise_budget, p_norm: self.gal.p_norm },
            mu: self.gal.mu,
            gamma_m: self.mask.gamma_m,
            t_warm: self.gal.t_warm,
            t_prime: self.mask.t_prime,
            lipschitz_samples: self.gal.lipschitz_samples,
            hidden: self.model.hidden.clone(),
            rank: self.model.rank,
            seed: self.seed,
            components: self.mode.components(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.federation_config().validate()?;
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::config("data.num_classes", format!("need at least 2 classes, got {}", d.num_classes)));
        }
        if d.dim == 0 {
            return Err(Error::config("data.dim", "must be at least 1"));
        }
        if d.per_class == 0 {
            return Err(Error::config("data.per_class", "must be at least 1"));
        }
        if !(d.class_sep > 0.0 && d.class_sep.is_finite()) {
            return Err(Error::config("data.class_sep", format!("must be positive, got {}", d.class_sep)));
        }
        if !(d.dirichlet_alpha > 0.0 && d.dirichlet_alpha.is_finite()) {
            return Err(Error::config("data.dirichlet_alpha", format!("must be positive, got {}", d.dirichlet_alpha)));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", format!("must lie strictly between 0 and 1, got {}", d.train_fraction)));
        }
        let needed = self.federation.num_devices * self.min_shard_size();
        if needed > self.total_samples() {
            return Err(Error::config(
                "data.per_class",
                format!(
                    "{} samples cannot give {} devices {} samples each (batch {}, train fraction {})",
                    self.total_samples(),
                    self.federation.num_devices,
                    self.min_shard_size(),
                    self.curriculum.batch_size,
                    d.train_fraction
                ),
            ));
        }
        if self.model.rank > self.data.dim.min(self.model.hidden.iter().copied().min().unwrap_or(usize::MAX)).min(d.num_classes) {
            return Err(Error::config("model.rank", format!("rank {} exceeds a layer dimension", self.model.rank)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let key = e.span().map(|span| key_at(text, span.start)).unwrap_or_default();
        let message = e.message().to_string();
        let key = unknown_field(&message).map(|f| qualify(&key, &f)).unwrap_or(key);
        Error::Config { key, message }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Replaces the last component of `key` by `field`, keeping its table prefix.
fn qualify(key: &str, field: &str) -> String {
    match key.rsplit_once('.') {
        Some((table, _)) => format!("{table}.{field}"),
        None => field.to_string(),
    }
}

/// Dotted key of the assignment on the line containing byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let line_start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let line = text[line_start..line_end].trim();
    let table = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let trimmed = line.trim_matches(|c| c == '[' || c == ']').trim();
    if line.starts_with('[') {
        return trimmed.to_string();
    }
    let name = line.split('=').next().unwrap_or("").trim().to_string();
    match table {
        Some(t) if !name.is_empty() => format!("{t}.{name}"),
        _ => name,
    }
}
