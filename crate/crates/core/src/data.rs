//! Synthetic Gaussian-blob datasets and Dirichlet non-IID partitioning.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::numeric::{dot, norm2, SimRng};

const DATASET_MAGIC: &[u8; 4] = b"FBDS";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        ensure!(num_classes >= 1, Contract, "dataset needs at least one class");
        let dim = samples.first().map_or(0, |s| s.features.len());
        for (i, s) in samples.iter().enumerate() {
            ensure!(s.label < num_classes, Contract, "sample {i} has label {} >= {num_classes}", s.label);
            ensure!(s.features.len() == dim, Shape, "sample {i} has {} features, expected {dim}", s.features.len());
            ensure!(s.features.iter().all(|v| v.is_finite()), NonFinite, "sample {i} has non-finite features");
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect(), num_classes: self.num_classes }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(DATASET_MAGIC);
        w.u32(self.num_classes as u32);
        w.u32(self.dim() as u32);
        w.u32(self.samples.len() as u32);
        for s in &self.samples {
            w.u32(s.label as u32);
            w.f64s(&s.features);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_magic(bytes, DATASET_MAGIC)?;
        let num_classes = r.usize()?;
        let dim = r.usize()?;
        let count = r.usize()?;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let label = r.usize()?;
            samples.push(Sample { features: r.f64s(dim)?, label });
        }
        r.finish()?;
        Dataset::new(samples, num_classes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Class centres with pairwise distance at least `class_sep`.
///
/// When there are no more classes than dimensions the centres are a scaled
/// random orthonormal set, so every pair sits exactly `class_sep` apart.
pub fn class_means(num_classes: usize, dim: usize, class_sep: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    if num_classes <= dim {
        while dirs.len() < num_classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for d in &dirs {
                let p = dot(&v, d);
                for (x, y) in v.iter_mut().zip(d) {
                    *x -= p * y;
                }
            }
            let n = norm2(&v);
            if n > 1e-6 {
                dirs.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let scale = class_sep / std::f64::consts::SQRT_2;
        return dirs.into_iter().map(|d| d.into_iter().map(|x| x * scale).collect()).collect();
    }
    let points: Vec<Vec<f64>> = (0..num_classes).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..num_classes {
        for j in (i + 1)..num_classes {
            let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = class_sep / min_dist.max(1e-12) * (1.0 + 1e-12);
    points.into_iter().map(|p| p.into_iter().map(|x| x * scale).collect()).collect()
}

/// Gaussian blobs with unit covariance, one per class, shuffled.
pub fn generate(num_classes: usize, per_class: usize, dim: usize, class_sep: f64, rng: &mut SimRng) -> Result<Dataset> {
    ensure!(num_classes >= 1 && per_class >= 1 && dim >= 1, Contract, "class count, per-class count and dim must be >= 1");
    ensure!(class_sep > 0.0 && class_sep.is_finite(), Contract, "class_sep must be positive, got {class_sep}");
    let means = class_means(num_classes, dim, class_sep, rng);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            samples.push(Sample { features: mean.iter().map(|m| m + rng.normal()).collect(), label });
        }
    }
    rng.shuffle(&mut samples);
    Dataset::new(samples, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Dirichlet concentration; small values give skewed label mixes.
    pub concentration: f64,
    pub num_devices: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Every shard ends up with at least this many samples.
    pub min_shard_size: usize,
}

/// Draw from `Dirichlet(concentration · 1_k)`.
pub fn dirichlet_proportions(concentration: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.gamma(concentration)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return vec![1.0 / k as f64; k];
    }
    draws.into_iter().map(|g| g / total).collect()
}

/// Splits `ds` into `num_devices` disjoint index shards.
///
/// Per class, proportions come from a Dirichlet draw and each sample of the
/// class is assigned to a device by a categorical draw. Shards below
/// `min_shard_size` are then topped up from the currently largest shard.
pub fn dirichlet_partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    let k = cfg.num_devices;
    ensure!(k >= 1, Contract, "need at least one device");
    ensure!(k <= ds.len(), Contract, "{k} devices but only {} samples", ds.len());
    ensure!(cfg.concentration > 0.0 && cfg.concentration.is_finite(), Contract, "concentration must be positive");
    if k * cfg.min_shard_size > ds.len() {
        return Err(Error::config(
            "data",
            format!("{k} devices x {} minimum samples exceeds dataset size {}", cfg.min_shard_size, ds.len()),
        ));
    }

    let mut rng = SimRng::new(cfg.seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == class).collect();
        rng.shuffle(&mut members);
        let props = dirichlet_proportions(cfg.concentration, k, &mut rng);
        let mut cumulative = Vec::with_capacity(k);
        let mut acc = 0.0;
        for p in &props {
            acc += p;
            cumulative.push(acc);
        }
        for idx in members {
            let u = rng.uniform() * acc;
            let device = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
            shards[device].push(idx);
        }
    }

    while let Some(small) = (0..k).filter(|&d| shards[d].len() < cfg.min_shard_size).min_by_key(|&d| (shards[d].len(), d)) {
        let large = (0..k).max_by_key(|&d| (shards[d].len(), std::cmp::Reverse(d))).unwrap();
        let moved = shards[large].pop().expect("feasibility checked above");
        shards[small].push(moved);
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Label-stratified two-way split. Both halves are non-empty and each class
/// contributes within one sample of `train_fraction` of its members.
pub fn split(shard: &Dataset, train_fraction: f64, rng: &mut SimRng) -> Result<(Dataset, Dataset)> {
    let n = shard.len();
    ensure!(n >= 2, Contract, "cannot split a shard of {n} samples");
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        Contract,
        "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
    );
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); shard.num_classes()];
    for (i, s) in shard.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let quotas: Vec<f64> = by_class.iter().map(|m| train_fraction * m.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut extra = n_train.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..by_class.len()).filter(|&c| take[c] < by_class[c].len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for c in order {
        if extra == 0 {
            break;
        }
        take[c] += 1;
        extra -= 1;
    }

    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        for (j, &i) in members.iter().enumerate() {
            let s = shard.samples[i].clone();
            if j < take[c] {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    Ok((
        Dataset { samples: train, num_classes: shard.num_classes },
        Dataset { samples: test, num_classes: shard.num_classes },
    ))
}
