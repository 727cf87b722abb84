//! Diagonal Fisher information and the difficulty / importance scores built on it.
//!
//! The diagonal is taken over the reconstructed full-rank direction of each
//! layer: entries follow the row-major layout of the base weight `W`, and
//! entry `(i, j)` is the squared gradient of the log-likelihood with respect
//! to the effective weight `W + B·A`.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure, Result};
use crate::lora::LoraNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimDiag {
    /// `(d_out, d_in)` of each layer.
    shapes: Vec<(usize, usize)>,
    layers: Vec<Vec<f64>>,
}

impl FimDiag {
    pub fn zeros(shapes: Vec<(usize, usize)>) -> Self {
        let layers = shapes.iter().map(|(o, i)| vec![0.0; o * i]).collect();
        Self { shapes, layers }
    }

    pub fn zeros_for(net: &LoraNetwork) -> Self {
        Self::zeros(net.layers().iter().map(|l| (l.d_out(), l.d_in())).collect())
    }

    pub fn from_layers(shapes: Vec<(usize, usize)>, layers: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(shapes.len() == layers.len(), Shape, "{} shapes for {} layers", shapes.len(), layers.len());
        for (l, ((o, i), v)) in shapes.iter().zip(&layers).enumerate() {
            ensure!(v.len() == o * i, Shape, "layer {l} has {} entries, expected {}", v.len(), o * i);
            ensure!(v.iter().all(|x| x.is_finite() && *x >= 0.0), Contract, "layer {l} has negative or non-finite entries");
        }
        Ok(Self { shapes, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }

    fn check_same_shape(&self, other: &FimDiag) -> Result<()> {
        ensure!(self.shapes == other.shapes, Shape, "FIM shapes differ: {:?} vs {:?}", self.shapes, other.shapes);
        Ok(())
    }

    fn add_assign(&mut self, other: &FimDiag) {
        for (a, b) in self.layers.iter_mut().flatten().zip(other.iter()) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.layers.iter_mut().flatten() {
            *v *= s;
        }
    }
}

/// Diagonal empirical FIM of one sample: squared full-rank weight gradients.
pub fn sample_fim_diag(net: &LoraNetwork, s: &[f64], label: usize) -> Result<FimDiag> {
    let g = net.backward(s, label)?;
    ensure!(g.is_finite(), NonFinite, "gradient is not finite");
    let shapes = net.layers().iter().map(|l| (l.d_out(), l.d_in())).collect();
    let layers = g.layers.iter().map(|lg| lg.dw.data().iter().map(|v| v * v).collect()).collect();
    Ok(FimDiag { shapes, layers })
}

/// Trace of the diagonal FIM.
pub fn sample_score(fd: &FimDiag) -> f64 {
    fd.iter().sum()
}

pub fn batch_score(scores: &[f64]) -> Result<f64> {
    ensure!(!scores.is_empty(), Contract, "batch score of an empty batch");
    Ok(scores.iter().sum())
}

/// `γ·prev + (1−γ)·fresh`; the first window takes `fresh` as is.
pub fn momentum_update(prev: Option<&FimDiag>, fresh: &FimDiag, gamma_m: f64) -> Result<FimDiag> {
    ensure!((0.0..=1.0).contains(&gamma_m), Contract, "momentum coefficient must lie in [0, 1], got {gamma_m}");
    let Some(prev) = prev else {
        return Ok(fresh.clone());
    };
    prev.check_same_shape(fresh)?;
    let layers = prev
        .layers
        .iter()
        .zip(&fresh.layers)
        .map(|(p, f)| p.iter().zip(f).map(|(a, b)| gamma_m * a + (1.0 - gamma_m) * b).collect())
        .collect();
    Ok(FimDiag { shapes: prev.shapes.clone(), layers })
}

/// Importance of each output neuron: the sum of its row of the layer diagonal.
pub fn neuron_scores(fd: &FimDiag, layer: usize) -> Result<Vec<f64>> {
    ensure!(layer < fd.num_layers(), Contract, "layer {layer} out of range for {} layers", fd.num_layers());
    let (_, d_in) = fd.shapes[layer];
    Ok(fd.layers[layer].chunks(d_in.max(1)).map(|row| row.iter().sum()).collect())
}

/// Mean diagonal FIM over a device's local samples.
pub fn device_fim(net: &LoraNetwork, samples: &[Sample]) -> Result<FimDiag> {
    ensure!(!samples.is_empty(), Contract, "device FIM over an empty sample set");
    let mut acc = FimDiag::zeros_for(net);
    for s in samples {
        acc.add_assign(&sample_fim_diag(net, &s.features, s.label)?);
    }
    acc.scale(1.0 / samples.len() as f64);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub batch_id: usize,
    pub score: f64,
}

/// Difficulty of each consecutive batch of `batch_size` samples; a short tail
/// batch counts as one batch.
pub fn score_batches(net: &LoraNetwork, samples: &[Sample], batch_size: usize) -> Result<Vec<BatchScore>> {
    ensure!(batch_size >= 1, Contract, "batch size must be at least 1");
    samples
        .chunks(batch_size)
        .enumerate()
        .map(|(batch_id, chunk)| {
            let scores =
                chunk.iter().map(|s| sample_fim_diag(net, &s.features, s.label).map(|f| sample_score(&f))).collect::<Result<Vec<_>>>()?;
            Ok(BatchScore { batch_id, score: batch_score(&scores)? })
        })
        .collect()
}
