//! Neuron-level masks for the local (non-GAL) layers.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure, Result};
use crate::gal::{lossless_analysis, GalDecision, LosslessAnalysis, LosslessSettings, SpectrumCut};
use crate::lora::LoraNetwork;
use crate::numeric::SimRng;

/// Per layer, `None` means fully trainable; `Some(rows)` flags which output
/// neurons (rows of `B`) may train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    layers: Vec<Option<Vec<bool>>>,
}

impl NeuronMask {
    pub fn new(layers: Vec<Option<Vec<bool>>>) -> Self {
        Self { layers }
    }

    /// No restriction on any layer.
    pub fn unrestricted(num_layers: usize) -> Self {
        Self { layers: vec![None; num_layers] }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> Option<&[bool]> {
        self.layers.get(l).and_then(|m| m.as_deref())
    }

    pub fn popcount(&self, l: usize) -> Option<usize> {
        self.layer(l).map(|rows| rows.iter().filter(|&&r| r).count())
    }

    pub fn is_unrestricted(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }
}

pub fn ratio_from_cut(cut: &SpectrumCut) -> f64 {
    cut.keep_ratio().clamp(0.0, 1.0)
}

/// Local update ratio `ρ = 1 − r/R` of one layer, from the eigengap rule on
/// that layer's Hessian block. `net` holds the warmed-up adapters.
pub fn layer_ratio(
    net: &LoraNetwork,
    initial: &[f64],
    samples: &[Sample],
    layer: usize,
    settings: &LosslessSettings,
    rng: &mut SimRng,
) -> Result<f64> {
    ensure!(layer < net.num_layers(), Contract, "layer {layer} out of range");
    let analysis = lossless_analysis(net, initial, samples, settings, rng)?;
    Ok(ratio_from_analysis(&analysis, layer))
}

pub fn ratio_from_analysis(analysis: &LosslessAnalysis, layer: usize) -> f64 {
    ratio_from_cut(&analysis.layers[layer])
}

/// Top `round(ρ·n)` neurons by score, at least one; ties go to the lower index.
pub fn build_mask(scores: &[f64], rho: f64) -> Result<Vec<bool>> {
    ensure!(!scores.is_empty(), Contract, "cannot build a mask over zero neurons");
    ensure!((0.0..=1.0).contains(&rho), Contract, "ratio must lie in [0, 1], got {rho}");
    let n = scores.len();
    let keep = ((rho * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

/// Splits the adapter parameters into trainable and frozen.
///
/// GAL layers and unmasked layers are fully trainable. In a masked layer,
/// `A` is shared by all neurons and trains as long as one neuron does; each
/// frozen neuron freezes its `r` entries of `B`.
pub fn masked_param_count(net: &LoraNetwork, gal: &GalDecision, mask: &NeuronMask) -> ParamCount {
    let mut count = ParamCount { trainable: 0, frozen: 0 };
    for (l, layer) in net.layers().iter().enumerate() {
        match mask.layer(l).filter(|_| !gal.contains(l)) {
            None => count.trainable += layer.lora_len(),
            Some(rows) => {
                let on = rows.iter().filter(|&&r| r).count();
                let a_len = if on > 0 { layer.a().len() } else { 0 };
                count.trainable += a_len + on * layer.rank();
                count.frozen += layer.a().len() - a_len + (rows.len() - on) * layer.rank();
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn net() -> LoraNetwork {
        LoraNetwork::init(5, &[6, 4], 3, 2, &mut SimRng::new(3)).unwrap()
    }

    #[test]
    fn ratio_boundaries() {
        let cut = |r, rank| SpectrumCut { r, rank, lipschitz: 0.0 };
        assert_eq!(ratio_from_cut(&cut(7, 7)), 0.0);
        assert!((ratio_from_cut(&cut(1, 8)) - 0.875).abs() < 1e-15);
        assert!((ratio_from_cut(&cut(6, 24)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn build_mask_examples() {
        assert_eq!(build_mask(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![true; 3]);
        assert_eq!(build_mask(&[5.0, 1.0, 9.0], 2.0 / 3.0).unwrap(), vec![true, false, true]);
        assert_eq!(build_mask(&[5.0, 1.0, 9.0], 0.0).unwrap(), vec![false, false, true]);
        assert_eq!(build_mask(&[2.0, 2.0, 2.0, 2.0], 0.5).unwrap(), vec![true, true, false, false]);
        assert!(build_mask(&[], 0.5).is_err());
        assert!(build_mask(&[1.0], 1.5).is_err());
    }

    #[test]
    fn param_counts() {
        let net = net();
        let total = net.lora_len();
        let all_gal = GalDecision::all_layers(3, 1.0);
        let masked = NeuronMask::new(net.layers().iter().map(|l| Some(build_mask(&vec![0.0; l.d_out()], 0.0).unwrap())).collect());
        assert_eq!(masked_param_count(&net, &all_gal, &masked), ParamCount { trainable: total, frozen: 0 });

        let no_gal = GalDecision { gal_layers: vec![], ..GalDecision::all_layers(3, 1.0) };
        let c = masked_param_count(&net, &no_gal, &masked);
        let one_row: usize = net.layers().iter().map(|l| l.a().len() + l.rank()).sum();
        assert_eq!(c.trainable, one_row);
        assert_eq!(c.trainable + c.frozen, total);
        assert_eq!(masked_param_count(&net, &no_gal, &NeuronMask::unrestricted(3)).frozen, 0);
    }

    proptest! {
        #[test]
        fn counts_conserve_and_masks_are_deterministic(
            scores in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 3),
            rho in 0.0f64..=1.0,
            gal_bits in 0u8..8,
        ) {
            let net = net();
            let layers: Vec<Option<Vec<bool>>> = net
                .layers()
                .iter()
                .zip(&scores)
                .map(|(l, s)| Some(build_mask(&s[..l.d_out()], rho).unwrap()))
                .collect();
            let again: Vec<Option<Vec<bool>>> = net
                .layers()
                .iter()
                .zip(&scores)
                .map(|(l, s)| Some(build_mask(&s[..l.d_out()], rho).unwrap()))
                .collect();
            prop_assert_eq!(&layers, &again);
            let mask = NeuronMask::new(layers);
            let gal = GalDecision { gal_layers: (0..3).filter(|l| gal_bits & (1 << l) != 0).collect(), ..GalDecision::all_layers(3, 1.0) };
            let c = masked_param_count(&net, &gal, &mask);
            prop_assert_eq!(c.trainable + c.frozen, net.lora_len());
            for l in 0..3 {
                let pop = mask.popcount(l).unwrap();
                let d_out = net.layer(l).d_out();
                prop_assert_eq!(pop, ((rho * d_out as f64).round() as usize).clamp(1, d_out));
            }
        }
    }
}
