//! Feed-forward classifier with frozen base weights and low-rank adapters.
//!
//! Each layer computes `act(W·x + B·(A·x) + bias)`. `W` and `bias` are frozen;
//! only `A` (r×d_in) and `B` (d_out×r) train. The last layer is linear and
//! feeds a softmax cross-entropy loss.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::mask::NeuronMask;
use crate::numeric::{Matrix, SimRng};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FBNW";

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu if z > 0.0 => 1.0,
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w_base: Matrix,
    bias: Vec<f64>,
    a: Matrix,
    b: Matrix,
    activation: Activation,
}

impl LoraLayer {
    pub fn new(w_base: Matrix, bias: Vec<f64>, a: Matrix, b: Matrix, activation: Activation) -> Result<Self> {
        let (d_out, d_in) = w_base.shape();
        let r = a.rows();
        ensure!(bias.len() == d_out, Shape, "bias has {} entries, layer has {d_out} outputs", bias.len());
        ensure!(a.cols() == d_in, Shape, "A is {:?}, expected r x {d_in}", a.shape());
        ensure!(b.shape() == (d_out, r), Shape, "B is {:?}, expected {d_out} x {r}", b.shape());
        ensure!(r >= 1 && r <= d_in.min(d_out), Contract, "rank {r} must be in 1..=min({d_in}, {d_out})");
        ensure!(bias.iter().all(|v| v.is_finite()), NonFinite, "bias must be finite");
        Ok(Self { w_base, bias, a, b, activation })
    }

    pub fn d_in(&self) -> usize {
        self.w_base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_base.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn w_base(&self) -> &Matrix {
        &self.w_base
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// Number of trainable adapter entries, `|A| + |B|`.
    pub fn lora_len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Overwrites the adapter pair. Shapes must match the current ones.
    pub fn set_adapters(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        ensure!(a.shape() == self.a.shape(), Shape, "A shape {:?} != {:?}", a.shape(), self.a.shape());
        ensure!(b.shape() == self.b.shape(), Shape, "B shape {:?} != {:?}", b.shape(), self.b.shape());
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// The effective weight `W + B·A`.
    pub fn effective_weight(&self) -> Matrix {
        let mut w = self.w_base.clone();
        w.add_assign(&self.b.matmul(&self.a).expect("adapter shapes validated at construction"));
        w
    }

    fn pre_activation(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = self.a.matvec(x);
        let low_rank = self.b.matvec(&u);
        let z = self
            .w_base
            .matvec(x)
            .into_iter()
            .zip(low_rank)
            .zip(&self.bias)
            .map(|((w, l), b)| w + l + b)
            .collect();
        (z, u)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Post-activation output of every layer; the last entry equals `logits`.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub loss: Option<f64>,
}

/// Gradients of one layer. `dw` is the gradient with respect to the
/// effective full-rank weight `W + B·A`, laid out like `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub da: Matrix,
    pub db: Matrix,
    pub dw: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub d_input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &LoraNetwork) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGradients {
                da: Matrix::zeros(l.rank(), l.d_in()),
                db: Matrix::zeros(l.d_out(), l.rank()),
                dw: Matrix::zeros(l.d_out(), l.d_in()),
            })
            .collect();
        Self { layers, d_input: vec![0.0; net.input_dim()] }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.da.add_assign(&theirs.da);
            mine.db.add_assign(&theirs.db);
            mine.dw.add_assign(&theirs.dw);
        }
        for (a, b) in self.d_input.iter_mut().zip(&other.d_input) {
            *a += b;
        }
    }

    /// Adapter gradient flattened in [`LoraNetwork::lora_params`] order.
    pub fn lora_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|g| g.da.data().iter().chain(g.db.data()).copied()).collect()
    }

    /// Full-rank weight gradients flattened layer by layer, row-major.
    pub fn full_rank_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|g| g.dw.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.da.data().iter().chain(g.db.data()).chain(g.dw.data()).all(|v| v.is_finite()))
            && self.d_input.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraNetwork {
    layers: Vec<LoraLayer>,
    num_classes: usize,
}

fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

impl LoraNetwork {
    pub fn new(layers: Vec<LoraLayer>, num_classes: usize) -> Result<Self> {
        ensure!(!layers.is_empty(), Contract, "network needs at least one layer");
        for pair in layers.windows(2) {
            ensure!(
                pair[0].d_out() == pair[1].d_in(),
                Shape,
                "layer output {} does not feed next input {}",
                pair[0].d_out(),
                pair[1].d_in()
            );
        }
        let last = layers.last().unwrap();
        ensure!(last.activation == Activation::Identity, Contract, "final layer must be linear");
        ensure!(
            last.d_out() == num_classes,
            Shape,
            "final layer has {} outputs for {num_classes} classes",
            last.d_out()
        );
        Ok(Self { layers, num_classes })
    }

    /// Random frozen base (He-scaled Gaussian, zero bias), `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rank: usize,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            let last = i == dims.len() - 2;
            let std = (2.0 / d_in as f64).sqrt();
            let w = Matrix::from_fn(d_out, d_in, |_, _| std * rng.normal());
            let a = Matrix::from_fn(rank, d_in, |_, _| ADAPTER_INIT_STD * rng.normal());
            let b = Matrix::zeros(d_out, rank);
            let act = if last { Activation::Identity } else { Activation::Relu };
            layers.push(LoraLayer::new(w, vec![0.0; d_out], a, b, act)?);
        }
        Self::new(layers, num_classes)
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LoraLayer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LoraLayer {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn lora_len(&self) -> usize {
        self.layers.iter().map(LoraLayer::lora_len).sum()
    }

    /// Index range of each layer's adapters inside the flat parameter vector.
    pub fn lora_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.lora_len();
                start = r.end;
                r
            })
            .collect()
    }

    /// All adapters flattened: per layer, `A` row-major then `B` row-major.
    pub fn lora_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.a.data().iter().chain(l.b.data()).copied()).collect()
    }

    pub fn set_lora_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(flat.len() == self.lora_len(), Shape, "expected {} adapter entries, got {}", self.lora_len(), flat.len());
        let mut rest = flat;
        for layer in &mut self.layers {
            let (a, tail) = rest.split_at(layer.a.len());
            let (b, tail) = tail.split_at(layer.b.len());
            layer.a.data_mut().copy_from_slice(a);
            layer.b.data_mut().copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure!(x.len() == self.input_dim(), Shape, "input has {} features, network expects {}", x.len(), self.input_dim());
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        ensure!(label < self.num_classes, Contract, "label {label} out of range for {} classes", self.num_classes);
        Ok(())
    }

    pub fn forward(&self, x: &[f64], label: Option<usize>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        if let Some(y) = label {
            self.check_label(y)?;
        }
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let (z, _) = layer.pre_activation(&current);
            current = z.into_iter().map(|v| layer.activation.apply(v)).collect();
            hidden.push(current.clone());
        }
        let loss = label.map(|y| softmax_cross_entropy(&current, y).0);
        Ok(ForwardTrace { hidden, logits: current, loss })
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        Ok(self.forward(x, Some(label))?.loss.expect("label supplied"))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.forward(x, None)?.logits;
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    /// Analytic gradients of the cross-entropy loss for one sample.
    pub fn backward(&self, x: &[f64], label: usize) -> Result<Gradients> {
        Ok(self.backward_with_loss(x, label)?.0)
    }

    pub fn backward_with_loss(&self, x: &[f64], label: usize) -> Result<(Gradients, f64)> {
        self.check_input(x)?;
        self.check_label(label)?;

        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut low = Vec::with_capacity(n);
        let mut current = x.to_vec();
        for layer in &self.layers {
            let (z, u) = layer.pre_activation(&current);
            let next: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
            low.push(u);
        }
        let (loss, mut upstream) = softmax_cross_entropy(&current, label);

        let mut grads = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let dz: Vec<f64> =
                upstream.iter().zip(&pre[l]).map(|(g, &z)| g * layer.activation.derivative(z)).collect();
            let du = layer.b.tr_matvec(&dz);
            let dw = Matrix::outer(&dz, &inputs[l]);
            let db = Matrix::outer(&dz, &low[l]);
            let da = Matrix::outer(&du, &inputs[l]);
            let mut dx = layer.w_base.tr_matvec(&dz);
            for (d, v) in dx.iter_mut().zip(layer.a.tr_matvec(&du)) {
                *d += v;
            }
            grads.push(LayerGradients { da, db, dw });
            upstream = dx;
        }
        grads.reverse();
        Ok((Gradients { layers: grads, d_input: upstream }, loss))
    }

    /// Summed gradients over a set of samples, plus the summed loss.
    pub fn batch_gradients<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Gradients, f64)> {
        let mut total = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for s in samples {
            let (g, l) = self.backward_with_loss(&s.features, s.label)?;
            total.add_assign(&g);
            loss += l;
        }
        Ok((total, loss))
    }

    /// Mean adapter gradient over `samples`, flattened.
    pub fn mean_lora_gradient(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        ensure!(!samples.is_empty(), Contract, "mean gradient over an empty sample set");
        let mut acc = vec![0.0; self.lora_len()];
        for s in samples {
            for (a, g) in acc.iter_mut().zip(self.backward(&s.features, s.label)?.lora_flat()) {
                *a += g;
            }
        }
        let n = samples.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }

    pub fn mean_loss(&self, samples: &[Sample]) -> Result<f64> {
        ensure!(!samples.is_empty(), Contract, "mean loss over an empty sample set");
        let mut total = 0.0;
        for s in samples {
            total += self.loss(&s.features, s.label)?;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        ensure!(!samples.is_empty(), Contract, "accuracy over an empty sample set");
        let mut hits = 0usize;
        for s in samples {
            if self.predict(&s.features)? == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// One SGD step `P ← P − lr·g` on the adapters.
    ///
    /// With a mask, a layer whose entry is `Some(rows)` only updates the rows
    /// of `B` flagged `true`; `A` moves along the gradient restricted to those
    /// neurons, `Bᵀ·diag(rows)·dW`. Layers with `None` train fully. Frozen
    /// entries are left bitwise untouched, and so is the base.
    pub fn apply_update(&mut self, g: &Gradients, lr: f64, mask: Option<&NeuronMask>) -> Result<()> {
        ensure!(lr.is_finite() && lr >= 0.0, Contract, "learning rate must be finite and non-negative, got {lr}");
        ensure!(g.layers.len() == self.layers.len(), Shape, "gradient has {} layers, network {}", g.layers.len(), self.layers.len());
        if let Some(m) = mask {
            ensure!(m.num_layers() == self.layers.len(), Shape, "mask has {} layers, network {}", m.num_layers(), self.layers.len());
        }
        for (l, (layer, lg)) in self.layers.iter().zip(&g.layers).enumerate() {
            ensure!(
                lg.da.shape() == layer.a.shape() && lg.db.shape() == layer.b.shape() && lg.dw.shape() == layer.w_base.shape(),
                Shape,
                "gradient shapes do not match layer {l}"
            );
            if let Some(rows) = mask.and_then(|m| m.layer(l)) {
                ensure!(rows.len() == layer.d_out(), Shape, "layer {l} mask has {} rows, layer has {}", rows.len(), layer.d_out());
            }
        }

        for (l, (layer, lg)) in self.layers.iter_mut().zip(&g.layers).enumerate() {
            match mask.and_then(|m| m.layer(l)) {
                None => {
                    sgd(layer.a.data_mut(), lg.da.data(), lr);
                    sgd(layer.b.data_mut(), lg.db.data(), lr);
                }
                Some(rows) => {
                    if rows.iter().any(|&r| r) {
                        let da = masked_adapter_gradient(&layer.b, &lg.dw, rows);
                        sgd(layer.a.data_mut(), da.data(), lr);
                    }
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        sgd(layer.b.row_mut(i), lg.db.row(i), lr);
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every frozen byte (base weights and biases).
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for v in layer.w_base.data().iter().chain(&layer.bias) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(CHECKPOINT_MAGIC);
        w.u32(self.num_classes as u32);
        w.u32(self.layers.len() as u32);
        for layer in &self.layers {
            w.u32(layer.d_in() as u32);
            w.u32(layer.d_out() as u32);
            w.u32(layer.rank() as u32);
            w.u8(layer.activation.code());
            w.f64s(layer.w_base.data());
            w.f64s(&layer.bias);
            w.f64s(layer.a.data());
            w.f64s(layer.b.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_magic(bytes, CHECKPOINT_MAGIC)?;
        let num_classes = r.usize()?;
        let n = r.usize()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let d_in = r.usize()?;
            let d_out = r.usize()?;
            let rank = r.usize()?;
            let act = Activation::from_code(r.u8()?)?;
            let w = Matrix::from_vec(d_out, d_in, r.f64s(d_out * d_in)?)?;
            let bias = r.f64s(d_out)?;
            let a = Matrix::from_vec(rank, d_in, r.f64s(rank * d_in)?)?;
            let b = Matrix::from_vec(d_out, rank, r.f64s(d_out * rank)?)?;
            layers.push(LoraLayer::new(w, bias, a, b, act)?);
        }
        r.finish()?;
        Self::new(layers, num_classes)
    }
}

fn sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// `Bᵀ·diag(rows)·dW`: the `A` gradient carried only by trainable neurons.
fn masked_adapter_gradient(b: &Matrix, dw: &Matrix, rows: &[bool]) -> Matrix {
    let mut out = Matrix::zeros(b.cols(), dw.cols());
    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
        for k in 0..b.cols() {
            let bik = b.get(i, k);
            for (o, &d) in out.row_mut(k).iter_mut().zip(dw.row(i)) {
                *o += bik * d;
            }
        }
    }
    out
}

/// `B_t·A_t − B_prev·A_prev`, the change of the reconstructed full-rank adapter.
pub fn full_rank_delta(a_t: &Matrix, b_t: &Matrix, a_prev: &Matrix, b_prev: &Matrix) -> Result<Matrix> {
    let now = b_t.matmul(a_t)?;
    let before = b_prev.matmul(a_prev)?;
    now.sub(&before)
}
