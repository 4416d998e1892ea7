//! Desk-scale PANNs-style classifiers and the analytic quadratic model.
//!
//! Parameters are kept as an ordered list of named tensors. Layer index `i`
//! is the position in that list and filter `j` is the `j`-th slice along the
//! leading (output) axis of a filter-kind tensor. Biases and batch-norm
//! affine parameters are non-filter parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{kernels, BatchNormMode, Graph, NodeId, Tensor};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Samples per evaluation chunk. Fixed so that batch composition never
/// changes an evaluated value.
pub const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mini10,
    Mini14,
    Quadratic,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mini10 => "mini10",
            Arch::Mini14 => "mini14",
            Arch::Quadratic => "quadratic",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mini10" => Ok(Arch::Mini10),
            "mini14" => Ok(Arch::Mini14),
            "quadratic" => Ok(Arch::Quadratic),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub classes: usize,
    pub input_bins: usize,
    pub channels: Vec<usize>,
}

impl ModelSpec {
    /// Two conv blocks, channels `[16, 32]`.
    pub fn mini10(classes: usize, input_bins: usize) -> Self {
        Self {
            arch: Arch::Mini10,
            classes,
            input_bins,
            channels: vec![16, 32],
        }
    }

    /// Three conv blocks, channels `[16, 32, 64]`.
    pub fn mini14(classes: usize, input_bins: usize) -> Self {
        Self {
            arch: Arch::Mini14,
            classes,
            input_bins,
            channels: vec![16, 32, 64],
        }
    }

    pub fn for_arch(arch: Arch, classes: usize, input_bins: usize) -> Result<Self> {
        match arch {
            Arch::Mini10 => Ok(Self::mini10(classes, input_bins)),
            Arch::Mini14 => Ok(Self::mini14(classes, input_bins)),
            Arch::Quadratic => Err(Error::invalid(
                "quadratic models are constructed with QuadraticModel::new",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("class count {} < 2", self.classes)));
        }
        if self.input_bins == 0 {
            return Err(Error::invalid("input bins must be >= 1"));
        }
        if self.arch != Arch::Quadratic && (self.channels.is_empty() || self.channels.contains(&0)) {
            return Err(Error::invalid("conv channel widths must be nonempty and positive"));
        }
        Ok(())
    }

    /// Minimum number of frames for the pooling pyramid.
    pub fn min_frames(&self) -> usize {
        1 << self.channels.len()
    }

    /// Ordered parameter layout: `(name, shape, kind)`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        let mut out = vec![
            ("bn0.weight".into(), vec![self.input_bins], NonFilter),
            ("bn0.bias".into(), vec![self.input_bins], NonFilter),
        ];
        let mut cin = 1;
        for (b, &cout) in self.channels.iter().enumerate() {
            for c in 1..=2 {
                let inp = if c == 1 { cin } else { cout };
                out.push((format!("block{}.conv{c}.weight", b + 1), vec![cout, inp, 3, 3], Filter));
                out.push((format!("block{}.bn{c}.weight", b + 1), vec![cout], NonFilter));
                out.push((format!("block{}.bn{c}.bias", b + 1), vec![cout], NonFilter));
            }
            cin = cout;
        }
        out.push(("fc.weight".into(), vec![self.classes, cin], Filter));
        out.push(("fc.bias".into(), vec![self.classes], NonFilter));
        out
    }

    /// Batch-norm layers and their channel counts, in forward order.
    pub fn batch_norm_layers(&self) -> Vec<(String, usize)> {
        let mut out = vec![("bn0".to_string(), self.input_bins)];
        for (b, &c) in self.channels.iter().enumerate() {
            out.push((format!("block{}.bn1", b + 1), c));
            out.push((format!("block{}.bn2", b + 1), c));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Filter,
    NonFilter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

impl ParamTensor {
    pub fn filter_count(&self) -> usize {
        self.value.shape()[0]
    }

    pub fn filter_len(&self) -> usize {
        self.value.numel() / self.filter_count()
    }

    pub fn filter(&self, j: usize) -> &[f32] {
        let len = self.filter_len();
        &self.value.data()[j * len..(j + 1) * len]
    }
}

/// Flat, filter-structured view of a model's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    entries: Vec<ParamTensor>,
}

impl ParamVector {
    pub fn new(entries: Vec<ParamTensor>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.entries.iter().flat_map(|e| e.value.data().iter().copied())
    }

    /// Same names, shapes and kinds.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape()
            })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector::new(
            self.entries
                .iter()
                .map(|e| ParamTensor {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
        )
    }

    /// `(layer, filter, values)` for every filter slice.
    pub fn filters(&self) -> impl Iterator<Item = (usize, usize, &[f32])> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Filter)
            .flat_map(|(i, e)| (0..e.filter_count()).map(move |j| (i, j, e.filter(j))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// A trained (or freshly initialized) network, `θ*` in the landscape code.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub running: Vec<RunningStats>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stacked inputs `[n, 1, bins, frames]` and their labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Stacks `[bins, frames]` feature maps.
    pub fn stack<'a>(items: impl IntoIterator<Item = (&'a Tensor<f32>, usize)>) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dims: Option<Vec<usize>> = None;
        for (f, l) in items {
            match &dims {
                None => dims = Some(f.shape().to_vec()),
                Some(d) if d.as_slice() != f.shape() => {
                    return Err(Error::shape(
                        "batch",
                        format!("feature map {:?} differs from {:?}", f.shape(), d),
                    ))
                }
                _ => {}
            }
            data.extend_from_slice(f.data());
            labels.push(l);
        }
        let dims = dims.ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
        if dims.len() != 2 {
            return Err(Error::shape("batch", format!("expected [bins, frames], got {dims:?}")));
        }
        let inputs = Tensor::new(vec![labels.len(), 1, dims[0], dims[1]], data)?;
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits items into consecutive batches of `size` (the last may be short).
    pub fn chunked<'a>(items: &[(&'a Tensor<f32>, usize)], size: usize) -> Result<Vec<Batch>> {
        items
            .chunks(size.max(1))
            .map(|c| Batch::stack(c.iter().copied()))
            .collect()
    }
}

/// Totals of an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl EvalSummary {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Parameter and batch-norm node handles from one forward pass.
pub struct Forward {
    pub logits: NodeId,
    pub params: Vec<NodeId>,
    /// Train-mode batch-norm nodes, aligned with `ModelSpec::batch_norm_layers`.
    pub batch_norms: Vec<NodeId>,
}

/// Initializes a model: He fan-in normal conv/linear weights, zero biases,
/// unit batch-norm scales, running statistics at mean 0 and variance 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    if spec.arch == Arch::Quadratic {
        return Err(Error::invalid(
            "quadratic models are constructed with QuadraticModel::new",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape, kind) in spec.layout() {
        let numel: usize = shape.iter().product();
        let data = match kind {
            ParamKind::Filter => {
                let fan_in = numel / shape[0];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            }
            ParamKind::NonFilter if name.ends_with(".weight") => vec![1.0; numel],
            ParamKind::NonFilter => vec![0.0; numel],
        };
        entries.push(ParamTensor {
            name,
            kind,
            value: Tensor::new(shape, data)?,
        });
    }
    let running = spec
        .batch_norm_layers()
        .into_iter()
        .map(|(name, c)| RunningStats {
            name,
            mean: vec![0.0; c],
            var: vec![1.0; c],
        })
        .collect();
    Ok(ModelState {
        spec: spec.clone(),
        params: ParamVector::new(entries),
        running,
        epoch: 0,
        metrics: BTreeMap::new(),
    })
}

impl ModelState {
    fn check_input(&self, inputs: &Tensor<f32>) -> Result<()> {
        let s = inputs.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.spec.input_bins {
            return Err(Error::shape(
                "model",
                format!(
                    "expected [n, 1, {}, frames] inputs, got {s:?}",
                    self.spec.input_bins
                ),
            ));
        }
        if s[3] < self.spec.min_frames() {
            return Err(Error::shape(
                "model",
                format!("{} frames is too short for {} pooling stages", s[3], self.spec.channels.len()),
            ));
        }
        Ok(())
    }

    /// Records the forward pass for `params` (which must share this model's
    /// layout) on `g`. Parameters become tracked leaves when `g` tracks.
    pub fn forward(&self, g: &mut Graph<f32>, params: &ParamVector, inputs: &Tensor<f32>, mode: Mode) -> Result<Forward> {
        self.check_input(inputs)?;
        if !self.params.same_layout(params) {
            return Err(Error::invalid("parameter layout does not match the model"));
        }
        let ids: Vec<NodeId> = params.entries().iter().map(|e| g.param(e.value.clone())).collect();
        let s = inputs.shape();
        let (n, bins, frames) = (s[0], s[2], s[3]);
        let x = g.constant(inputs.clone());

        let mut bn_nodes = Vec::new();
        let mut bn_index = 0;
        let mut bn = |g: &mut Graph<f32>, x: NodeId, gamma: NodeId, beta: NodeId| -> Result<NodeId> {
            let mode = match mode {
                Mode::Train => BatchNormMode::Train,
                Mode::Eval => BatchNormMode::Eval {
                    running_mean: self.running[bn_index].mean.clone(),
                    running_var: self.running[bn_index].var.clone(),
                },
            };
            bn_index += 1;
            let y = g.batch_norm(x, gamma, beta, mode)?;
            bn_nodes.push(y);
            Ok(y)
        };

        // bn0 normalizes each mel bin: view [n, 1, bins, frames] as [n, bins, frames, 1].
        let h = g.reshape(x, &[n, bins, frames, 1])?;
        let h = bn(g, h, ids[0], ids[1])?;
        let mut h = g.reshape(h, &[n, 1, bins, frames])?;
        let mut p = 2;
        for _ in &self.spec.channels {
            for _ in 0..2 {
                h = g.conv2d(h, ids[p])?;
                h = bn(g, h, ids[p + 1], ids[p + 2])?;
                h = g.relu(h)?;
                p += 3;
            }
            h = g.mean_pool2(h)?;
        }
        let h = g.global_pool(h)?;
        let h = g.matmul_t(h, ids[p])?;
        let logits = g.add_bias(h, ids[p + 1])?;
        Ok(Forward {
            logits,
            params: ids,
            batch_norms: bn_nodes,
        })
    }

    /// Logits for `params` in eval mode.
    pub fn logits(&self, params: &ParamVector, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::without_grad();
        let f = self.forward(&mut g, params, inputs, Mode::Eval)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean softmax cross-entropy of one batch. Eval mode uses the frozen
    /// running statistics; neither mode mutates the state.
    pub fn loss(&self, batch: &Batch, mode: Mode) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut g = Graph::without_grad();
        let f = self.forward(&mut g, &self.params, &batch.inputs, mode)?;
        let rows = kernels::cross_entropy_rows(g.value(f.logits), &batch.labels)?;
        Ok(rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Eval-mode loss and accuracy of `params` over batches, summed in order.
    pub fn evaluate_with(&self, params: &ParamVector, batches: &[Batch]) -> Result<EvalSummary> {
        let mut out = EvalSummary {
            loss_sum: 0.0,
            correct: 0,
            count: 0,
        };
        for b in batches {
            let logits = self.logits(params, &b.inputs)?;
            let rows = kernels::cross_entropy_rows(&logits, &b.labels)?;
            let k = logits.shape()[1];
            for ((row, &l), ce) in logits.data().chunks(k).zip(&b.labels).zip(rows) {
                out.loss_sum += ce;
                if argmax(row) == l {
                    out.correct += 1;
                }
            }
            out.count += b.len();
        }
        if out.count == 0 {
            return Err(Error::invalid("evaluation set is empty"));
        }
        Ok(out)
    }

    pub fn evaluate(&self, batches: &[Batch]) -> Result<EvalSummary> {
        self.evaluate_with(&self.params, batches)
    }

    /// Short content hash of parameters and running statistics.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.arch.to_string().as_bytes());
        for e in self.params.entries() {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for r in &self.running {
            h.update(r.name.as_bytes());
            for v in r.mean.iter().chain(&r.var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Folds one train-mode forward pass into the running statistics.
    pub fn update_running_stats(&mut self, g: &Graph<f32>, fwd: &Forward) {
        for (stats, node) in self.running.iter_mut().zip(&fwd.batch_norms) {
            let Some((mean, var, count)) = g.batch_stats(*node) else {
                continue;
            };
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for c in 0..stats.mean.len() {
                let m = stats.mean[c] as f64;
                let v = stats.var[c] as f64;
                stats.mean[c] = ((1.0 - BN_MOMENTUM) * m + BN_MOMENTUM * mean[c]) as f32;
                stats.var[c] = ((1.0 - BN_MOMENTUM) * v + BN_MOMENTUM * var[c] * unbias) as f32;
            }
        }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `L(θ) = Σ c_i (θ_i − center_i)²`, an exactly analytic landscape.
#[derive(Clone, Debug)]
pub struct QuadraticModel {
    center: ParamVector,
    curvature: Vec<f64>,
}

impl QuadraticModel {
    pub fn new(center: ParamVector, curvature: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.numel() {
            return Err(Error::invalid(format!(
                "{} curvature coefficients for {} parameters",
                curvature.len(),
                center.numel()
            )));
        }
        if curvature.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("curvature coefficients must be positive and finite"));
        }
        Ok(Self { center, curvature })
    }

    pub fn isotropic(center: ParamVector, c: f64) -> Result<Self> {
        let n = center.numel();
        Self::new(center, vec![c; n])
    }

    pub fn center(&self) -> &ParamVector {
        &self.center
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn loss(&self, params: &ParamVector) -> Result<f64> {
        if !self.center.same_layout(params) {
            return Err(Error::invalid("parameter layout does not match the quadratic center"));
        }
        Ok(self.loss_of_displacement(
            params
                .iter_values()
                .zip(self.center.iter_values())
                .map(|(p, c)| p as f64 - c as f64),
        ))
    }

    /// Loss at `center + v` for a flat displacement `v`, in `f64`.
    pub fn loss_of_displacement(&self, v: impl Iterator<Item = f64>) -> f64 {
        v.zip(&self.curvature).map(|(d, c)| c * d * d).sum()
    }
}
