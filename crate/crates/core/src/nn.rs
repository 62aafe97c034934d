//! Feed-forward classifier with hand-derived gradients.
//!
//! The network is a stack of fully connected layers with ReLU on every hidden
//! layer and raw logits at the output. All arithmetic is `f64`. Gradients are
//! exact chain-rule derivatives of whatever scalar produced the upstream
//! logit gradient; batch averaging happens in the loss, not here.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const CHECKPOINT_MAGIC: &str = "fedmask-checkpoint 1";

/// Dense row-major matrix, used for feature and logit batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack equal-length rows. An empty input yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Layer widths of the perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            num_classes,
        }
    }

    /// `(fan_in, fan_out)` of every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Named tensor with a row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn layer_tensors(arch: &Architecture) -> Vec<Tensor> {
    arch.layer_dims()
        .into_iter()
        .enumerate()
        .flat_map(|(l, (fan_in, fan_out))| {
            [
                Tensor::zeros(format!("fc{l}.weight"), vec![fan_out, fan_in]),
                Tensor::zeros(format!("fc{l}.bias"), vec![fan_out]),
            ]
        })
        .collect()
}

/// Model weights: one `(weight, bias)` tensor pair per layer, in layer order.
/// Weights are stored `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            tensors: layer_tensors(arch),
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut params = Self::zeros(arch);
        let mut r = rng::from_seed(seed);
        for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.tensors[2 * l].values.iter_mut() {
                *w = r.random_range(-limit..=limit);
            }
        }
        params
    }

    /// Build from explicit tensors; names and shapes must match `arch`.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = layer_tensors(arch);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(&tensors) {
            if e.name != t.name || e.shape != t.shape || t.values.len() != e.values.len() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// All values concatenated in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "incompatible architectures {:?} and {:?}",
                self.arch, other.arch
            )))
        }
    }

    /// Serialize as a text checkpoint. Values are written in Rust's shortest
    /// round-trip decimal form, so reading back is bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = write!(
            out,
            "architecture {} {}",
            self.arch.input_dim, self.arch.num_classes
        );
        for h in &self.arch.hidden {
            let _ = write!(out, " {h}");
        }
        out.push('\n');
        for t in &self.tensors {
            let _ = write!(out, "tensor {} {}", t.name, t.shape.len());
            for d in &t.shape {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let line: Vec<String> = t.values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("checkpoint: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let arch_line = lines.next().ok_or_else(|| bad("missing architecture"))?;
        let fields: Vec<&str> = arch_line.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "architecture" {
            return Err(bad("malformed architecture line"));
        }
        let nums = fields[1..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| bad(&e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let arch = Architecture::new(nums[0], nums[2..].to_vec(), nums[1]);
        let mut tensors = Vec::new();
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = head.split_whitespace().collect();
            if f.len() < 3 || f[0] != "tensor" {
                return Err(bad("malformed tensor header"));
            }
            let ndim: usize = f[2].parse().map_err(|_| bad("bad rank"))?;
            if f.len() != 3 + ndim {
                return Err(bad("rank does not match dimensions"));
            }
            let shape = f[3..]
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| bad("bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let body = lines.next().ok_or_else(|| bad("missing values"))?;
            let values = body
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(bad("value count does not match shape"));
            }
            tensors.push(Tensor {
                name: f[1].to_string(),
                shape,
                values,
            });
        }
        Self::from_tensors(&arch, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: layer_tensors(&params.arch),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, params: &ModelParams) -> bool {
        self.tensors.len() == params.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&params.tensors)
                .all(|(g, p)| g.shape == p.shape)
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer (`inputs[0]` is the feature batch).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer; the last one is the logits.
    outputs: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }
}

fn check_features(params: &ModelParams, features: &Matrix) -> Result<()> {
    if features.cols() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match model input {}",
            features.cols(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

fn dense(input: &Matrix, weight: &Tensor, bias: &Tensor) -> Matrix {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let mut out = Matrix::zeros(input.rows(), out_dim);
    for (i, x) in input.iter_rows().enumerate() {
        let o = out.row_mut(i);
        for (j, oj) in o.iter_mut().enumerate() {
            let w = &weight.values[j * in_dim..(j + 1) * in_dim];
            *oj = bias.values[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

pub fn forward_trace(params: &ModelParams, features: &Matrix) -> Result<ForwardTrace> {
    check_features(params, features)?;
    let layers = params.arch.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut outputs = Vec::with_capacity(layers);
    let mut current = features.clone();
    for l in 0..layers {
        let z = dense(&current, &params.tensors[2 * l], &params.tensors[2 * l + 1]);
        inputs.push(current);
        current = if l + 1 < layers {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            a
        } else {
            z.clone()
        };
        outputs.push(z);
    }
    Ok(ForwardTrace { inputs, outputs })
}

/// Logits for every row of `features`.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    Ok(forward_trace(params, features)?.outputs.pop().expect("nonempty"))
}

/// Backpropagate `upstream` (d scalar / d logits) through a recorded pass.
pub fn backward_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &Matrix,
) -> Result<Gradients> {
    let logits = trace.logits();
    if upstream.rows() != logits.rows() || upstream.cols() != logits.cols() {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, logits are {}x{}",
            upstream.rows(),
            upstream.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut delta = upstream.clone();
    for l in (0..params.arch.num_layers()).rev() {
        let input = &trace.inputs[l];
        let in_dim = input.cols();
        let out_dim = delta.cols();
        {
            let (gw, rest) = grads.tensors[2 * l..].split_at_mut(1);
            let gw = &mut gw[0].values;
            let gb = &mut rest[0].values;
            for (d, x) in delta.iter_rows().zip(input.iter_rows()) {
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let row = &mut gw[j * in_dim..(j + 1) * in_dim];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += dj * xi;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.tensors[2 * l].values;
        let pre = &trace.outputs[l - 1];
        let mut prev = Matrix::zeros(delta.rows(), in_dim);
        for i in 0..delta.rows() {
            let d = delta.row(i);
            let z = pre.row(i);
            let p = prev.row_mut(i);
            for (j, &dj) in d.iter().enumerate().take(out_dim) {
                if dj == 0.0 {
                    continue;
                }
                let wrow = &w[j * in_dim..(j + 1) * in_dim];
                for (pk, wk) in p.iter_mut().zip(wrow) {
                    *pk += dj * wk;
                }
            }
            for (pk, zk) in p.iter_mut().zip(z) {
                if *zk <= 0.0 {
                    *pk = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok(grads)
}

/// Gradient of a scalar w.r.t. all parameters given its gradient w.r.t. the
/// logits produced from `features`.
pub fn backward(params: &ModelParams, features: &Matrix, upstream: &Matrix) -> Result<Gradients> {
    let trace = forward_trace(params, features)?;
    backward_trace(params, &trace, upstream)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let s = softmax(m.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// Batch loss with its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Mean over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `loss` (already divided by the batch size).
    pub grad: Matrix,
}

/// Mean soft-target cross-entropy `-sum_c t_c log softmax(z)_c`.
pub fn soft_target_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<LossGrad> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::Shape(format!(
            "logits {}x{} vs targets {}x{}",
            logits.rows(),
            logits.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let b = logits.rows();
    let scale = 1.0 / b.max(1) as f64;
    let mut grad = Matrix::zeros(b, logits.cols());
    let mut per_sample = Vec::with_capacity(b);
    for i in 0..b {
        let z = logits.row(i);
        let t = targets.row(i);
        let logp = log_softmax(z);
        per_sample.push(-t.iter().zip(&logp).map(|(ti, li)| ti * li).sum::<f64>());
        let tsum: f64 = t.iter().sum();
        for ((g, li), ti) in grad.row_mut(i).iter_mut().zip(&logp).zip(t) {
            *g = (li.exp() * tsum - ti) * scale;
        }
    }
    let loss = per_sample.iter().sum::<f64>() * scale;
    Ok(LossGrad {
        loss,
        per_sample,
        grad,
    })
}

pub fn one_hot_rows(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Index {
                label: y,
                num_classes,
            });
        }
        m.row_mut(i)[y] = 1.0;
    }
    Ok(m)
}

/// Plain cross-entropy against hard labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossGrad> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let targets = one_hot_rows(labels, logits.cols())?;
    soft_target_cross_entropy(logits, &targets)
}

/// Floor applied to prior entries before taking logs.
pub const PRIOR_FLOOR: f64 = 1e-8;

/// Cross-entropy on prior-adjusted logits `z + log(max(pi, 1e-8))`. The
/// returned gradient is w.r.t. the unadjusted logits (the shift is constant).
pub fn ce_logit_adjusted(logits: &Matrix, prior: &[f64], labels: &[usize]) -> Result<LossGrad> {
    if prior.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "prior has {} entries for {} classes",
            prior.len(),
            logits.cols()
        )));
    }
    let log_prior: Vec<f64> = prior.iter().map(|p| p.max(PRIOR_FLOOR).ln()).collect();
    let mut adjusted = logits.clone();
    for i in 0..adjusted.rows() {
        for (v, lp) in adjusted.row_mut(i).iter_mut().zip(&log_prior) {
            *v += lp;
        }
    }
    cross_entropy(&adjusted, labels)
}

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Option<Gradients>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (name, v) in [("lr", lr), ("momentum", momentum), ("weight_decay", weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            buffers: None,
        })
    }

    pub fn buffers(&self) -> Option<&Gradients> {
        self.buffers.as_ref()
    }
}

/// `buf <- momentum * buf + (grad + wd * param)`, `param <- param - lr * buf`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.matches(params) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    let bufs = state
        .buffers
        .get_or_insert_with(|| Gradients::zeros_like(params));
    if !bufs.matches(params) {
        return Err(Error::Shape("momentum buffers do not match parameters".into()));
    }
    let (lr, mom, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), b) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(bufs.tensors.iter_mut())
    {
        for ((pv, gv), bv) in p.values.iter_mut().zip(&g.values).zip(b.values.iter_mut()) {
            *bv = mom * *bv + (gv + wd * *pv);
            *pv -= lr * *bv;
        }
    }
    Ok(())
}
