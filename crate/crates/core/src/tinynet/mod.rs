//! Dense layers, activations and point-wise max-pooling with hand-written
//! backward passes, plus an Adam optimizer and a checksummed checkpoint format.
//!
//! Matrices hold one row per point: a layer maps an `n x in` batch to `n x out`.

mod checkpoint;
mod optim;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{opt_step, Adam, AdamState};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("checkpoint is corrupt or truncated (checksum mismatch)")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn shape_error(what: &str, expected: impl fmt::Debug, found: impl fmt::Debug) -> NetError {
    NetError::ShapeMismatch(format!("{what}: expected {expected:?}, found {found:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(slope) => write!(f, "leaky_relu:{slope:?}"),
            Activation::Identity => f.write_str("none"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::Identity),
            _ => s
                .strip_prefix("leaky_relu:")
                .and_then(|v| v.parse().ok())
                .map(Activation::LeakyRelu)
                .ok_or_else(|| format!("unknown activation '{s}'")),
        }
    }
}

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: DMatrix::zeros(outputs, inputs),
            b: DVector::zeros(outputs),
        }
    }

    /// Uniform fan-in initialization in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let s = (1.0 / inputs as f64).sqrt();
        Self {
            w: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-s..=s)),
            b: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NetError> {
    if x.ncols() != layer.inputs() {
        return Err(shape_error("dense input width", layer.inputs(), x.ncols()));
    }
    let mut y = x * layer.w.transpose();
    for (j, mut col) in y.column_iter_mut().enumerate() {
        col.add_scalar_mut(layer.b[j]);
    }
    Ok(y)
}

/// Gradients of a dense layer: `(dX, dW, db)`.
pub fn dense_backward(
    layer: &DenseLayer,
    x: &DMatrix<f64>,
    dy: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>), NetError> {
    if x.ncols() != layer.inputs() || dy.ncols() != layer.outputs() || x.nrows() != dy.nrows() {
        return Err(shape_error(
            "dense backward (x, dy)",
            (dy.nrows(), layer.inputs(), layer.outputs()),
            (x.shape(), dy.shape()),
        ));
    }
    let dx = dy * &layer.w;
    let dw = dy.transpose() * x;
    let db = DVector::from_iterator(dy.ncols(), dy.column_iter().map(|c| c.sum()));
    Ok((dx, dw, db))
}

pub fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Identity => x,
    }
}

/// Derivative used by the backward pass; at exactly zero the positive branch applies.
pub fn activation_derivative(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu(slope) => {
            if x >= 0.0 {
                1.0
            } else {
                slope
            }
        }
        Activation::Identity => 1.0,
    }
}

pub fn activation_forward(act: Activation, z: &DMatrix<f64>) -> DMatrix<f64> {
    if act == Activation::Identity {
        return z.clone();
    }
    z.map(|v| activate(act, v))
}

/// Gradient with respect to the pre-activation `z`.
pub fn activation_backward(act: Activation, z: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    if act == Activation::Identity {
        return dy.clone();
    }
    z.zip_map(dy, |v, g| g * activation_derivative(act, v))
}

/// Per-channel maximum over rows, with the winning row of each channel
/// (lowest row on ties).
pub fn maxpool_points_forward(x: &DMatrix<f64>) -> (DVector<f64>, Vec<usize>) {
    assert!(x.nrows() > 0, "max-pool over zero points");
    let mut pooled = DVector::zeros(x.ncols());
    let mut argmax = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let mut best = 0;
        let mut best_v = col[0];
        for (i, &v) in col.iter().enumerate().skip(1) {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        pooled[j] = best_v;
        argmax.push(best);
    }
    (pooled, argmax)
}

pub fn maxpool_points_backward(argmax: &[usize], dy: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    assert_eq!(argmax.len(), dy.len(), "pooled gradient length");
    let mut dx = DMatrix::zeros(rows, dy.len());
    for (j, &i) in argmax.iter().enumerate() {
        dx[(i, j)] = dy[j];
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: DenseLayer,
    pub activation: Activation,
}

/// An ordered stack of named dense layers, each followed by its activation.
///
/// Serialization order is the stack order; within a layer `W` (row-major) precedes `b`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    layers: Vec<NamedLayer>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, layer: DenseLayer, activation: Activation) -> Result<(), NetError> {
        if self.layers.iter().any(|l| l.name == name) {
            return Err(NetError::ShapeMismatch(format!("duplicate layer name '{name}'")));
        }
        if let Some(prev) = self.layers.last() {
            if prev.layer.outputs() != layer.inputs() {
                return Err(shape_error(
                    &format!("input width of layer '{name}'"),
                    prev.layer.outputs(),
                    layer.inputs(),
                ));
            }
        }
        if layer.b.len() != layer.outputs() {
            return Err(shape_error(&format!("bias of layer '{name}'"), layer.outputs(), layer.b.len()));
        }
        self.layers.push(NamedLayer {
            name: name.to_string(),
            layer,
            activation,
        });
        Ok(())
    }

    /// A stack with the given widths, fan-in initialized.
    pub fn init_stack<R: Rng + ?Sized>(
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        let mut set = ParamSet::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let act = if i + 2 == widths.len() { last } else { hidden };
            set.push(&format!("{prefix}{i}"), DenseLayer::init(pair[0], pair[1], rng), act)
                .expect("consistent widths by construction");
        }
        set
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&NamedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.layer.inputs())
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.layer.outputs())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.layer.parameter_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.layer.is_finite())
    }

    pub fn zero_grads(&self) -> GradSet {
        GradSet {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.layer.inputs(), l.layer.outputs()))
                .collect(),
        }
    }

    /// Runs the stack, keeping every layer's input and pre-activation for the backward pass.
    pub fn forward_traced(&self, x: &DMatrix<f64>) -> Result<StackTrace, NetError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for l in &self.layers {
            let z = dense_forward(&l.layer, &current)?;
            let next = activation_forward(l.activation, &z);
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        Ok(StackTrace {
            inputs,
            pre,
            output: current,
        })
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NetError> {
        let mut current = dense_forward(&self.layers[0].layer, x)?;
        current = activation_forward(self.layers[0].activation, &current);
        for l in &self.layers[1..] {
            current = activation_forward(l.activation, &dense_forward(&l.layer, &current)?);
        }
        Ok(current)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the stack input.
    pub fn backward(
        &self,
        trace: &StackTrace,
        d_output: &DMatrix<f64>,
        grads: &mut GradSet,
    ) -> Result<DMatrix<f64>, NetError> {
        grads.check_congruent(self)?;
        let mut upstream = d_output.clone();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let dz = activation_backward(l.activation, &trace.pre[k], &upstream);
            let (dx, dw, db) = dense_backward(&l.layer, &trace.inputs[k], &dz)?;
            grads.layers[k].w += dw;
            grads.layers[k].b += db;
            upstream = dx;
        }
        Ok(upstream)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            for i in 0..l.layer.w.nrows() {
                out.extend(l.layer.w.row(i).iter());
            }
            out.extend(l.layer.b.iter());
        }
        out
    }
}

/// Intermediate values of one [`ParamSet::forward_traced`] call.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub inputs: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Loss gradients, one `(dW, db)` pair per layer of the matching [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<DenseLayer>,
}

impl GradSet {
    pub fn check_congruent(&self, params: &ParamSet) -> Result<(), NetError> {
        if self.layers.len() != params.layers.len() {
            return Err(shape_error("layer count", params.layers.len(), self.layers.len()));
        }
        for (g, p) in self.layers.iter().zip(&params.layers) {
            if g.w.shape() != p.layer.w.shape() || g.b.len() != p.layer.b.len() {
                return Err(shape_error(
                    &format!("gradient of layer '{}'", p.name),
                    p.layer.w.shape(),
                    g.w.shape(),
                ));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|&v| v == 0.0))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.norm_squared() + l.b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for i in 0..l.w.nrows() {
                out.extend(l.w.row(i).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }
}
