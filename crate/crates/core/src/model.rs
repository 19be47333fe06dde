//! Point-set encoder (shared per-point MLP + max-pool) and fully-connected decoder.

use std::cell::Cell;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::cloud::{Point, PointCloud};
use crate::tinynet::{
    activation_backward, activation_derivative, dense_backward, maxpool_points_forward, Activation, Checkpoint,
    GradSet, NetError, ParamSet, StackTrace,
};
use crate::util::seeded_rng;

pub type FeatureVector = DVector<f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Global feature dimension K.
    pub feature_dim: usize,
    /// Hidden widths of the per-point encoder stack (between the 3 inputs and K).
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the decoder (between K and 3M).
    pub decoder_hidden: Vec<usize>,
    /// Decoder output point count M.
    pub decoder_points: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 1024,
            encoder_hidden: vec![64, 128],
            decoder_hidden: vec![512, 256, 128],
            decoder_points: 512,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn with_feature_dim(mut self, k: usize) -> Self {
        self.feature_dim = k;
        self
    }

    pub fn with_decoder_points(mut self, m: usize) -> Self {
        self.decoder_points = m;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = self.encoder_hidden.iter().chain(&self.decoder_hidden);
        if self.feature_dim == 0 || self.decoder_points == 0 || widths.clone().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig("all widths must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::InvalidConfig(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(&self.encoder_hidden);
        w.push(self.feature_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim];
        w.extend(&self.decoder_hidden);
        w.push(3 * self.decoder_points);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

const ENCODER_PREFIX: &str = "enc";
const DECODER_PREFIX: &str = "dec";

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelParams {
    /// Fan-in initialized parameters; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let encoder = ParamSet::init_stack(
            ENCODER_PREFIX,
            &config.encoder_widths(),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        let decoder = ParamSet::init_stack(
            DECODER_PREFIX,
            &config.decoder_widths(),
            Activation::LeakyRelu(config.leaky_slope),
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.encoder.clone();
        for l in self.decoder.layers() {
            params
                .push(&l.name, l.layer.clone(), l.activation)
                .expect("encoder and decoder names are disjoint and K matches");
        }
        let mut meta = BTreeMap::new();
        meta.insert("model".into(), "fmr".into());
        meta.insert("feature_dim".into(), self.config.feature_dim.to_string());
        meta.insert("decoder_points".into(), self.config.decoder_points.to_string());
        meta.insert("leaky_slope".into(), format!("{:?}", self.config.leaky_slope));
        meta.insert("encoder_hidden".into(), join_widths(&self.config.encoder_hidden));
        meta.insert("decoder_hidden".into(), join_widths(&self.config.decoder_hidden));
        Checkpoint { params, meta }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let get = |key: &str| {
            ckpt.meta
                .get(key)
                .ok_or_else(|| ModelError::InvalidConfig(format!("checkpoint header lacks '{key}'")))
        };
        let count = |key: &str| -> Result<usize, ModelError> {
            get(key)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("bad '{key}' in checkpoint header")))
        };
        let widths = |key: &str| -> Result<Vec<usize>, ModelError> {
            let s = get(key)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|v| v.parse().map_err(|_| ModelError::InvalidConfig(format!("bad '{key}' in checkpoint header"))))
                .collect()
        };
        let config = ModelConfig {
            feature_dim: count("feature_dim")?,
            decoder_points: count("decoder_points")?,
            leaky_slope: get("leaky_slope")?
                .parse()
                .map_err(|_| ModelError::InvalidConfig("bad 'leaky_slope' in checkpoint header".into()))?,
            encoder_hidden: widths("encoder_hidden")?,
            decoder_hidden: widths("decoder_hidden")?,
        };
        config.validate()?;
        let mut encoder = ParamSet::new();
        let mut decoder = ParamSet::new();
        for l in ckpt.params.layers() {
            let target = if l.name.starts_with(ENCODER_PREFIX) {
                &mut encoder
            } else if l.name.starts_with(DECODER_PREFIX) {
                &mut decoder
            } else {
                return Err(ModelError::InvalidConfig(format!("unexpected layer '{}'", l.name)));
            };
            target.push(&l.name, l.layer.clone(), l.activation)?;
        }
        let shape_of = |set: &ParamSet| -> Vec<usize> {
            let mut w: Vec<usize> = set.layers().iter().map(|l| l.layer.inputs()).collect();
            w.extend(set.output_width());
            w
        };
        if shape_of(&encoder) != config.encoder_widths() || shape_of(&decoder) != config.decoder_widths() {
            return Err(ModelError::ShapeMismatch(
                "checkpoint layers disagree with the declared architecture".into(),
            ));
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }
}

/// Gradients for every parameter of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: GradSet,
    pub decoder: GradSet,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.decoder.scale(s);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.encoder.norm().powi(2) + self.decoder.norm().powi(2)).sqrt()
    }
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of encoder forward passes run on this thread so far.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

pub fn reset_forward_pass_count() {
    FORWARD_PASSES.with(|c| c.set(0));
}

fn count_forward_pass() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

fn points_matrix(points: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |i, j| points[i][j])
}

pub fn encode(cloud: &PointCloud, params: &ModelParams) -> FeatureVector {
    encode_points(cloud.points(), params)
}

/// [`encode`] on a raw point slice (must be non-empty).
pub fn encode_points(points: &[Point], params: &ModelParams) -> FeatureVector {
    assert!(!points.is_empty(), "encoding an empty point set");
    count_forward_pass();
    let per_point = params
        .encoder
        .forward(&points_matrix(points))
        .expect("encoder input width is 3 by construction");
    maxpool_points_forward(&per_point).0
}

/// Forward intermediates needed by [`encode_backward_traced`].
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    stack: StackTrace,
    argmax: Vec<usize>,
    pub feature: FeatureVector,
}

impl EncodeTrace {
    /// Row index of the point that wins each feature channel.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn encode_traced(points: &[Point], params: &ModelParams) -> EncodeTrace {
    assert!(!points.is_empty(), "encoding an empty point set");
    count_forward_pass();
    let stack = params
        .encoder
        .forward_traced(&points_matrix(points))
        .expect("encoder input width is 3 by construction");
    let (feature, argmax) = maxpool_points_forward(&stack.output);
    EncodeTrace { stack, argmax, feature }
}

/// Accumulates encoder gradients for upstream `d_feature` into `grads` and
/// returns the gradient with respect to the input points (`n x 3`).
pub fn encode_backward_traced(
    params: &ModelParams,
    trace: &EncodeTrace,
    d_feature: &DVector<f64>,
    grads: &mut GradSet,
) -> Result<DMatrix<f64>, ModelError> {
    let k = params.feature_dim();
    if d_feature.len() != k {
        return Err(ModelError::ShapeMismatch(format!(
            "feature gradient has length {}, expected {k}",
            d_feature.len()
        )));
    }
    grads.check_congruent(&params.encoder)?;
    let layers = params.encoder.layers();
    let last = layers.len() - 1;

    // The pooled gradient has one non-zero per channel, so the last layer is
    // handled row by row instead of through dense products.
    let top = &layers[last];
    let input = &trace.stack.inputs[last];
    let pre = &trace.stack.pre[last];
    let mut upstream = DMatrix::zeros(input.nrows(), input.ncols());
    for (j, &row) in trace.argmax.iter().enumerate() {
        let g = d_feature[j] * activation_derivative(top.activation, pre[(row, j)]);
        if g == 0.0 {
            continue;
        }
        grads.layers[last].b[j] += g;
        for c in 0..input.ncols() {
            grads.layers[last].w[(j, c)] += g * input[(row, c)];
            upstream[(row, c)] += g * top.layer.w[(j, c)];
        }
    }
    for idx in (0..last).rev() {
        let l = &layers[idx];
        let dz = activation_backward(l.activation, &trace.stack.pre[idx], &upstream);
        let (dx, dw, db) = dense_backward(&l.layer, &trace.stack.inputs[idx], &dz)?;
        grads.layers[idx].w += dw;
        grads.layers[idx].b += db;
        upstream = dx;
    }
    Ok(upstream)
}

/// Gradient of `d_feature . encode(cloud)` with respect to the encoder parameters.
pub fn encode_backward(cloud: &PointCloud, params: &ModelParams, d_feature: &DVector<f64>) -> Result<GradSet, ModelError> {
    let trace = encode_traced(cloud.points(), params);
    let mut grads = params.encoder.zero_grads();
    encode_backward_traced(params, &trace, d_feature, &mut grads)?;
    Ok(grads)
}

/// Decoder intermediates needed by [`decode_backward_traced`].
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    stack: StackTrace,
}

fn check_feature(params: &ModelParams, feature: &FeatureVector) -> Result<(), ModelError> {
    if feature.len() != params.feature_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "feature has length {}, expected {}",
            feature.len(),
            params.feature_dim()
        )));
    }
    Ok(())
}

fn rows_to_points(flat: &DMatrix<f64>) -> Vec<Point> {
    flat.as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

pub fn decode_traced(feature: &FeatureVector, params: &ModelParams) -> Result<(PointCloud, DecodeTrace), ModelError> {
    check_feature(params, feature)?;
    let x = DMatrix::from_row_slice(1, feature.len(), feature.as_slice());
    let stack = params.decoder.forward_traced(&x)?;
    let cloud = PointCloud::from_points_unchecked(rows_to_points(&stack.output));
    Ok((cloud, DecodeTrace { stack }))
}

/// Reconstructs `M` points from a global feature.
pub fn decode(feature: &FeatureVector, params: &ModelParams) -> Result<PointCloud, ModelError> {
    Ok(decode_traced(feature, params)?.0)
}

/// Accumulates decoder gradients for upstream point gradients and returns the
/// gradient with respect to the feature.
pub fn decode_backward_traced(
    params: &ModelParams,
    trace: &DecodeTrace,
    d_points: &[Point],
    grads: &mut GradSet,
) -> Result<FeatureVector, ModelError> {
    if d_points.len() != params.config.decoder_points {
        return Err(ModelError::ShapeMismatch(format!(
            "{} point gradients for {} decoded points",
            d_points.len(),
            params.config.decoder_points
        )));
    }
    let flat: Vec<f64> = d_points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let d_out = DMatrix::from_row_slice(1, flat.len(), &flat);
    let dx = params.decoder.backward(&trace.stack, &d_out, grads)?;
    Ok(DVector::from_iterator(dx.ncols(), dx.iter().copied()))
}

/// Decoder parameter gradients and feature gradient of `sum_i d_points[i] . decode(feature)[i]`.
pub fn decode_backward(
    feature: &FeatureVector,
    params: &ModelParams,
    d_points: &[Point],
) -> Result<(GradSet, FeatureVector), ModelError> {
    let (_, trace) = decode_traced(feature, params)?;
    let mut grads = params.decoder.zero_grads();
    let d_feature = decode_backward_traced(params, &trace, d_points, &mut grads)?;
    Ok((grads, d_feature))
}
