//! Synthetic datasets and the encoder/decoder training loop.
//!
//! Unsupervised mode fits the auto-encoder on both copies of each pair with a
//! Chamfer loss. Semi-supervised mode adds the point error of a short
//! Gauss-Newton registration against the known pose, differentiated through the
//! last solver step (earlier iterates are treated as constants).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::seq::{index, SliceRandom};
use thiserror::Error;

use crate::bench::{run_sweep, BenchProtocol, BenchRow};
use crate::cloud::{self, CloudError, CloudFormat, PerturbationSpec, Point, PointCloud, ShapeFamily};
use crate::losses::{chamfer_backward, combined_loss, point_error_left_gradient, TrainMode};
use crate::model::{
    decode_backward_traced, decode_traced, encode_backward_traced, encode_points, encode_traced, EncodeTrace,
    ModelConfig, ModelError, ModelGrads, ModelParams,
};
use crate::registration::{
    gn_step, gn_step_damped, normal_matrix, register, RegistrationConfig, RegistrationError, Registrar,
};
use crate::se3::{random_transform, rotation_distance, se3_left_jacobian, RigidTransform, Twist};
use crate::tinynet::{Adam, AdamState};
use crate::util::{atomic_write, derive_seed, format_sig, seeded_rng, SeededRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("{path}: {reason}")]
    Dataset { path: String, reason: String },
}

/// Recipe for a procedurally generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub families: Vec<ShapeFamily>,
    pub per_family: usize,
    pub points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub name: String,
    pub family: ShapeFamily,
    pub shape_seed: u64,
    pub cloud: PointCloud,
}

/// Unit-box normalized clouds with their family labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

/// Disjoint train / validation indices into a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

const MANIFEST: &str = "manifest.csv";

fn family_code(f: ShapeFamily) -> u64 {
    ShapeFamily::ALL.iter().position(|&g| g == f).expect("listed family") as u64
}

impl Dataset {
    pub fn synthesize(spec: &DatasetSpec) -> Result<Self, TrainError> {
        if spec.points < 2 || spec.per_family == 0 || spec.families.is_empty() {
            return Err(TrainError::InvalidConfig(
                "a dataset needs at least one family, one cloud per family and two points per cloud".into(),
            ));
        }
        let mut items = Vec::with_capacity(spec.families.len() * spec.per_family);
        for &family in &spec.families {
            let code = family_code(family);
            for i in 0..spec.per_family {
                let shape_seed = derive_seed(spec.seed, &[code, i as u64, 0]);
                let mut rng = seeded_rng(derive_seed(spec.seed, &[code, i as u64, 1]));
                items.push(DatasetItem {
                    name: format!("{family}_{i:04}"),
                    family,
                    shape_seed,
                    cloud: cloud::sample_shape(family, spec.points, shape_seed, &mut rng)?,
                });
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn families(&self) -> Vec<ShapeFamily> {
        let mut f: Vec<ShapeFamily> = self.items.iter().map(|i| i.family).collect();
        f.sort();
        f.dedup();
        f
    }

    /// A subset by indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// Seeded split stratified by family; every family with at least two clouds
    /// contributes to both sides.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Split {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for family in self.families() {
            let mut members: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].family == family).collect();
            members.shuffle(&mut seeded_rng(derive_seed(seed, &[family_code(family)])));
            let n = members.len();
            let mut n_val = (n as f64 * val_fraction).round() as usize;
            if n >= 2 {
                n_val = n_val.clamp(1, n - 1);
            } else {
                n_val = 0;
            }
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Split { train, val }
    }

    /// Writes one xyz file per cloud plus `manifest.csv` (file, family, shape_seed, points).
    pub fn write_dir(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Dataset {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut manifest = String::from("file,family,shape_seed,points\n");
        for item in &self.items {
            let file = format!("{}.xyz", item.name);
            cloud::save(&item.cloud, &dir.join(&file), CloudFormat::Xyz)?;
            let _ = writeln!(manifest, "{file},{},{},{}", item.family, item.shape_seed, item.cloud.len());
        }
        atomic_write(&dir.join(MANIFEST), manifest.as_bytes()).map_err(|e| TrainError::Dataset {
            path: dir.join(MANIFEST).display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Reads a directory written by [`Dataset::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self, TrainError> {
        let manifest_path = dir.join(MANIFEST);
        let bad = |reason: String| TrainError::Dataset {
            path: manifest_path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| bad(e.to_string()))?;
        let mut items = Vec::new();
        for (no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [file, family, shape_seed, points] = fields.as_slice() else {
                return Err(bad(format!("line {}: expected 4 fields", no + 1)));
            };
            let family: ShapeFamily = family.parse().map_err(|e: CloudError| bad(e.to_string()))?;
            let shape_seed = shape_seed
                .parse()
                .map_err(|_| bad(format!("line {}: bad shape seed", no + 1)))?;
            let cloud = cloud::load(&dir.join(file), CloudFormat::Xyz)?;
            if points.parse::<usize>().ok() != Some(cloud.len()) {
                return Err(bad(format!("line {}: point count does not match {file}", no + 1)));
            }
            items.push(DatasetItem {
                name: file.trim_end_matches(".xyz").to_string(),
                family,
                shape_seed,
                cloud,
            });
        }
        if items.is_empty() {
            return Err(bad("manifest lists no clouds".into()));
        }
        Ok(Self { items })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    /// Points per training cloud; larger clouds are subsampled each step.
    pub cloud_size: usize,
    pub rot_max_train: f64,
    pub trans_max_train: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Steps whose gradients are averaged into one optimizer update.
    pub grad_accumulation: usize,
    pub model: ModelConfig,
    /// Solver settings for the semi-supervised pose loss and validation.
    pub registration: RegistrationConfig,
    /// Gauss-Newton iterations run inside a semi-supervised training step.
    pub train_reg_iterations: usize,
    /// Training sources get Gaussian noise with a standard deviation drawn
    /// uniformly from `[0, augment_noise_max]`. Zero disables it.
    pub augment_noise_max: f64,
    /// Training sources keep a fraction of points drawn uniformly from
    /// `[augment_keep_min, 1]`. One disables it.
    pub augment_keep_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unsupervised,
            epochs: 50,
            lr: 1e-3,
            cloud_size: 512,
            rot_max_train: 45f64.to_radians(),
            trans_max_train: 0.8,
            seed: 0,
            val_fraction: 0.2,
            grad_accumulation: 1,
            model: ModelConfig::default(),
            registration: RegistrationConfig::default(),
            train_reg_iterations: 3,
            augment_noise_max: 0.0,
            augment_keep_min: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be a non-negative number");
        }
        if self.cloud_size < 2 {
            return fail("cloud_size must be at least 2");
        }
        if self.grad_accumulation == 0 {
            return fail("grad_accumulation must be at least 1");
        }
        if self.train_reg_iterations == 0 {
            return fail("train_reg_iterations must be at least 1");
        }
        if !(self.augment_noise_max >= 0.0 && self.augment_noise_max.is_finite()) {
            return fail("augment_noise_max must be a non-negative number");
        }
        if !(self.augment_keep_min > 0.0 && self.augment_keep_min <= 1.0) {
            return fail("augment_keep_min must lie in (0, 1]");
        }
        if !(self.rot_max_train >= 0.0 && self.rot_max_train < std::f64::consts::PI) || !(self.trans_max_train >= 0.0) {
            return fail("training motion ranges are out of bounds");
        }
        self.model.validate()?;
        self.registration
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cf: f64,
    pub loss_pe: f64,
    pub val_chamfer: f64,
    /// Mean validation registration error; semi mode only.
    pub val_rot_err_deg: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
}

pub const TRAIN_REPORT_HEADER: &str = "epoch,loss_total,loss_cf,loss_pe,val_chamfer,val_rot_err_deg,seconds";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                format_sig(r.loss_total, 9),
                format_sig(r.loss_cf, 9),
                format_sig(r.loss_pe, 9),
                format_sig(r.val_chamfer, 9),
                r.val_rot_err_deg.map(|v| format_sig(v, 9)).unwrap_or_default(),
                format_sig(r.seconds, 4)
            );
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation metric.
    pub best: ModelParams,
    pub last: ModelParams,
    pub report: TrainReport,
}

/// A training pair: target `p`, source `q = g_gt p`.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub g_gt: RigidTransform,
}

fn subsample<R: rand::Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut picked = index::sample(rng, cloud.len(), n).into_vec();
    picked.sort_unstable();
    PointCloud::new(picked.into_iter().map(|i| cloud[i]).collect()).expect("subset of a valid cloud")
}

/// Draws `P` from `dataset[indices]`, a random motion within the training range and `Q = g_gt P`.
pub fn sample_training_pair<R: rand::Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> TrainingPair {
    assert!(!indices.is_empty(), "no clouds to sample from");
    let idx = indices[rng.random_range(0..indices.len())];
    pair_from_cloud(&dataset.items[idx].cloud, cfg, rng)
}

fn pair_from_cloud<R: rand::Rng + ?Sized>(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut R) -> TrainingPair {
    let p = subsample(cloud, cfg.cloud_size, rng);
    let g_gt = random_transform(cfg.rot_max_train, cfg.trans_max_train, rng);
    let q = g_gt.apply(&p);
    TrainingPair { p, q, g_gt }
}

/// Perturbs the source of a training pair as configured; a no-op by default.
fn augment<R: rand::Rng + ?Sized>(pair: &mut TrainingPair, cfg: &TrainConfig, rng: &mut R) -> Result<(), CloudError> {
    if cfg.augment_noise_max == 0.0 && cfg.augment_keep_min == 1.0 {
        return Ok(());
    }
    let spec = PerturbationSpec {
        keep_fraction: cfg.augment_keep_min + rng.random::<f64>() * (1.0 - cfg.augment_keep_min),
        noise_sigma: rng.random::<f64>() * cfg.augment_noise_max,
        ..PerturbationSpec::default()
    };
    pair.q = spec.apply(&pair.q, rng.random())?;
    Ok(())
}

/// Chamfer reconstruction of `points`; accumulates gradients and returns the
/// loss with the feature gradient, leaving the encoder backward to the caller.
fn reconstruction(
    params: &ModelParams,
    trace: &EncodeTrace,
    points: &[Point],
    scale: f64,
    grads: &mut ModelGrads,
) -> Result<(f64, DVector<f64>), ModelError> {
    let (recon, dtrace) = decode_traced(&trace.feature, params)?;
    let (cf, d_recon, _) = chamfer_backward(recon.points(), points);
    let d_recon: Vec<Point> = d_recon.into_iter().map(|g| g * scale).collect();
    let d_feature = decode_backward_traced(params, &dtrace, &d_recon, &mut grads.decoder)?;
    Ok((cf, d_feature))
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub chamfer: f64,
    pub point_error: Option<f64>,
}

/// Unsupervised objective on two clouds: the mean of their reconstruction Chamfers.
pub fn unsupervised_step(
    params: &ModelParams,
    p: &PointCloud,
    q: &PointCloud,
    grads: &mut ModelGrads,
) -> Result<StepLoss, ModelError> {
    let mut total = 0.0;
    for x in [p, q] {
        let trace = encode_traced(x.points(), params);
        let (cf, d_feature) = reconstruction(params, &trace, x.points(), 0.5, grads)?;
        encode_backward_traced(params, &trace, &d_feature, &mut grads.encoder)?;
        total += 0.5 * cf;
    }
    Ok(StepLoss {
        chamfer: total,
        point_error: None,
    })
}

/// Point error of the last Gauss-Newton step from `g_k` and its parameter gradients.
///
/// `g_target` is the motion the solver should find (the inverse of the pose
/// that produced `q`). `f_p` must be the traced encoding of `p`; its feature
/// gradient is returned so the caller can merge it with other terms.
pub fn pose_step_loss(
    params: &ModelParams,
    p: &PointCloud,
    f_p: &EncodeTrace,
    q: &PointCloud,
    g_k: &RigidTransform,
    g_target: &RigidTransform,
    cfg: &RegistrationConfig,
    grads: &mut ModelGrads,
) -> Result<(f64, DVector<f64>), RegistrationError> {
    let xi = cfg.perturbation_xi;
    let k = params.feature_dim();
    let perturbed: Vec<EncodeTrace> = (0..6)
        .map(|i| {
            let moved = RigidTransform::exp(&Twist::basis(i).scaled(xi)).apply_points(p.points());
            encode_traced(&moved, params)
        })
        .collect();
    let mut j = DMatrix::zeros(k, 6);
    for (i, t) in perturbed.iter().enumerate() {
        j.set_column(i, &((&t.feature - &f_p.feature) / xi));
    }
    let source = g_k.apply_points(q.points());
    let f_q = encode_traced(&source, params);
    let r = &f_p.feature - &f_q.feature;
    let (delta, lambda) = gn_step_damped(&j, &r, cfg.damping_lambda)?;
    let g_est = RigidTransform::exp(&delta).compose(g_k);
    let (loss, left) = point_error_left_gradient(&g_est, g_target, p);
    let d_delta = se3_left_jacobian(&delta).transpose() * left;

    // delta = A^-1 J^T r with A = J^T J + lambda I
    let a = normal_matrix(&j) + Matrix6::identity() * lambda;
    let u: Vector6<f64> = a
        .cholesky()
        .map(|c| c.solve(&d_delta))
        .ok_or(RegistrationError::SingularNormalEquations { lambda })?;
    let u_dyn = DVector::from_column_slice(u.as_slice());
    let delta_dyn = DVector::from_column_slice(&delta.to_array());
    let ju = &j * &u_dyn;
    let d_r = ju.clone();
    let d_j = (&r - &j * &delta_dyn) * u_dyn.transpose() - &ju * delta_dyn.transpose();

    let encoder_err = |e: ModelError| RegistrationError::InvalidConfig(e.to_string());
    let mut d_fp = d_r.clone();
    for (i, t) in perturbed.iter().enumerate() {
        let d_col: DVector<f64> = d_j.column(i) / xi;
        d_fp -= &d_col;
        encode_backward_traced(params, t, &d_col, &mut grads.encoder).map_err(encoder_err)?;
    }
    encode_backward_traced(params, &f_q, &(-d_r), &mut grads.encoder).map_err(encoder_err)?;
    Ok((loss, d_fp))
}

/// Semi-supervised objective: reconstruction of both clouds plus the point
/// error of a `budget`-iteration registration of `q` onto `p`.
pub fn semi_step(
    params: &ModelParams,
    pair: &TrainingPair,
    cfg: &RegistrationConfig,
    budget: usize,
    grads: &mut ModelGrads,
) -> Result<StepLoss, ModelError> {
    let f_p = encode_traced(pair.p.points(), params);
    let (cf_p, mut d_fp) = reconstruction(params, &f_p, pair.p.points(), 0.5, grads)?;
    let f_q = encode_traced(pair.q.points(), params);
    let (cf_q, d_fq) = reconstruction(params, &f_q, pair.q.points(), 0.5, grads)?;
    encode_backward_traced(params, &f_q, &d_fq, &mut grads.encoder)?;

    let g_target = pair.g_gt.inverse();
    let jacobian = crate::registration::fd_jacobian_points(pair.p.points(), &f_p.feature, params, cfg.perturbation_xi);
    let mut g = RigidTransform::identity();
    let mut f_moved = f_q.feature.clone();
    let mut solvable = true;
    for it in 0..budget.saturating_sub(1) {
        if it > 0 {
            f_moved = encode_points(&g.apply_points(pair.q.points()), params);
        }
        match gn_step(&jacobian, &(&f_p.feature - &f_moved), cfg.damping_lambda) {
            Ok(delta) => g = RigidTransform::exp(&delta).compose(&g),
            Err(_) => {
                solvable = false;
                break;
            }
        }
    }
    let pe = if solvable {
        match pose_step_loss(params, &pair.p, &f_p, &pair.q, &g, &g_target, cfg, grads) {
            Ok((pe, d_pose)) => {
                d_fp += d_pose;
                pe
            }
            Err(_) => crate::losses::point_error_loss(&g, &g_target, &pair.p),
        }
    } else {
        crate::losses::point_error_loss(&g, &g_target, &pair.p)
    };
    encode_backward_traced(params, &f_p, &d_fp, &mut grads.encoder)?;
    Ok(StepLoss {
        chamfer: 0.5 * (cf_p + cf_q),
        point_error: Some(pe),
    })
}

/// Mean reconstruction Chamfer over clouds.
pub fn reconstruction_chamfer(params: &ModelParams, clouds: &[&PointCloud]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for c in clouds {
        let f = encode_points(c.points(), params);
        let (recon, _) = decode_traced(&f, params)?;
        total += crate::losses::chamfer(&recon, c);
    }
    Ok(total / clouds.len() as f64)
}

/// Mean registration error in degrees over validation pairs; failed solves
/// count with the error of the identity.
fn validation_rotation_error(params: &ModelParams, pairs: &[TrainingPair], cfg: &RegistrationConfig) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|pair| {
            let target = pair.g_gt.inverse();
            let est = register(&pair.p, &pair.q, params, cfg)
                .map(|r| r.g_est)
                .unwrap_or_else(|_| RigidTransform::identity());
            rotation_distance(&est, &target).to_degrees()
        })
        .sum();
    total / pairs.len() as f64
}

// Seed stream labels.
const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const EPOCH_STREAM: u64 = 4;
const STEP_STREAM: u64 = 5;

/// The train / validation split [`train`] uses for `cfg`.
pub fn training_split(cfg: &TrainConfig, dataset: &Dataset) -> Split {
    dataset.split(cfg.val_fraction, derive_seed(cfg.seed, &[SPLIT_STREAM]))
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, TrainError> {
    train_with_progress(cfg, dataset, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(TrainError::InvalidConfig("training needs at least two clouds".into()));
    }
    let split = training_split(cfg, dataset);
    if split.train.is_empty() || split.val.is_empty() {
        return Err(TrainError::InvalidConfig("the split leaves no training or no validation clouds".into()));
    }
    let mut params = ModelParams::init(cfg.model.clone(), derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let adam = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let mut enc_state = AdamState::new(&params.encoder);
    let mut dec_state = AdamState::new(&params.decoder);

    let val_pairs: Vec<TrainingPair> = split
        .val
        .iter()
        .map(|&i| {
            let mut rng = seeded_rng(derive_seed(cfg.seed, &[VAL_STREAM, i as u64]));
            pair_from_cloud(&dataset.items[i].cloud, cfg, &mut rng)
        })
        .collect();
    let val_clouds: Vec<&PointCloud> = val_pairs.iter().flat_map(|p| [&p.p, &p.q]).collect();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed, &[EPOCH_STREAM, epoch as u64])));
        let (mut sum_total, mut sum_cf, mut sum_pe) = (0.0, 0.0, 0.0);
        let mut accumulated = params.zero_grads();
        let mut pending = 0usize;
        for (pos, &idx) in order.iter().enumerate() {
            let mut rng: SeededRng = seeded_rng(derive_seed(cfg.seed, &[STEP_STREAM, step as u64]));
            let mut pair = pair_from_cloud(&dataset.items[idx].cloud, cfg, &mut rng);
            augment(&mut pair, cfg, &mut rng)?;
            let mut grads = params.zero_grads();
            let loss = match cfg.mode {
                TrainMode::Unsupervised => unsupervised_step(&params, &pair.p, &pair.q, &mut grads)?,
                TrainMode::Semi => semi_step(&params, &pair, &cfg.registration, cfg.train_reg_iterations, &mut grads)?,
            };
            let value = combined_loss(cfg.mode, loss.chamfer, loss.point_error).expect("mode-consistent terms");
            if !value.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            sum_total += value.total;
            sum_cf += value.chamfer;
            sum_pe += value.point_error;
            accumulated.add_assign(&grads);
            pending += 1;
            step += 1;
            if pending == cfg.grad_accumulation || pos + 1 == order.len() {
                accumulated.scale(1.0 / pending as f64);
                adam.step(&mut params.encoder, &accumulated.encoder, &mut enc_state)
                    .and_then(|_| adam.step(&mut params.decoder, &accumulated.decoder, &mut dec_state))
                    .map_err(ModelError::from)?;
                if !params.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step: step - 1 });
                }
                accumulated = params.zero_grads();
                pending = 0;
            }
        }
        let n = order.len() as f64;
        let val_chamfer = reconstruction_chamfer(&params, &val_clouds)?;
        let val_rot = match cfg.mode {
            TrainMode::Semi => Some(validation_rotation_error(&params, &val_pairs, &cfg.registration)),
            TrainMode::Unsupervised => None,
        };
        let row = EpochRow {
            epoch,
            loss_total: sum_total / n,
            loss_cf: sum_cf / n,
            loss_pe: sum_pe / n,
            val_chamfer,
            val_rot_err_deg: val_rot,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        let metric = val_rot.unwrap_or(val_chamfer);
        if best.as_ref().is_none_or(|(b, _)| metric < *b) {
            best = Some((metric, params.clone()));
            report.best_epoch = epoch;
        }
        report.rows.push(row);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch").1,
        last: params,
        report,
    })
}

/// Runs `registrar` over the protocol's angle bins on `dataset` and tabulates
/// errors against the known motions; one row per angle bin.
pub fn evaluate(registrar: &dyn Registrar, dataset: &Dataset, protocol: &BenchProtocol) -> Vec<BenchRow> {
    run_sweep(&[registrar], dataset, protocol, &[protocol.perturbation])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::point_error_loss;
    use crate::se3::random_transform_with_angle;
    use rand::Rng;

    fn toy_dataset() -> Dataset {
        Dataset::synthesize(&DatasetSpec {
            families: vec![ShapeFamily::Box, ShapeFamily::Ellipsoid],
            per_family: 5,
            points: 32,
            seed: 3,
        })
        .unwrap()
    }

    fn toy_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            cloud_size: 32,
            model: ModelConfig {
                feature_dim: 16,
                encoder_hidden: vec![8, 12],
                decoder_hidden: vec![16, 16, 16],
                decoder_points: 32,
                leaky_slope: 0.01,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let ds = toy_dataset();
        let s = ds.split(0.2, 9);
        assert_eq!(s, ds.split(0.2, 9));
        assert_eq!(s.train.len() + s.val.len(), ds.len());
        assert!(s.train.iter().all(|i| !s.val.contains(i)));
        for f in ds.families() {
            assert_eq!(s.val.iter().filter(|&&i| ds.items[i].family == f).count(), 1);
        }
    }

    #[test]
    fn zero_motion_pairs_are_identical() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            rot_max_train: 0.0,
            trans_max_train: 0.0,
            ..toy_config(TrainMode::Unsupervised)
        };
        let pair = sample_training_pair(&ds, &[0, 1, 2], &cfg, &mut seeded_rng(1));
        assert_eq!(pair.g_gt, RigidTransform::identity());
        assert_eq!(pair.p, pair.q);
    }

    #[test]
    fn sampled_motions_stay_in_the_training_range() {
        let ds = toy_dataset();
        let cfg = toy_config(TrainMode::Semi);
        let mut rng = seeded_rng(2);
        let mut sum = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let pair = sample_training_pair(&ds, &[0], &cfg, &mut rng);
            let angle = pair.g_gt.rotation_angle();
            assert!(angle <= cfg.rot_max_train + 1e-12);
            sum += angle;
        }
        let mean = (sum / draws as f64).to_degrees();
        assert!((mean - 22.5).abs() < 0.5, "{mean}");
    }

    #[test]
    fn pair_is_consistent_with_its_motion() {
        let ds = toy_dataset();
        let pair = sample_training_pair(&ds, &[3], &toy_config(TrainMode::Semi), &mut seeded_rng(4));
        for (p, q) in pair.p.iter().zip(pair.q.iter()) {
            assert!((pair.g_gt.transform_point(p) - q).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_the_initialization() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..toy_config(TrainMode::Unsupervised)
        };
        let out = train(&cfg, &ds).unwrap();
        let init = ModelParams::init(cfg.model.clone(), derive_seed(cfg.seed, &[INIT_STREAM])).unwrap();
        assert_eq!(out.last, init);
        assert_eq!(out.report.rows.len(), 1);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = toy_dataset();
        for mode in [TrainMode::Unsupervised, TrainMode::Semi] {
            let cfg = toy_config(mode);
            let a = train(&cfg, &ds).unwrap();
            let b = train(&cfg, &ds).unwrap();
            assert_eq!(a.last, b.last);
            let strip = |r: &TrainReport| r.rows.iter().map(|r| (r.loss_total, r.val_chamfer, r.val_rot_err_deg)).collect::<Vec<_>>();
            assert_eq!(strip(&a.report), strip(&b.report));
            assert_eq!(a.report.rows.len(), 2);
        }
    }

    #[test]
    fn semi_mode_reports_a_point_error() {
        let out = train(&toy_config(TrainMode::Semi), &toy_dataset()).unwrap();
        assert!(out.report.rows.iter().all(|r| r.loss_pe > 0.0 && r.val_rot_err_deg.is_some()));
        let csv = out.report.to_csv();
        assert!(csv.starts_with(TRAIN_REPORT_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn unsupervised_step_gradients_match_central_differences() {
        let cfg = toy_config(TrainMode::Unsupervised);
        let mut params = ModelParams::init(cfg.model.clone(), 5).unwrap();
        let mut rng = seeded_rng(6);
        for l in params.encoder.layers_mut().iter_mut().chain(params.decoder.layers_mut()) {
            l.layer.b = DVector::from_fn(l.layer.outputs(), |_, _| rng.random_range(-0.2..0.2));
        }
        let ds = toy_dataset();
        let pair = sample_training_pair(&ds, &[0], &cfg, &mut rng);
        let mut grads = params.zero_grads();
        unsupervised_step(&params, &pair.p, &pair.q, &mut grads).unwrap();
        let loss = |m: &ModelParams| unsupervised_step(m, &pair.p, &pair.q, &mut m.zero_grads()).unwrap().chamfer;
        let h = 1e-5;
        let mut checked = 0;
        for (which, k, i) in [(0, 0, 3), (0, 2, 17), (1, 0, 5), (1, 3, 40), (0, 1, 30), (1, 2, 7)] {
            let bump = |m: &mut ModelParams, d: f64| {
                let set = if which == 0 { &mut m.encoder } else { &mut m.decoder };
                set.layers_mut()[k].layer.w[i] += d;
            };
            let mut p = params.clone();
            let mut m = params.clone();
            bump(&mut p, h);
            bump(&mut m, -h);
            let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
            let analytic = if which == 0 { grads.encoder.layers[k].w[i] } else { grads.decoder.layers[k].w[i] };
            let diff = (analytic - numeric).abs();
            assert!(diff <= 1e-7 || diff <= 1e-4 * numeric.abs().max(analytic.abs()), "{which} {k} {i}: {analytic} vs {numeric}");
            checked += 1;
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn pose_step_gradients_match_central_differences() {
        let cfg = toy_config(TrainMode::Semi);
        let mut params = ModelParams::init(cfg.model.clone(), 7).unwrap();
        let mut rng = seeded_rng(8);
        for l in params.encoder.layers_mut() {
            l.layer.b = DVector::from_fn(l.layer.outputs(), |_, _| rng.random_range(-0.2..0.2));
        }
        let ds = toy_dataset();
        let p = ds.items[1].cloud.clone();
        let g_gt = random_transform_with_angle(0.3, 0.1, &mut rng);
        let q = g_gt.apply(&p);
        let g_k = random_transform_with_angle(0.05, 0.02, &mut rng);
        let target = g_gt.inverse();
        let reg = RegistrationConfig::default();
        let value = |m: &ModelParams| -> f64 {
            let f_p = encode_traced(p.points(), m);
            pose_step_loss(m, &p, &f_p, &q, &g_k, &target, &reg, &mut m.zero_grads()).unwrap().0
        };
        let f_p = encode_traced(p.points(), &params);
        let mut grads = params.zero_grads();
        let (loss, d_fp) = pose_step_loss(&params, &p, &f_p, &q, &g_k, &target, &reg, &mut grads).unwrap();
        encode_backward_traced(&params, &f_p, &d_fp, &mut grads.encoder).unwrap();
        assert!(loss > 0.0);
        let h = 1e-6;
        for k in 0..params.encoder.len() {
            let n = params.encoder.layers()[k].layer.w.len();
            for i in (0..n).step_by(n / 7 + 1) {
                let mut pp = params.clone();
                let mut mm = params.clone();
                pp.encoder.layers_mut()[k].layer.w[i] += h;
                mm.encoder.layers_mut()[k].layer.w[i] -= h;
                let numeric = (value(&pp) - value(&mm)) / (2.0 * h);
                let analytic = grads.encoder.layers[k].w[i];
                let diff = (analytic - numeric).abs();
                assert!(
                    diff <= 1e-7 || diff <= 1e-4 * numeric.abs().max(analytic.abs()),
                    "layer {k} w[{i}]: {analytic} vs {numeric}"
                );
            }
        }
        assert!(point_error_loss(&g_k, &target, &p) > 0.0);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!((a.family, a.shape_seed, &a.name), (b.family, b.shape_seed, &b.name));
            assert!(a.cloud.iter().zip(b.cloud.iter()).all(|(x, y)| (x - y).amax() < 1e-8));
        }
        assert!(Dataset::read_dir(&dir.path().join("missing")).is_err());
    }
}
