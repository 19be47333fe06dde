//! Benchmark protocols: rotation sweeps, density, noise and partial-overlap
//! studies, residual traces and timing tables.
//!
//! Every cell draws its trials from seed streams keyed by the initial angle and
//! the trial index, so all methods in a cell see the same `(P, Q, g_gt)` and
//! adding angles or methods never changes existing cells.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::cloud::{sample_shape, PerturbationSpec, PointCloud, ShapeFamily};
use crate::model::ModelParams;
use crate::registration::{register_traced, Registrar, RegistrationConfig, RegistrationError};
use crate::se3::{random_transform_with_angle, rotation_distance, transform_rmse, translation_error, RigidTransform};
use crate::training::Dataset;
use crate::util::{derive_seed, format_sig, seeded_rng};

pub const BENCH_HEADER: &str =
    "method,init_angle_deg,perturbation,trials,rot_err_mean_deg,rot_err_median_deg,trans_err_mean,rmse_mean,success_rate,time_ms_mean";
pub const TRACE_HEADER: &str = "iteration,feature_error,rot_err_deg";
pub const TIMING_HEADER: &str = "method,n_points,trials,time_ms_mean,time_ms_median";

pub const DEFAULT_KEEP_FRACTION: f64 = 0.1;
pub const DEFAULT_NOISE_SIGMAS: [f64; 2] = [0.01, 0.02];
pub const DEFAULT_CROP_FRACTIONS: [f64; 2] = [0.1, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchProtocol {
    pub init_rot_angles_deg: Vec<f64>,
    pub init_trans_max: f64,
    pub trials_per_cell: usize,
    /// Applied to the source cloud of every trial.
    pub perturbation: PerturbationSpec,
    pub seed: u64,
    pub success_rot_deg: f64,
    pub success_trans: f64,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            init_rot_angles_deg: (0..=8).map(|i| 10.0 * i as f64).collect(),
            init_trans_max: 0.8,
            trials_per_cell: 20,
            perturbation: PerturbationSpec::default(),
            seed: 0,
            success_rot_deg: 5.0,
            success_trans: 0.05,
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<(), String> {
        if self.init_rot_angles_deg.is_empty() {
            return Err("at least one initial angle is required".into());
        }
        if let Some(a) = self.init_rot_angles_deg.iter().find(|a| !(0.0..180.0).contains(*a)) {
            return Err(format!("initial angle {a} outside [0, 180)"));
        }
        if self.trials_per_cell == 0 {
            return Err("trials must be at least 1".into());
        }
        if !(self.init_trans_max >= 0.0 && self.init_trans_max.is_finite()) {
            return Err("init_trans_max must be a non-negative number".into());
        }
        self.perturbation.validate().map_err(|e| e.to_string())
    }
}

/// One registration problem: find the motion taking `source` onto `target`.
#[derive(Debug, Clone)]
pub struct Trial {
    pub target: PointCloud,
    pub source: PointCloud,
    /// The pose that produced the unperturbed source, `source = g_gt target`.
    pub g_gt: RigidTransform,
}

impl Trial {
    /// Draws a cloud from `dataset` and a motion at exactly `angle` radians,
    /// then perturbs the moved copy. The cloud and motion depend on `seed` only.
    pub fn sample(
        dataset: &Dataset,
        angle: f64,
        trans_max: f64,
        perturbation: &PerturbationSpec,
        seed: u64,
    ) -> Result<Self, crate::cloud::CloudError> {
        let mut rng = seeded_rng(derive_seed(seed, &[0]));
        let idx = rand::Rng::random_range(&mut rng, 0..dataset.len());
        let target = dataset.items[idx].cloud.clone();
        let g_gt = random_transform_with_angle(angle, trans_max, &mut rng);
        let moved = g_gt.apply(&target);
        let source = if perturbation.is_identity() {
            moved
        } else {
            perturbation.apply(&moved, derive_seed(seed, &[1, perturbation.seed]))?
        };
        Ok(Self { target, source, g_gt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub rmse: f64,
    pub time_ms: f64,
    pub success: bool,
    /// The solver returned an error; errors are those of the identity.
    pub failed: bool,
    /// First and last entries of the residual history.
    pub feature_error: Option<(f64, f64)>,
}

/// Scores one registrar on one trial.
pub fn score_trial(registrar: &dyn Registrar, trial: &Trial, rot_threshold_deg: f64, trans_threshold: f64) -> TrialOutcome {
    let started = Instant::now();
    let result = registrar.register(&trial.target, &trial.source);
    let time_ms = started.elapsed().as_secs_f64() * 1e3;
    let truth = trial.g_gt.inverse();
    let (estimate, feature_error) = match &result {
        Ok(r) => (
            r.g_est,
            Some((r.residual_history[0], *r.residual_history.last().expect("nonempty history"))),
        ),
        Err(_) => (RigidTransform::identity(), None),
    };
    let rot_err_deg = rotation_distance(&estimate, &truth).to_degrees();
    let trans_err = translation_error(&estimate, &truth);
    TrialOutcome {
        rot_err_deg,
        trans_err,
        rmse: transform_rmse(&estimate, &truth),
        time_ms,
        success: result.is_ok() && rot_err_deg < rot_threshold_deg && trans_err < trans_threshold,
        failed: result.is_err(),
        feature_error,
    }
}

/// Runs every registrar on every trial; `outcomes[t][m]` is trial `t`, method `m`.
pub fn run_trials(
    registrars: &[&dyn Registrar],
    trials: &[Trial],
    rot_threshold_deg: f64,
    trans_threshold: f64,
) -> Vec<Vec<TrialOutcome>> {
    trials
        .par_iter()
        .map(|t| {
            registrars
                .iter()
                .map(|r| score_trial(*r, t, rot_threshold_deg, trans_threshold))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub init_angle_deg: f64,
    pub perturbation: String,
    pub trials: usize,
    pub rot_err_mean_deg: f64,
    pub rot_err_median_deg: f64,
    pub trans_err_mean: f64,
    pub rmse_mean: f64,
    pub success_rate: f64,
    pub time_ms_mean: f64,
    /// Trials where the solver returned an error.
    pub failures: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl BenchRow {
    pub fn summarize(method: &str, init_angle_deg: f64, perturbation: &str, outcomes: &[TrialOutcome]) -> Self {
        let rot: Vec<f64> = outcomes.iter().map(|o| o.rot_err_deg).collect();
        let pick = |f: fn(&TrialOutcome) -> f64| mean(&outcomes.iter().map(f).collect::<Vec<_>>());
        Self {
            method: method.to_string(),
            init_angle_deg,
            perturbation: perturbation.to_string(),
            trials: outcomes.len(),
            rot_err_mean_deg: mean(&rot),
            rot_err_median_deg: median(&rot),
            trans_err_mean: pick(|o| o.trans_err),
            rmse_mean: pick(|o| o.rmse),
            success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64,
            time_ms_mean: pick(|o| o.time_ms),
            failures: outcomes.iter().filter(|o| o.failed).count(),
        }
    }
}

// Seed stream labels.
const TRIAL_STREAM: u64 = 1;

/// The trial set of one cell; the perturbation only changes the source.
pub fn cell_trials(
    dataset: &Dataset,
    protocol: &BenchProtocol,
    angle_deg: f64,
    perturbation: &PerturbationSpec,
) -> Result<Vec<Trial>, crate::cloud::CloudError> {
    (0..protocol.trials_per_cell)
        .map(|t| {
            let seed = derive_seed(protocol.seed, &[TRIAL_STREAM, angle_deg.to_bits(), t as u64]);
            Trial::sample(dataset, angle_deg.to_radians(), protocol.init_trans_max, perturbation, seed)
        })
        .collect()
}

/// Rows ordered by perturbation, then angle, then method.
///
/// A trial whose perturbation empties the source is scored as a failure of
/// every method.
pub fn run_sweep(
    registrars: &[&dyn Registrar],
    dataset: &Dataset,
    protocol: &BenchProtocol,
    perturbations: &[PerturbationSpec],
) -> Vec<BenchRow> {
    assert!(!dataset.is_empty(), "benchmark on an empty dataset");
    let mut rows = Vec::new();
    for perturbation in perturbations {
        let tag = perturbation.tag();
        for &angle in &protocol.init_rot_angles_deg {
            let trials = cell_trials(dataset, protocol, angle, perturbation).expect("validated perturbation");
            let outcomes = run_trials(registrars, &trials, protocol.success_rot_deg, protocol.success_trans);
            for (m, registrar) in registrars.iter().enumerate() {
                let column: Vec<TrialOutcome> = outcomes.iter().map(|o| o[m]).collect();
                rows.push(BenchRow::summarize(registrar.name(), angle, &tag, &column));
            }
        }
    }
    rows
}

pub fn rotation_sweep(registrars: &[&dyn Registrar], dataset: &Dataset, protocol: &BenchProtocol) -> Vec<BenchRow> {
    run_sweep(registrars, dataset, protocol, &[PerturbationSpec::default()])
}

/// Sources decimated to each keep fraction.
pub fn density_test(
    registrars: &[&dyn Registrar],
    dataset: &Dataset,
    protocol: &BenchProtocol,
    keep_fractions: &[f64],
) -> Vec<BenchRow> {
    let specs: Vec<PerturbationSpec> = keep_fractions
        .iter()
        .map(|&keep_fraction| PerturbationSpec {
            keep_fraction,
            ..protocol.perturbation
        })
        .collect();
    run_sweep(registrars, dataset, protocol, &specs)
}

/// Sources with Gaussian noise of each standard deviation.
pub fn noise_test(registrars: &[&dyn Registrar], dataset: &Dataset, protocol: &BenchProtocol, sigmas: &[f64]) -> Vec<BenchRow> {
    let specs: Vec<PerturbationSpec> = sigmas
        .iter()
        .map(|&noise_sigma| PerturbationSpec {
            noise_sigma,
            ..protocol.perturbation
        })
        .collect();
    run_sweep(registrars, dataset, protocol, &specs)
}

/// Sources with each fraction cut away by a random plane.
pub fn overlap_test(
    registrars: &[&dyn Registrar],
    dataset: &Dataset,
    protocol: &BenchProtocol,
    crop_fractions: &[f64],
) -> Vec<BenchRow> {
    let specs: Vec<PerturbationSpec> = crop_fractions
        .iter()
        .map(|&crop_fraction| PerturbationSpec {
            crop_fraction,
            ..protocol.perturbation
        })
        .collect();
    run_sweep(registrars, dataset, protocol, &specs)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            format_sig(r.init_angle_deg, 9),
            r.perturbation,
            r.trials,
            format_sig(r.rot_err_mean_deg, 9),
            format_sig(r.rot_err_median_deg, 9),
            format_sig(r.trans_err_mean, 9),
            format_sig(r.rmse_mean, 9),
            format_sig(r.success_rate, 9),
            format_sig(r.time_ms_mean, 6)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub feature_error: f64,
    pub rot_err_deg: Option<f64>,
}

/// Feature error, and rotation error against `truth` when given, at every
/// iterate of an FMR registration of `q` onto `p`. `truth` is the motion that
/// aligns `q` with `p`.
pub fn residual_trace(
    params: &ModelParams,
    p: &PointCloud,
    q: &PointCloud,
    cfg: &RegistrationConfig,
    truth: Option<&RigidTransform>,
) -> Result<Vec<TraceRow>, RegistrationError> {
    let (result, iterates) = register_traced(p, q, params, cfg, &RigidTransform::identity())?;
    Ok(result
        .residual_history
        .iter()
        .zip(&iterates)
        .enumerate()
        .map(|(iteration, (&feature_error, g))| TraceRow {
            iteration,
            feature_error,
            rot_err_deg: truth.map(|t| rotation_distance(g, t).to_degrees()),
        })
        .collect())
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.iteration,
            format_sig(r.feature_error, 9),
            r.rot_err_deg.map(|v| format_sig(v, 9)).unwrap_or_default()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: String,
    pub n_points: usize,
    pub trials: usize,
    pub time_ms_mean: f64,
    pub time_ms_median: f64,
}

/// Initial rotation of the timing problems.
const TIMING_ANGLE_DEG: f64 = 20.0;

/// Serial wall-clock registration times per method and cloud size; one extra
/// warm-up trial per cell is run and discarded.
pub fn timing_report(registrars: &[&dyn Registrar], sizes: &[usize], trials: usize, seed: u64) -> Vec<TimingRow> {
    let trials = trials.max(1);
    let mut rows = Vec::new();
    for &n in sizes {
        let problems: Vec<Trial> = (0..=trials)
            .map(|t| {
                let s = derive_seed(seed, &[n as u64, t as u64]);
                let mut rng = seeded_rng(s);
                let target = sample_shape(ShapeFamily::Composite, n, s, &mut rng).expect("positive size");
                let g_gt = random_transform_with_angle(TIMING_ANGLE_DEG.to_radians(), 0.3, &mut rng);
                Trial {
                    source: g_gt.apply(&target),
                    target,
                    g_gt,
                }
            })
            .collect();
        for registrar in registrars {
            let times: Vec<f64> = problems
                .iter()
                .map(|t| {
                    let started = Instant::now();
                    let _ = registrar.register(&t.target, &t.source);
                    started.elapsed().as_secs_f64() * 1e3
                })
                .skip(1)
                .collect();
            rows.push(TimingRow {
                method: registrar.name().to_string(),
                n_points: n,
                trials,
                time_ms_mean: mean(&times),
                time_ms_median: median(&times),
            });
        }
    }
    rows
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = format!("{TIMING_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method,
            r.n_points,
            r.trials,
            format_sig(r.time_ms_mean, 6),
            format_sig(r.time_ms_median, 6)
        );
    }
    out
}
