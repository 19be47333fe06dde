//! Feature-metric inverse-compositional Gauss-Newton registration, and a
//! point-to-point ICP baseline.
//!
//! Both solvers estimate the `g` that moves the source `Q` onto the target `P`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector6};
use thiserror::Error;

use crate::cloud::{Point, PointCloud};
use crate::model::{encode_points, FeatureVector, ModelParams};
use crate::se3::{RigidTransform, Twist};
use crate::spatial::KdTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("normal equations are singular even with damping {lambda:e}")]
    SingularNormalEquations { lambda: f64 },
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub max_iterations: usize,
    /// Finite-difference step for the Jacobian.
    pub perturbation_xi: f64,
    /// Stop once the increment norm falls below this.
    pub step_tolerance: f64,
    pub damping_lambda: f64,
    /// Re-linearize at the current source pose every iteration instead of
    /// reusing the target-side Jacobian.
    pub recompute_jacobian: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            perturbation_xi: 0.02,
            step_tolerance: 1e-7,
            damping_lambda: 0.0,
            recompute_jacobian: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.perturbation_xi > 0.0 && self.perturbation_xi.is_finite()) {
            return Err(RegistrationError::InvalidConfig("perturbation_xi must be positive".into()));
        }
        if !(self.damping_lambda >= 0.0 && self.damping_lambda.is_finite()) {
            return Err(RegistrationError::InvalidConfig("damping_lambda must be non-negative".into()));
        }
        if !(self.step_tolerance >= 0.0) {
            return Err(RegistrationError::InvalidConfig("step_tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Estimated motion taking the source onto the target.
    pub g_est: RigidTransform,
    /// Final error (squared feature residual for FMR, mean squared
    /// correspondence distance for ICP).
    pub r_est: f64,
    /// Error at every iterate, starting with the initial pose.
    pub residual_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

fn check_cloud(cloud: &PointCloud, role: &str) -> Result<(), RegistrationError> {
    if cloud.len() < 2 {
        return Err(RegistrationError::DegenerateCloud(format!("{role} has a single point")));
    }
    if cloud.max_extent() <= 0.0 {
        return Err(RegistrationError::DegenerateCloud(format!("{role} has zero extent")));
    }
    Ok(())
}

/// `F(P) - F(g Q)`.
pub fn feature_residual(p: &PointCloud, q: &PointCloud, g: &RigidTransform, params: &ModelParams) -> FeatureVector {
    encode_points(p.points(), params) - encode_points(&g.apply_points(q.points()), params)
}

/// Forward-difference Jacobian of the feature with respect to a left twist on `points`.
pub fn fd_jacobian_points(points: &[Point], base: &FeatureVector, params: &ModelParams, xi: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(base.len(), 6);
    for i in 0..6 {
        let moved = RigidTransform::exp(&Twist::basis(i).scaled(xi)).apply_points(points);
        let column = (encode_points(&moved, params) - base) / xi;
        j.set_column(i, &column);
    }
    j
}

/// Column `i` is `(F(exp(xi e_i) P) - F(P)) / xi`.
pub fn fd_jacobian(p: &PointCloud, params: &ModelParams, xi: f64) -> DMatrix<f64> {
    let base = encode_points(p.points(), params);
    fd_jacobian_points(p.points(), &base, params, xi)
}

/// Relative pivot below which a Cholesky factor is treated as singular.
const PIVOT_FLOOR: f64 = 1e-14;

fn try_solve(a: &Matrix6<f64>, b: &Vector6<f64>, scale: f64) -> Option<Vector6<f64>> {
    let chol = a.cholesky()?;
    let l = chol.l_dirty();
    if (0..6).any(|i| l[(i, i)] * l[(i, i)] <= PIVOT_FLOOR * scale) {
        return None;
    }
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Damped Gauss-Newton increment `(J^T J + lambda I)^-1 J^T r`.
///
/// If the factorization fails, `lambda` is raised (from `1e-9` of the mean
/// diagonal when it starts at zero) tenfold at a time up to `1e3` times the mean
/// diagonal of `J^T J`.
pub fn gn_step(j: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> Result<Twist, RegistrationError> {
    Ok(gn_step_damped(j, r, lambda)?.0)
}

/// [`gn_step`], also returning the damping that was finally applied.
pub fn gn_step_damped(j: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> Result<(Twist, f64), RegistrationError> {
    assert_eq!(j.ncols(), 6, "Jacobian must have six columns");
    assert_eq!(j.nrows(), r.len(), "Jacobian and residual disagree in length");
    let a = normal_matrix(j);
    let b: Vector6<f64> = Vector6::from_iterator((j.transpose() * r).iter().copied());
    if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
        return Err(RegistrationError::SingularNormalEquations { lambda });
    }
    if b.iter().all(|&v| v == 0.0) {
        return Ok((Twist::zero(), lambda));
    }
    let mean_diag = a.trace() / 6.0;
    if mean_diag <= 0.0 {
        return Err(RegistrationError::SingularNormalEquations { lambda });
    }
    let ceiling = 1e3 * mean_diag;
    let mut lambda = lambda;
    loop {
        let damped = a + Matrix6::identity() * lambda;
        if let Some(x) = try_solve(&damped, &b, mean_diag + lambda) {
            return Ok((Twist::from_vector(&x), lambda));
        }
        lambda = if lambda == 0.0 { 1e-9 * mean_diag } else { lambda * 10.0 };
        if lambda > ceiling {
            return Err(RegistrationError::SingularNormalEquations { lambda });
        }
    }
}

/// `J^T J` as a fixed-size matrix.
pub fn normal_matrix(j: &DMatrix<f64>) -> Matrix6<f64> {
    Matrix6::from_iterator((j.transpose() * j).iter().copied())
}

/// Registers `q` onto `p` starting from the identity.
pub fn register(
    p: &PointCloud,
    q: &PointCloud,
    params: &ModelParams,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    Ok(register_traced(p, q, params, cfg, &RigidTransform::identity())?.0)
}

/// [`register`] from an initial pose, also returning the pose at every iterate.
pub fn register_traced(
    p: &PointCloud,
    q: &PointCloud,
    params: &ModelParams,
    cfg: &RegistrationConfig,
    init: &RigidTransform,
) -> Result<(RegistrationResult, Vec<RigidTransform>), RegistrationError> {
    cfg.validate()?;
    check_cloud(p, "target")?;
    check_cloud(q, "source")?;
    let f_p = encode_points(p.points(), params);
    let mut jacobian = fd_jacobian_points(p.points(), &f_p, params, cfg.perturbation_xi);

    let mut g = *init;
    let mut moved = g.apply_points(q.points());
    let mut f_q = encode_points(&moved, params);
    let mut r = &f_p - &f_q;
    let mut history = vec![r.norm_squared()];
    let mut iterates = vec![g];
    let mut converged = false;
    let mut iterations_run = 0;
    for k in 0..cfg.max_iterations {
        if cfg.recompute_jacobian && k > 0 {
            jacobian = fd_jacobian_points(&moved, &f_q, params, cfg.perturbation_xi);
        }
        let delta = gn_step(&jacobian, &r, cfg.damping_lambda)?;
        if delta.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
        // F(exp(d) g Q) ~ F(g Q) + J d, so d = J^+ r moves g Q towards P
        g = RigidTransform::exp(&delta).compose(&g);
        moved = g.apply_points(q.points());
        f_q = encode_points(&moved, params);
        r = &f_p - &f_q;
        history.push(r.norm_squared());
        iterates.push(g);
        iterations_run += 1;
    }
    let result = RegistrationResult {
        g_est: g,
        r_est: *history.last().expect("history holds the initial error"),
        residual_history: history,
        iterations_run,
        converged,
    };
    Ok((result, iterates))
}

/// Least-squares rigid motion taking `src[i]` onto `dst[i]`, reflections excluded.
pub fn kabsch(src: &[Point], dst: &[Point]) -> Result<RigidTransform, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::DegenerateConfiguration(format!(
            "{} source points for {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(RegistrationError::DegenerateConfiguration("fewer than 3 correspondences".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Point>() / n;
    let cd = dst.iter().sum::<Point>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let mut sorted: Vec<f64> = svd.singular_values.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(RegistrationError::DegenerateConfiguration(
            "points are coincident or collinear".into(),
        ));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    // flip the direction of the smallest singular value when the optimum is a reflection
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .expect("three singular values");
    let mut correction = Matrix3::identity();
    if d < 0.0 {
        correction[(smallest, smallest)] = -1.0;
    }
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    RigidTransform::new(rotation, translation)
        .map_err(|e| RegistrationError::DegenerateConfiguration(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when an iteration improves the mean squared distance by less than
    /// this fraction.
    pub relative_tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-9,
        }
    }
}

fn match_error(tree: &KdTree<'_>, target: &[Point], moved: &[Point]) -> (f64, Vec<Point>) {
    let mut sum = 0.0;
    let mut matched = Vec::with_capacity(moved.len());
    for m in moved {
        let (j, d) = tree.nearest(m);
        sum += d;
        matched.push(target[j]);
    }
    (sum / moved.len() as f64, matched)
}

/// Point-to-point ICP of `q` onto `p` from the identity.
///
/// An iterate is only accepted if it lowers the mean squared correspondence
/// distance, so the history is non-increasing.
pub fn icp_register(p: &PointCloud, q: &PointCloud, cfg: &IcpConfig) -> Result<RegistrationResult, RegistrationError> {
    check_cloud(p, "target")?;
    check_cloud(q, "source")?;
    if cfg.max_iterations == 0 {
        return Err(RegistrationError::InvalidConfig("max_iterations must be at least 1".into()));
    }
    let tree = KdTree::build(p.points());
    let mut g = RigidTransform::identity();
    let (mut err, mut matched) = match_error(&tree, p.points(), q.points());
    let mut history = vec![err];
    let mut iterations_run = 0;
    let mut converged = err == 0.0;
    while !converged && iterations_run < cfg.max_iterations {
        let candidate = kabsch(q.points(), &matched)?;
        let moved = candidate.apply_points(q.points());
        let (next_err, next_matched) = match_error(&tree, p.points(), &moved);
        if !(next_err < err) {
            converged = true;
            break;
        }
        let gain = err - next_err;
        g = candidate;
        err = next_err;
        matched = next_matched;
        history.push(err);
        iterations_run += 1;
        converged = err == 0.0 || gain <= cfg.relative_tolerance * history[history.len() - 2];
    }
    Ok(RegistrationResult {
        g_est: g,
        r_est: err,
        residual_history: history,
        iterations_run,
        converged,
    })
}

/// A registration method usable by the benchmark harness.
pub trait Registrar: Sync {
    fn name(&self) -> &str;
    /// Estimates the motion taking `source` onto `target`.
    fn register(&self, target: &PointCloud, source: &PointCloud) -> Result<RegistrationResult, RegistrationError>;
}

pub struct FmrRegistrar<'a> {
    pub name: String,
    pub params: &'a ModelParams,
    pub config: RegistrationConfig,
}

impl Registrar for FmrRegistrar<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn register(&self, target: &PointCloud, source: &PointCloud) -> Result<RegistrationResult, RegistrationError> {
        register(target, source, self.params, &self.config)
    }
}

pub struct IcpRegistrar {
    pub config: IcpConfig,
}

impl Registrar for IcpRegistrar {
    fn name(&self) -> &str {
        "icp"
    }

    fn register(&self, target: &PointCloud, source: &PointCloud) -> Result<RegistrationResult, RegistrationError> {
        icp_register(target, source, &self.config)
    }
}
