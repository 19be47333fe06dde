//! Reconstruction and pose losses with exact gradients.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector3, Vector6};
use thiserror::Error;

use crate::cloud::{Point, PointCloud};
use crate::se3::{se3_left_jacobian, RigidTransform, Twist};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Chamfer reconstruction plus point error against the ground-truth pose.
    Semi,
    /// Chamfer reconstruction only.
    Unsupervised,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Semi => "semi",
            TrainMode::Unsupervised => "unsupervised",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semi" => Ok(TrainMode::Semi),
            "unsupervised" | "unsup" => Ok(TrainMode::Unsupervised),
            other => Err(format!("unknown training mode '{other}' (expected semi or unsupervised)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{mode} mode {problem}")]
    ModeMismatch { mode: TrainMode, problem: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub chamfer: f64,
    pub point_error: f64,
}

/// Sums the loss terms; point error must be present exactly in semi mode.
pub fn combined_loss(mode: TrainMode, chamfer: f64, point_error: Option<f64>) -> Result<LossValue, LossError> {
    match (mode, point_error) {
        (TrainMode::Semi, Some(pe)) => Ok(LossValue {
            total: chamfer + pe,
            chamfer,
            point_error: pe,
        }),
        (TrainMode::Unsupervised, None) => Ok(LossValue {
            total: chamfer,
            chamfer,
            point_error: 0.0,
        }),
        (TrainMode::Semi, None) => Err(LossError::ModeMismatch {
            mode,
            problem: "requires a point-error term",
        }),
        (TrainMode::Unsupervised, Some(_)) => Err(LossError::ModeMismatch {
            mode,
            problem: "takes no point-error term",
        }),
    }
}

/// Mean squared distance from each point of `from` to its nearest point in `tree`,
/// with the matched indices.
fn directed(from: &[Point], tree: &KdTree<'_>) -> (f64, Vec<usize>) {
    let mut sum = 0.0;
    let mut matches = Vec::with_capacity(from.len());
    for p in from {
        let (j, d) = tree.nearest(p);
        sum += d;
        matches.push(j);
    }
    (sum / from.len() as f64, matches)
}

/// Symmetric Chamfer distance: mean nearest squared distance from `a` to `b`
/// plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    chamfer_points(a.points(), b.points())
}

pub fn chamfer_points(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of an empty set");
    let (ab, _) = directed(a, &KdTree::build(b));
    let (ba, _) = directed(b, &KdTree::build(a));
    ab + ba
}

/// Chamfer value and its gradients with respect to every point of `a` and `b`,
/// with nearest neighbours held fixed at their forward assignment.
pub fn chamfer_backward(a: &[Point], b: &[Point]) -> (f64, Vec<Point>, Vec<Point>) {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of an empty set");
    let (ab, a_to_b) = directed(a, &KdTree::build(b));
    let (ba, b_to_a) = directed(b, &KdTree::build(a));
    let mut da = vec![Vector3::zeros(); a.len()];
    let mut db = vec![Vector3::zeros(); b.len()];
    let wa = 2.0 / a.len() as f64;
    for (i, &j) in a_to_b.iter().enumerate() {
        let g = (a[i] - b[j]) * wa;
        da[i] += g;
        db[j] -= g;
    }
    let wb = 2.0 / b.len() as f64;
    for (j, &i) in b_to_a.iter().enumerate() {
        let g = (b[j] - a[i]) * wb;
        db[j] += g;
        da[i] -= g;
    }
    (ab + ba, da, db)
}

/// Mean squared distance between `g_est * p` and `g_gt * p` over the points of `cloud`.
pub fn point_error_loss(g_est: &RigidTransform, g_gt: &RigidTransform, cloud: &PointCloud) -> f64 {
    cloud
        .iter()
        .map(|p| (g_est.transform_point(p) - g_gt.transform_point(p)).norm_squared())
        .sum::<f64>()
        / cloud.len() as f64
}

/// Point error and its gradient with respect to a left perturbation
/// `g_est -> exp(d) g_est`, `d = (rotation, translation)`, at `d = 0`.
pub fn point_error_left_gradient(g_est: &RigidTransform, g_gt: &RigidTransform, cloud: &PointCloud) -> (f64, Vector6<f64>) {
    let scale = 1.0 / cloud.len() as f64;
    let mut loss = 0.0;
    let mut d_rot = Vector3::zeros();
    let mut d_trans = Vector3::zeros();
    for p in cloud {
        let y = g_est.transform_point(p);
        let e = y - g_gt.transform_point(p);
        loss += e.norm_squared();
        d_rot += y.cross(&e);
        d_trans += e;
    }
    let mut grad = Vector6::zeros();
    grad.fixed_rows_mut::<3>(0).copy_from(&(d_rot * (2.0 * scale)));
    grad.fixed_rows_mut::<3>(3).copy_from(&(d_trans * (2.0 * scale)));
    (loss * scale, grad)
}

/// Point error of `exp(twist)` against `g_gt` and its gradient with respect to the twist.
pub fn point_error_twist_gradient(twist: &Twist, g_gt: &RigidTransform, cloud: &PointCloud) -> (f64, Vector6<f64>) {
    let g_est = RigidTransform::exp(twist);
    let (loss, left) = point_error_left_gradient(&g_est, g_gt, cloud);
    (loss, se3_left_jacobian(twist).transpose() * left)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::random_transform;
    use crate::spatial::nearest_brute_force;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
        let ab: f64 = a.iter().map(|p| nearest_brute_force(b, p).1).sum::<f64>() / a.len() as f64;
        let ba: f64 = b.iter().map(|p| nearest_brute_force(a, p).1).sum::<f64>() / b.len() as f64;
        ab + ba
    }

    #[test]
    fn chamfer_examples() {
        let a = random_points(30, 1);
        assert_eq!(chamfer_points(&a, &a), 0.0);
        let o = [Vector3::zeros()];
        let x = [Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_points(&o, &x), 2.0);
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        for seed in 0..50 {
            let a = random_points(64, 2 * seed);
            let b = random_points(64, 2 * seed + 1);
            let fast = chamfer_points(&a, &b);
            assert_eq!(fast, brute_chamfer(&a, &b));
            assert_eq!(fast, chamfer_points(&b, &a));
        }
    }

    #[test]
    fn chamfer_is_rigid_invariant() {
        let a = PointCloud::new(random_points(80, 3)).unwrap();
        let b = PointCloud::new(random_points(70, 4)).unwrap();
        let g = random_transform(2.0, 1.0, &mut seeded_rng(5));
        assert!((chamfer(&a, &b) - chamfer(&g.apply(&a), &g.apply(&b))).abs() < 1e-9);
    }

    #[test]
    fn chamfer_gradients_match_central_differences() {
        let a = random_points(12, 6);
        let b = random_points(9, 7);
        let (_, da, db) = chamfer_backward(&a, &b);
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let diff = (analytic - numeric).abs();
            assert!(diff <= 1e-7 || diff <= 1e-4 * analytic.abs().max(numeric.abs()), "{analytic} vs {numeric}");
        };
        for i in 0..a.len() {
            for c in 0..3 {
                let mut p = a.clone();
                let mut m = a.clone();
                p[i][c] += h;
                m[i][c] -= h;
                check(da[i][c], (chamfer_points(&p, &b) - chamfer_points(&m, &b)) / (2.0 * h));
            }
        }
        for j in 0..b.len() {
            for c in 0..3 {
                let mut p = b.clone();
                let mut m = b.clone();
                p[j][c] += h;
                m[j][c] -= h;
                check(db[j][c], (chamfer_points(&a, &p) - chamfer_points(&a, &m)) / (2.0 * h));
            }
        }
    }

    #[test]
    fn point_error_examples() {
        let cloud = PointCloud::new(random_points(20, 8)).unwrap();
        let g = random_transform(1.0, 0.5, &mut seeded_rng(9));
        assert_eq!(point_error_loss(&g, &g, &cloud), 0.0);
        let d = Vector3::new(0.3, -0.1, 0.2);
        let shifted = RigidTransform::from_translation(d).compose(&g);
        assert!((point_error_loss(&shifted, &g, &cloud) - d.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn point_error_grows_with_translation() {
        let cloud = PointCloud::new(random_points(20, 10)).unwrap();
        let g = random_transform(1.0, 0.5, &mut seeded_rng(11));
        let dir = Vector3::new(1.0, 2.0, -1.0).normalize();
        let mut last = -1.0;
        for s in [0.0, 0.01, 0.1, 0.5, 2.0] {
            let v = point_error_loss(&RigidTransform::from_translation(dir * s).compose(&g), &g, &cloud);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn point_error_twist_gradient_matches_central_differences() {
        let cloud = PointCloud::new(random_points(25, 12)).unwrap();
        let mut rng = seeded_rng(13);
        for _ in 0..20 {
            let twist = Twist::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let gt = random_transform(1.0, 0.5, &mut rng);
            let (_, grad) = point_error_twist_gradient(&twist, &gt, &cloud);
            let h = 1e-5;
            for k in 0..6 {
                let mut p = twist.to_array();
                let mut m = twist.to_array();
                p[k] += h;
                m[k] -= h;
                let numeric = (point_error_loss(&RigidTransform::exp(&Twist::from_array(p)), &gt, &cloud)
                    - point_error_loss(&RigidTransform::exp(&Twist::from_array(m)), &gt, &cloud))
                    / (2.0 * h);
                assert!((grad[k] - numeric).abs() <= 1e-5 * numeric.abs().max(1e-2), "{k}: {} vs {numeric}", grad[k]);
            }
        }
    }

    #[test]
    fn combined_loss_modes() {
        let u = combined_loss(TrainMode::Unsupervised, 0.3, None).unwrap();
        assert_eq!((u.total, u.point_error), (0.3, 0.0));
        let s = combined_loss(TrainMode::Semi, 0.3, Some(0.2)).unwrap();
        assert_eq!(s.total, 0.3 + 0.2);
        assert!((s.total - 0.5).abs() < 1e-15);
        assert!(matches!(combined_loss(TrainMode::Semi, 0.3, None), Err(LossError::ModeMismatch { .. })));
        assert!(combined_loss(TrainMode::Unsupervised, 0.3, Some(0.1)).is_err());
    }
}
