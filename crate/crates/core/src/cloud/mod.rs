//! Point cloud container, unit-box normalization, perturbation generators,
//! synthetic shapes and file I/O.

mod io;
mod shapes;

use std::ops::Index;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use io::{load, parse, save, serialize, CloudFormat, TEXT_DIGITS};
pub use shapes::{sample_shape, sample_shape_raw, ShapeFamily, ShapeParams};

pub type Point = Vector3<f64>;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point cloud is empty")]
    Empty,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("all points coincide; the cloud has no extent")]
    DegenerateExtent,
    #[error("operation would leave no points")]
    EmptyResult,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported content: {0}")]
    UnsupportedElement(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An ordered, non-empty set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::Empty);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(CloudError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self, CloudError> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; clouds hold at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point {
        self.points.iter().sum::<Point>() / self.points.len() as f64
    }

    /// Largest side of the bounding box.
    pub fn max_extent(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).max()
    }
}

impl Index<usize> for PointCloud {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// The uniform scale and offset applied by [`normalize_unit_box`]:
/// `normalized = (original - offset) / extent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub offset: Point,
    pub extent: f64,
}

impl Normalization {
    pub fn apply_point(&self, p: &Point) -> Point {
        (p - self.offset) / self.extent
    }

    pub fn invert_point(&self, p: &Point) -> Point {
        p * self.extent + self.offset
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(cloud.iter().map(|p| self.apply_point(p)).collect())
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(cloud.iter().map(|p| self.invert_point(p)).collect())
    }
}

/// Computes the normalization that maps `cloud` into `[0, 1]^3` with its
/// bounding-box min corner at the origin and its longest side of unit length.
pub fn unit_box_normalization(cloud: &PointCloud) -> Result<Normalization, CloudError> {
    let (lo, hi) = cloud.bounding_box();
    let extent = (hi - lo).max();
    if extent <= 0.0 {
        return Err(CloudError::DegenerateExtent);
    }
    Ok(Normalization { offset: lo, extent })
}

/// Uniformly scales and translates `cloud` into the unit box `[0, 1]^3`
/// (aspect ratio preserved) and returns the applied normalization.
pub fn normalize_unit_box(cloud: &PointCloud) -> Result<(PointCloud, Normalization), CloudError> {
    let record = unit_box_normalization(cloud)?;
    Ok((record.apply(cloud), record))
}

/// Number of points kept by [`decimate`]: `ceil(keep_fraction * n)`, tolerant to
/// the representation error of `keep_fraction` (0.7 * 10 keeps 7, not 8).
pub fn decimated_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps `ceil(keep_fraction * N)` points chosen uniformly without replacement,
/// in their original order.
pub fn decimate<R: Rng + ?Sized>(
    cloud: &PointCloud,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<PointCloud, CloudError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(CloudError::InvalidParameter(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let keep = decimated_count(cloud.len(), keep_fraction);
    if keep == 0 {
        return Err(CloudError::EmptyResult);
    }
    let mut idx = rand::seq::index::sample(rng, cloud.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(PointCloud::from_points_unchecked(
        idx.into_iter().map(|i| cloud[i]).collect(),
    ))
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    cloud: &PointCloud,
    sigma: f64,
    rng: &mut R,
) -> Result<PointCloud, CloudError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CloudError::InvalidParameter(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    Ok(PointCloud::from_points_unchecked(
        cloud
            .iter()
            .map(|p| {
                let n = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
                p + n
            })
            .collect(),
    ))
}

/// Removes the points whose coordinate along `axis` exceeds the
/// `(1 - crop_fraction)` empirical quantile of that coordinate. When `axis` is
/// `None` it is drawn uniformly from `{x, y, z}`.
///
/// The quantile is the `(N - floor(crop_fraction * N))`-th smallest coordinate,
/// so exactly that many points survive unless coordinates tie at the cut, in
/// which case every tied point survives.
pub fn crop_half_space<R: Rng + ?Sized>(
    cloud: &PointCloud,
    crop_fraction: f64,
    axis: Option<usize>,
    rng: &mut R,
) -> Result<PointCloud, CloudError> {
    if !(0.0..1.0).contains(&crop_fraction) {
        return Err(CloudError::InvalidParameter(format!(
            "crop_fraction {crop_fraction} outside [0, 1)"
        )));
    }
    let axis = match axis {
        Some(a) if a < 3 => a,
        Some(a) => return Err(CloudError::InvalidParameter(format!("axis {a}"))),
        None => rng.random_range(0..3),
    };
    let n = cloud.len();
    let removed = (crop_fraction * n as f64 + 1e-9).floor() as usize;
    let keep = n.saturating_sub(removed);
    if keep == 0 {
        return Err(CloudError::EmptyResult);
    }
    let mut coords: Vec<f64> = cloud.iter().map(|p| p[axis]).collect();
    coords.sort_unstable_by(f64::total_cmp);
    let threshold = coords[keep - 1];
    let kept: Vec<Point> = cloud.iter().filter(|p| p[axis] <= threshold).copied().collect();
    if kept.is_empty() {
        return Err(CloudError::EmptyResult);
    }
    Ok(PointCloud::from_points_unchecked(kept))
}

/// A combined perturbation applied to a source cloud: decimation, then
/// Gaussian noise, then a half-space crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub keep_fraction: f64,
    pub noise_sigma: f64,
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            keep_fraction: 1.0,
            noise_sigma: 0.0,
            crop_fraction: 0.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), CloudError> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(CloudError::InvalidParameter(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CloudError::InvalidParameter(format!(
                "noise_sigma {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.crop_fraction) {
            return Err(CloudError::InvalidParameter(format!(
                "crop_fraction {} outside [0, 1)",
                self.crop_fraction
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.keep_fraction == 1.0 && self.noise_sigma == 0.0 && self.crop_fraction == 0.0
    }

    /// Short label used in benchmark tables, e.g. `keep=0.1` or `none`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.keep_fraction != 1.0 {
            parts.push(format!("keep={}", self.keep_fraction));
        }
        if self.noise_sigma != 0.0 {
            parts.push(format!("noise={}", self.noise_sigma));
        }
        if self.crop_fraction != 0.0 {
            parts.push(format!("crop={}", self.crop_fraction));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Applies the perturbation. Each stage draws from its own RNG stream so
    /// that disabling one stage does not change the others.
    pub fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud, CloudError> {
        use crate::util::{derive_seed, seeded_rng};
        self.validate()?;
        let mut out = cloud.clone();
        if self.keep_fraction < 1.0 {
            out = decimate(&out, self.keep_fraction, &mut seeded_rng(derive_seed(seed, &[1])))?;
        }
        if self.noise_sigma > 0.0 {
            out = add_gaussian_noise(&out, self.noise_sigma, &mut seeded_rng(derive_seed(seed, &[2])))?;
        }
        if self.crop_fraction > 0.0 {
            out = crop_half_space(
                &out,
                self.crop_fraction,
                None,
                &mut seeded_rng(derive_seed(seed, &[3])),
            )?;
        }
        Ok(out)
    }
}
