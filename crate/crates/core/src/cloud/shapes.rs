//! Procedural surface samplers used as a stand-in for CAD-model vertices.
//!
//! The shape itself (radii, aspect, part layout) is a function of `shape_seed`
//! alone; which surface points get drawn comes from the caller's RNG.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::{normalize_unit_box, CloudError, Point, PointCloud};
use crate::se3::{random_unit_vector, so3_exp};
use crate::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Torus,
    Ellipsoid,
    Composite,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Torus,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Composite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Composite => "composite",
        }
    }

    /// Families without a continuous symmetry, i.e. whose pose is observable
    /// from the point set alone.
    pub fn pose_observable(&self) -> bool {
        matches!(self, ShapeFamily::Box | ShapeFamily::Ellipsoid | ShapeFamily::Composite)
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = CloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| CloudError::InvalidParameter(format!("unknown shape family '{s}'")))
    }
}

/// The parameters of one generated shape, in its own (pre-normalization) frame.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeParams {
    Sphere { center: Point, radius: f64 },
    Box { center: Point, half_extents: Vector3<f64> },
    /// Axis along z, centered at `center`.
    Torus { center: Point, major: f64, minor: f64 },
    Ellipsoid { center: Point, semi_axes: Vector3<f64> },
    /// Rigidly placed sub-shapes; points are split evenly between parts.
    Composite { parts: Vec<(ShapeParams, Matrix3<f64>)> },
}

impl ShapeParams {
    pub fn generate(family: ShapeFamily, shape_seed: u64) -> Self {
        let mut rng = seeded_rng(shape_seed);
        match family {
            ShapeFamily::Composite => {
                let count = rng.random_range(2..=4);
                let parts = (0..count)
                    .map(|i| {
                        let kind = if i == 0 {
                            ShapeFamily::Box
                        } else {
                            [ShapeFamily::Box, ShapeFamily::Ellipsoid, ShapeFamily::Torus][rng.random_range(0..3)]
                        };
                        let mut part = Self::primitive(kind, &mut rng, 0.35);
                        let offset = if i == 0 {
                            Vector3::zeros()
                        } else {
                            Vector3::new(
                                rng.random_range(-0.7..0.7),
                                rng.random_range(-0.7..0.7),
                                rng.random_range(-0.7..0.7),
                            )
                        };
                        part.set_center(offset);
                        let axis = random_unit_vector(&mut rng);
                        let orientation = so3_exp(&(axis * rng.random_range(0.0..PI)));
                        (part, orientation)
                    })
                    .collect();
                ShapeParams::Composite { parts }
            }
            primitive => Self::primitive(primitive, &mut rng, 1.0),
        }
    }

    fn primitive<R: Rng>(family: ShapeFamily, rng: &mut R, scale: f64) -> Self {
        let center = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ) * scale;
        match family {
            ShapeFamily::Sphere => ShapeParams::Sphere {
                center,
                radius: rng.random_range(0.5..1.5) * scale,
            },
            ShapeFamily::Box => ShapeParams::Box {
                center,
                half_extents: Vector3::new(
                    rng.random_range(0.2..0.6),
                    rng.random_range(0.2..0.6),
                    rng.random_range(0.2..0.6),
                ) * scale,
            },
            ShapeFamily::Torus => {
                let major = rng.random_range(0.6..1.0);
                ShapeParams::Torus {
                    center,
                    major: major * scale,
                    minor: major * rng.random_range(0.2..0.45) * scale,
                }
            }
            ShapeFamily::Ellipsoid => {
                // well separated semi-axes keep the shape free of near symmetries
                let semi_axes = Vector3::new(
                    1.0,
                    rng.random_range(0.55..0.75),
                    rng.random_range(0.25..0.45),
                ) * (0.6 * scale);
                ShapeParams::Ellipsoid { center, semi_axes }
            }
            ShapeFamily::Composite => unreachable!("composites are not primitives"),
        }
    }

    fn set_center(&mut self, c: Point) {
        match self {
            ShapeParams::Sphere { center, .. }
            | ShapeParams::Box { center, .. }
            | ShapeParams::Torus { center, .. }
            | ShapeParams::Ellipsoid { center, .. } => *center = c,
            ShapeParams::Composite { .. } => {}
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        match self {
            ShapeParams::Sphere { center, radius } => {
                (0..n).map(|_| center + random_unit_vector(rng) * *radius).collect()
            }
            ShapeParams::Box {
                center,
                half_extents: h,
            } => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let pick = rng.random::<f64>() * total;
                        let axis = if pick < areas[0] {
                            0
                        } else if pick < areas[0] + areas[1] {
                            1
                        } else {
                            2
                        };
                        let mut p = Vector3::zeros();
                        for k in 0..3 {
                            p[k] = if k == axis {
                                if rng.random::<bool>() {
                                    h[k]
                                } else {
                                    -h[k]
                                }
                            } else {
                                rng.random_range(-h[k]..=h[k])
                            };
                        }
                        center + p
                    })
                    .collect()
            }
            ShapeParams::Torus {
                center,
                major,
                minor,
            } => {
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let u = rng.random_range(0.0..(2.0 * PI));
                    let v = rng.random_range(0.0..(2.0 * PI));
                    let ring = major + minor * v.cos();
                    // area-uniform: accept proportionally to the local ring radius
                    if rng.random::<f64>() * (major + minor) <= ring {
                        out.push(center + Vector3::new(ring * u.cos(), ring * u.sin(), minor * v.sin()));
                    }
                }
                out
            }
            ShapeParams::Ellipsoid { center, semi_axes } => (0..n)
                .map(|_| center + random_unit_vector(rng).component_mul(semi_axes))
                .collect(),
            ShapeParams::Composite { parts } => {
                let k = parts.len();
                let mut out = Vec::with_capacity(n);
                for (i, (part, orientation)) in parts.iter().enumerate() {
                    let count = n / k + usize::from(i < n % k);
                    let c = part.center();
                    out.extend(
                        part.sample(count, rng)
                            .into_iter()
                            .map(|p| c + orientation * (p - c)),
                    );
                }
                out
            }
        }
    }

    fn center(&self) -> Point {
        match self {
            ShapeParams::Sphere { center, .. }
            | ShapeParams::Box { center, .. }
            | ShapeParams::Torus { center, .. }
            | ShapeParams::Ellipsoid { center, .. } => *center,
            ShapeParams::Composite { .. } => Vector3::zeros(),
        }
    }
}

/// Samples `n` surface points of the shape selected by `(family, shape_seed)`,
/// without normalization. Returns the points and the shape parameters.
pub fn sample_shape_raw<R: Rng + ?Sized>(
    family: ShapeFamily,
    n: usize,
    shape_seed: u64,
    rng: &mut R,
) -> Result<(PointCloud, ShapeParams), CloudError> {
    if n == 0 {
        return Err(CloudError::InvalidParameter("shape point count must be positive".into()));
    }
    let params = ShapeParams::generate(family, shape_seed);
    let cloud = PointCloud::new(params.sample(n, rng))?;
    Ok((cloud, params))
}

/// Samples `n` surface points of a procedural shape and normalizes them into the unit box.
pub fn sample_shape<R: Rng + ?Sized>(
    family: ShapeFamily,
    n: usize,
    shape_seed: u64,
    rng: &mut R,
) -> Result<PointCloud, CloudError> {
    let (raw, _) = sample_shape_raw(family, n, shape_seed, rng)?;
    if n == 1 {
        return PointCloud::new(vec![Vector3::zeros()]);
    }
    Ok(normalize_unit_box(&raw)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_lie_on_the_sphere() {
        let (cloud, params) = sample_shape_raw(ShapeFamily::Sphere, 500, 3, &mut seeded_rng(1)).unwrap();
        let ShapeParams::Sphere { center, radius } = params else { panic!() };
        for p in &cloud {
            assert!(((p - center).norm() - radius).abs() < 1e-12);
        }
    }

    #[test]
    fn box_points_lie_on_a_face() {
        let (cloud, params) = sample_shape_raw(ShapeFamily::Box, 500, 4, &mut seeded_rng(1)).unwrap();
        let ShapeParams::Box { center, half_extents } = params else { panic!() };
        for p in &cloud {
            let local = p - center;
            let on_face = (0..3).any(|k| (local[k].abs() - half_extents[k]).abs() < 1e-12);
            let inside = (0..3).all(|k| local[k].abs() <= half_extents[k] + 1e-12);
            assert!(on_face && inside);
        }
    }

    #[test]
    fn torus_points_satisfy_the_implicit_surface() {
        let (cloud, params) = sample_shape_raw(ShapeFamily::Torus, 500, 5, &mut seeded_rng(1)).unwrap();
        let ShapeParams::Torus { center, major, minor } = params else { panic!() };
        for p in &cloud {
            let l = p - center;
            let ring = (l.x * l.x + l.y * l.y).sqrt();
            let d = ((ring - major).powi(2) + l.z * l.z).sqrt();
            assert!((d - minor).abs() < 1e-9);
        }
    }

    #[test]
    fn ellipsoid_points_satisfy_the_quadric() {
        let (cloud, params) = sample_shape_raw(ShapeFamily::Ellipsoid, 300, 6, &mut seeded_rng(1)).unwrap();
        let ShapeParams::Ellipsoid { center, semi_axes } = params else { panic!() };
        for p in &cloud {
            let l = (p - center).component_div(&semi_axes);
            assert!((l.norm_squared() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_shapes_are_normalized_and_reproducible() {
        for family in ShapeFamily::ALL {
            let a = sample_shape(family, 256, 9, &mut seeded_rng(2)).unwrap();
            let b = sample_shape(family, 256, 9, &mut seeded_rng(2)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 256);
            let (lo, hi) = a.bounding_box();
            assert!(lo.min() >= 0.0 && hi.max() <= 1.0);
            assert!(((hi - lo).max() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_seed_controls_the_shape() {
        let a = ShapeParams::generate(ShapeFamily::Composite, 1);
        let b = ShapeParams::generate(ShapeFamily::Composite, 2);
        assert_ne!(a, b);
        assert_eq!(a, ShapeParams::generate(ShapeFamily::Composite, 1));
    }

    #[test]
    fn family_names_round_trip() {
        for family in ShapeFamily::ALL {
            assert_eq!(family.name().parse::<ShapeFamily>().unwrap(), family);
        }
        assert!("cube".parse::<ShapeFamily>().is_err());
    }
}
