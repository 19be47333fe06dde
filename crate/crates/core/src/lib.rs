//! Correspondence-free rigid point cloud registration on learned global
//! features.
//!
//! A per-point MLP with max pooling ([`model`]) maps a cloud to a feature
//! vector. [`registration`] aligns two clouds by Gauss-Newton on the
//! difference of their features, with a finite-difference Jacobian computed
//! once on the target. The encoder is trained either unsupervised through a
//! decoder and Chamfer loss, or semi-supervised with an added pose loss
//! ([`training`]). [`bench`] compares registrars under rotation, density,
//! noise and partial-overlap perturbations.

pub mod bench;
pub mod cli;
pub mod cloud;
pub mod losses;
pub mod model;
pub mod registration;
pub mod se3;
pub mod spatial;
pub mod tinynet;
pub mod training;
pub mod util;
