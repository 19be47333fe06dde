use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use fmr::cloud::{crop_half_space, decimate, decimated_count, normalize_unit_box, PointCloud};
use fmr::losses::{chamfer, point_error_loss};
use fmr::model::{encode_points, ModelConfig, ModelParams};
use fmr::registration::{gn_step, normal_matrix, register, RegistrationConfig};
use fmr::se3::{angular_error, RigidTransform, Twist};
use fmr::tinynet::maxpool_points_forward;
use fmr::util::seeded_rng;

fn twist(max_rot: f64) -> impl Strategy<Value = Twist> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0..max_rot, prop::array::uniform3(-2.0f64..2.0)).prop_filter_map(
        "nonzero axis",
        move |(axis, angle, t)| {
            let axis = Vector3::from(axis);
            (axis.norm() > 1e-3).then(|| Twist::new(axis.normalize() * angle, Vector3::from(t)))
        },
    )
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
        .prop_map(|rows| PointCloud::from_rows(&rows).unwrap())
}

fn small_model() -> ModelParams {
    ModelParams::init(
        ModelConfig {
            feature_dim: 24,
            encoder_hidden: vec![8, 16],
            decoder_hidden: vec![8, 8, 8],
            decoder_points: 8,
            leaky_slope: 0.01,
        },
        11,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_log_round_trip(t in twist(3.0)) {
        let back = RigidTransform::exp(&t).log().unwrap();
        let err = back.to_array().iter().zip(t.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rigid_motions_preserve_distances(t in twist(3.0), c in cloud(2, 30)) {
        let g = RigidTransform::exp(&t);
        let moved = g.apply(&c);
        for i in 0..c.len() {
            for j in 0..c.len() {
                let before = (c[i] - c[j]).norm();
                let after = (moved[i] - moved[j]).norm();
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn angular_error_of_a_pure_rotation(t in twist(3.0), angle in 0.0f64..3.0, axis in prop::array::uniform3(0.1f64..1.0)) {
        let g = RigidTransform::exp(&t);
        let delta = RigidTransform::exp(&Twist::new(Vector3::from(axis).normalize() * angle, Vector3::zeros()));
        let err = angular_error(&g, &delta.compose(&g)).unwrap();
        prop_assert!((err - angle).abs() < 1e-9);
    }

    #[test]
    fn normalization_is_idempotent(c in cloud(2, 40)) {
        prop_assume!(c.max_extent() > 1e-6);
        let (once, _) = normalize_unit_box(&c).unwrap();
        let (twice, _) = normalize_unit_box(&once).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn decimation_keeps_a_subset(c in cloud(1, 60), f in 0.01f64..=1.0, seed: u64) {
        let kept = decimate(&c, f, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(kept.len(), decimated_count(c.len(), f));
        let mut pool: Vec<_> = c.points().to_vec();
        for p in kept.iter() {
            let at = pool.iter().position(|q| q == p);
            prop_assert!(at.is_some());
            pool.swap_remove(at.unwrap());
        }
    }

    #[test]
    fn crop_removes_the_requested_fraction(c in cloud(4, 80), f in 0.0f64..0.9, seed: u64) {
        let kept = crop_half_space(&c, f, None, &mut seeded_rng(seed)).unwrap();
        let expected = c.len() - (f * c.len() as f64).floor() as usize;
        prop_assert!(kept.len().abs_diff(expected) <= 1, "{} vs {expected}", kept.len());
        prop_assert!(kept.iter().all(|p| c.points().contains(p)));
    }

    #[test]
    fn maxpool_ignores_row_order(rows in 1usize..12, cols in 1usize..6, seed: u64) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let x = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let shuffled = x.select_rows(&order);
        prop_assert_eq!(maxpool_points_forward(&x).0, maxpool_points_forward(&shuffled).0);
    }

    #[test]
    fn encoding_ignores_point_order(c in cloud(2, 40), seed: u64) {
        use rand::seq::SliceRandom;
        let params = small_model();
        let mut shuffled = c.points().to_vec();
        shuffled.shuffle(&mut seeded_rng(seed));
        prop_assert_eq!(encode_points(c.points(), &params), encode_points(&shuffled, &params));
    }

    #[test]
    fn chamfer_is_symmetric_and_rigid_invariant(a in cloud(1, 40), b in cloud(1, 40), t in twist(3.0)) {
        prop_assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
        let g = RigidTransform::exp(&t);
        prop_assert!((chamfer(&a, &b) - chamfer(&g.apply(&a), &g.apply(&b))).abs() < 1e-9);
    }

    #[test]
    fn point_error_grows_with_translation(c in cloud(1, 30), t in twist(3.0), dir in prop::array::uniform3(0.1f64..1.0), s in 0.0f64..2.0) {
        let g = RigidTransform::exp(&t);
        let d = Vector3::from(dir).normalize();
        let near = point_error_loss(&RigidTransform::from_translation(d * s).compose(&g), &g, &c);
        let far = point_error_loss(&RigidTransform::from_translation(d * (s + 0.1)).compose(&g), &g, &c);
        prop_assert!(far > near);
    }

    #[test]
    fn gn_step_solves_the_normal_equations(seed: u64) {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let j = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let delta = gn_step(&j, &r, 0.0).unwrap();
        let jtr = j.transpose() * &r;
        let lhs = normal_matrix(&j) * delta.to_vector();
        let residual = (lhs - nalgebra::Vector6::from_column_slice(jtr.as_slice())).norm();
        prop_assert!(residual < 1e-8 * jtr.norm());
    }

    #[test]
    fn registering_a_cloud_onto_itself_is_the_identity(c in cloud(8, 40)) {
        prop_assume!(c.max_extent() > 0.1);
        let params = small_model();
        let before = params.clone();
        let copy = c.clone();
        let result = register(&c, &c, &params, &RegistrationConfig::default()).unwrap();
        prop_assert!(result.r_est < 1e-10);
        prop_assert!(result.g_est.to_homogeneous().relative_eq(&nalgebra::Matrix4::identity(), 1e-6, 1e-6));
        prop_assert_eq!(params, before);
        prop_assert_eq!(c, copy);
    }
}
