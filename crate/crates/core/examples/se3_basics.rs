//! Twists, the exponential and logarithm maps, and pose error metrics.

use fmr::se3::{angular_error, transform_rmse, translation_error, RigidTransform, Twist};
use nalgebra::Vector3;

fn main() {
    let twist = Twist::new(Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.2, -0.1, 0.3));
    let g = RigidTransform::exp(&twist);
    println!("exp(twist) =\n{}", g.to_homogeneous());

    let back = g.log().expect("rotation below pi");
    println!("log(exp(twist)) = {:?}", back.to_array());

    let nudge = RigidTransform::exp(&Twist::new(Vector3::new(0.01, 0.0, 0.0), Vector3::zeros()));
    let estimate = nudge.compose(&g);
    println!(
        "error of a 0.01 rad nudge: angle {:.6} rad, translation {:.6}, rmse {:.6}",
        angular_error(&estimate, &g).unwrap(),
        translation_error(&estimate, &g),
        transform_rmse(&estimate, &g)
    );
    let drift = (g.compose(&g.inverse()).to_homogeneous() - nalgebra::Matrix4::identity()).amax();
    println!("g * g^-1 differs from the identity by at most {drift:e}");
}
