//! Small SO(3) helpers shared across modules.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;

/// Rodrigues rotation matrix for `angle` radians about `axis` (normalized here).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let (s, c) = angle.sin_cos();
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Rotation angle in radians, in [0, pi]. Uses atan2 of the skew part, which
/// stays accurate near zero where acos((trace-1)/2) loses ~8 digits.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin = 0.5
        * ((r[(2, 1)] - r[(1, 2)]).powi(2)
            + (r[(0, 2)] - r[(2, 0)]).powi(2)
            + (r[(1, 0)] - r[(0, 1)]).powi(2))
        .sqrt();
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos)
}

/// Geodesic distance between two rotations: angle of `a * b^T`.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a * b.transpose()))
}

/// Max-norm deviation of `r^T r` from the identity.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    orthonormality_error(r) <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation matrix in Frobenius norm (SVD projection, det corrected).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Uniformly random rotation (Shoemake's subgroup algorithm on quaternions).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let two_pi = std::f64::consts::TAU;
    let q = [
        (1.0 - u1).sqrt() * (two_pi * u2).sin(),
        (1.0 - u1).sqrt() * (two_pi * u2).cos(),
        u1.sqrt() * (two_pi * u3).sin(),
        u1.sqrt() * (two_pi * u3).cos(),
    ];
    rotation_from_quat(&q)
}

/// Unit quaternion (w, x, y, z) of a rotation matrix.
pub fn quat_of_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    [q.w, q.i, q.j, q.k]
}

/// Rotation matrix of a (not necessarily unit) quaternion (w, x, y, z).
pub fn rotation_from_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}
