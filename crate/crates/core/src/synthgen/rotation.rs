//! Rotation vectors, yaw extraction and the head-pose filter.

pub type Mat3 = [[f64; 3]; 3];

fn skew(u: [f64; 3]) -> Mat3 {
    [[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Axis-angle vector to rotation matrix, `R = I + sin θ K + (1 − cos θ) K²`.
pub fn rodrigues(r: [f64; 3]) -> Mat3 {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let mut out = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if theta == 0.0 {
        return out;
    }
    let k = skew([r[0] / theta, r[1] / theta, r[2] / theta]);
    let k2 = mat_mul(&k, &k);
    let (s, c) = theta.sin_cos();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    out
}

/// Horizontal head rotation `atan2(−R₃₁, R₃₃)`.
pub fn yaw(r: &Mat3) -> f64 {
    (-r[2][0]).atan2(r[2][2])
}

pub const DEFAULT_MAX_MEAN_YAW_DEG: f64 = 30.0;

/// Mean absolute yaw, in degrees, over a sequence of pose vectors.
pub fn mean_abs_yaw_deg(poses: impl IntoIterator<Item = [f64; 3]>) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for p in poses {
        total += yaw(&rodrigues(p)).abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (total / n as f64).to_degrees()
    }
}
