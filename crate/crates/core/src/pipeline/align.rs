//! Closed-form similarity alignment of corresponded point sets.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64
}

/// Least-squares `(s, R, t)` minimizing `Σ ‖dst_i − (s·R·src_i + t)‖²` with `det R = +1`.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("alignment needs 3 points, got {}", src.len())));
    }
    let n = src.len() as f64;
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (a, b) = (a - mu_s, b - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let d = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let top = d[order[0]];
    if var_s <= f64::EPSILON * (1.0 + mu_s.norm_squared()) || d[order[1]] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("covariance rank below 2".into()));
    }
    let mut sign = Vec3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[order[2]] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&sign) * vt;
    let scale = (0..3).map(|i| d[i] * sign[i]).sum::<f64>() / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Root-mean-square residual of `dst` against aligned `src`.
pub fn alignment_rmse(sim: &Similarity, src: &[Vec3], dst: &[Vec3]) -> f64 {
    let sq: f64 = src.iter().zip(dst).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    (sq / src.len() as f64).sqrt()
}
