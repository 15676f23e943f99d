//! Pose-vector normalization, the derotation layer and the rotation loss.
//!
//! The derotation layer warps a feature map so that a rotated object lands in
//! its canonical upright pose. The forward pass uses inverse mapping: each
//! output cell pulls its value from the source location obtained by applying
//! the transposed rotation matrix in center-origin coordinates, averaging the
//! four nearest grid neighbors and padding out-of-bounds sources with zero.
//! Backward scatters gradients through a record of that mapping, so no
//! geometry is re-derived and no gradient flows to the angle.
//!
//! Coordinate convention used throughout the crate: x = column, y = row with
//! y increasing downward; the angle is measured counterclockwise in the
//! standard math frame (clockwise on screen).

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Source grid hits within this distance of an integer coordinate copy a
/// single value, which makes the identity rotation bit-exact.
pub const EXACT_HIT_EPS: f64 = 1e-9;

/// Raw rotation-head outputs (c, s) together with the normalized pose
/// vector (cos a, sin a) that parameterizes the rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector {
    pub c: f64,
    pub s: f64,
    pub cos_a: f64,
    pub sin_a: f64,
}

impl RotationVector {
    pub fn identity() -> Self {
        RotationVector {
            c: 1.0,
            s: 0.0,
            cos_a: 1.0,
            sin_a: 0.0,
        }
    }

    pub fn from_angle_rad(a: f64) -> Self {
        RotationVector {
            c: a.cos(),
            s: a.sin(),
            cos_a: a.cos(),
            sin_a: a.sin(),
        }
    }

    pub fn from_angle_deg(deg: f64) -> Self {
        Self::from_angle_rad(deg.to_radians())
    }

    pub fn angle_deg(&self) -> f64 {
        self.sin_a.atan2(self.cos_a).to_degrees()
    }

    /// Pose with the opposite angle (cos a, -sin a).
    pub fn conjugate(&self) -> Self {
        RotationVector {
            c: self.c,
            s: -self.s,
            cos_a: self.cos_a,
            sin_a: -self.sin_a,
        }
    }
}

/// l = (c, s) / sqrt(c^2 + s^2). Scaling through the larger magnitude keeps
/// the result exact for inputs far outside the normal f64 range.
pub fn normalize_pose(c: f64, s: f64) -> Result<RotationVector> {
    if c == 0.0 && s == 0.0 {
        return Err(CoreError::NormalizationDegenerate);
    }
    let m = c.abs().max(s.abs());
    let (cn, sn) = (c / m, s / m);
    let r = (cn * cn + sn * sn).sqrt();
    Ok(RotationVector {
        c,
        s,
        cos_a: cn / r,
        sin_a: sn / r,
    })
}

/// One source neighbor of an output cell: spatial index into the input plane
/// plus its averaging weight. Out-of-bounds neighbors carry weight 0.
#[derive(Debug, Clone, Copy)]
pub struct SourceTap {
    pub index: usize,
    pub weight: f64,
}

const OOB: SourceTap = SourceTap {
    index: usize::MAX,
    weight: 0.0,
};

/// Record of the coordinate mapping from one forward call: for every output
/// cell, up to four in-bounds source taps. Geometry is shared across
/// channels, so taps are stored per (batch row, spatial cell).
#[derive(Debug, Clone)]
pub struct DerotationRecord {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    taps: Vec<[SourceTap; 4]>,
}

impl DerotationRecord {
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn taps(&self, batch_row: usize, cell: usize) -> &[SourceTap; 4] {
        &self.taps[batch_row * self.height * self.width + cell]
    }
}

fn cell_taps(pose: &RotationVector, h: usize, w: usize, oy: usize, ox: usize) -> [SourceTap; 4] {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dx = ox as f64 - cx;
    let dy = oy as f64 - cy;
    // source = R_a^T * target, in center-origin coordinates
    let sx = pose.cos_a * dx + pose.sin_a * dy + cx;
    let sy = -pose.sin_a * dx + pose.cos_a * dy + cy;

    let in_bounds = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
    let tap = |x: i64, y: i64, weight: f64| {
        if in_bounds(x, y) {
            SourceTap {
                index: y as usize * w + x as usize,
                weight,
            }
        } else {
            OOB
        }
    };

    let rx = sx.round();
    let ry = sy.round();
    if (sx - rx).abs() < EXACT_HIT_EPS && (sy - ry).abs() < EXACT_HIT_EPS {
        return [tap(rx as i64, ry as i64, 1.0), OOB, OOB, OOB];
    }
    let x0 = sx.floor() as i64;
    let y0 = sy.floor() as i64;
    [
        tap(x0, y0, 0.25),
        tap(x0 + 1, y0, 0.25),
        tap(x0, y0 + 1, 0.25),
        tap(x0 + 1, y0 + 1, 0.25),
    ]
}

/// Derotate a batch of feature maps, one pose per batch row. Output shape
/// equals input shape; the returned record is sufficient to run backward.
pub fn derotate_forward(
    feature: &Tensor,
    poses: &[RotationVector],
) -> Result<(Tensor, DerotationRecord)> {
    if feature.shape().len() != 4 {
        return Err(CoreError::ShapeMismatch {
            context: "derotate_forward",
            expected: "4-D NCHW feature".into(),
            got: format!("{:?}", feature.shape()),
        });
    }
    let (n, c, h, w) = (
        feature.shape()[0],
        feature.shape()[1],
        feature.shape()[2],
        feature.shape()[3],
    );
    if poses.len() != n {
        return Err(CoreError::ShapeMismatch {
            context: "derotate_forward",
            expected: format!("{} poses (one per batch row)", n),
            got: format!("{}", poses.len()),
        });
    }

    let plane = h * w;
    let mut taps = Vec::with_capacity(n * plane);
    for pose in poses {
        for oy in 0..h {
            for ox in 0..w {
                taps.push(cell_taps(pose, h, w, oy, ox));
            }
        }
    }

    let mut out = Tensor::zeros(feature.shape());
    let iv = feature.values();
    let ov = out.values_mut();
    for bi in 0..n {
        let sample_taps = &taps[bi * plane..(bi + 1) * plane];
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for (cell, tap4) in sample_taps.iter().enumerate() {
                let mut acc = 0.0;
                for t in tap4 {
                    if t.index != usize::MAX {
                        acc += t.weight * iv[base + t.index];
                    }
                }
                ov[base + cell] = acc;
            }
        }
    }

    Ok((
        out,
        DerotationRecord {
            batch: n,
            channels: c,
            height: h,
            width: w,
            taps,
        },
    ))
}

/// Scatter output gradients back through the recorded taps (the exact adjoint
/// of the forward gather).
pub fn derotate_backward(grad_out: &Tensor, record: &DerotationRecord) -> Result<Tensor> {
    if grad_out.shape() != record.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "derotate_backward",
            expected: format!("{:?}", record.shape()),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let [n, c, h, w] = record.shape();
    let plane = h * w;
    let mut g_in = Tensor::zeros(grad_out.shape());
    let gv = grad_out.values();
    let giv = g_in.values_mut();
    for bi in 0..n {
        let sample_taps = &record.taps[bi * plane..(bi + 1) * plane];
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for (cell, tap4) in sample_taps.iter().enumerate() {
                let g = gv[base + cell];
                for t in tap4 {
                    if t.index != usize::MAX {
                        giv[base + t.index] += t.weight * g;
                    }
                }
            }
        }
    }
    Ok(g_in)
}

/// Squared Euclidean distance between two pose vectors; range [0, 4] for
/// unit inputs.
pub fn rotation_loss(l: &RotationVector, l_star: &RotationVector) -> f64 {
    let dc = l.cos_a - l_star.cos_a;
    let ds = l.sin_a - l_star.sin_a;
    dc * dc + ds * ds
}

/// Jacobian of the normalized pose (cos a, sin a) w.r.t. the raw outputs
/// (c, s), as a row-major 2x2: [[dcos/dc, dcos/ds], [dsin/dc, dsin/ds]].
///
/// Algebraically identical to the direct power form
/// dcos/dc = (c^2+s^2)^(-1/2) - c^2 (c^2+s^2)^(-3/2), but evaluated through
/// the normalized components so extreme magnitudes do not overflow.
pub fn pose_jacobian(c: f64, s: f64) -> Result<[[f64; 2]; 2]> {
    let l = normalize_pose(c, s)?;
    let m = c.abs().max(s.abs());
    let r = ((c / m) * (c / m) + (s / m) * (s / m)).sqrt() * m;
    let (ca, sa) = (l.cos_a, l.sin_a);
    Ok([
        [sa * sa / r, -ca * sa / r],
        [-ca * sa / r, ca * ca / r],
    ])
}

/// Chain rule through normalization: gradient of the rotation loss w.r.t. the
/// raw head outputs (c, s).
pub fn rotation_loss_backward(c: f64, s: f64, l_star: &RotationVector) -> Result<(f64, f64)> {
    let l = normalize_pose(c, s)?;
    let jac = pose_jacobian(c, s)?;
    let d_cos = 2.0 * (l.cos_a - l_star.cos_a);
    let d_sin = 2.0 * (l.sin_a - l_star.sin_a);
    Ok((
        d_cos * jac[0][0] + d_sin * jac[1][0],
        d_cos * jac[0][1] + d_sin * jac[1][1],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normalize_three_four_five() {
        let l = normalize_pose(3.0, 4.0).unwrap();
        assert_relative_eq!(l.cos_a, 0.6, epsilon = 1e-15);
        assert_relative_eq!(l.sin_a, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_identity_and_degenerate() {
        let l = normalize_pose(1.0, 0.0).unwrap();
        assert_eq!((l.cos_a, l.sin_a), (1.0, 0.0));
        assert!(matches!(
            normalize_pose(0.0, 0.0),
            Err(CoreError::NormalizationDegenerate)
        ));
    }

    #[test]
    fn normalize_survives_tiny_magnitudes() {
        let l = normalize_pose(-1e-30, 0.0).unwrap();
        assert_eq!((l.cos_a, l.sin_a), (-1.0, 0.0));
        let l = normalize_pose(3e30, 4e30).unwrap();
        assert_relative_eq!(l.cos_a, 0.6, epsilon = 1e-14);
        assert_relative_eq!(l.sin_a, 0.8, epsilon = 1e-14);
    }

    #[test]
    fn unit_circle_invariant_across_magnitudes() {
        for &(c, s) in &[(1e30, -2e30), (1e-30, 5e-31), (-7.0, 0.3), (0.0, -4.0)] {
            let l = normalize_pose(c, s).unwrap();
            assert_relative_eq!(l.cos_a * l.cos_a + l.sin_a * l.sin_a, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_pose_is_bit_exact() {
        let f = Tensor::from_values(&[1, 1, 3, 3], (0..9).map(|i| i as f64 * 0.37).collect())
            .unwrap();
        let (out, _) = derotate_forward(&f, &[RotationVector::identity()]).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn one_eighty_is_a_point_reflection() {
        let f = Tensor::from_values(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let (out, _) = derotate_forward(&f, &[RotationVector::from_angle_deg(180.0)]).unwrap();
        let expected: Vec<f64> = (0..16).rev().map(|i| i as f64).collect();
        assert_eq!(out.values(), &expected[..]);
    }

    #[test]
    fn ninety_degrees_moves_one_hot_cell() {
        // hot cell at (row, col) = (1, 2) on a 5x5 map, a = 90 degrees.
        // Output cell (x', y') pulls from R_a^T (x', y'): the hot source
        // (dx, dy) = (0, -1) is hit by the output cell with
        // (dx', dy') = R_a (0, -1) = (1, 0), i.e. (row, col) = (2, 3).
        let mut f = Tensor::zeros(&[1, 1, 5, 5]);
        f.set4(0, 0, 1, 2, 1.0);
        let (out, _) = derotate_forward(&f, &[RotationVector::from_angle_deg(90.0)]).unwrap();
        assert_eq!(out.at4(0, 0, 2, 3), 1.0);
        assert_eq!(out.values().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn backward_inverts_the_180_permutation() {
        let g = Tensor::from_values(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let f = Tensor::zeros(&[1, 1, 3, 3]);
        let (_, rec) = derotate_forward(&f, &[RotationVector::from_angle_deg(180.0)]).unwrap();
        let gi = derotate_backward(&g, &rec).unwrap();
        let expected: Vec<f64> = (0..9).rev().map(|i| i as f64).collect();
        assert_eq!(gi.values(), &expected[..]);
    }

    #[test]
    fn zero_padding_darkens_corners() {
        let f = Tensor::filled(&[1, 1, 7, 7], 1.0);
        let (out, _) = derotate_forward(&f, &[RotationVector::from_angle_deg(45.0)]).unwrap();
        assert!(out.at4(0, 0, 0, 0) < 1.0);
        assert_eq!(out.at4(0, 0, 3, 3), 1.0);
    }

    #[test]
    fn rotation_loss_basics() {
        let e = RotationVector::identity();
        let n = RotationVector::from_angle_deg(90.0);
        let o = RotationVector::from_angle_deg(180.0);
        assert_eq!(rotation_loss(&e, &e), 0.0);
        assert_relative_eq!(rotation_loss(&e, &n), 2.0, epsilon = 1e-12);
        assert_relative_eq!(rotation_loss(&e, &o), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_at_unit_c() {
        let j = pose_jacobian(1.0, 0.0).unwrap();
        assert_eq!(j, [[0.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn gradient_vanishes_at_the_minimum() {
        let target = normalize_pose(0.6, 0.8).unwrap();
        let (dc, ds) = rotation_loss_backward(3.0, 4.0, &target).unwrap();
        assert_relative_eq!(dc, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ds, 0.0, epsilon = 1e-12);
    }
}
