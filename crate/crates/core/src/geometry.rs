//! Pinhole camera projection and per-point image feature gathering.
//!
//! Points are projected with a standard pinhole model (rigid extrinsics,
//! then `u = fx*x/z + cx`, `v = fy*y/z + cy`); points behind the camera or
//! outside the image are flagged invalid, never rejected. Gathering pairs
//! every point with an image feature row so the fusion stage's element-wise
//! products are well-typed; it is differentiable with respect to the image
//! feature map in bilinear mode.

use crate::error::{Error, Result};
use crate::tensor::{gather_image, PixelSample, Tensor};

/// Row-major homogeneous rigid transform.
pub type Mat4 = [[f64; 4]; 4];

pub fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of a rigid transform: transpose the rotation, negate-rotate the
/// translation. Only valid when the rotation block is orthonormal.
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let mut out = mat4_identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(0..3).map(|j| m[j][i] * m[j][3]).sum::<f64>();
    }
    out
}

/// Rotation about z (yaw), then y (pitch), then x (roll), composed as
/// `Rz * Ry * Rx`, with zero translation.
pub fn rotation_zyx(yaw: f64, pitch: f64, roll: f64) -> Mat4 {
    let (sz, cz) = yaw.sin_cos();
    let (sy, cy) = pitch.sin_cos();
    let (sx, cx) = roll.sin_cos();
    let rz = [
        [cz, -sz, 0.0, 0.0],
        [sz, cz, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let ry = [
        [cy, 0.0, sy, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [-sy, 0.0, cy, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let rx = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, cx, -sx, 0.0],
        [0.0, sx, cx, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    mat4_mul(&rz, &mat4_mul(&ry, &rx))
}

pub fn translation(x: f64, y: f64, z: f64) -> Mat4 {
    let mut m = mat4_identity();
    m[0][3] = x;
    m[1][3] = y;
    m[2][3] = z;
    m
}

/// Pinhole camera: focal lengths and principal point in pixels, a rigid
/// world-to-camera transform, and the image extent.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Mat4,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsics: Mat4,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let bad = |what: String| Error::InvalidArgument {
            op: "camera",
            what,
        };
        if width == 0 || height == 0 {
            return Err(bad("image extent must be positive".into()));
        }
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(bad(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(bad(format!("principal point ({cx}, {cy}) outside the image")));
        }
        if extrinsics.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "camera extrinsics".into(),
            });
        }
        // Rotation block must be orthonormal and orientation-preserving.
        let r = &extrinsics;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(bad(format!(
                        "rotation block is not orthonormal (column {i}.{j} dot {dot})"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(bad(format!("rotation block has determinant {det}")));
        }
        if extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(bad("last extrinsics row must be [0, 0, 0, 1]".into()));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            extrinsics,
            width,
            height,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn with_identity_pose(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        CameraModel::new(fx, fy, cx, cy, mat4_identity(), width, height)
    }

    /// Same camera with the extrinsics replaced.
    pub fn with_extrinsics(&self, extrinsics: Mat4) -> Result<Self> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            extrinsics,
            self.width,
            self.height,
        )
    }
}

/// Per-point projection outcome. `u` is the column coordinate, `v` the row
/// coordinate; both, along with `depth`, are meaningful only where `valid`.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ProjectionResult {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Projects `[T, 3]` world points through the camera. Points behind the
/// camera (z ≤ 0 in camera frame) or outside `[0, width) x [0, height)`
/// come back with `valid = false`; nothing is thrown for them.
pub fn project_points(points: &Tensor, cam: &CameraModel) -> Result<ProjectionResult> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "project_points",
            left: points.shape().to_vec(),
            right: vec![0, 3],
        });
    }
    if !points.all_finite() {
        return Err(Error::NonFinite {
            what: "projection input points".into(),
        });
    }
    let t = points.shape()[0];
    let xyz = points.values();
    let e = &cam.extrinsics;
    let mut out = ProjectionResult {
        u: vec![0.0; t],
        v: vec![0.0; t],
        depth: vec![0.0; t],
        valid: vec![false; t],
    };
    for i in 0..t {
        let p = &xyz[i * 3..i * 3 + 3];
        let x = e[0][0] * p[0] + e[0][1] * p[1] + e[0][2] * p[2] + e[0][3];
        let y = e[1][0] * p[0] + e[1][1] * p[1] + e[1][2] * p[2] + e[1][3];
        let z = e[2][0] * p[0] + e[2][1] * p[1] + e[2][2] * p[2] + e[2][3];
        out.depth[i] = z;
        if z <= 0.0 {
            continue;
        }
        let u = cam.fx * x / z + cam.cx;
        let v = cam.fy * y / z + cam.cy;
        out.u[i] = u;
        out.v[i] = v;
        out.valid[i] =
            (0.0..cam.width as f64).contains(&u) && (0.0..cam.height as f64).contains(&v);
    }
    Ok(out)
}

/// How a projected point samples the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatherMode {
    /// Round to the closest pixel. Exact, not differentiable in position.
    Nearest,
    /// Blend the four surrounding pixels. Differentiable w.r.t. features.
    Bilinear,
}

/// Pairs each point with a feature row from `f_img: [H, W, d]`. Invalid
/// points receive the zero vector; the returned mask mirrors `proj.valid`
/// (re-checked against the actual feature-map extent). The result partakes
/// in backpropagation whenever `f_img` is attached to a tape.
pub fn gather_image_features(
    f_img: &Tensor,
    proj: &ProjectionResult,
    mode: GatherMode,
) -> Result<(Tensor, Vec<bool>)> {
    if f_img.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gather_image_features",
            left: f_img.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (h, w) = (f_img.shape()[0], f_img.shape()[1]);
    let (samples, valid) = build_pixel_samples(proj, h, w, mode);
    Ok((gather_image(f_img, samples)?, valid))
}

/// Turns projections into per-point pixel taps against an `h x w` grid:
/// the interpolation footprint each point reads, with its weights. Points
/// outside the image get an empty (zero-count) sample and a false flag.
pub(crate) fn build_pixel_samples(
    proj: &ProjectionResult,
    h: usize,
    w: usize,
    mode: GatherMode,
) -> (Vec<PixelSample>, Vec<bool>) {
    let mut samples = Vec::with_capacity(proj.len());
    let mut valid = Vec::with_capacity(proj.len());
    for i in 0..proj.len() {
        let (u, v) = (proj.u[i], proj.v[i]);
        let inside = proj.valid[i] && u < w as f64 && v < h as f64 && u >= 0.0 && v >= 0.0;
        valid.push(inside);
        if !inside {
            samples.push(PixelSample {
                rows: [0; 4],
                weights: [0.0; 4],
                count: 0,
            });
            continue;
        }
        samples.push(match mode {
            GatherMode::Nearest => {
                let c = (u.round() as usize).min(w - 1);
                let r = (v.round() as usize).min(h - 1);
                PixelSample {
                    rows: [(r * w + c) as u32, 0, 0, 0],
                    weights: [1.0, 0.0, 0.0, 0.0],
                    count: 1,
                }
            }
            GatherMode::Bilinear => {
                let c0 = (u.floor() as usize).min(w - 1);
                let r0 = (v.floor() as usize).min(h - 1);
                let c1 = (c0 + 1).min(w - 1);
                let r1 = (r0 + 1).min(h - 1);
                let fu = u - c0 as f64;
                let fv = v - r0 as f64;
                PixelSample {
                    rows: [
                        (r0 * w + c0) as u32,
                        (r0 * w + c1) as u32,
                        (r1 * w + c0) as u32,
                        (r1 * w + c1) as u32,
                    ],
                    weights: [
                        (1.0 - fu) * (1.0 - fv),
                        fu * (1.0 - fv),
                        (1.0 - fu) * fv,
                        fu * fv,
                    ],
                    count: 4,
                }
            }
        });
    }
    (samples, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    fn test_cam() -> CameraModel {
        CameraModel::with_identity_pose(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap()
    }

    fn ramp_image(h: usize, w: usize, d: usize) -> Tensor {
        Tensor::from_vec(
            &[h, w, d],
            (0..h * w * d).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_point_lands_on_the_principal_point() {
        let cam = test_cam();
        let p = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 5.0]).unwrap();
        let r = project_points(&p, &cam).unwrap();
        assert!(r.valid[0]);
        assert_eq!(r.u[0], cam.cx);
        assert_eq!(r.v[0], cam.cy);
        assert_eq!(r.depth[0], 5.0);
    }

    #[test]
    fn points_behind_or_beside_the_camera_are_flagged_not_thrown() {
        let cam = test_cam();
        let p = Tensor::from_rows(&[
            vec![0.0, 0.0, -1.0],  // behind
            vec![0.0, 0.0, 0.0],   // on the pinhole
            vec![100.0, 0.0, 1.0], // far outside the image
            vec![0.1, -0.1, 2.0],  // visible
        ])
        .unwrap();
        let r = project_points(&p, &cam).unwrap();
        assert_eq!(r.valid, vec![false, false, false, true]);
        assert_eq!(r.num_valid(), 1);
    }

    #[test]
    fn transforming_points_and_composing_extrinsics_agree() {
        let m = mat4_mul(&translation(0.3, -0.2, 0.9), &rotation_zyx(0.4, -0.25, 1.1));
        let base = test_cam();
        let moved = base.with_extrinsics(mat4_mul(&base.extrinsics, &m)).unwrap();

        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.7).sin(), (t * 0.3).cos() * 0.8, 2.0 + (t * 0.11).sin()]
            })
            .collect();
        let p = Tensor::from_rows(&pts).unwrap();
        // Apply m to the points by hand.
        let transformed: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| {
                (0..3)
                    .map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
                    .collect()
            })
            .collect();
        let pt = Tensor::from_rows(&transformed).unwrap();

        let a = project_points(&pt, &base).unwrap();
        let b = project_points(&p, &moved).unwrap();
        assert_eq!(a.valid, b.valid);
        for i in 0..pts.len() {
            if a.valid[i] {
                assert!((a.u[i] - b.u[i]).abs() < 1e-9);
                assert!((a.v[i] - b.v[i]).abs() < 1e-9);
                assert!((a.depth[i] - b.depth[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_through_the_inverse_extrinsics_restores_pixels() {
        let m = mat4_mul(&rotation_zyx(-0.7, 0.15, 0.5), &translation(1.0, 2.0, -0.4));
        let cam = test_cam().with_extrinsics(m).unwrap();
        let undone = cam
            .with_extrinsics(mat4_mul(&cam.extrinsics, &rigid_inverse(&m)))
            .unwrap();
        let p = Tensor::from_rows(&[vec![0.2, -0.1, 3.0], vec![-0.4, 0.3, 6.0]]).unwrap();
        // Transform points forward by m, then project with extrinsics that
        // first undo m: must match the identity-pose projection of p.
        let transformed: Vec<Vec<f64>> = (0..2)
            .map(|r| {
                let p = [p.at2(r, 0), p.at2(r, 1), p.at2(r, 2)];
                (0..3)
                    .map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
                    .collect()
            })
            .collect();
        let pt = Tensor::from_rows(&transformed).unwrap();
        let a = project_points(&pt, &undone).unwrap();
        let b = project_points(&p, &cam).unwrap();
        for i in 0..2 {
            assert_eq!(a.valid[i], b.valid[i]);
            assert!((a.u[i] - b.u[i]).abs() < 1e-9);
            assert!((a.v[i] - b.v[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn malformed_cameras_are_rejected() {
        assert!(CameraModel::with_identity_pose(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraModel::with_identity_pose(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        let mut sheared = mat4_identity();
        sheared[0][1] = 0.5;
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, sheared, 4, 4).is_err());
        let mut mirrored = mat4_identity();
        mirrored[0][0] = -1.0;
        mirrored[1][1] = -1.0;
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, mirrored, 4, 4).is_ok());
        mirrored[1][1] = 1.0; // determinant now -1
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, mirrored, 4, 4).is_err());
    }

    #[test]
    fn nearest_lookup_on_an_exact_pixel_reads_that_row() {
        let img = ramp_image(6, 5, 2);
        let proj = ProjectionResult {
            u: vec![3.0],
            v: vec![4.0],
            depth: vec![1.0],
            valid: vec![true],
        };
        let (f, valid) = gather_image_features(&img, &proj, GatherMode::Nearest).unwrap();
        assert_eq!(valid, vec![true]);
        // Row 4, column 3 of a [6, 5, 2] ramp.
        let base = (4 * 5 + 3) * 2;
        assert_eq!(f.values(), vec![base as f64 * 0.1, (base + 1) as f64 * 0.1]);
    }

    #[test]
    fn bilinear_equals_nearest_at_pixel_centers_and_blends_between() {
        let img = ramp_image(4, 4, 3);
        let centered = ProjectionResult {
            u: vec![2.0],
            v: vec![1.0],
            depth: vec![1.0],
            valid: vec![true],
        };
        let (a, _) = gather_image_features(&img, &centered, GatherMode::Bilinear).unwrap();
        let (b, _) = gather_image_features(&img, &centered, GatherMode::Nearest).unwrap();
        assert_eq!(a.values(), b.values());

        let between = ProjectionResult {
            u: vec![0.5],
            v: vec![0.0],
            depth: vec![1.0],
            valid: vec![true],
        };
        let (c, _) = gather_image_features(&img, &between, GatherMode::Bilinear).unwrap();
        // Midpoint of pixels (0,0) and (0,1).
        for ch in 0..3 {
            let want = 0.5 * (img.at(ch) + img.at(3 + ch));
            assert!((c.at(ch) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_points_gather_zeros_with_a_false_mask() {
        let img = ramp_image(4, 4, 2);
        let proj = ProjectionResult {
            u: vec![1.0, 0.0],
            v: vec![1.0, 0.0],
            depth: vec![1.0, -2.0],
            valid: vec![true, false],
        };
        let (f, valid) = gather_image_features(&img, &proj, GatherMode::Bilinear).unwrap();
        assert_eq!(valid, vec![true, false]);
        assert_eq!(f.at2(1, 0), 0.0);
        assert_eq!(f.at2(1, 1), 0.0);
    }

    #[test]
    fn gather_is_linear_in_the_feature_map() {
        let proj = ProjectionResult {
            u: vec![0.3, 2.7, 1.0],
            v: vec![1.8, 0.2, 2.0],
            depth: vec![1.0; 3],
            valid: vec![true; 3],
        };
        let f1 = ramp_image(3, 4, 2);
        let f2 = Tensor::from_vec(&[3, 4, 2], (0..24).map(|i| ((i * 7) % 5) as f64).collect())
            .unwrap();
        let combo = f1.scale(2.0).unwrap().add(&f2.scale(-3.0).unwrap()).unwrap();
        let (g_combo, _) = gather_image_features(&combo, &proj, GatherMode::Bilinear).unwrap();
        let (g1, _) = gather_image_features(&f1, &proj, GatherMode::Bilinear).unwrap();
        let (g2, _) = gather_image_features(&f2, &proj, GatherMode::Bilinear).unwrap();
        for i in 0..g_combo.len() {
            let want = 2.0 * g1.at(i) - 3.0 * g2.at(i);
            assert!((g_combo.at(i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_gather_matches_finite_differences() {
        let proj = ProjectionResult {
            u: vec![0.25, 2.9, 1.5, 0.0],
            v: vec![1.6, 0.1, 2.0, 0.0],
            depth: vec![1.0; 4],
            valid: vec![true, true, true, false],
        };
        let img = ramp_image(3, 4, 2);
        let err = grad_check(
            |x| {
                let (f, _) = gather_image_features(x, &proj, GatherMode::Bilinear)?;
                f.reduce_mean(None)
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err:e}");
    }

    #[test]
    fn gather_participates_in_the_tape() {
        let img = ramp_image(2, 2, 1);
        let tape = Tape::new();
        let attached = tape.var(&img);
        let proj = ProjectionResult {
            u: vec![0.5],
            v: vec![0.5],
            depth: vec![1.0],
            valid: vec![true],
        };
        let (f, _) = gather_image_features(&attached, &proj, GatherMode::Bilinear).unwrap();
        let grads = f.reduce_sum(None).unwrap().backward().unwrap();
        let g = grads.wrt(&attached).unwrap();
        // All four pixels contribute weight 0.25.
        assert_eq!(g.values(), vec![0.25; 4]);
    }
}
