//! Coordinate frames and pinhole projection.
//!
//! Conventions used everywhere in this crate:
//! - World frame: x/y horizontal, z up, meters.
//! - Camera frame: +z along the optical axis, +x right (image u),
//!   +y down (image v).
//! - Extrinsics are world→camera: `p_cam = R · p_world + t`, with `R`
//!   stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum projectable camera-frame depth in meters. Points closer than
/// this to the image plane are reported as [`ProjectionError::BehindCamera`].
pub const EPSILON_Z: f64 = 1e-4;

/// A 3D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A projected image-plane coordinate with its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z in meters; positive for any successful projection.
    pub depth: f64,
}

/// Why a point did not land on a camera's image.
///
/// The two causes are distinct on purpose: per-camera fusion keeps
/// per-cause drop counts, and an out-of-frame pixel still carries a
/// usable coordinate for callers that want to keep it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionError {
    /// Camera-frame depth was at or below [`EPSILON_Z`].
    BehindCamera { depth: f64 },
    /// The projected pixel fell outside `[0, width) × [0, height)`.
    OutOfFrame(PixelCoord),
}

/// Pinhole intrinsics plus a world→camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world→camera rotation.
    pub rotation: [[f64; 3]; 3],
    /// World→camera translation: `p_cam = R·p + t`.
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Checks the type invariants: orthonormal rotation within 1e-9,
    /// positive focal lengths and image size.
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                // (R·Rᵀ)[i][j]
                let mut s = 0.0;
                for (k, _) in r.iter().enumerate() {
                    s += r[i][k] * r[j][k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (s - expect).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "rotation is not orthonormal: (R·Rᵀ)[{i}][{j}] = {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Camera center in world coordinates: `-Rᵀ·t`.
    pub fn center(&self) -> Vec3 {
        camera_to_world(Vec3::ZERO, self)
    }
}

fn mat_apply(r: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    Vec3::new(
        r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
        r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
        r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
    )
}

fn mat_apply_transposed(r: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    Vec3::new(
        r[0][0] * p.x + r[1][0] * p.y + r[2][0] * p.z,
        r[0][1] * p.x + r[1][1] * p.y + r[2][1] * p.z,
        r[0][2] * p.x + r[1][2] * p.y + r[2][2] * p.z,
    )
}

/// World frame → camera frame: `R·p + t`.
pub fn world_to_camera(p: Vec3, cam: &CameraModel) -> Vec3 {
    mat_apply(&cam.rotation, p).add(cam.translation)
}

/// Camera frame → world frame: `Rᵀ·(p − t)`.
pub fn camera_to_world(p: Vec3, cam: &CameraModel) -> Vec3 {
    mat_apply_transposed(&cam.rotation, p.sub(cam.translation))
}

/// Projects a world point onto a camera image.
pub fn project_to_pixel(p_world: Vec3, cam: &CameraModel) -> std::result::Result<PixelCoord, ProjectionError> {
    let p_cam = world_to_camera(p_world, cam);
    if p_cam.z <= EPSILON_Z {
        return Err(ProjectionError::BehindCamera { depth: p_cam.z });
    }
    let px = PixelCoord {
        u: cam.fx * p_cam.x / p_cam.z + cam.cx,
        v: cam.fy * p_cam.y / p_cam.z + cam.cy,
        depth: p_cam.z,
    };
    let in_frame =
        px.u >= 0.0 && px.u < cam.width as f64 && px.v >= 0.0 && px.v < cam.height as f64;
    if in_frame {
        Ok(px)
    } else {
        Err(ProjectionError::OutOfFrame(px))
    }
}

/// Inverse of [`project_to_pixel`] for a known depth.
pub fn unproject_pixel(px: PixelCoord, cam: &CameraModel) -> Vec3 {
    debug_assert!(px.depth > 0.0);
    let p_cam = Vec3::new(
        (px.u - cam.cx) / cam.fx * px.depth,
        (px.v - cam.cy) / cam.fy * px.depth,
        px.depth,
    );
    camera_to_world(p_cam, cam)
}

/// Loads a camera rig from a JSON array of camera objects
/// (`fx, fy, cx, cy, rotation: [9], translation: [3], width, height`).
pub fn load_rig_json(text: &str) -> Result<Vec<CameraModel>> {
    #[derive(Deserialize)]
    struct CamJson {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [f64; 9],
        translation: [f64; 3],
        width: u32,
        height: u32,
    }
    let raw: Vec<CamJson> = serde_json::from_str(text)?;
    let mut cams = Vec::with_capacity(raw.len());
    for c in raw {
        let r = c.rotation;
        let cam = CameraModel {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: Vec3::new(c.translation[0], c.translation[1], c.translation[2]),
            width: c.width,
            height: c.height,
        };
        cam.validate()?;
        cams.push(cam);
    }
    Ok(cams)
}

/// Serializes a rig in the format accepted by [`load_rig_json`].
pub fn rig_to_json(cams: &[CameraModel]) -> String {
    let items: Vec<serde_json::Value> = cams
        .iter()
        .map(|c| {
            let r = &c.rotation;
            serde_json::json!({
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "rotation": [r[0][0], r[0][1], r[0][2],
                             r[1][0], r[1][1], r[1][2],
                             r[2][0], r[2][1], r[2][2]],
                "translation": [c.translation.x, c.translation.y, c.translation.z],
                "width": c.width, "height": c.height,
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("rig serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn test_camera() -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
            width: 100,
            height: 100,
        }
    }

    #[test]
    fn identity_pose_passes_points_through() {
        let cam = test_camera();
        let p = world_to_camera(Vec3::new(1.0, 2.0, 3.0), &cam);
        assert_eq!(p, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn pure_translation() {
        let mut cam = test_camera();
        cam.translation = Vec3::new(0.0, 0.0, 5.0);
        let p = world_to_camera(Vec3::ZERO, &cam);
        assert_eq!(p, Vec3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn yaw_rotation_matches_matrix_oracle() {
        // 90° yaw about z, checked against an nalgebra matrix multiply.
        let (s, c) = (std::f64::consts::FRAC_PI_2).sin_cos();
        let rot = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut cam = test_camera();
        cam.rotation = rot;
        cam.validate().unwrap();

        let p = Vec3::new(1.0, 0.0, 0.0);
        let got = world_to_camera(p, &cam);

        let m = nalgebra::Matrix3::new(
            rot[0][0], rot[0][1], rot[0][2], rot[1][0], rot[1][1], rot[1][2], rot[2][0],
            rot[2][1], rot[2][2],
        );
        let want = m * nalgebra::Vector3::new(p.x, p.y, p.z);
        assert!((got.x - want.x).abs() < 1e-12);
        assert!((got.y - want.y).abs() < 1e-12);
        assert!((got.z - want.z).abs() < 1e-12);
        // Documented convention: row-major world→camera, so +x maps to -y here.
        assert!((got.y - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let cam = test_camera();
        let px = project_to_pixel(Vec3::new(0.0, 0.0, 10.0), &cam).unwrap();
        assert_eq!((px.u, px.v, px.depth), (50.0, 50.0, 10.0));
    }

    #[test]
    fn off_axis_projection_arithmetic() {
        let cam = test_camera();
        let px = project_to_pixel(Vec3::new(1.0, 2.0, 10.0), &cam).unwrap();
        assert_eq!((px.u, px.v, px.depth), (60.0, 70.0, 10.0));
    }

    #[test]
    fn negative_depth_is_behind_camera() {
        let cam = test_camera();
        match project_to_pixel(Vec3::new(0.0, 0.0, -1.0), &cam) {
            Err(ProjectionError::BehindCamera { depth }) => assert_eq!(depth, -1.0),
            other => panic!("expected BehindCamera, got {other:?}"),
        }
    }

    #[test]
    fn out_of_frame_carries_the_pixel() {
        let cam = test_camera();
        match project_to_pixel(Vec3::new(30.0, 0.0, 10.0), &cam) {
            Err(ProjectionError::OutOfFrame(px)) => {
                assert_eq!(px.u, 350.0);
                assert_eq!(px.depth, 10.0);
            }
            other => panic!("expected OutOfFrame, got {other:?}"),
        }
    }

    #[test]
    fn unproject_inverts_the_trivial_cases() {
        let cam = test_camera();
        let p = unproject_pixel(PixelCoord { u: 50.0, v: 50.0, depth: 10.0 }, &cam);
        assert!(p.distance(Vec3::new(0.0, 0.0, 10.0)) < 1e-12);
        let p = unproject_pixel(PixelCoord { u: 60.0, v: 70.0, depth: 10.0 }, &cam);
        assert!(p.distance(Vec3::new(1.0, 2.0, 10.0)) < 1e-12);
    }

    #[test]
    fn scale_consistency_along_a_ray() {
        // (λx, λy, λz) in the camera frame maps to the same (u, v).
        let cam = test_camera();
        let base = Vec3::new(0.7, -0.3, 4.0);
        let a = project_to_pixel(base, &cam).unwrap();
        let b = project_to_pixel(base.scale(3.5), &cam).unwrap();
        assert!((a.u - b.u).abs() < 1e-9);
        assert!((a.v - b.v).abs() < 1e-9);
    }

    #[test]
    fn rig_json_roundtrip() {
        let mut cam = test_camera();
        cam.translation = Vec3::new(1.0, -2.0, 0.5);
        let text = rig_to_json(&[cam.clone()]);
        let rig = load_rig_json(&text).unwrap();
        assert_eq!(rig.len(), 1);
        assert_eq!(rig[0], cam);
    }

    #[test]
    fn rig_json_rejects_non_orthonormal_rotation() {
        let text = r#"[{"fx":100.0,"fy":100.0,"cx":50.0,"cy":50.0,
            "rotation":[1.0,0.0,0.0, 0.0,2.0,0.0, 0.0,0.0,1.0],
            "translation":[0.0,0.0,0.0],"width":100,"height":100}]"#;
        assert!(load_rig_json(text).is_err());
    }

    fn arb_rotation() -> impl Strategy<Value = [[f64; 3]; 3]> {
        // Compose yaw/pitch/roll into an orthonormal matrix.
        (0.0..std::f64::consts::TAU, -1.5..1.5f64, -3.0..3.0f64).prop_map(|(a, b, c)| {
            let (sa, ca) = a.sin_cos();
            let (sb, cb) = b.sin_cos();
            let (sc, cc) = c.sin_cos();
            let rz = [[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]];
            let ry = [[cb, 0.0, -sb], [0.0, 1.0, 0.0], [sb, 0.0, cb]];
            let rx = [[1.0, 0.0, 0.0], [0.0, cc, sc], [0.0, -sc, cc]];
            let mul = |m: &[[f64; 3]; 3], n: &[[f64; 3]; 3]| {
                let mut out = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        for (k, nk) in n.iter().enumerate() {
                            out[i][j] += m[i][k] * nk[j];
                        }
                    }
                }
                out
            };
            mul(&rx, &mul(&ry, &rz))
        })
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            rot in arb_rotation(),
            tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64,
            u in 0.0..100.0f64, v in 0.0..100.0f64, depth in 0.1..80.0f64,
        ) {
            let mut cam = test_camera();
            cam.rotation = rot;
            cam.translation = Vec3::new(tx, ty, tz);
            // Construct the world point from a pixel so it is guaranteed in-frame.
            let p = unproject_pixel(PixelCoord { u, v, depth }, &cam);
            let px = project_to_pixel(p, &cam).unwrap();
            prop_assert!((px.u - u).abs() < 1e-6);
            prop_assert!((px.v - v).abs() < 1e-6);
            prop_assert!((px.depth - depth).abs() < 1e-6);
        }

        #[test]
        fn world_to_camera_preserves_distances(
            rot in arb_rotation(),
            ax in -10.0..10.0f64, ay in -10.0..10.0f64, az in -10.0..10.0f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64, bz in -10.0..10.0f64,
        ) {
            let mut cam = test_camera();
            cam.rotation = rot;
            cam.translation = Vec3::new(1.0, 2.0, 3.0);
            let a = Vec3::new(ax, ay, az);
            let b = Vec3::new(bx, by, bz);
            let d_world = a.distance(b);
            let d_cam = world_to_camera(a, &cam).distance(world_to_camera(b, &cam));
            prop_assert!((d_world - d_cam).abs() < 1e-9);
        }
    }
}
