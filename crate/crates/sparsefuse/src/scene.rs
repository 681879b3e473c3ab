//! Deterministic synthetic scenes: a ground plane, boxes, and walls,
//! sampled into a LiDAR-like point cloud and observed by a surrounding
//! camera rig. Every pipeline property is testable without real data.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::voxel::{Point, PointCloud};

/// Uniform jitter half-width applied along each surface normal, meters.
pub const SURFACE_JITTER: f64 = 0.02;

pub const GROUND_INTENSITY: f32 = 0.2;
pub const BOX_INTENSITY: f32 = 0.6;
pub const WALL_INTENSITY: f32 = 0.8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxSpec {
    pub center: Vec3,
    /// Full edge lengths (meters).
    pub size: Vec3,
    /// Rotation about z, radians.
    pub yaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WallSpec {
    /// Center of the rectangular panel.
    pub center: Vec3,
    /// Horizontal span, meters.
    pub width: f64,
    /// Vertical span, meters.
    pub height: f64,
    /// Direction of the panel normal (rotation about z, radians);
    /// yaw 0 faces the −x direction, toward a camera looking +x.
    pub yaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RigPreset {
    pub cameras: usize,
    pub width: u32,
    pub height: u32,
    pub horizontal_fov_deg: f64,
    /// Mount height above ground, meters.
    pub mount_height: f64,
}

impl Default for RigPreset {
    fn default() -> Self {
        RigPreset {
            cameras: 6,
            width: 704,
            height: 256,
            horizontal_fov_deg: 70.0,
            mount_height: 1.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Full side length of the square ground plane, centered at origin.
    pub ground_extent: f64,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
    pub points_per_scene: usize,
    #[serde(default)]
    pub rig: RigPreset,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            ground_extent: 80.0,
            boxes: Vec::new(),
            walls: Vec::new(),
            points_per_scene: 100_000,
            rig: RigPreset::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ground_extent > 0.0) {
            return Err(Error::InvalidConfig("ground_extent must be positive".into()));
        }
        if self.points_per_scene == 0 {
            return Err(Error::InvalidConfig("points_per_scene must be positive".into()));
        }
        if self.boxes.iter().any(|b| !(b.size.x > 0.0 && b.size.y > 0.0 && b.size.z > 0.0)) {
            return Err(Error::InvalidConfig("box sizes must be positive".into()));
        }
        if self.walls.iter().any(|w| !(w.width > 0.0 && w.height > 0.0)) {
            return Err(Error::InvalidConfig("wall extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceKind {
    Ground,
    Box,
    Wall,
}

/// Ground-truth description of one sampled surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceInfo {
    pub kind: SurfaceKind,
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub cloud: PointCloud,
    pub cameras: Vec<CameraModel>,
    pub surfaces: Vec<SurfaceInfo>,
}

struct Patch {
    kind: SurfaceKind,
    area: f64,
    origin: Vec3,
    /// Spanning edges of the rectangle.
    edge_u: Vec3,
    edge_v: Vec3,
    normal: Vec3,
    intensity: f32,
}

fn yaw_rotate(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

fn rect(kind: SurfaceKind, origin: Vec3, edge_u: Vec3, edge_v: Vec3, intensity: f32) -> Patch {
    let cross = Vec3::new(
        edge_u.y * edge_v.z - edge_u.z * edge_v.y,
        edge_u.z * edge_v.x - edge_u.x * edge_v.z,
        edge_u.x * edge_v.y - edge_u.y * edge_v.x,
    );
    let area = cross.norm();
    Patch { kind, area, origin, edge_u, edge_v, normal: cross.scale(1.0 / area), intensity }
}

fn surface_patches(spec: &SceneSpec) -> Vec<Patch> {
    let mut patches = Vec::new();
    let half = spec.ground_extent / 2.0;
    patches.push(rect(
        SurfaceKind::Ground,
        Vec3::new(-half, -half, 0.0),
        Vec3::new(spec.ground_extent, 0.0, 0.0),
        Vec3::new(0.0, spec.ground_extent, 0.0),
        GROUND_INTENSITY,
    ));

    for b in &spec.boxes {
        let h = b.size.scale(0.5);
        // Six faces of the yawed box.
        let faces: [(Vec3, Vec3, Vec3); 6] = [
            // +x / -x
            (Vec3::new(h.x, -h.y, -h.z), Vec3::new(0.0, b.size.y, 0.0), Vec3::new(0.0, 0.0, b.size.z)),
            (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(0.0, b.size.y, 0.0), Vec3::new(0.0, 0.0, b.size.z)),
            // +y / -y
            (Vec3::new(-h.x, h.y, -h.z), Vec3::new(b.size.x, 0.0, 0.0), Vec3::new(0.0, 0.0, b.size.z)),
            (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(b.size.x, 0.0, 0.0), Vec3::new(0.0, 0.0, b.size.z)),
            // top / bottom
            (Vec3::new(-h.x, -h.y, h.z), Vec3::new(b.size.x, 0.0, 0.0), Vec3::new(0.0, b.size.y, 0.0)),
            (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(b.size.x, 0.0, 0.0), Vec3::new(0.0, b.size.y, 0.0)),
        ];
        for (corner, eu, ev) in faces {
            patches.push(rect(
                SurfaceKind::Box,
                b.center.add(yaw_rotate(corner, b.yaw)),
                yaw_rotate(eu, b.yaw),
                yaw_rotate(ev, b.yaw),
                BOX_INTENSITY,
            ));
        }
    }

    for w in &spec.walls {
        // Panel spans sideways from the yawed normal.
        let along = yaw_rotate(Vec3::new(0.0, 1.0, 0.0), w.yaw);
        let origin = w
            .center
            .sub(along.scale(w.width / 2.0))
            .sub(Vec3::new(0.0, 0.0, w.height / 2.0));
        patches.push(rect(
            SurfaceKind::Wall,
            origin,
            along.scale(w.width),
            Vec3::new(0.0, 0.0, w.height),
            WALL_INTENSITY,
        ));
    }
    patches
}

/// The default outward-looking ring of cameras at even yaw spacing.
pub fn camera_ring(rig: &RigPreset) -> Vec<CameraModel> {
    let fx = rig.width as f64 / 2.0 / (rig.horizontal_fov_deg.to_radians() / 2.0).tan();
    (0..rig.cameras)
        .map(|i| {
            let yaw = TAU * i as f64 / rig.cameras as f64;
            let (s, c) = yaw.sin_cos();
            // Rows of world→camera: camera right, camera down, camera forward.
            let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
            let center = Vec3::new(0.0, 0.0, rig.mount_height);
            // t = -R·center
            let t = Vec3::new(0.0, rig.mount_height, 0.0);
            let cam = CameraModel {
                fx,
                fy: fx,
                cx: rig.width as f64 / 2.0,
                cy: rig.height as f64 / 2.0,
                rotation,
                translation: t,
                width: rig.width,
                height: rig.height,
            };
            debug_assert!(cam.center().distance(center) < 1e-9);
            cam
        })
        .collect()
}

/// Samples the scene surfaces area-proportionally with seeded jitter.
/// Deterministic for a given spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let patches = surface_patches(spec);
    let total_area: f64 = patches.iter().map(|p| p.area).sum();
    let mut cumulative = Vec::with_capacity(patches.len());
    let mut acc = 0.0;
    for p in &patches {
        acc += p.area;
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.points_per_scene);
    for _ in 0..spec.points_per_scene {
        let r = rng.gen::<f64>() * total_area;
        let pi = cumulative.partition_point(|&c| c < r).min(patches.len() - 1);
        let p = &patches[pi];
        let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
        let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * SURFACE_JITTER;
        let pos = p
            .origin
            .add(p.edge_u.scale(a))
            .add(p.edge_v.scale(b))
            .add(p.normal.scale(jitter));
        points.push(Point {
            x: pos.x as f32,
            y: pos.y as f32,
            z: pos.z as f32,
            intensity: p.intensity,
        });
    }

    Ok(Scene {
        spec: spec.clone(),
        cloud: PointCloud { points },
        cameras: camera_ring(&spec.rig),
        surfaces: patches
            .iter()
            .map(|p| SurfaceInfo { kind: p.kind, area: p.area })
            .collect(),
    })
}

/// Canonical fixture for the voxel-vs-pillar coverage contrast: a 3 m
/// vertical wall squarely facing camera 0 over a modest ground plane.
pub fn wall_scene(spec: &SceneSpec) -> Result<Scene> {
    let mut spec = spec.clone();
    spec.ground_extent = 24.0;
    spec.boxes.clear();
    spec.walls = vec![WallSpec {
        center: Vec3::new(12.0, 0.0, 1.5),
        width: 8.0,
        height: 3.0,
        yaw: 0.0,
    }];
    generate_scene(&spec)
}

// --- scene directory IO -------------------------------------------------

pub const POINTS_FILE: &str = "points.bin";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const SPEC_FILE: &str = "scene.json";

/// Writes `points.bin`, `cameras.json`, and `scene.json` into a directory.
pub fn write_scene_dir(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::voxel::write_points_bin(&dir.join(POINTS_FILE), &scene.cloud)?;
    std::fs::write(dir.join(CAMERAS_FILE), crate::geometry::rig_to_json(&scene.cameras))?;
    std::fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&scene.spec)?)?;
    Ok(())
}

/// Loads a scene directory written by [`write_scene_dir`]. The spec file
/// is optional (hand-assembled directories may carry only data files).
pub fn read_scene_dir(dir: &Path) -> Result<Scene> {
    let cloud = crate::voxel::read_points_bin(&dir.join(POINTS_FILE))?;
    let cameras = crate::geometry::load_rig_json(&std::fs::read_to_string(dir.join(CAMERAS_FILE))?)?;
    let spec_path = dir.join(SPEC_FILE);
    let spec = if spec_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(spec_path)?)?
    } else {
        SceneSpec::default()
    };
    Ok(Scene { spec, cloud, cameras, surfaces: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_to_pixel;

    #[test]
    fn ground_only_points_stay_near_the_plane() {
        let spec = SceneSpec { points_per_scene: 5_000, ..Default::default() };
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.cloud.len(), 5_000);
        for p in &scene.cloud.points {
            assert!((p.z as f64).abs() <= SURFACE_JITTER + 1e-6);
            assert!(p.x.abs() as f64 <= 40.0 + SURFACE_JITTER);
        }
    }

    #[test]
    fn point_split_is_area_proportional() {
        let spec = SceneSpec {
            seed: 5,
            ground_extent: 40.0,
            boxes: vec![BoxSpec {
                center: Vec3::new(5.0, 5.0, 1.0),
                size: Vec3::new(4.0, 6.0, 2.0),
                yaw: 0.4,
            }],
            points_per_scene: 100_000,
            ..Default::default()
        };
        let scene = generate_scene(&spec).unwrap();

        let b = &spec.boxes[0];
        let box_area =
            2.0 * (b.size.x * b.size.y + b.size.y * b.size.z + b.size.z * b.size.x);
        let total = spec.ground_extent * spec.ground_extent + box_area;
        let want = box_area / total;

        let box_points = scene
            .cloud
            .points
            .iter()
            .filter(|p| p.intensity == BOX_INTENSITY)
            .count();
        let got = box_points as f64 / spec.points_per_scene as f64;
        assert!(
            (got - want).abs() / want < 0.05,
            "box fraction {got} vs area fraction {want}"
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec { seed: 9, points_per_scene: 2_000, ..Default::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.cloud, b.cloud);
    }

    #[test]
    fn camera_ring_geometry() {
        let rig = RigPreset::default();
        let cams = camera_ring(&rig);
        assert_eq!(cams.len(), 6);
        for cam in &cams {
            cam.validate().unwrap();
        }
        // Camera 0 looks along +x: a point ahead lands at the principal point.
        let px = project_to_pixel(Vec3::new(10.0, 0.0, rig.mount_height), &cams[0]).unwrap();
        assert!((px.u - 352.0).abs() < 1e-9);
        assert!((px.v - 128.0).abs() < 1e-9);
        assert!((px.depth - 10.0).abs() < 1e-9);
        // Points above the camera appear in the upper half (v < cy).
        let above = project_to_pixel(Vec3::new(10.0, 0.0, 3.0), &cams[0]).unwrap();
        assert!(above.v < 128.0);
    }

    #[test]
    fn wall_scene_spans_the_expected_z_cells() {
        let spec = SceneSpec { seed: 2, points_per_scene: 50_000, ..Default::default() };
        let scene = wall_scene(&spec).unwrap();
        let wall_points: Vec<_> = scene
            .cloud
            .points
            .iter()
            .filter(|p| p.intensity == WALL_INTENSITY)
            .collect();
        assert!(!wall_points.is_empty());
        let cells: std::collections::HashSet<i64> = wall_points
            .iter()
            .map(|p| ((p.z as f64 + 1.0) / 0.25).floor() as i64)
            .collect();
        assert!(cells.len() >= 10, "3 m wall should span >= 10 z cells, got {}", cells.len());
    }

    #[test]
    fn wall_pillars_cover_exactly_the_wall_footprint() {
        let spec = SceneSpec { seed: 3, points_per_scene: 50_000, ..Default::default() };
        let scene = wall_scene(&spec).unwrap();
        let wall_cloud = PointCloud {
            points: scene
                .cloud
                .points
                .iter()
                .copied()
                .filter(|p| p.intensity == WALL_INTENSITY)
                .collect(),
        };
        let cfg = crate::voxel::VoxelGridConfig::default();
        let pillars = crate::voxel::pillarize(&wall_cloud, &cfg).unwrap();
        // The wall plane is x = 12 ± jitter; y spans ±4.
        for t in &pillars.tokens.tokens {
            assert_eq!(t.index[2], 0);
            let c = t.coord3d;
            assert!((c.x - 12.0).abs() < 0.3 + SURFACE_JITTER, "x = {}", c.x);
            assert!(c.y.abs() < 4.0 + 0.3 + SURFACE_JITTER, "y = {}", c.y);
        }
    }

    #[test]
    fn scene_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 4, points_per_scene: 500, ..Default::default() };
        let scene = generate_scene(&spec).unwrap();
        write_scene_dir(dir.path(), &scene).unwrap();
        let back = read_scene_dir(dir.path()).unwrap();
        assert_eq!(back.cloud, scene.cloud);
        assert_eq!(back.cameras, scene.cameras);
        assert_eq!(back.spec, spec);
    }
}
