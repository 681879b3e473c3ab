//! Point-cloud tokenization: voxel and pillar grids with mean-pooled features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::token::{Modality, Token, TokenSet};

/// Raw feature width produced by the tokenizer before the model-dim lift:
/// mean (dx, dy, dz, intensity).
pub const RAW_FEATURE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VoxelGridConfig {
    pub range_min: Vec3,
    pub range_max: Vec3,
    /// Cell edge lengths (sx, sy, sz) in meters.
    pub voxel_size: [f64; 3],
    #[serde(default)]
    pub pillar_mode: bool,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        // 108 m × 108 m × 8 m scene volume at the default grid: 360 × 360 × 32 cells.
        VoxelGridConfig {
            range_min: Vec3::new(-54.0, -54.0, -1.0),
            range_max: Vec3::new(54.0, 54.0, 7.0),
            voxel_size: [0.3, 0.3, 0.25],
            pillar_mode: false,
        }
    }
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<()> {
        let ext = self.extent();
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::InvalidConfig("range_max must exceed range_min per axis".into()));
        }
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("voxel sizes must be positive".into()));
        }
        if self.pillar_mode && self.dims()[2] != 1 {
            return Err(Error::InvalidConfig(
                "pillar_mode requires the z extent to form exactly one cell".into(),
            ));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        self.range_max.sub(self.range_min)
    }

    /// Grid extents in cells per axis.
    pub fn dims(&self) -> [usize; 3] {
        let ext = self.extent();
        let n = |e: f64, s: f64| ((e / s - 1e-9).ceil().max(1.0)) as usize;
        [
            n(ext.x, self.voxel_size[0]),
            n(ext.y, self.voxel_size[1]),
            n(ext.z, self.voxel_size[2]),
        ]
    }

    /// The same grid collapsed to a single z cell.
    pub fn as_pillars(&self) -> VoxelGridConfig {
        let mut cfg = self.clone();
        cfg.voxel_size[2] = self.extent().z;
        cfg.pillar_mode = true;
        cfg
    }

    /// Half-open cell index of a point, or None when out of range.
    fn cell_of(&self, p: &Point) -> Option<[i32; 3]> {
        let coords = [p.x as f64, p.y as f64, p.z as f64];
        let mins = [self.range_min.x, self.range_min.y, self.range_min.z];
        let maxs = [self.range_max.x, self.range_max.y, self.range_max.z];
        let mut idx = [0i32; 3];
        for a in 0..3 {
            // Boundary points belong to the higher-index cell, so the top
            // of the range is exclusive.
            if coords[a] < mins[a] || coords[a] >= maxs[a] {
                return None;
            }
            idx[a] = ((coords[a] - mins[a]) / self.voxel_size[a]).floor() as i32;
        }
        Some(idx)
    }

    pub fn cell_center(&self, idx: [i32; 3]) -> Vec3 {
        Vec3::new(
            self.range_min.x + (idx[0] as f64 + 0.5) * self.voxel_size[0],
            self.range_min.y + (idx[1] as f64 + 0.5) * self.voxel_size[1],
            self.range_min.z + (idx[2] as f64 + 0.5) * self.voxel_size[2],
        )
    }
}

#[derive(Debug, Clone)]
pub struct Voxelized {
    pub tokens: TokenSet,
    /// Points that fell outside the configured range.
    pub dropped: usize,
}

/// Converts a point cloud into one token per non-empty voxel.
///
/// The token feature is the mean over contained points of
/// (x_offset, y_offset, z_offset, intensity), offsets measured from the
/// voxel center. Accumulation runs in a canonical point order so that
/// shuffling the input changes nothing, bit for bit.
pub fn voxelize(cloud: &PointCloud, cfg: &VoxelGridConfig) -> Result<Voxelized> {
    cfg.validate()?;
    let dims = cfg.dims();

    let mut keyed: Vec<(u64, u32)> = Vec::with_capacity(cloud.len());
    let mut dropped = 0usize;
    for (i, p) in cloud.points.iter().enumerate() {
        match cfg.cell_of(p) {
            Some(idx) => {
                let lin = (idx[0] as u64 * dims[1] as u64 + idx[1] as u64) * dims[2] as u64
                    + idx[2] as u64;
                keyed.push((lin, i as u32));
            }
            None => dropped += 1,
        }
    }
    if keyed.is_empty() {
        return Err(Error::EmptyCloud);
    }

    // Canonical order: by cell, then by point value bits. Makes the f64
    // accumulation independent of input order.
    keyed.sort_unstable_by_key(|&(lin, i)| {
        let p = &cloud.points[i as usize];
        (lin, p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.intensity.to_bits())
    });

    let mut tokens = Vec::new();
    let mut features = Vec::new();
    let mut run_start = 0usize;
    while run_start < keyed.len() {
        let lin = keyed[run_start].0;
        let mut run_end = run_start + 1;
        while run_end < keyed.len() && keyed[run_end].0 == lin {
            run_end += 1;
        }

        let idx = [
            (lin / (dims[1] as u64 * dims[2] as u64)) as i32,
            (lin / dims[2] as u64 % dims[1] as u64) as i32,
            (lin % dims[2] as u64) as i32,
        ];
        let center = cfg.cell_center(idx);
        let mut acc = [0.0f64; RAW_FEATURE_DIM];
        for &(_, pi) in &keyed[run_start..run_end] {
            let p = &cloud.points[pi as usize];
            acc[0] += p.x as f64 - center.x;
            acc[1] += p.y as f64 - center.y;
            acc[2] += p.z as f64 - center.z;
            acc[3] += p.intensity as f64;
        }
        let n = (run_end - run_start) as f64;
        features.extend(acc.iter().map(|&s| (s / n) as f32));
        tokens.push(Token {
            index: idx,
            coord3d: center,
            pixel: None,
            modality: Modality::Lidar,
            camera_id: None,
        });
        run_start = run_end;
    }

    Ok(Voxelized {
        tokens: TokenSet {
            tokens,
            features,
            dim: RAW_FEATURE_DIM,
            level_z: dims[2] as u32,
            origin: cfg.range_min,
            cell: cfg.voxel_size,
            dims,
        },
        dropped,
    })
}

/// [`voxelize`] with the z axis collapsed to a single cell.
pub fn pillarize(cloud: &PointCloud, cfg: &VoxelGridConfig) -> Result<Voxelized> {
    voxelize(cloud, &cfg.as_pillars())
}

// --- point cloud IO ---------------------------------------------------

/// Binary layout: u32 LE count, then count records of four f32 LE
/// (x, y, z, intensity).
pub fn write_points_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + cloud.len() * 16);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        buf.extend_from_slice(&p.x.to_le_bytes());
        buf.extend_from_slice(&p.y.to_le_bytes());
        buf.extend_from_slice(&p.z.to_le_bytes());
        buf.extend_from_slice(&p.intensity.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_points_bin(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let malformed = |what: &str| Error::MalformedFile {
        path: path.display().to_string(),
        what: what.into(),
    };
    if bytes.len() < 4 {
        return Err(malformed("header"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + count * 16 {
        return Err(malformed("record payload length"));
    }
    let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let points = (0..count)
        .map(|i| {
            let off = 4 + i * 16;
            Point { x: f(off), y: f(off + 4), z: f(off + 8), intensity: f(off + 12) }
        })
        .collect();
    Ok(PointCloud { points })
}

/// CSV alternative with the header `x,y,z,intensity`.
pub fn read_points_csv(path: &Path) -> Result<PointCloud> {
    let mut rdr = csv::Reader::from_path(path)?;
    let malformed = |what: String| Error::MalformedFile {
        path: path.display().to_string(),
        what,
    };
    {
        let headers = rdr.headers()?;
        let expect = ["x", "y", "z", "intensity"];
        if headers.iter().map(str::trim).ne(expect) {
            return Err(malformed(format!("header (expected x,y,z,intensity, got {headers:?})")));
        }
    }
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f32> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| malformed(format!("field {i} in record {rec:?}")))
        };
        points.push(Point { x: field(0)?, y: field(1)?, z: field(2)?, intensity: field(3)? });
    }
    Ok(PointCloud { points })
}

pub fn write_points_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z", "intensity"])?;
    for p in &cloud.points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            p.intensity.to_string(),
        ])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn small_cfg() -> VoxelGridConfig {
        VoxelGridConfig {
            range_min: Vec3::new(0.0, 0.0, 0.0),
            range_max: Vec3::new(10.0, 10.0, 4.0),
            voxel_size: [0.3, 0.3, 0.25],
            pillar_mode: false,
        }
    }

    fn uniform_cloud(n: usize, seed: u64, cfg: &VoxelGridConfig) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = cfg.extent();
        let points = (0..n)
            .map(|_| Point {
                x: (cfg.range_min.x + rng.gen::<f64>() * ext.x) as f32,
                y: (cfg.range_min.y + rng.gen::<f64>() * ext.y) as f32,
                z: (cfg.range_min.z + rng.gen::<f64>() * ext.z) as f32,
                intensity: rng.gen::<f32>(),
            })
            .collect();
        PointCloud { points }
    }

    #[test]
    fn single_point_at_center_has_zero_offsets() {
        let cfg = small_cfg();
        let c = cfg.cell_center([1, 2, 3]);
        let cloud = PointCloud {
            points: vec![Point { x: c.x as f32, y: c.y as f32, z: c.z as f32, intensity: 0.5 }],
        };
        let out = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(out.tokens.len(), 1);
        assert_eq!(out.tokens.tokens[0].index, [1, 2, 3]);
        let f = out.tokens.feature(0);
        assert!(f[0].abs() < 1e-6 && f[1].abs() < 1e-6 && f[2].abs() < 1e-6);
        assert_eq!(f[3], 0.5);
    }

    #[test]
    fn symmetric_offsets_cancel() {
        let cfg = small_cfg();
        let c = cfg.cell_center([5, 5, 5]);
        let mk = |dx: f64| Point {
            x: (c.x + dx) as f32,
            y: c.y as f32,
            z: c.z as f32,
            intensity: 1.0,
        };
        let cloud = PointCloud { points: vec![mk(0.1), mk(-0.1)] };
        let out = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(out.tokens.len(), 1);
        let f = out.tokens.feature(0);
        assert!(f[0].abs() < 1e-6, "x offsets should cancel, got {}", f[0]);
        assert_eq!(f[3], 1.0);
    }

    #[test]
    fn token_count_matches_hash_set_oracle() {
        let cfg = small_cfg();
        let cloud = uniform_cloud(10_000, 7, &cfg);
        let out = voxelize(&cloud, &cfg).unwrap();

        let mut seen = HashSet::new();
        for p in &cloud.points {
            let ix = ((p.x as f64 - cfg.range_min.x) / 0.3).floor() as i64;
            let iy = ((p.y as f64 - cfg.range_min.y) / 0.3).floor() as i64;
            let iz = ((p.z as f64 - cfg.range_min.z) / 0.25).floor() as i64;
            seen.insert((ix, iy, iz));
        }
        assert_eq!(out.tokens.len(), seen.len());
        assert_eq!(out.dropped, 0);
    }

    #[test]
    fn vertical_stack_collapses_to_one_pillar() {
        let cfg = small_cfg();
        let points = (0..5)
            .map(|i| Point { x: 1.0, y: 1.0, z: 0.2 + i as f32 * 0.7, intensity: 0.3 })
            .collect();
        let cloud = PointCloud { points };

        let pillars = pillarize(&cloud, &cfg).unwrap();
        assert_eq!(pillars.tokens.len(), 1);
        assert_eq!(pillars.tokens.level_z, 1);
        assert_eq!(pillars.tokens.tokens[0].index[2], 0);

        // The same stack through the voxel path keeps the z structure.
        let voxels = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(voxels.tokens.len(), 5);
    }

    #[test]
    fn pillar_count_matches_2d_oracle() {
        let cfg = small_cfg();
        let cloud = uniform_cloud(5_000, 11, &cfg);
        let out = pillarize(&cloud, &cfg).unwrap();

        let mut seen = HashSet::new();
        for p in &cloud.points {
            let ix = ((p.x as f64 - cfg.range_min.x) / 0.3).floor() as i64;
            let iy = ((p.y as f64 - cfg.range_min.y) / 0.3).floor() as i64;
            seen.insert((ix, iy));
        }
        assert_eq!(out.tokens.len(), seen.len());
    }

    #[test]
    fn pillar_count_never_exceeds_voxel_count() {
        let cfg = small_cfg();
        let cloud = uniform_cloud(3_000, 13, &cfg);
        let v = voxelize(&cloud, &cfg).unwrap();
        let p = pillarize(&cloud, &cfg).unwrap();
        assert!(p.tokens.len() <= v.tokens.len());
        assert!(v.tokens.len() <= cloud.len());
    }

    #[test]
    fn shuffling_points_changes_nothing() {
        let cfg = small_cfg();
        let cloud = uniform_cloud(2_000, 17, &cfg);
        let mut shuffled = cloud.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in (1..shuffled.points.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.points.swap(i, j);
        }
        let a = voxelize(&cloud, &cfg).unwrap();
        let b = voxelize(&shuffled, &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn out_of_range_cloud_is_empty() {
        let cfg = small_cfg();
        let cloud = PointCloud {
            points: vec![Point { x: -5.0, y: 0.0, z: 0.0, intensity: 0.0 }],
        };
        assert!(matches!(voxelize(&cloud, &cfg), Err(Error::EmptyCloud)));
    }

    #[test]
    fn boundary_points_go_to_the_higher_cell() {
        let cfg = VoxelGridConfig {
            range_min: Vec3::ZERO,
            range_max: Vec3::new(1.0, 1.0, 1.0),
            voxel_size: [0.5, 0.5, 0.5],
            pillar_mode: false,
        };
        let cloud = PointCloud {
            points: vec![Point { x: 0.5, y: 0.0, z: 0.0, intensity: 0.0 }],
        };
        let out = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(out.tokens.tokens[0].index, [1, 0, 0]);
        // The top of the range is exclusive.
        let top = PointCloud {
            points: vec![Point { x: 1.0, y: 0.0, z: 0.0, intensity: 0.0 }],
        };
        assert!(matches!(voxelize(&top, &cfg), Err(Error::EmptyCloud)));
    }

    #[test]
    fn point_io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = uniform_cloud(257, 23, &small_cfg());

        let bin = dir.path().join("points.bin");
        write_points_bin(&bin, &cloud).unwrap();
        assert_eq!(read_points_bin(&bin).unwrap(), cloud);

        let csv = dir.path().join("points.csv");
        write_points_csv(&csv, &cloud).unwrap();
        assert_eq!(read_points_csv(&csv).unwrap(), cloud);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [9u8, 0, 0, 0, 1, 2, 3]).unwrap();
        assert!(matches!(read_points_bin(&path), Err(Error::MalformedFile { .. })));
    }
}
