//! The end-to-end sparse fusion path: LiDAR tokenizer stage, 3D-to-2D
//! fusion in pixel space, 2D-to-3D fusion via partial projection, and BEV
//! densification, with every ablated choice exposed as configuration.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, LayerWeights, ModelConfig, PeStyle, matvec, positional_encoding_scaled,
    positional_encoding_window, seeded_matrix, seeded_vector, transformer_layer_features,
};
use crate::error::{Error, Result};
use crate::geometry::{
    CameraModel, PixelCoord, ProjectionError, Vec3, project_to_pixel, unproject_pixel,
};
use crate::partition::{
    self, PartitionConfig, PartitionPlan, Pattern, window_key,
};
use crate::token::{Modality, Token, TokenSet};
use crate::voxel::{PointCloud, RAW_FEATURE_DIM, VoxelGridConfig, pillarize, voxelize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FusionOrder {
    #[default]
    ThreeDToTwoDFirst,
    TwoDToThreeDFirst,
    ThreeDToTwoDOnly,
    TwoDToThreeDOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LidarProjection {
    #[default]
    Voxel,
    Pillar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ImageProjection {
    #[default]
    PartialProjection,
    NearestNeighbor,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub grid: VoxelGridConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub layers_per_stage: usize,
    #[serde(default)]
    pub fusion_order: FusionOrder,
    #[serde(default)]
    pub lidar_projection: LidarProjection,
    #[serde(default)]
    pub image_projection: ImageProjection,
    pub z_schedule: Vec<u32>,
    /// Image patch grid (per camera) and its stride in pixels.
    #[serde(default = "default_image_rows")]
    pub image_rows: usize,
    #[serde(default = "default_image_cols")]
    pub image_cols: usize,
    #[serde(default = "default_patch_stride")]
    pub patch_stride_px: f64,
    /// Pixel-space window edge, in patches.
    #[serde(default = "default_pixel_window")]
    pub pixel_window_patches: f64,
}

fn default_image_rows() -> usize {
    32
}
fn default_image_cols() -> usize {
    88
}
fn default_patch_stride() -> f64 {
    8.0
}
fn default_pixel_window() -> f64 {
    8.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: VoxelGridConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            layers_per_stage: 4,
            fusion_order: FusionOrder::default(),
            lidar_projection: LidarProjection::default(),
            image_projection: ImageProjection::default(),
            z_schedule: vec![32, 8, 2, 1],
            image_rows: default_image_rows(),
            image_cols: default_image_cols(),
            patch_stride_px: default_patch_stride(),
            pixel_window_patches: default_pixel_window(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.partition.validate()?;
        self.model.validate()?;
        if ![2, 4, 8].contains(&self.layers_per_stage) {
            return Err(Error::InvalidConfig(format!(
                "layers_per_stage must be one of 2, 4, 8; got {}",
                self.layers_per_stage
            )));
        }
        if self.z_schedule.is_empty() || *self.z_schedule.last().unwrap() != 1 {
            return Err(Error::InvalidConfig("z_schedule must end at 1".into()));
        }
        for w in self.z_schedule.windows(2) {
            if w[1] >= w[0] || w[0] % w[1] != 0 {
                return Err(Error::InvalidConfig(
                    "z_schedule must be strictly decreasing with each entry dividing its predecessor"
                        .into(),
                ));
            }
        }
        if self.lidar_projection == LidarProjection::Voxel
            && self.grid.dims()[2] as u32 != self.z_schedule[0]
        {
            return Err(Error::InvalidConfig(format!(
                "grid has {} z cells but z_schedule starts at {}",
                self.grid.dims()[2],
                self.z_schedule[0]
            )));
        }
        if self.image_rows == 0 || self.image_cols == 0 || !(self.patch_stride_px > 0.0) {
            return Err(Error::InvalidConfig("image grid must be non-empty".into()));
        }
        Ok(())
    }

    fn pixel_window_px(&self) -> f64 {
        self.pixel_window_patches * self.patch_stride_px
    }
}

pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

// --- image patch grid ----------------------------------------------------

/// Patch tokens of one camera on an `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenGrid {
    pub camera_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub stride_px: f64,
    pub dim: usize,
    /// Row-major `rows·cols × dim`.
    pub features: Vec<f32>,
}

impl ImageTokenGrid {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            (c as f64 + 0.5) * self.stride_px,
            (r as f64 + 0.5) * self.stride_px,
        )
    }

    fn patch_of(&self, u: f64, v: f64) -> (usize, usize) {
        let r = ((v / self.stride_px) as usize).min(self.rows - 1);
        let c = ((u / self.stride_px) as usize).min(self.cols - 1);
        (r, c)
    }

    pub fn feature(&self, r: usize, c: usize) -> &[f32] {
        let i = r * self.cols + c;
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Deterministic patch-feature stub: a seeded linear map of
/// (normalized u, normalized v, camera one-hot, mean synthetic texture).
/// Stands in for an image backbone without depending on its capacity.
pub fn image_stub_grids(
    cams: &[CameraModel],
    cfg: &PipelineConfig,
    stub: &[f32],
) -> Vec<ImageTokenGrid> {
    let dim = cfg.model.dim;
    let input_dim = 3 + cams.len();
    debug_assert_eq!(stub.len(), dim * input_dim);
    cams.iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut grid = ImageTokenGrid {
                camera_id: ci as u32,
                rows: cfg.image_rows,
                cols: cfg.image_cols,
                stride_px: cfg.patch_stride_px,
                dim,
                features: vec![0.0; cfg.image_rows * cfg.image_cols * dim],
            };
            let mut input = vec![0.0f32; input_dim];
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let (u, v) = grid.patch_center(r, c);
                    input.iter_mut().for_each(|x| *x = 0.0);
                    input[0] = (u / cam.width as f64) as f32;
                    input[1] = (v / cam.height as f64) as f32;
                    input[2 + ci] = 1.0;
                    let texture = 0.5 + 0.5 * (0.07 * u + 0.13 * v + ci as f64).sin();
                    input[2 + cams.len()] = texture as f32;
                    let i = r * grid.cols + c;
                    matvec(stub, dim, input_dim, &input, &mut grid.features[i * dim..(i + 1) * dim]);
                }
            }
            grid
        })
        .collect()
}

// --- pipeline weights ------------------------------------------------------

/// All deterministic parameters of a pipeline run, derived from the model
/// seed. Kept separate from the config so tests can modify them.
#[derive(Debug, Clone)]
pub struct PipelineWeights {
    /// Raw VFE feature → model dim lift.
    pub lift: Vec<f32>,
    /// Image stub projection, `dim × (3 + cameras)`.
    pub image_stub: Vec<f32>,
    pub tokenizer: Vec<LayerWeights>,
    pub pixel_stage: Vec<LayerWeights>,
    pub space_stage: Vec<LayerWeights>,
    /// Scoring vectors for the attentive z pools, one per schedule step.
    pub pool_scores: Vec<Vec<f32>>,
}

impl PipelineWeights {
    pub fn init(cfg: &PipelineConfig, cameras: usize) -> PipelineWeights {
        let m = &cfg.model;
        let sub = |tag: u64| m.seed.wrapping_mul(0x517C_C1B7_2722_0A95).wrapping_add(tag);
        let layers = |count: usize, base: u64| -> Vec<LayerWeights> {
            (0..count)
                .map(|i| LayerWeights::init(m, sub(base + i as u64)))
                .collect()
        };
        let l = cfg.layers_per_stage;
        let (pixel_n, space_n) = match cfg.fusion_order {
            FusionOrder::ThreeDToTwoDFirst | FusionOrder::TwoDToThreeDFirst => (l, l),
            FusionOrder::ThreeDToTwoDOnly => (2 * l, 0),
            FusionOrder::TwoDToThreeDOnly => (0, 2 * l),
        };
        PipelineWeights {
            lift: seeded_matrix(m.dim, RAW_FEATURE_DIM, sub(1)),
            image_stub: seeded_matrix(m.dim, 3 + cameras, sub(2)),
            tokenizer: layers(l, 100),
            pixel_stage: layers(pixel_n, 200),
            space_stage: layers(space_n, 300),
            pool_scores: (0..cfg.z_schedule.len().saturating_sub(1))
                .map(|i| seeded_vector(m.dim, sub(400 + i as u64)))
                .collect(),
        }
    }

    /// Zeroes every attention/FFN output projection; under PreNorm the
    /// whole transformer becomes an exact identity on features.
    pub fn zero_output_projections(&mut self) {
        for w in self
            .tokenizer
            .iter_mut()
            .chain(self.pixel_stage.iter_mut())
            .chain(self.space_stage.iter_mut())
        {
            w.zero_output_projections();
        }
    }
}

// --- positional encoding application ----------------------------------

fn add_pe(features: &mut [f32], dim: usize, pe_inputs: &[(Vec3, [f64; 3])], model: &ModelConfig) {
    features
        .par_chunks_mut(dim)
        .zip(pe_inputs.par_iter())
        .for_each(|(f, (coord, scales))| {
            let pe = match model.pe_style {
                PeStyle::Pe3d => {
                    positional_encoding_scaled([coord.x, coord.y, coord.z], *scales, dim)
                }
                PeStyle::WindowLocal => {
                    // Locals of the unshifted x-major window at this scale.
                    let cfg = PartitionConfig {
                        window_shape: *scales,
                        pattern: Pattern::X,
                        ..Default::default()
                    };
                    let key = window_key(*coord, &cfg);
                    positional_encoding_window(&key, *scales, model)
                }
            };
            for (fv, pv) in f.iter_mut().zip(&pe) {
                *fv += *pv as f32;
            }
        });
}

/// PE over world coordinates: every axis normalized by `pe_scale` for the
/// metric-global style, or by the 3D window shape for the local style.
fn add_pe_3d(ts: &mut TokenSet, pcfg: &PartitionConfig, model: &ModelConfig) {
    let scales = match model.pe_style {
        PeStyle::Pe3d => [model.pe_scale; 3],
        PeStyle::WindowLocal => pcfg.window_shape,
    };
    let inputs: Vec<(Vec3, [f64; 3])> =
        ts.tokens.iter().map(|t| (t.coord3d, scales)).collect();
    let dim = ts.dim;
    add_pe(&mut ts.features, dim, &inputs, model);
}

// --- tokenizer stage -----------------------------------------------------

/// Voxelize (or pillarize), lift features to model dim, add PE, and run
/// `layers_per_stage` transformer layers cycling the four partition
/// patterns. Returns the token set and the out-of-range point count.
pub fn tokenize_lidar(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    w: &PipelineWeights,
) -> Result<(TokenSet, usize)> {
    let vox = match cfg.lidar_projection {
        LidarProjection::Voxel => voxelize(cloud, &cfg.grid)?,
        LidarProjection::Pillar => pillarize(cloud, &cfg.grid)?,
    };
    let mut ts = vox.tokens;
    let dim = cfg.model.dim;

    let mut features = vec![0.0f32; ts.len() * dim];
    features
        .par_chunks_mut(dim)
        .zip(ts.features.par_chunks(RAW_FEATURE_DIM))
        .for_each(|(out, raw)| matvec(&w.lift, dim, RAW_FEATURE_DIM, raw, out));
    ts.features = features;
    ts.dim = dim;

    add_pe_3d(&mut ts, &cfg.partition, &cfg.model);
    for (i, lw) in w.tokenizer.iter().enumerate() {
        if cfg.model.pe_per_layer && i > 0 {
            add_pe_3d(&mut ts, &cfg.partition, &cfg.model);
        }
        let pcfg = cfg.partition.with_pattern(Pattern::CYCLE[i % 4]);
        let plan = partition::build_plan(&ts, &pcfg)?;
        attention::transformer_layer(&mut ts, &plan, lw, &cfg.model);
    }
    Ok((ts, vox.dropped))
}

// --- 3D → 2D projection ----------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub behind_camera: u64,
    pub out_of_frame: u64,
}

impl DropCounts {
    fn absorb(&mut self, other: DropCounts) {
        self.behind_camera += other.behind_camera;
        self.out_of_frame += other.out_of_frame;
    }
}

/// Per-camera projection hits: (token index, pixel), in token order.
#[derive(Debug, Clone)]
pub struct CameraProjections {
    pub hits: Vec<Vec<(u32, PixelCoord)>>,
    pub drops: DropCounts,
}

/// Projects every token into every camera. In-frame, positive-depth hits
/// attach a pixel coordinate; a token may appear in multiple cameras.
/// Failures are counted per cause, never fatal.
pub fn project_tokens_3d_to_2d(lidar: &TokenSet, cams: &[CameraModel]) -> CameraProjections {
    let per_cam: Vec<(Vec<(u32, PixelCoord)>, DropCounts)> = cams
        .par_iter()
        .map(|cam| {
            let mut hits = Vec::new();
            let mut drops = DropCounts::default();
            for (i, t) in lidar.tokens.iter().enumerate() {
                match project_to_pixel(t.coord3d, cam) {
                    Ok(px) => hits.push((i as u32, px)),
                    Err(ProjectionError::BehindCamera { .. }) => drops.behind_camera += 1,
                    Err(ProjectionError::OutOfFrame(_)) => drops.out_of_frame += 1,
                }
            }
            (hits, drops)
        })
        .collect();

    let mut drops = DropCounts::default();
    let mut hits = Vec::with_capacity(cams.len());
    for (h, d) in per_cam {
        drops.absorb(d);
        hits.push(h);
    }
    CameraProjections { hits, drops }
}

// --- pixel-space fusion (3D-to-2D) ------------------------------------------

fn pixel_partition_cfg(cfg: &PipelineConfig, pattern: Pattern) -> PartitionConfig {
    PartitionConfig {
        window_shape: [cfg.pixel_window_px(), cfg.pixel_window_px(), 1.0],
        pattern,
        ..cfg.partition.clone()
    }
}

fn build_pixel_plan(
    coords: &[Vec3],
    patch_indices: &[[i64; 3]],
    cfg: &PipelineConfig,
    pattern: Pattern,
) -> Result<PartitionPlan> {
    let pcfg = pixel_partition_cfg(cfg, pattern);
    match pcfg.algorithm {
        partition::Algorithm::FlattenWindow => {
            Ok(partition::flatten_window_groups_coords(coords, &pcfg))
        }
        partition::Algorithm::DynamicSet => {
            Ok(partition::dynamic_set_groups_coords(coords, &pcfg))
        }
        partition::Algorithm::SpaceFillingCurve => {
            let half = (cfg.pixel_window_patches / 2.0).round() as i64;
            partition::curve_groups_indices(patch_indices, &pcfg, [half, half, 0])
        }
    }
}

/// Per camera, attends its image patch tokens jointly with the LiDAR
/// tokens projected onto that image, partitioned on pixel coordinates.
/// Image grids update in place; LiDAR features are written back as the
/// mean over the cameras that saw each token (fixed camera order).
pub fn fuse_in_pixel_space(
    lidar: &mut TokenSet,
    grids: &mut [ImageTokenGrid],
    proj: &CameraProjections,
    layers: &[LayerWeights],
    cfg: &PipelineConfig,
) -> Result<()> {
    let dim = cfg.model.dim;
    let stride = cfg.patch_stride_px;

    struct CamResult {
        image_features: Vec<f32>,
        lidar_updates: Vec<(u32, Vec<f32>)>,
    }

    let results: Vec<Result<CamResult>> = grids
        .par_iter()
        .zip(proj.hits.par_iter())
        .map(|(grid, hits)| {
            let n_img = grid.patch_count();
            let total = n_img + hits.len();

            let mut coords = Vec::with_capacity(total);
            let mut patch_indices = Vec::with_capacity(total);
            let mut features = vec![0.0f32; total * dim];

            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let (u, v) = grid.patch_center(r, c);
                    coords.push(Vec3::new(u, v, 0.0));
                    patch_indices.push([c as i64, r as i64, 0]);
                }
            }
            features[..n_img * dim].copy_from_slice(&grid.features);
            for (slot, &(t, px)) in hits.iter().enumerate() {
                coords.push(Vec3::new(px.u, px.v, 0.0));
                patch_indices.push([(px.u / stride) as i64, (px.v / stride) as i64, 0]);
                features[(n_img + slot) * dim..(n_img + slot + 1) * dim]
                    .copy_from_slice(lidar.feature(t as usize));
            }

            // Positions entered the stream when the tokens were born (the
            // tokenizer PE; the image stub encodes u, v); stages add no
            // fresh PE unless pe_per_layer asks for it.
            for (i, lw) in layers.iter().enumerate() {
                if cfg.model.pe_per_layer {
                    let pe_scales = match cfg.model.pe_style {
                        PeStyle::Pe3d => {
                            [grid.cols as f64 * stride, grid.rows as f64 * stride, 1.0]
                        }
                        PeStyle::WindowLocal => {
                            [cfg.pixel_window_px(), cfg.pixel_window_px(), 1.0]
                        }
                    };
                    let pe_inputs: Vec<(Vec3, [f64; 3])> =
                        coords.iter().map(|&c| (c, pe_scales)).collect();
                    add_pe(&mut features, dim, &pe_inputs, &cfg.model);
                }
                let plan = build_pixel_plan(&coords, &patch_indices, cfg, Pattern::CYCLE[i % 4])?;
                transformer_layer_features(&mut features, dim, &plan, lw, &cfg.model);
            }

            let lidar_updates = hits
                .iter()
                .enumerate()
                .map(|(slot, &(t, _))| {
                    (t, features[(n_img + slot) * dim..(n_img + slot + 1) * dim].to_vec())
                })
                .collect();
            features.truncate(n_img * dim);
            Ok(CamResult { image_features: features, lidar_updates })
        })
        .collect();

    // Deterministic write-back: sum per token in camera order, then average.
    let mut sums: Vec<Option<(Vec<f64>, u32)>> = vec![None; lidar.len()];
    for (grid, result) in grids.iter_mut().zip(results) {
        let result = result?;
        grid.features = result.image_features;
        for (t, feat) in result.lidar_updates {
            let entry = sums[t as usize].get_or_insert_with(|| (vec![0.0f64; dim], 0));
            for (s, f) in entry.0.iter_mut().zip(&feat) {
                *s += *f as f64;
            }
            entry.1 += 1;
        }
    }
    for (t, entry) in sums.into_iter().enumerate() {
        if let Some((sum, count)) = entry {
            let out = lidar.feature_mut(t);
            for (o, s) in out.iter_mut().zip(&sum) {
                *o = (*s / count as f64) as f32;
            }
        }
    }
    Ok(())
}

// --- 2D → 3D lifting ---------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LiftStats {
    pub patches_total: usize,
    pub patches_lifted: usize,
    pub lift_fraction: f64,
}

fn quantize_to_grid(p: Vec3, ts: &TokenSet) -> [i32; 3] {
    let q = |c: f64, o: f64, s: f64, n: usize| -> i32 {
        (((c - o) / s).floor() as i64).clamp(0, n as i64 - 1) as i32
    };
    [
        q(p.x, ts.origin.x, ts.cell[0], ts.dims[0]),
        q(p.y, ts.origin.y, ts.cell[1], ts.dims[1]),
        q(p.z, ts.origin.z, ts.cell[2], ts.dims[2]),
    ]
}

/// Lifts image patches to 3D.
///
/// Partial projection lifts a patch iff at least one LiDAR token projects
/// into it, at the minimum (nearest-surface) incident depth. Nearest
/// neighbor lifts every patch at the depth of the closest projected token
/// in pixel distance; cameras that saw no token lift nothing.
pub fn partial_project_2d_to_3d(
    grids: &[ImageTokenGrid],
    lidar: &TokenSet,
    cams: &[CameraModel],
    cfg: &PipelineConfig,
    proj: &CameraProjections,
) -> Result<(TokenSet, LiftStats)> {
    let dim = cfg.model.dim;
    let mut out = TokenSet {
        tokens: Vec::new(),
        features: Vec::new(),
        dim,
        level_z: lidar.level_z,
        origin: lidar.origin,
        cell: lidar.cell,
        dims: lidar.dims,
    };
    let mut stats = LiftStats::default();

    for ((grid, cam), hits) in grids.iter().zip(cams).zip(&proj.hits) {
        stats.patches_total += grid.patch_count();

        // Min incident depth per patch.
        let mut min_depth = vec![f64::INFINITY; grid.patch_count()];
        for &(_, px) in hits {
            let (r, c) = grid.patch_of(px.u, px.v);
            let slot = r * grid.cols + c;
            min_depth[slot] = min_depth[slot].min(px.depth);
        }

        let depth_for = |r: usize, c: usize| -> Option<f64> {
            match cfg.image_projection {
                ImageProjection::PartialProjection => {
                    let d = min_depth[r * grid.cols + c];
                    d.is_finite().then_some(d)
                }
                ImageProjection::NearestNeighbor => {
                    if hits.is_empty() {
                        return None;
                    }
                    let (u0, v0) = grid.patch_center(r, c);
                    let mut best = f64::INFINITY;
                    let mut depth = 0.0;
                    for &(_, px) in hits {
                        let d2 = (px.u - u0).powi(2) + (px.v - v0).powi(2);
                        if d2 < best {
                            best = d2;
                            depth = px.depth;
                        }
                    }
                    Some(depth)
                }
            }
        };

        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let Some(depth) = depth_for(r, c) else { continue };
                let (u, v) = grid.patch_center(r, c);
                let px = PixelCoord { u, v, depth };
                let coord3d = unproject_pixel(px, cam);
                stats.patches_lifted += 1;
                out.tokens.push(Token {
                    index: quantize_to_grid(coord3d, lidar),
                    coord3d,
                    pixel: Some(px),
                    modality: Modality::Image,
                    camera_id: Some(grid.camera_id),
                });
                out.features.extend_from_slice(grid.feature(r, c));
            }
        }
    }

    if cfg.image_projection == ImageProjection::PartialProjection && out.is_empty() {
        return Err(Error::NoIncidence);
    }
    stats.lift_fraction = stats.patches_lifted as f64 / stats.patches_total.max(1) as f64;
    Ok((out, stats))
}

// --- 3D-space fusion (2D-to-3D) ----------------------------------------------

fn build_3d_plan(
    coords: &[Vec3],
    indices: &[[i64; 3]],
    cell: [f64; 3],
    cfg: &PipelineConfig,
    pattern: Pattern,
) -> Result<PartitionPlan> {
    let pcfg = cfg.partition.with_pattern(pattern);
    match pcfg.algorithm {
        partition::Algorithm::FlattenWindow => {
            Ok(partition::flatten_window_groups_coords(coords, &pcfg))
        }
        partition::Algorithm::DynamicSet => {
            Ok(partition::dynamic_set_groups_coords(coords, &pcfg))
        }
        partition::Algorithm::SpaceFillingCurve => {
            let half = [
                (pcfg.window_shape[0] / cell[0] / 2.0).round() as i64,
                (pcfg.window_shape[1] / cell[1] / 2.0).round() as i64,
                0,
            ];
            partition::curve_groups_indices(indices, &pcfg, half)
        }
    }
}

/// Mixed-modality attention in 3D: LiDAR tokens and lifted image tokens
/// share one partition on 3D coordinates; both modalities update.
pub fn fuse_in_3d_space(
    lidar: &mut TokenSet,
    lifted: &mut TokenSet,
    layers: &[LayerWeights],
    cfg: &PipelineConfig,
) -> Result<()> {
    let dim = cfg.model.dim;
    let n_lidar = lidar.len();

    let mut coords: Vec<Vec3> = lidar.coords();
    coords.extend(lifted.tokens.iter().map(|t| t.coord3d));
    let indices: Vec<[i64; 3]> = lidar
        .tokens
        .iter()
        .chain(lifted.tokens.iter())
        .map(|t| [t.index[0] as i64, t.index[1] as i64, t.index[2] as i64])
        .collect();

    let mut features = Vec::with_capacity(coords.len() * dim);
    features.extend_from_slice(&lidar.features);
    features.extend_from_slice(&lifted.features);

    for (i, lw) in layers.iter().enumerate() {
        if cfg.model.pe_per_layer {
            let pe_scales = match cfg.model.pe_style {
                PeStyle::Pe3d => [cfg.model.pe_scale; 3],
                PeStyle::WindowLocal => cfg.partition.window_shape,
            };
            let pe_inputs: Vec<(Vec3, [f64; 3])> =
                coords.iter().map(|&c| (c, pe_scales)).collect();
            add_pe(&mut features, dim, &pe_inputs, &cfg.model);
        }
        let plan = build_3d_plan(&coords, &indices, lidar.cell, cfg, Pattern::CYCLE[i % 4])?;
        transformer_layer_features(&mut features, dim, &plan, lw, &cfg.model);
    }

    lidar.features.copy_from_slice(&features[..n_lidar * dim]);
    lifted.features.copy_from_slice(&features[n_lidar * dim..]);
    Ok(())
}

// --- densification -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub nx: usize,
    pub ny: usize,
    pub dim: usize,
    /// `(ix · ny + iy) · dim` layout; empty cells are exact zeros.
    pub data: Vec<f32>,
}

impl BevGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> &[f32] {
        let i = (ix * self.ny + iy) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn nonzero_cells(&self) -> usize {
        (0..self.nx * self.ny)
            .filter(|i| self.data[i * self.dim..(i + 1) * self.dim].iter().any(|&v| v != 0.0))
            .count()
    }
}

/// Scatters the sparse BEV tokens into a dense zero-padded grid.
pub fn densify_bev(lidar: &TokenSet) -> Result<BevGrid> {
    if lidar.level_z != 1 {
        return Err(Error::LevelMismatch { level_z: lidar.level_z });
    }
    let (nx, ny) = (lidar.dims[0], lidar.dims[1]);
    let dim = lidar.dim;
    let mut grid = BevGrid { nx, ny, dim, data: vec![0.0; nx * ny * dim] };
    for (i, t) in lidar.tokens.iter().enumerate() {
        let (ix, iy) = (t.index[0] as usize, t.index[1] as usize);
        let at = (ix * ny + iy) * dim;
        grid.data[at..at + dim].copy_from_slice(lidar.feature(i));
    }
    Ok(grid)
}

/// BEV dump format: u32 LE nx, ny, dim then nx·ny·dim f32 LE values.
pub fn write_bev(path: &Path, bev: &BevGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + bev.data.len() * 4);
    for v in [bev.nx as u32, bev.ny as u32, bev.dim as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &bev.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_bev(path: &Path) -> Result<BevGrid> {
    let bytes = std::fs::read(path)?;
    let malformed = |what: &str| Error::MalformedFile {
        path: path.display().to_string(),
        what: what.into(),
    };
    if bytes.len() < 12 {
        return Err(malformed("header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (nx, ny, dim) = (u(0), u(4), u(8));
    if bytes.len() != 12 + nx * ny * dim * 4 {
        return Err(malformed("payload length"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(BevGrid { nx, ny, dim, data })
}

// --- whole pipeline ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageStats {
    pub name: String,
    pub level_z: u32,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct PipelineStats {
    pub label: Option<String>,
    pub stages: Vec<StageStats>,
    pub dropped_points: usize,
    pub drops: DropCounts,
    pub lift: Option<LiftStats>,
    pub final_tokens: usize,
    pub bev_nonzero: usize,
}

impl PipelineStats {
    /// level_z of the main stages (pools excluded), in execution order.
    pub fn stage_levels(&self) -> Vec<u32> {
        self.stages
            .iter()
            .filter(|s| !s.name.starts_with("pool"))
            .map(|s| s.level_z)
            .collect()
    }

    /// A copy with timings zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> PipelineStats {
        let mut s = self.clone();
        for stage in &mut s.stages {
            stage.wall_ns = 0;
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stats: PipelineStats,
    pub bev: BevGrid,
    pub lidar: TokenSet,
    pub grids: Vec<ImageTokenGrid>,
}

enum StageKind {
    PixelFusion,
    SpaceFusion,
}

/// Executes the full path: tokenizer, fusion stages in the configured
/// order with attentive z pooling between stages, then densification.
pub fn run_pipeline(
    cloud: &PointCloud,
    cams: &[CameraModel],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let weights = PipelineWeights::init(cfg, cams.len());
    run_pipeline_with_weights(cloud, cams, cfg, &weights)
}

pub fn run_pipeline_with_weights(
    cloud: &PointCloud,
    cams: &[CameraModel],
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut stats = PipelineStats::default();

    let t = Instant::now();
    let (mut lidar, dropped_points) = tokenize_lidar(cloud, cfg, weights)?;
    stats.dropped_points = dropped_points;
    stats.stages.push(StageStats {
        name: "tokenize".into(),
        level_z: lidar.level_z,
        tokens_in: lidar.len(),
        tokens_out: lidar.len(),
        wall_ns: t.elapsed().as_nanos() as u64,
    });

    let mut grids = image_stub_grids(cams, cfg, &weights.image_stub);

    let stage_plan: Vec<(StageKind, &[LayerWeights], u32)> = match cfg.fusion_order {
        FusionOrder::ThreeDToTwoDFirst => vec![
            (StageKind::PixelFusion, &weights.pixel_stage[..], cfg.z_schedule[1]),
            (StageKind::SpaceFusion, &weights.space_stage[..], cfg.z_schedule[2]),
        ],
        FusionOrder::TwoDToThreeDFirst => vec![
            (StageKind::SpaceFusion, &weights.space_stage[..], cfg.z_schedule[1]),
            (StageKind::PixelFusion, &weights.pixel_stage[..], cfg.z_schedule[2]),
        ],
        FusionOrder::ThreeDToTwoDOnly => {
            vec![(StageKind::PixelFusion, &weights.pixel_stage[..], cfg.z_schedule[1])]
        }
        FusionOrder::TwoDToThreeDOnly => {
            vec![(StageKind::SpaceFusion, &weights.space_stage[..], cfg.z_schedule[1])]
        }
    };

    let mut pool_idx = 0usize;
    let mut pool_to = |lidar: &mut TokenSet, target: u32, stats: &mut PipelineStats| -> Result<()> {
        // Pillar tokenization has no z axis to pool.
        if cfg.lidar_projection == LidarProjection::Pillar || lidar.level_z == target {
            return Ok(());
        }
        let factor = lidar.level_z / target;
        let t = Instant::now();
        let score = &weights.pool_scores[pool_idx.min(weights.pool_scores.len() - 1)];
        let before = lidar.len();
        *lidar = attention::attentive_pool_z(lidar, factor, score)?;
        stats.stages.push(StageStats {
            name: format!("pool_z_{}_to_{}", target * factor, target),
            level_z: target,
            tokens_in: before,
            tokens_out: lidar.len(),
            wall_ns: t.elapsed().as_nanos() as u64,
        });
        pool_idx += 1;
        Ok(())
    };

    for (kind, layers, level) in stage_plan {
        pool_to(&mut lidar, level, &mut stats)?;
        let t = Instant::now();
        let n_in = lidar.len();
        let name = match kind {
            StageKind::PixelFusion => {
                let proj = project_tokens_3d_to_2d(&lidar, cams);
                stats.drops.absorb(proj.drops);
                fuse_in_pixel_space(&mut lidar, &mut grids, &proj, layers, cfg)?;
                "fuse_3d_to_2d"
            }
            StageKind::SpaceFusion => {
                let proj = project_tokens_3d_to_2d(&lidar, cams);
                stats.drops.absorb(proj.drops);
                let (mut lifted, lift_stats) =
                    partial_project_2d_to_3d(&grids, &lidar, cams, cfg, &proj)?;
                stats.lift = Some(lift_stats);
                fuse_in_3d_space(&mut lidar, &mut lifted, layers, cfg)?;
                "fuse_2d_to_3d"
            }
        };
        stats.stages.push(StageStats {
            name: name.into(),
            level_z: lidar.level_z,
            tokens_in: n_in,
            tokens_out: lidar.len(),
            wall_ns: t.elapsed().as_nanos() as u64,
        });
    }

    pool_to(&mut lidar, *cfg.z_schedule.last().unwrap(), &mut stats)?;
    let t = Instant::now();
    let bev = densify_bev(&lidar)?;
    stats.stages.push(StageStats {
        name: "densify".into(),
        level_z: lidar.level_z,
        tokens_in: lidar.len(),
        tokens_out: lidar.len(),
        wall_ns: t.elapsed().as_nanos() as u64,
    });

    stats.final_tokens = lidar.len();
    stats.bev_nonzero = bev.nonzero_cells();
    Ok(PipelineOutput { stats, bev, lidar, grids })
}
