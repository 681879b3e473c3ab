//! The fused-space element every stage operates on.

use serde::{Deserialize, Serialize};

use crate::geometry::{PixelCoord, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Lidar,
    Image,
}

/// One attention element: a voxel/pillar feature or an image patch feature.
///
/// LiDAR tokens always carry `coord3d` (the voxel center) and `index`
/// (the voxel grid index). Image tokens always carry `pixel` and
/// `camera_id`; they gain a `coord3d` only after partial projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    /// Voxel grid index, non-negative, relative to the grid origin.
    pub index: [i32; 3],
    /// World-frame anchor in meters (voxel center or unprojected patch center).
    pub coord3d: Vec3,
    pub pixel: Option<PixelCoord>,
    pub modality: Modality,
    pub camera_id: Option<u32>,
}

/// A set of tokens with a shared flat feature matrix (`len × dim`)
/// plus the grid geometry the indices refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
    /// Row-major `len × dim` feature storage.
    pub features: Vec<f32>,
    pub dim: usize,
    /// Number of z cells at this stage of the pipeline.
    pub level_z: u32,
    /// World position of grid index (0, 0, 0)'s lower corner.
    pub origin: Vec3,
    /// Cell edge lengths in meters at the current level.
    pub cell: [f64; 3],
    /// Grid extents in cells at the current level.
    pub dims: [usize; 3],
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// 3D coordinates of every token, in token order.
    pub fn coords(&self) -> Vec<Vec3> {
        self.tokens.iter().map(|t| t.coord3d).collect()
    }
}
