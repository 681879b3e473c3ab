//! Sparse camera-LiDAR fusion data path at desk scale.
//!
//! The crate covers the pieces a sparse fusion transformer is made of and
//! the benchmarks that compare the design choices between them:
//!
//! - [`geometry`]: pinhole projection and the world/camera/pixel frames.
//! - [`voxel`]: point-cloud tokenization into voxel or pillar tokens.
//! - [`partition`]: window quantization, the x/x-shift/y/y-shift sort
//!   scheme, and three neighbor grouping algorithms (Flatten Window,
//!   Dynamic Set, space-filling curves) plus a locality metric.
//! - [`attention`]: grouped windowed attention, PreNorm/PostNorm residual
//!   blocks, SwiGLU, sinusoidal positional encodings, attentive z pooling.
//! - [`fusion`]: the assembled pipeline — LiDAR tokenizer, 3D-to-2D fusion
//!   in pixel space, 2D-to-3D fusion via partial projection, and BEV
//!   densification — with every ablated choice exposed as configuration.
//! - [`scene`]: deterministic synthetic scenes and a camera ring.
//! - [`bench`] / [`plot`]: timing sweeps, CSV reports, and SVG plots.
//!
//! The `examples/` directory holds one runnable program per capability;
//! the `sparsefuse` binary wraps the same entry points as subcommands.

pub mod attention;
pub mod bench;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod partition;
pub mod plot;
pub mod scene;
pub mod token;
pub mod voxel;

pub use error::{Error, Result};
pub use geometry::{CameraModel, PixelCoord, Vec3};
pub use token::{Modality, Token, TokenSet};

/// Environment variable that overrides configured seeds, for CI
/// reproducibility across config files.
pub const SEED_ENV_VAR: &str = "SPARSEFUSE_SEED";

/// Reads the seed override, if any.
pub fn seed_override() -> Option<u64> {
    std::env::var(SEED_ENV_VAR).ok().and_then(|s| s.parse().ok())
}
