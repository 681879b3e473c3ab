//! Timing sweeps and CSV reports for the ablation axes.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{PipelineConfig, run_pipeline};
use crate::partition::{self, Algorithm, Curve, PartitionConfig, Pattern};
use crate::scene::Scene;
use crate::voxel::{Point, PointCloud, VoxelGridConfig, voxelize};

/// Spec floor for timing repeats; medians over fewer runs are too noisy.
pub const MIN_REPEATS: usize = 5;
pub const WARMUP_RUNS: usize = 2;

/// Median wall time of `f` over `repeats` runs after `warmup` discarded runs.
pub fn median_time_ns(mut f: impl FnMut(), repeats: usize, warmup: usize) -> u64 {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<u64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Uniform random cloud filling the grid range; the standard synthetic
/// input for partition benchmarks and locality sweeps.
pub fn uniform_cloud(n: usize, seed: u64, grid: &VoxelGridConfig) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = grid.extent();
    let points = (0..n)
        .map(|_| Point {
            x: (grid.range_min.x + rng.gen::<f64>() * ext.x) as f32,
            y: (grid.range_min.y + rng.gen::<f64>() * ext.y) as f32,
            z: (grid.range_min.z + rng.gen::<f64>() * ext.z) as f32,
            intensity: rng.gen::<f32>(),
        })
        .collect();
    PointCloud { points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub stage: String,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub median_ns: u64,
    pub repeats: usize,
    /// Mean intra-group distance where the entry produced a plan.
    pub locality: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label", "stage", "tokens_in", "tokens_out", "median_ns", "repeats", "locality",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.stage.clone(),
                r.tokens_in.to_string(),
                r.tokens_out.to_string(),
                r.median_ns.to_string(),
                r.repeats.to_string(),
                r.locality.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<BenchReport> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let malformed = || Error::MalformedFile {
                path: path.display().to_string(),
                what: format!("record {rec:?}"),
            };
            rows.push(BenchRow {
                label: rec.get(0).ok_or_else(malformed)?.to_string(),
                stage: rec.get(1).ok_or_else(malformed)?.to_string(),
                tokens_in: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(malformed)?,
                tokens_out: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(malformed)?,
                median_ns: rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(malformed)?,
                repeats: rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(malformed)?,
                locality: rec.get(6).and_then(|s| s.parse().ok()),
            });
        }
        Ok(BenchReport { rows })
    }
}

/// One benchmark entry of a sweep document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepEntry {
    /// Times plan construction for one partition algorithm on the scene's
    /// voxel tokens and scores its locality.
    Partition {
        label: String,
        algorithm: Algorithm,
        #[serde(default)]
        curve: Curve,
        #[serde(default)]
        group_size: Option<usize>,
        #[serde(default)]
        pattern: Option<Pattern>,
    },
    /// Runs the full pipeline on the scene; one row per stage plus a total.
    Pipeline { label: String, config: Box<PipelineConfig> },
    /// Mean locality across freshly generated uniform scenes (one per seed).
    Locality {
        label: String,
        algorithm: Algorithm,
        #[serde(default)]
        curve: Curve,
        #[serde(default)]
        group_size: Option<usize>,
        seeds: Vec<u64>,
        points_per_scene: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub repeats: Option<usize>,
    pub entries: Vec<SweepEntry>,
}

pub fn load_sweep(path: &Path) -> Result<SweepSpec> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn partition_cfg(
    algorithm: Algorithm,
    curve: Curve,
    group_size: Option<usize>,
    pattern: Option<Pattern>,
) -> PartitionConfig {
    PartitionConfig {
        algorithm,
        curve,
        group_size: group_size.unwrap_or_else(|| PartitionConfig::default().group_size),
        pattern: pattern.unwrap_or_default(),
        ..Default::default()
    }
}

/// Executes a sweep against one scene. Entries run sequentially to avoid
/// timing interference; `parallel` may parallelize the scene generation
/// inside Locality entries only.
pub fn run_sweep(
    scene: &Scene,
    spec: &SweepSpec,
    repeats_override: Option<usize>,
    parallel: bool,
) -> Result<BenchReport> {
    let repeats = repeats_override
        .or(spec.repeats)
        .unwrap_or(MIN_REPEATS)
        .max(MIN_REPEATS);
    let grid = VoxelGridConfig::default();
    let mut report = BenchReport::default();

    // Tokenize once; the partition phase is what gets timed.
    let tokens = voxelize(&scene.cloud, &grid).ok().map(|v| v.tokens);

    for entry in &spec.entries {
        match entry {
            SweepEntry::Partition { label, algorithm, curve, group_size, pattern } => {
                let tokens = tokens
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("scene has no tokens in range".into()))?;
                let pcfg = partition_cfg(*algorithm, *curve, *group_size, *pattern);
                let mut plan = None;
                let median_ns = median_time_ns(
                    || plan = Some(partition::build_plan(tokens, &pcfg)),
                    repeats,
                    WARMUP_RUNS,
                );
                let plan = plan.unwrap()?;
                let locality = partition::mean_intra_group_distance(tokens, &plan);
                report.rows.push(BenchRow {
                    label: label.clone(),
                    stage: "partition".into(),
                    tokens_in: tokens.len(),
                    tokens_out: plan.valid_len(),
                    median_ns,
                    repeats,
                    locality: Some(locality),
                });
            }
            SweepEntry::Pipeline { label, config } => {
                config.validate()?;
                // Pipelines are heavyweight; stage timings come from the
                // run itself, the median covers the end-to-end wall time.
                let mut last = None;
                let median_ns = median_time_ns(
                    || last = Some(run_pipeline(&scene.cloud, &scene.cameras, config)),
                    repeats,
                    WARMUP_RUNS.min(1),
                );
                let out = last.unwrap()?;
                for s in &out.stats.stages {
                    report.rows.push(BenchRow {
                        label: label.clone(),
                        stage: s.name.clone(),
                        tokens_in: s.tokens_in,
                        tokens_out: s.tokens_out,
                        median_ns: s.wall_ns,
                        repeats: 1,
                        locality: None,
                    });
                }
                report.rows.push(BenchRow {
                    label: label.clone(),
                    stage: "total".into(),
                    tokens_in: scene.cloud.len(),
                    tokens_out: out.stats.final_tokens,
                    median_ns,
                    repeats,
                    locality: None,
                });
            }
            SweepEntry::Locality { label, algorithm, curve, group_size, seeds, points_per_scene } => {
                let pcfg = partition_cfg(*algorithm, *curve, *group_size, None);
                let score_one = |&seed: &u64| -> Result<f64> {
                    let cloud = uniform_cloud(*points_per_scene, seed, &grid);
                    let tokens = voxelize(&cloud, &grid)?.tokens;
                    let plan = partition::build_plan(&tokens, &pcfg)?;
                    Ok(partition::mean_intra_group_distance(&tokens, &plan))
                };
                let scores: Vec<f64> = if parallel {
                    seeds.par_iter().map(score_one).collect::<Result<_>>()?
                } else {
                    seeds.iter().map(score_one).collect::<Result<_>>()?
                };
                let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
                report.rows.push(BenchRow {
                    label: label.clone(),
                    stage: "locality".into(),
                    tokens_in: *points_per_scene,
                    tokens_out: seeds.len(),
                    median_ns: 0,
                    repeats: seeds.len(),
                    locality: Some(mean),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_is_order_insensitive_and_warm() {
        let mut calls = 0;
        let t = median_time_ns(|| calls += 1, 5, 2);
        assert_eq!(calls, 7);
        assert!(t < 1_000_000, "no-op median should be far under 1 ms");
    }

    #[test]
    fn report_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    label: "flatten".into(),
                    stage: "partition".into(),
                    tokens_in: 1000,
                    tokens_out: 1000,
                    median_ns: 12345,
                    repeats: 5,
                    locality: Some(2.5),
                },
                BenchRow {
                    label: "pipe".into(),
                    stage: "total".into(),
                    tokens_in: 10,
                    tokens_out: 5,
                    median_ns: 99,
                    repeats: 5,
                    locality: None,
                },
            ],
        };
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("label,stage,tokens_in,tokens_out,median_ns,repeats,locality"));
        assert_eq!(BenchReport::read_csv(&path).unwrap(), report);
    }

    #[test]
    fn sweep_spec_parses() {
        let text = r#"{
            "repeats": 5,
            "entries": [
                {"kind": "partition", "label": "flatten", "algorithm": "FlattenWindow"},
                {"kind": "partition", "label": "morton", "algorithm": "SpaceFillingCurve", "curve": "Morton"},
                {"kind": "locality", "label": "dyn", "algorithm": "DynamicSet",
                 "seeds": [1, 2], "points_per_scene": 1000}
            ]
        }"#;
        let spec: SweepSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.entries.len(), 3);
    }
}
