//! Thin command-line front end over the library: generate scenes, build
//! partitions, run pipelines, sweep benchmarks, and emit SVG plots.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sparsefuse::bench::{self, BenchReport};
use sparsefuse::fusion::{self, load_pipeline_config};
use sparsefuse::partition::{self, Algorithm, Curve, PartitionConfig, Pattern};
use sparsefuse::scene::{self, SceneSpec};
use sparsefuse::voxel::{VoxelGridConfig, voxelize};
use sparsefuse::{Error, Result, seed_override};

#[derive(Parser)]
#[command(name = "sparsefuse", about = "Sparse camera-LiDAR fusion benchmarks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Flatten,
    Dynset,
    Curve,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Algorithm {
        match a {
            AlgoArg::Flatten => Algorithm::FlattenWindow,
            AlgoArg::Dynset => Algorithm::DynamicSet,
            AlgoArg::Curve => Algorithm::SpaceFillingCurve,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveArg {
    Morton,
    Hilbert,
}

impl From<CurveArg> for Curve {
    fn from(c: CurveArg) -> Curve {
        match c {
            CurveArg::Morton => Curve::Morton,
            CurveArg::Hilbert => Curve::Hilbert,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    X,
    Xs,
    Y,
    Ys,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Pattern {
        match p {
            PatternArg::X => Pattern::X,
            PatternArg::Xs => Pattern::XShift,
            PatternArg::Y => Pattern::Y,
            PatternArg::Ys => Pattern::YShift,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    ScatterGroups,
    LatencyBars,
    Locality,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory from a scene spec.
    Generate {
        /// Scene spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (points.bin, cameras.json, scene.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a partition plan for a scene and report its locality score.
    Partition {
        /// Scene directory.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long, value_enum, default_value = "morton")]
        curve: CurveArg,
        #[arg(long, default_value_t = 80)]
        group_size: usize,
        #[arg(long, value_enum, default_value = "x")]
        pattern: PatternArg,
        /// Plan CSV output (token_index, group_id, valid, x, y, z).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full fusion pipeline; writes stats.json and bev.bin.
    Run {
        #[arg(long)]
        scene: PathBuf,
        /// Pipeline config JSON mirroring the PipelineConfig fields.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Timing sweep over configs; writes a CSV report.
    Bench {
        #[arg(long)]
        scene: PathBuf,
        /// Sweep spec JSON.
        #[arg(long)]
        sweep: PathBuf,
        /// Timing repeats per entry (minimum 5).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        /// Parallelize scene generation inside locality entries.
        #[arg(long)]
        parallel: bool,
    },
    /// Render a CSV report as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out } => {
            let mut spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&spec)?)?;
            if let Some(seed) = seed_override() {
                spec.seed = seed;
            }
            let scene = scene::generate_scene(&spec)?;
            scene::write_scene_dir(&out, &scene)?;
            println!(
                "wrote scene: {} points, {} cameras -> {}",
                scene.cloud.len(),
                scene.cameras.len(),
                out.display()
            );
        }
        Command::Partition { scene, algo, curve, group_size, pattern, out } => {
            let scene = scene::read_scene_dir(&scene)?;
            let tokens = voxelize(&scene.cloud, &VoxelGridConfig::default())?.tokens;
            let pcfg = PartitionConfig {
                algorithm: algo.into(),
                curve: curve.into(),
                group_size,
                pattern: pattern.into(),
                ..Default::default()
            };
            pcfg.validate()?;
            let plan = partition::build_plan(&tokens, &pcfg)?;
            let coords = tokens.coords();
            partition::write_plan_csv(&out, &plan, &coords)?;
            let locality = partition::mean_intra_group_distance(&tokens, &plan);
            println!(
                "tokens={} groups={} locality_score={locality:.6}",
                tokens.len(),
                plan.num_groups()
            );
        }
        Command::Run { scene, config, out } => {
            let scene = scene::read_scene_dir(&scene)?;
            let mut cfg = load_pipeline_config(&config)?;
            if let Some(seed) = seed_override() {
                cfg.model.seed = seed;
            }
            let result = fusion::run_pipeline(&scene.cloud, &scene.cameras, &cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("stats.json"),
                serde_json::to_string_pretty(&result.stats)?,
            )?;
            fusion::write_bev(&out.join("bev.bin"), &result.bev)?;
            println!(
                "pipeline done: {} final tokens, {} nonzero BEV cells -> {}",
                result.stats.final_tokens,
                result.stats.bev_nonzero,
                out.display()
            );
        }
        Command::Bench { scene, sweep, repeats, out, parallel } => {
            let scene = scene::read_scene_dir(&scene)?;
            let mut spec = bench::load_sweep(&sweep)?;
            if let Some(seed) = seed_override() {
                spec.entries.iter_mut().for_each(|e| {
                    if let bench::SweepEntry::Pipeline { config, .. } = e {
                        config.model.seed = seed;
                    }
                });
            }
            let report = bench::run_sweep(&scene, &spec, Some(repeats), parallel)?;
            report.write_csv(&out)?;
            println!("wrote {} bench rows -> {}", report.rows.len(), out.display());
        }
        Command::Plot { input, kind, out } => {
            let svg = match kind {
                PlotKind::ScatterGroups => {
                    let rows = partition::read_plan_csv(&input)?;
                    if rows.is_empty() {
                        return Err(Error::MalformedFile {
                            path: input.display().to_string(),
                            what: "empty plan".into(),
                        });
                    }
                    sparsefuse::plot::scatter_groups_svg(&rows, "partition groups")
                }
                PlotKind::LatencyBars => {
                    let report = BenchReport::read_csv(&input)?;
                    sparsefuse::plot::latency_bars_svg(&report.rows, "median latency per entry")
                }
                PlotKind::Locality => {
                    let report = BenchReport::read_csv(&input)?;
                    sparsefuse::plot::locality_bars_svg(&report.rows, "locality per entry")
                }
            };
            std::fs::write(&out, svg)?;
            println!("wrote plot -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
