//! Compares the three partition algorithms on one synthetic scene:
//! locality scores and partition-phase latency.
//!
//!     cargo run --example partition_compare

use sparsefuse::bench::{median_time_ns, uniform_cloud};
use sparsefuse::partition::{self, Algorithm, Curve, PartitionConfig};
use sparsefuse::voxel::{VoxelGridConfig, voxelize};

fn main() {
    let grid = VoxelGridConfig::default();
    let cloud = uniform_cloud(120_000, 7, &grid);
    let tokens = voxelize(&cloud, &grid).expect("cloud fills the grid").tokens;
    println!("{} points -> {} voxel tokens", cloud.len(), tokens.len());

    let algos = [
        ("FlattenWindow", Algorithm::FlattenWindow, Curve::Morton),
        ("SpaceFillingCurve(Morton)", Algorithm::SpaceFillingCurve, Curve::Morton),
        ("SpaceFillingCurve(Hilbert)", Algorithm::SpaceFillingCurve, Curve::Hilbert),
        ("DynamicSet", Algorithm::DynamicSet, Curve::Morton),
    ];
    println!("{:<28} {:>12} {:>10} {:>10}", "algorithm", "median ms", "groups", "locality");
    for (name, algorithm, curve) in algos {
        let cfg = PartitionConfig { algorithm, curve, ..Default::default() };
        let mut plan = None;
        let ns = median_time_ns(|| plan = Some(partition::build_plan(&tokens, &cfg)), 5, 2);
        let plan = plan.unwrap().expect("plan");
        let locality = partition::mean_intra_group_distance(&tokens, &plan);
        println!(
            "{:<28} {:>12.3} {:>10} {:>10.3}",
            name,
            ns as f64 / 1e6,
            plan.num_groups(),
            locality
        );
    }
}
