//! Fixtures shared by the benchmarks.

use cascomp::autodiff::ParamSet;
use cascomp::backbone::{Backbone, BackboneConfig};
use cascomp::geometry::PointCloud;
use cascomp::rng::SplitMix64;
use cascomp::shapegen::{generate_sample, DatasetConfig, Sample};

/// Uniform cloud in the cube `[-1, 1]^3`.
pub fn cube_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = SplitMix64::new(seed);
    PointCloud::new((0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect())
        .expect("n > 0")
}

/// One sample of the default dataset (N = 256).
pub fn desk_sample(id: u64) -> Sample {
    generate_sample(&DatasetConfig::default(), id).expect("default dataset config is valid")
}

/// Desk-sized backbone with freshly initialized parameters.
pub fn desk_backbone() -> (Backbone, ParamSet) {
    let bb = Backbone::new(BackboneConfig::default(), "main").expect("default config is valid");
    let params = bb.init(0, "main");
    (bb, params)
}
