//! Procedural dataset generation, partial-view protocol and cloud file I/O.

mod dataset;
mod io;
mod partial;
mod shapes;

pub use dataset::{
    generate, generate_sample, load_dataset, make_dataset, read_manifest, split_of, write_dataset, Dataset, DatasetConfig,
    ManifestEntry, Split, MANIFEST_FILE,
};
pub use io::{decode_ply, decode_xyz, encode_ply, encode_xyz, read_cloud, write_cloud, CloudFormat};
pub use partial::{draw_viewpoint, make_partial, teacher_b_input, Sample, Setting};
pub use shapes::{make_shape, Part, Primitive, ShapeKind, ShapeSpec};
