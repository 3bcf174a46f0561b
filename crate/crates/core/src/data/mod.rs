//! Synthetic scenes, masks and the on-disk dataset format.

pub mod compose;
pub mod dataset;
pub mod mask;
pub mod raster;
pub mod scene;

pub use compose::{
    composite_overlay, overlap_fraction, sample_offset, Offset, MAX_OFFSET_DRAWS, MIN_OVERLAP,
};
pub use dataset::{
    assemble_dataset, generate_dataset, read_dataset, read_scene, write_dataset, write_scene, Dataset,
    DatasetManifest, SampleRecord, SampleRef, SceneFile, Split,
};
pub use mask::{BinaryMask, BoundingBox};
pub use raster::RgbImage;
pub use scene::{generate_group_scene, generate_sample, generate_scene, GenConfig, Label, PairSample, Scene};
