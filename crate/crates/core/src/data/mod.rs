//! Dataset plumbing: raster and label formats, scene I/O, tiling, the
//! synthetic generator and dataset statistics.

pub mod labels;
pub mod pnm;
pub mod scene;
pub mod stats;
pub mod synth;
pub mod tile;

pub use labels::{format_annotations, format_detections, parse_annotations, parse_detections};
pub use pnm::{HeightMap, RgbImage};
pub use scene::{
    format_manifest, parse_manifest, read_dataset, read_manifest, read_scene, read_scene_with, write_dataset,
    write_scene, ManifestEntry, Modalities, SceneSample,
};
pub use stats::{dataset_stats, DatasetStats};
pub use synth::{format_synth_log, synth_generate, synth_scene, SynthConfig, SynthRecord};
pub use tile::{clip_to_window, tile_origins, tile_scene, TileSpec};
