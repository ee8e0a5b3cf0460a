//! Datasets, environment maps, checkpoints, images and reports on disk.

pub mod checkpoint;
pub mod color;
pub mod dataset;
pub mod images;
pub mod report;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, LoadOptions};
pub use color::{linear_to_srgb, srgb_to_linear};
pub use dataset::{load_scene, load_transforms, write_scene, Frame, SceneDataset, Split};
pub use images::{load_envmap, read_pfm, read_png, save_envmap, write_pfm, write_png};
pub use report::{read_csv, read_json, write_csv, write_json, ReportRow, CSV_HEADER};
