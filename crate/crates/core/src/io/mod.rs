//! File formats: COLMAP sparse models, PLY scenes with a medium sidecar,
//! checkpoints, PNG/PFM images and white balancing.

pub mod checkpoint;
pub mod colmap;
pub mod images;
pub mod ply;
pub mod sidecar;

pub use checkpoint::{load_checkpoint, load_scene, save_checkpoint, save_scene, Checkpoint, NamedCamera};
pub use colmap::{read_colmap, write_colmap_binary, write_colmap_text, ColmapModel, PosedView};
pub use images::{decode_png, encode_png, read_pfm, read_png, white_balance, write_pfm, write_png};
