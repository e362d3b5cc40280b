//! Checkpoint files and architecture conversion.

pub mod checkpoint;
pub mod convert;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, ManifestEntry};
pub use convert::{convert_checkpoint, convert_dense_to_finedeep, reassemble_dense};
