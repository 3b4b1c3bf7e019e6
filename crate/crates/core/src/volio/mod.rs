//! Volume and checkpoint I/O plus synthetic data generation: the RVOL1 file
//! pair format, byte-stable checkpoints, and seeded cardiac phantom cases
//! with known diffeomorphic ground-truth flows.

mod checkpoint;
mod format;
mod phantom;
mod synth;

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointMeta};
pub use format::{read_labels, read_volume, write_labels, write_volume, Volume};
pub use phantom::generate_phantom;
pub use synth::{generate_gt_pair, load_case, save_case, SynthCase};
