//! Frame archives, gapless window extraction, normalization, dihedral
//! augmentation, batching and a synthetic archive generator.

mod archive;
mod augment;
mod batch;
mod normalize;
pub mod synth;
mod windows;

pub use archive::{FrameArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION, FRAME_STEP_SECONDS};
pub(crate) use archive::{
    read_exact, read_f32s, read_f64, read_name, read_u32, read_u64, read_u8, u32_of,
    write_f32s, write_name,
};
pub use augment::AugmentOp;
pub use batch::{epoch_plan, epoch_rng, Batch, BatchIterator};
pub use normalize::{denormalize, normalize, ChannelSpec};
pub use synth::{synthesize, SynthConfig};
pub use windows::{
    extract_windows, inputs_at, starts_in_runs, window_at, window_starts, SampleWindow, WindowLayout,
};
