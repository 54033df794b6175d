//! File formats: palette masks, frames, raw tensors and probability volumes.

pub mod frames;
pub mod mask;
pub mod tensor;
pub mod volume;

pub use frames::{list_frame_files, read_frame, read_frames, write_frame};
pub use mask::{read_mask, write_mask, PALETTE};
pub use tensor::{read_tensor, write_tensor, RawTensor, TensorData};
pub use volume::{read_volume, write_volume};
