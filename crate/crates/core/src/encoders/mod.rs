//! Patch tokenization, the trainable encoder, and frozen stub embedders.

mod grid;
mod model;
mod stub;

pub use grid::{extract_patches, token_grid, TokenGrid, TokenGridSpec};
pub use model::{
    backward, encode, encode_segments, forward, forward_segments, init_audio_from_image,
    patch_embed, resample_positional, segment_rows, Block, Embedding, EncoderConfig,
    EncoderParams, TensorMut, TensorRef, Trace,
};
pub use stub::{key_hash, StubEmbedder};
