//! Frozen style and text encoders and the learned style-token reduction.

mod style;
mod text;

pub use style::{
    encode_style_set, global_token, reduce_tokens, LocalTokens, Reduction, StyleEncoder, VisualEmbedding,
    EMBED_DIM, GRID, NUM_PATCHES, PATCH, STYLE_ENCODER_SEED, TOKENS_IN, TOKENS_OUT,
};
pub use text::{tokenize, TextEmbedding, TextEncoder, MAX_TOKENS, TEXT_ENCODER_SEED, VOCAB};
