//! Images and text to embedded input sequences, plus the synthetic corpora.

pub mod dataset;
pub mod image;
pub mod repr;
pub mod synthetic;
pub mod text;

pub use dataset::{read_dataset, write_dataset};
pub use image::{patchify, unpatchify, PatchGrid, RawImage};
pub use repr::{
    build_image_repr, build_text_repr, concat_pair, pad_text_repr, EmbeddingVars, InputRepr, Modality, ReprKind,
};
pub use synthetic::{gen_synthetic, Sample, SyntheticTask};
pub use text::{tokenize, TextTokens, Vocab, NUM_SPECIALS, PAD, T_CLS, T_MASK, T_SEP};
