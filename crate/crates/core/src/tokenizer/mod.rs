//! Image and report tokenizers.
//!
//! Images are cut into non-overlapping square patches and each patch is
//! replaced by the index of its nearest codebook vector; reports are split
//! on whitespace over a closed word list.

mod text;
mod vq;

pub use text::{text_decode, text_encode, ReportVocab};
pub use vq::{fit_codebook, vq_decode, vq_encode, Codebook, ToyImage};
