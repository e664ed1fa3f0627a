//! On-disk formats: named-tensor containers and PPM images.

pub mod binary;
pub mod ppm;

pub use binary::{decode_tensors, encode_tensors, load_tensors, save_tensors, Decoder, Encoder, TENSOR_MAGIC};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
