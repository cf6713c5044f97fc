//! Near-lossless grayscale image compression with light encoding and deep
//! decoding.
//!
//! The [`codec`] guarantees `|x - y| <= tau` per pixel. The [`network`]
//! refines decoded images under a truncated activation, keeping every pixel
//! within `tau` of the decoded value and so within `2 tau` of the original.

pub mod autodiff;
pub mod codec;
pub mod image_io;
pub mod network;
pub mod eval;
pub mod gradcheck_suite;
pub mod training;
