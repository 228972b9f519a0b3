//! File formats, synthetic data, splitting, augmentation, training,
//! inference and the built-in self-test.

pub mod augment;
pub mod checkpoint;
pub mod image_io;
pub mod infer;
pub mod selftest;
pub mod split;
pub mod synth;
pub mod train;
pub mod volume_io;
