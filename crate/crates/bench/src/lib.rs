//! Shared inputs for the benchmarks.

use brewclip_core::data::{generate_dataset, Dataset, DatasetStyle, GenConfig};
use brewclip_core::encoders::{transcribe_dataset, AsrConfig};
use brewclip_core::numerics::{Stream, Tensor};

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], Stream::new(seed).normal_vec(rows * cols, 1.0)).expect("positive extents")
}

/// A transcribed scripted dataset of `n_images` images with two captions each.
pub fn scripted(n_images: usize) -> Dataset {
    let mut d = generate_dataset(&GenConfig {
        style: DatasetStyle::Scripted,
        n_images,
        captions_per_image: 2,
        seed: 1,
    })
    .expect("valid config");
    transcribe_dataset(&mut d, &AsrConfig::default(), 1).expect("clean ASR");
    d
}
