//! Fixtures shared by the benchmarks.

use patchlab_core::{ImageTensor, LinearProbe};

/// Deterministic smooth test image.
pub fn gradient_image(height: usize, width: usize) -> ImageTensor {
    ImageTensor::from_fn(height, width, 3, |y, x, c| {
        ((y * 3 + x * 5 + c * 7) % 256) as f64 / 255.0
    })
    .expect("valid dimensions")
}

/// Ten-category probe whose weights vary by pixel and category.
pub fn probe(height: usize, width: usize) -> LinearProbe {
    let k = 10;
    let n = height * width * 3;
    let weights = (0..k)
        .map(|j| (0..n).map(|i| (((i * 31 + j * 17) % 97) as f64 - 48.0) / 4800.0).collect())
        .collect();
    LinearProbe::new(height, width, 3, weights, vec![0.0; k]).expect("consistent shapes")
}
