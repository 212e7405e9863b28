//! Shared fixtures for the criterion benchmarks.

use sst_core::io::{generate_mask, generate_scene, SceneKind, SyntheticSceneSpec};
use sst_core::{CodedMask, SpectralCube, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
        (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

pub fn scene(h: usize, w: usize, c: usize, seed: u64) -> SpectralCube<f32> {
    generate_scene(&SyntheticSceneSpec::new(SceneKind::GaussianBlobs, h, w, c, seed)).expect("valid dims")
}

pub fn mask(h: usize, w: usize, seed: u64) -> CodedMask<f32> {
    generate_mask(h, w, 0.5, seed).expect("valid density")
}
