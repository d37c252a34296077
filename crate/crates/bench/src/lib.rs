//! Shared inputs for the benchmarks, built once per bench group.

use dxsep::dataset::generate_subjects;
use dxsep::{PhantomConfig, Subject, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`; good enough for timing.
pub fn ramp_tensor(shape: &[usize]) -> Tensor<f32> {
    let mut state = 0x9e37_79b9_u32;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        (state as f32 / u32::MAX as f32) * 2.0 - 1.0
    })
}

/// One default-sized subject (64x64, 8 slices, 5 echoes).
pub fn subject() -> Subject {
    generate_subjects(1, 5, &PhantomConfig::default()).expect("default phantom").remove(0)
}

/// Default phantom settings with a single slice, for per-slice timings.
pub fn single_slice_config() -> PhantomConfig {
    PhantomConfig { slices: 1, ..PhantomConfig::default() }
}
