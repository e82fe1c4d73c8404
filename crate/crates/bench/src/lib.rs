//! Fixtures shared by the criterion benches.

use fedcac_core::data::generate_blobs;
use fedcac_core::mask::{self, CriticalMask};
use fedcac_core::nn::{Activation, MlpSpec, ParameterSet};
use fedcac_core::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn mlp(widths: &[usize]) -> (MlpSpec, ParameterSet) {
    let spec = MlpSpec::new(widths.to_vec(), Activation::Relu, false).expect("valid widths");
    let model = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
    (spec, model)
}

pub fn blobs(classes: usize, dims: usize, per_class: usize) -> Dataset {
    generate_blobs(classes, dims, per_class, 3.0, 0).expect("valid blob parameters")
}

/// Models perturbed deterministically around `base`.
pub fn population(base: &ParameterSet, n: usize) -> Vec<ParameterSet> {
    (0..n)
        .map(|i| base.map(|v| v + (i as f64 + 1.0) * 1e-3 * v.signum()))
        .collect()
}

pub fn mask_for(start: &ParameterSet, end: &ParameterSet, tau: f64) -> CriticalMask {
    let sens = mask::compute_sensitivity(start, end).expect("same structure");
    mask::select_critical(&sens, tau).expect("tau in range")
}
