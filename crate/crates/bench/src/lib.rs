//! Shared fixtures for the pipeline benchmarks.

use dtcmr_core::phantom::{generate_phantom, simulate_dwi, NoiseProfile, PhantomConfig};
use dtcmr_core::protocol::AcquisitionProtocol;
use dtcmr_core::stack::DwiStack;

/// One default-geometry subject with a noisy default-protocol acquisition.
pub fn bench_subject(seed: u64) -> DwiStack {
    let config = PhantomConfig::default();
    let phantom = generate_phantom(&config).expect("default phantom");
    let noise = NoiseProfile {
        snr: 20.0,
        seed,
        ..NoiseProfile::default()
    };
    simulate_dwi(&phantom, &AcquisitionProtocol::default(), &noise).expect("simulation")
}
