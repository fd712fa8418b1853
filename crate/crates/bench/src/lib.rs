//! Shared fixtures for the criterion benchmarks.

use mcint_core::{load_topology, AccessPattern, KernelSpec, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four cores, private 32 KiB L1s, a shared 2 MiB L2.
pub fn quad_core() -> Topology {
    load_topology(
        r#"{"cores": [0, 1, 2, 3], "line_size": 64, "caches": [
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [0]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [1]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [2]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [3]},
            {"level": 2, "capacity": 2097152, "associativity": 16, "shared_by": [0, 1, 2, 3]}
        ], "dram_nodes": 1}"#,
    )
    .expect("fixture topology is valid")
}

/// Execution times around `base` ns with uniform jitter of ±10%.
pub fn durations(n: usize, base: u64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = base / 10;
    (0..n)
        .map(|_| base - spread + rng.random_range(0..=2 * spread))
        .collect()
}

pub fn kernel(pattern: AccessPattern, working_set: u64) -> KernelSpec {
    KernelSpec {
        target: "bench".into(),
        pattern,
        working_set,
        stride: 64,
        inner_ops: 4096,
        seed: 1,
    }
}
