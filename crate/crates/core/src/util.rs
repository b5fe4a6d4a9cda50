//! Small shared helpers: seeded RNG construction and float formatting.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Build the engine-wide deterministic RNG from a 64-bit seed.
///
/// Every random draw in the engine flows through a `ChaCha8Rng` constructed
/// here, so a (seed, stream) pair fully determines a draw sequence.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for an independent named sub-stream of a seed.
///
/// Streams let one logical seed drive several independent consumers (weight
/// init, shuffling, dropout, ...) without their draw sequences interfering.
pub fn seeded_stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw from U(-bound, bound) as f64.
pub fn uniform_sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    use rand::Rng;
    rng.random::<f64>() * 2.0 * bound - bound
}

/// Shortest-roundtrip decimal formatting for metrics output.
///
/// Rust's `{}` for floats already prints the shortest string that parses
/// back to the same value; this wrapper just pins that choice by name.
pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}
