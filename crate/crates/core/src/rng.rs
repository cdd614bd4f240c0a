use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for sub-task `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used when a sub-task needs a plain `u64` seed.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream.wrapping_add(0x9e37_79b9)).next_u64()
}
