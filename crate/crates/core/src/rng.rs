use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed.
///
/// Each consumer draws from its own stream so that, for example, the mining
/// pools of two training runs sharing a seed stay identical even when their
/// losses differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Init = 1,
    Pool = 2,
    Mining = 3,
    References = 4,
    Benchmark = 5,
    Probe = 6,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
