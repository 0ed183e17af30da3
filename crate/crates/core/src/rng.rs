//! Counter-based random substreams.
//!
//! Every random quantity in the laboratory is drawn from a ChaCha8 stream
//! whose key and stream number are pure functions of the master seed and
//! the identifiers of the object being simulated (environment index, cell
//! coordinates, trajectory index). Results therefore never depend on the
//! order in which workers pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a substream. Distinct tags never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    DriftCell = 0x01,
    SigmaCell = 0x02,
    Path = 0x03,
    Crossing = 0x04,
    Coupling = 0x05,
    Bridge = 0x06,
    Analysis = 0x07,
    Auxiliary = 0x08,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C908u64;
    for &w in words {
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

fn keyed(master_seed: u64, tag: StreamTag, env_index: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    let base = mix(&[master_seed, tag as u64, env_index]);
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_le_bytes());
    }
    seed
}

/// Substream identified by `(master_seed, tag, env_index, id)`.
pub fn substream(master_seed: u64, tag: StreamTag, env_index: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(keyed(master_seed, tag, env_index));
    rng.set_stream(splitmix64(id));
    rng
}

/// Substream for one lattice cell of one environment sample.
pub fn cell_stream(master_seed: u64, tag: StreamTag, env_index: u64, cell: &[i64]) -> ChaCha8Rng {
    let mut words = [0u64; 4];
    words[0] = cell.len() as u64;
    for (w, &c) in words[1..].iter_mut().zip(cell) {
        *w = c as u64;
    }
    substream(master_seed, tag, env_index, mix(&words))
}

/// Identifies the random streams of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct StreamId {
    pub master_seed: u64,
    pub env_index: u64,
    pub trajectory_index: u64,
}

impl StreamId {
    pub fn new(master_seed: u64, env_index: u64, trajectory_index: u64) -> Self {
        Self {
            master_seed,
            env_index,
            trajectory_index,
        }
    }

    pub fn rng(&self, tag: StreamTag) -> ChaCha8Rng {
        substream(self.master_seed, tag, self.env_index, self.trajectory_index)
    }
}
