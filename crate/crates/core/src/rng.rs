//! Named, counter-addressed random streams derived from one root seed.
//!
//! A stream is identified by `(name, index)`. The name selects a ChaCha key,
//! the index selects the ChaCha stream under that key, so any stream can be
//! recreated without replaying the others.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub const INIT: &str = "init";
pub const NOISE: &str = "noise";
pub const DATA: &str = "data";
pub const RESTART: &str = "restart";
pub const RESTART_NOISE: &str = "restart-noise";
pub const PARAMS: &str = "params";

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stream `index` of the family `name` under `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(name);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Packs `(major, minor)` into a stream index; `minor` must fit in 24 bits.
pub fn pair_index(major: u64, minor: u64) -> u64 {
    assert!(minor < (1 << 24), "stream minor index {minor} exceeds 24 bits");
    (major << 24) | minor
}

/// Root seed plus the per-family counters that make a run resumable.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Streams {
    pub seed: u64,
    pub counters: BTreeMap<String, u64>,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counters: BTreeMap::new(),
        }
    }

    /// Hands out the next stream of a family and advances its counter.
    pub fn next(&mut self, name: &str) -> ChaCha8Rng {
        let c = self.counters.entry(name.to_string()).or_insert(0);
        let rng = stream(self.seed, name, *c);
        *c += 1;
        rng
    }

    pub fn get(&self, name: &str, index: u64) -> ChaCha8Rng {
        stream(self.seed, name, index)
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }
}

/// One independent Gaussian stream per batch row.
#[derive(Clone)]
pub struct RowNoise {
    rows: Vec<ChaCha8Rng>,
}

impl RowNoise {
    pub fn new(rows: Vec<ChaCha8Rng>) -> Self {
        Self { rows }
    }

    /// Rows `base..base+n` of family `name`.
    pub fn family(seed: u64, name: &str, indices: impl IntoIterator<Item = u64>) -> Self {
        Self {
            rows: indices.into_iter().map(|i| stream(seed, name, i)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// `rows × row_len` standard normal draws scaled by `std`, row-major.
    pub fn sample<T: Scalar>(&mut self, row_len: usize, std: f64) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows.len() * row_len);
        for rng in &mut self.rows {
            for _ in 0..row_len {
                let e: f64 = StandardNormal.sample(rng);
                out.push(T::from_f64_lossy(e * std));
            }
        }
        out
    }

    /// Keeps only the listed rows, in order.
    pub fn retain_rows(&mut self, keep: &[usize]) {
        let mut old: Vec<Option<ChaCha8Rng>> = std::mem::take(&mut self.rows).into_iter().map(Some).collect();
        self.rows = keep.iter().map(|&i| old[i].take().expect("row kept once")).collect();
    }

    pub fn push(&mut self, rng: ChaCha8Rng) {
        self.rows.push(rng);
    }

    pub fn remove(&mut self, i: usize) -> ChaCha8Rng {
        self.rows.remove(i)
    }

    pub fn into_rows(self) -> Vec<ChaCha8Rng> {
        self.rows
    }
}
