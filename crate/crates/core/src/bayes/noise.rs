use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grad::DenseMatrix;

/// Random quantity a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantity {
    Weight,
    Lambda,
    Latent,
    Dropout,
}

impl Quantity {
    fn code(self) -> u64 {
        match self {
            Quantity::Weight => 1,
            Quantity::Lambda => 2,
            Quantity::Latent => 3,
            Quantity::Dropout => 4,
        }
    }
}

/// Layer index and quantity identifying one random tensor per draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DrawSite {
    pub layer: usize,
    pub quantity: Quantity,
}

impl DrawSite {
    pub fn new(layer: usize, quantity: Quantity) -> Self {
        Self { layer, quantity }
    }
}

/// Sequence id used for draws shared across a whole minibatch.
pub const SHARED_SEQUENCE: u64 = u64::MAX;

/// Full key of one ε tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub step: u64,
    pub site: DrawSite,
    pub sequence: u64,
    pub draw: u32,
}

impl NoiseKey {
    pub fn shared(step: u64, site: DrawSite, draw: u32) -> Self {
        Self {
            step,
            site,
            sequence: SHARED_SEQUENCE,
            draw,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-keyed source of standard-normal draws.
///
/// Every tensor is a pure function of `(seed, key)`, so results do not depend on
/// the order or thread in which they are requested. Each request is counted per
/// `(step, site)` so callers can assert how many tensors a step consumed.
#[derive(Debug)]
pub struct NoiseStream {
    seed: u64,
    counters: Mutex<BTreeMap<(u64, DrawSite), u64>>,
}

impl Clone for NoiseStream {
    fn clone(&self) -> Self {
        Self {
            seed: self.seed,
            counters: Mutex::new(self.counters.lock().expect("noise counters").clone()),
        }
    }
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counters: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for `key`; does not touch the counters.
    pub fn rng(&self, key: NoiseKey) -> ChaCha8Rng {
        let mut h = splitmix(self.seed);
        for part in [
            key.step,
            key.site.layer as u64,
            key.site.quantity.code(),
            key.sequence,
            key.draw as u64,
        ] {
            h = splitmix(h ^ part);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// One `rows × cols` tensor of independent N(0, 1) draws.
    pub fn standard_normal(&self, key: NoiseKey, rows: usize, cols: usize) -> DenseMatrix {
        self.record(key);
        let mut rng = self.rng(key);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Counts a tensor drawn through [`NoiseStream::rng`] directly.
    pub fn record(&self, key: NoiseKey) {
        let mut counters = self.counters.lock().expect("noise counters");
        *counters.entry((key.step, key.site)).or_insert(0) += 1;
    }

    pub fn draws(&self, step: u64, site: DrawSite) -> u64 {
        self.counters
            .lock()
            .expect("noise counters")
            .get(&(step, site))
            .copied()
            .unwrap_or(0)
    }

    pub fn draws_at_step(&self, step: u64) -> BTreeMap<DrawSite, u64> {
        self.counters
            .lock()
            .expect("noise counters")
            .iter()
            .filter(|((s, _), _)| *s == step)
            .map(|((_, site), n)| (*site, *n))
            .collect()
    }

    pub fn total_draws(&self) -> u64 {
        self.counters.lock().expect("noise counters").values().sum()
    }

    pub fn reset_counters(&self) {
        self.counters.lock().expect("noise counters").clear();
    }
}
