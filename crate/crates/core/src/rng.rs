//! Deterministic random substreams.
//!
//! Every stochastic unit (trial, patient, optimizer multistart, MCMC chain)
//! gets its own generator derived from the master seed and a fixed path of
//! integers, so results never depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags used as the second path element inside a trial.
pub mod purpose {
    pub const PATIENTS: u64 = 1;
    pub const NLME: u64 = 2;
    pub const LOGISTIC_MCMC: u64 = 3;
    pub const HIERARCHICAL_MCMC: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const CRM_MCMC: u64 = 6;
    pub const CALIBRATION: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of indices into a 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6A09_E667_F3BC_C908);
    for (depth, &p) in path.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(p.wrapping_add((depth as u64 + 1) << 56)));
    }
    h
}

pub fn substream(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
