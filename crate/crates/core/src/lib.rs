//! Geometry of next-token prediction under the unconstrained features model.
//!
//! Builds soft-label datasets from text or generators, predicts the logit,
//! word and context embedding geometry from the support pattern alone, trains
//! the log-bilinear model and a fixed-embedding linear decoder, and compares
//! the two.

pub mod cli;
pub mod corpus;
pub mod linalg;
pub mod linear_decoder;
pub mod metrics;
pub mod subspace;
pub mod theory;
pub mod ufm;

/// Per-module seed streams expanded from one master seed.
///
/// `derive_seed(master, stream)` runs SplitMix64 over `master + stream·γ`.
/// Stream numbers in use:
///
/// | stream | consumer |
/// |---|---|
/// | 1 | dataset generators |
/// | 2 | UFM initialization |
/// | 3 | fixed context embeddings of the linear track |
/// | 4 | linear decoder initialization |
/// | 5 | per-context minibatch sampling |
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const UFM_INIT: u64 = 2;
    pub const LINEAR_EMBED: u64 = 3;
    pub const LINEAR_INIT: u64 = 4;
    pub const SAMPLING: u64 = 5;

    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn derive_seed(master: u64, stream: u64) -> u64 {
        let mut z = master.wrapping_add(stream.wrapping_mul(GAMMA)).wrapping_add(GAMMA);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

}
