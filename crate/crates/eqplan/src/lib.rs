//! eqplan: a term rewrite system that builds e-graphs under a node budget.
//!
//! Two engines share the same e-graph core. The baseline sweeps every
//! rewrite rule in file order until the budget is exhausted or nothing
//! changes. The planner treats rule application as a sequential decision
//! problem and runs a parallel Monte Carlo tree search over action
//! sequences, so the budget is spent on rules that pay off at extraction
//! time instead of on whatever happens to match first.

pub mod bench;
pub mod egraph;
pub mod env;
pub mod extract;
pub mod lang;
pub mod planner;
pub mod rewrite;

mod error;
pub use error::Error;

/// Splittable seed derivation: one 64-bit key plus a stream index gives an
/// independent 64-bit key. SplitMix64 finalizer; frozen, do not change, the
/// replay format depends on it.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
