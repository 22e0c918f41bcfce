//! Dual-teacher semi-supervised segmentation on synthetic 2D scenes.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] — a small reverse-mode differentiation engine over dense
//!   `f64` arrays, with a finite-difference gradient checker. Every loss in
//!   this crate is built from its op set, so its correctness underwrites
//!   everything above it.
//! * [`synth`] — seeded synthetic scene generation, corpus/split assembly,
//!   copy-paste patch mixing and box-prompt synthesis, plus binary
//!   serialization of scenes.
//! * [`models`] — the frozen prompt-conditioned teacher surrogate, the
//!   compact student (transformer encoder + cross-attention adapter +
//!   convolutional decode head), the EMA teacher, and checkpoint I/O.
//! * [`distill`] — feature-space distillation losses between student and
//!   teacher layers.
//! * [`uapl`] — uncertainty-aware pseudo-label fusion of the two teachers'
//!   predictions and the pseudo-supervision loss.
//! * [`objectives`] — ramp schedules, the supervised loss, the stage
//!   objectives, and the SGD update rule.
//! * [`train`] — the two-stage training driver, inference, run directories,
//!   and training checkpoints.
//! * [`metrics`] — overlap and surface metrics, calibration, uncertainty
//!   ranking (AUROC, risk–coverage), and report emission.
//! * [`pipeline`] — one-config orchestration of the whole workflow and
//!   the run-directory layout the command-line binary exposes.

pub mod autodiff;
pub mod distill;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod uapl;

use std::sync::Once;

static THREAD_INIT: Once = Once::new();

/// Installs the global worker pool, honoring the `UNCOL_THREADS` environment
/// variable as an upper bound on parallelism. Safe to call more than once;
/// only the first call has any effect.
pub fn init_parallelism() {
    THREAD_INIT.call_once(|| {
        if let Ok(v) = std::env::var("UNCOL_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: a pool may already exist in embedders.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// FNV-1a over a byte slice; used for stable content hashes (checkpoint
/// manifests, frozen-parameter audits). Not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a role/index pair.
/// Used everywhere a reproducible sub-stream is needed (per-scene seeds,
/// per-iteration batch draws, per-class prompt jitter) so that adding or
/// removing one consumer never shifts another consumer's stream.
pub fn derive_seed(base: u64, role: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the three words, mixed pairwise.
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(base ^ mix(role)).wrapping_add(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vector() {
        // Standard FNV-1a test vector: empty input hashes to the offset basis.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        // "a" vector from the FNV reference code.
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn derived_seeds_disjoint_across_roles_and_indices() {
        let mut seen = std::collections::HashSet::new();
        for role in 0..8u64 {
            for idx in 0..1000u64 {
                assert!(seen.insert(derive_seed(42, role, idx)));
            }
        }
    }
}
