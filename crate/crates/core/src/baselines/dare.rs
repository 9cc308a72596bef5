//! DARE preprocessing: drop each task-vector entry with probability `p` and
//! rescale the survivors by `1 / (1 - p)`.
//!
//! The random stream is ChaCha20 seeded with
//! `SHA-256("emr-dare-v1" || seed as u64 LE || task label bytes)`. One `u64`
//! is drawn per element in canonical flatten order (tensors by name,
//! row-major); its top 53 bits give `u` in `[0, 1)` and the element is dropped
//! iff `u < p`. Keying the stream by label rather than position keeps the
//! result independent of model order.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::check_drop_prob;
use crate::error::Result;
use crate::task_vector::{Array, TaskVector, TaskVectorSet};

/// Identifier recorded in output metadata. Changing the stream definition
/// requires a new name.
pub const DARE_RNG_NAME: &str = "chacha20-sha256-v1";

const DOMAIN: &[u8] = b"emr-dare-v1";

fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn unit(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn dare_preprocess(tau: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    check_drop_prob(p)?;
    let mut rng = stream(seed, tau.label());
    let scale = 1.0 / (1.0 - p);
    let tensors = tau
        .tensors()
        .iter()
        .map(|(name, a)| {
            let data = a
                .data
                .iter()
                .map(|&v| if unit(&mut rng) < p { 0.0 } else { v * scale })
                .collect();
            (name.clone(), Array { shape: a.shape.clone(), data })
        })
        .collect();
    Ok(TaskVector::new(tau.label(), tensors))
}

/// Applies [`dare_preprocess`] to every task vector of the set.
pub fn dare_preprocess_set(set: &TaskVectorSet, p: f64, seed: u64) -> Result<TaskVectorSet> {
    check_drop_prob(p)?;
    let vectors = set
        .vectors()
        .par_iter()
        .map(|tau| dare_preprocess(tau, p, seed))
        .collect::<Result<Vec<_>>>()?;
    set.with_vectors(vectors)
}
