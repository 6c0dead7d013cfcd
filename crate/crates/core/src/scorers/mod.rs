//! The scorer abstraction and every concrete metric: the trainable
//! dual-encoder reference-free scorer, reference-based n-gram metrics, and
//! the out-of-process adapter for external pretrained scorers.

pub mod adapter;
pub mod dual_encoder;
pub mod reference;

pub use adapter::{ExternalScorer, PluginSpec};
pub use dual_encoder::{DualEncoder, DualEncoderConfig};
pub use reference::{bleu, cider, meteor_simple, rouge_l, CiderOutput, ReferenceSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("empty caption")]
    EmptyCaption,
    #[error("scorer timed out after {0} ms")]
    ScorerTimeout(u64),
    #[error("malformed plugin response: {0}")]
    ProtocolError(String),
    #[error("scorer failed on {item}: {message}")]
    Failed { item: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Image-side input to a scorer: an id plus the precomputed embedding.
#[derive(Debug, Clone, Copy)]
pub struct ScoreImage<'a> {
    pub image_id: &'a str,
    pub embedding: &'a [f32],
}

/// `(image, caption) -> real`. Implementations are pure given fixed
/// parameters and safe for concurrent scoring after load.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError>;
    /// Declared (min, max) of the raw score.
    fn score_range(&self) -> (f64, f64);
}

/// Closure-backed scorer, mostly for tests and oracles.
pub struct FnScorer<F: Fn(ScoreImage<'_>, &str) -> f64 + Send + Sync> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(ScoreImage<'_>, &str) -> f64 + Send + Sync> Scorer for FnScorer<F> {
    fn id(&self) -> &str {
        &self.name
    }
    fn score(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError> {
        Ok((self.f)(image, caption))
    }
    fn score_range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Deterministic pseudo-uniform scorer over [0, 1); a keyed hash of
/// (seed, image_id, caption). Useful as a null model for benchmark baselines.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn id(&self) -> &str {
        "random"
    }
    fn score(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image.image_id.as_bytes());
        h.update([0u8]);
        h.update(caption.as_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]]);
        Ok(x as f64 / u64::MAX as f64)
    }
    fn score_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scorer_is_pure_and_in_range() {
        let s = RandomScorer { seed: 7 };
        let img = ScoreImage { image_id: "x", embedding: &[] };
        let first = s.score(img, "a dog").unwrap();
        for _ in 0..1000 {
            let v = s.score(img, "a dog").unwrap();
            assert_eq!(v, first);
            assert!((0.0..1.0).contains(&v));
        }
        assert_ne!(first, s.score(img, "a cat").unwrap());
    }
}
