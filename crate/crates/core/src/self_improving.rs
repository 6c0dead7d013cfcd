//! Scorer repair: mine hard negatives from a reward-trained captioner's own
//! degenerate outputs, pair each with a ground-truth caption, and retrain the
//! dual-encoder scorer contrastively so it separates them.

use crate::captioner::{greedy_decode, CaptionerError, CaptionerModel};
use crate::corpus::{ImageRecord, Vocabulary};
use crate::scorers::dual_encoder::{ContrastiveItem, DualEncoder, DualEncoderError, TrainOpts};
use crate::scorers::{ScoreImage, Scorer};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelfImprovingError {
    #[error("decode failed for image {image_id}: {source}")]
    Decode {
        image_id: String,
        #[source]
        source: CaptionerError,
    },
    #[error("no pairs to train on")]
    NoPairs,
    #[error(transparent)]
    Encoder(#[from] DualEncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

/// One mined (positive, hard negative) caption pair for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub image_id: String,
    pub positive: String,
    pub negative: String,
    pub source_checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrainConfig {
    pub temperature: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// hard-negative weight; 0 disables the mined negatives entirely
    pub negative_weight: f32,
    pub lr: f32,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            temperature: 0.07,
            batch_size: 64,
            epochs: 5,
            negative_weight: 1.0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairBuild {
    pub pairs: Vec<ContrastivePair>,
    /// pairs discarded because the generation equaled the chosen positive
    pub dropped_identical: usize,
}

/// Pairs every train image's greedy checkpoint generation (the negative) with
/// one randomly chosen ground-truth caption (the positive). Pairs whose
/// negative equals the positive are dropped and counted.
pub fn build_pairs(
    images: &[ImageRecord],
    checkpoint: &CaptionerModel,
    checkpoint_id: &str,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<PairBuild, SelfImprovingError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(images.len());
    let mut dropped = 0usize;
    for rec in images {
        let pooled = rec.pooled_embedding();
        checkpoint.check_image(&pooled).map_err(|source| SelfImprovingError::Decode {
            image_id: rec.image_id.clone(),
            source,
        })?;
        let decoded = greedy_decode(checkpoint, &pooled);
        let negative = vocab.decode(&decoded.tokens);
        // draw the positive even if the pair ends up dropped, so the stream
        // of random choices (and every later pair) is stable
        let positive = rec.captions[rng.gen_range(0..rec.captions.len())].clone();
        if positive == negative {
            dropped += 1;
            continue;
        }
        pairs.push(ContrastivePair {
            image_id: rec.image_id.clone(),
            positive,
            negative,
            source_checkpoint: checkpoint_id.to_string(),
        });
    }
    Ok(PairBuild { pairs, dropped_identical: dropped })
}

/// Retrains a copy of the encoder on the mined pairs; the input encoder is
/// untouched. Returns the new encoder and per-epoch mean losses.
pub fn contrastive_retrain(
    encoder: &DualEncoder,
    images: &BTreeMap<String, Vec<f32>>,
    pairs: &[ContrastivePair],
    config: &RetrainConfig,
) -> Result<(DualEncoder, Vec<f32>), SelfImprovingError> {
    if pairs.is_empty() {
        return Err(SelfImprovingError::NoPairs);
    }
    let items: Vec<ContrastiveItem> = pairs
        .iter()
        .filter_map(|p| {
            images.get(&p.image_id).map(|emb| ContrastiveItem {
                image: emb.clone(),
                positive: p.positive.clone(),
                negative: if config.negative_weight > 0.0 { Some(p.negative.clone()) } else { None },
            })
        })
        .collect();
    if items.is_empty() {
        return Err(SelfImprovingError::NoPairs);
    }
    let opts = TrainOpts {
        temperature: config.temperature,
        negative_weight: config.negative_weight,
        batch_size: config.batch_size,
        epochs: config.epochs,
        lr: config.lr,
        seed: config.seed,
    };
    let mut updated = encoder.clone();
    let losses = updated.train_contrastive(&items, &opts)?;
    Ok((updated, losses))
}

/// Fraction of pairs where the scorer ranks the positive above the negative;
/// exact ties count one half.
pub fn pair_accuracy(
    scorer: &dyn Scorer,
    images: &BTreeMap<String, Vec<f32>>,
    pairs: &[ContrastivePair],
) -> Result<f64, crate::scorers::ScorerError> {
    assert!(!pairs.is_empty(), "pair_accuracy needs at least one pair");
    let mut credit = 0.0;
    let mut n = 0usize;
    for p in pairs {
        let Some(emb) = images.get(&p.image_id) else { continue };
        let img = ScoreImage { image_id: &p.image_id, embedding: emb };
        let sp = scorer.score(img, &p.positive)?;
        let img = ScoreImage { image_id: &p.image_id, embedding: emb };
        let sn = scorer.score(img, &p.negative)?;
        if sp > sn {
            credit += 1.0;
        } else if sp == sn {
            credit += 0.5;
        }
        n += 1;
    }
    Ok(credit / n.max(1) as f64)
}

/// Writes pairs as JSONL, one per line.
pub fn write_pairs(path: &Path, pairs: &[ContrastivePair]) -> Result<(), SelfImprovingError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a JSONL pairs file.
pub fn read_pairs(path: &Path) -> Result<Vec<ContrastivePair>, SelfImprovingError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SelfImprovingError::from))
        .collect()
}

/// Convenience map from image id to pooled embedding.
pub fn pooled_embeddings(images: &[ImageRecord]) -> BTreeMap<String, Vec<f32>> {
    images.iter().map(|r| (r.image_id.clone(), r.pooled_embedding())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::CaptionerConfig;
    use crate::scorers::dual_encoder::DualEncoderConfig;
    use crate::scorers::FnScorer;

    fn toy_images(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord {
                image_id: format!("img{i:03}"),
                embedding: (0..6).map(|j| ((i * 6 + j) as f32 * 0.29).sin()).collect(),
                n_regions: 1,
                captions: vec![
                    format!("a dog number {i} runs in the park"),
                    format!("the dog {i} chases a ball"),
                ],
            })
            .collect()
    }

    fn toy_vocab(images: &[ImageRecord]) -> Vocabulary {
        let caps: Vec<String> = images.iter().flat_map(|r| r.captions.clone()).collect();
        Vocabulary::build(&caps, 1).unwrap()
    }

    fn toy_checkpoint(vocab: &Vocabulary) -> CaptionerModel {
        let cfg = CaptionerConfig {
            vocab_size: vocab.size(),
            img_dim: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
        };
        CaptionerModel::new(cfg, vocab.hash(), 11)
    }

    #[test]
    fn pair_counts_and_determinism() {
        let images = toy_images(10);
        let vocab = toy_vocab(&images);
        let ckpt = toy_checkpoint(&vocab);
        let a = build_pairs(&images, &ckpt, "rl_epoch_003", &vocab, 9).unwrap();
        let b = build_pairs(&images, &ckpt, "rl_epoch_003", &vocab, 9).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs.len() + a.dropped_identical, 10);
        // 10 pairs -> 20 descriptions
        assert_eq!(2 * a.pairs.len(), 20 - 2 * a.dropped_identical);
        for p in &a.pairs {
            assert_ne!(p.positive, p.negative);
            assert_eq!(p.source_checkpoint, "rl_epoch_003");
            let rec = images.iter().find(|r| r.image_id == p.image_id).unwrap();
            assert!(rec.captions.contains(&p.positive));
        }
        let c = build_pairs(&images, &ckpt, "rl_epoch_003", &vocab, 10).unwrap();
        assert!(a.pairs != c.pairs || a.pairs.iter().zip(&c.pairs).all(|(x, y)| x == y));
    }

    /// A "memorizing" fixture: every greedy decode equals a ground-truth
    /// caption, so every pair collapses and is dropped.
    #[test]
    fn identical_generation_pairs_are_dropped() {
        let images = vec![ImageRecord {
            image_id: "img000".into(),
            embedding: vec![0.1; 6],
            n_regions: 1,
            captions: vec!["a dog".into()],
        }];
        let vocab = toy_vocab(&images);
        let ckpt = toy_checkpoint(&vocab);
        let pooled = images[0].pooled_embedding();
        let generated = vocab.decode(&greedy_decode(&ckpt, &pooled).tokens);
        let memorized = vec![ImageRecord { captions: vec![generated], ..images[0].clone() }];
        let out = build_pairs(&memorized, &ckpt, "pt", &vocab, 1).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.dropped_identical, 1);
    }

    #[test]
    fn pair_accuracy_oracle_and_ties() {
        let images = toy_images(4);
        let vocab = toy_vocab(&images);
        let ckpt = toy_checkpoint(&vocab);
        let built = build_pairs(&images, &ckpt, "rl", &vocab, 3).unwrap();
        assert!(!built.pairs.is_empty());
        let embeddings = pooled_embeddings(&images);

        let positives: std::collections::BTreeSet<String> =
            built.pairs.iter().map(|p| p.positive.clone()).collect();
        let oracle = FnScorer {
            name: "oracle".into(),
            f: move |_: ScoreImage<'_>, c: &str| if positives.contains(c) { 1.0 } else { 0.0 },
        };
        assert_eq!(pair_accuracy(&oracle, &embeddings, &built.pairs).unwrap(), 1.0);

        let constant = FnScorer { name: "const".into(), f: |_: ScoreImage<'_>, _: &str| 0.3 };
        assert_eq!(pair_accuracy(&constant, &embeddings, &built.pairs).unwrap(), 0.5);
    }

    /// Linearly separable fixture: positives and negatives use disjoint word
    /// sets, and the image embedding is informative about the positive's set.
    fn separable_fixture() -> (Vec<ImageRecord>, Vec<ContrastivePair>, Vocabulary) {
        let good = ["calm", "bright", "meadow", "river", "garden", "harbor"];
        let bad = ["loop", "loop loop", "glitch", "noise", "static", "jam jam"];
        let mut images = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..24 {
            let mut emb = vec![0.0f32; 6];
            emb[i % 6] = 1.0;
            emb[(i + 3) % 6] = 0.4;
            let positive = format!("a {} {} scene", good[i % 6], good[(i + 1) % 6]);
            let negative = format!("{} {} {} {}", bad[i % 6], bad[(i + 2) % 6], bad[i % 6], bad[i % 6]);
            images.push(ImageRecord {
                image_id: format!("img{i:03}"),
                embedding: emb,
                n_regions: 1,
                captions: vec![positive.clone()],
            });
            pairs.push(ContrastivePair {
                image_id: format!("img{i:03}"),
                positive,
                negative,
                source_checkpoint: "fixture".into(),
            });
        }
        let caps: Vec<String> = pairs.iter().flat_map(|p| vec![p.positive.clone(), p.negative.clone()]).collect();
        let vocab = Vocabulary::build(&caps, 1).unwrap();
        (images, pairs, vocab)
    }

    #[test]
    fn retraining_separates_the_separable_fixture() {
        let (images, pairs, vocab) = separable_fixture();
        let embeddings = pooled_embeddings(&images);
        let cfg = DualEncoderConfig { img_dim: 6, embed_dim: 8, text_dim: 8, text_hidden: 16, scale_w: 2.5 };
        let encoder = DualEncoder::new("clipscore-lite", cfg, vocab, 2);

        let config = RetrainConfig { epochs: 60, batch_size: 8, lr: 5e-3, ..RetrainConfig::default() };
        let (updated, losses) = contrastive_retrain(&encoder, &embeddings, &pairs, &config).unwrap();
        assert!(losses.first().unwrap() > losses.last().unwrap(), "losses {losses:?}");
        let acc = pair_accuracy(&updated, &embeddings, &pairs).unwrap();
        assert!(acc >= 0.99, "pair accuracy {acc}");

        // the input encoder is untouched and training never degrades
        // training-set accuracy much below its start
        let before = pair_accuracy(&encoder, &embeddings, &pairs).unwrap();
        assert!(acc >= before - 0.05);
        for (a, b) in encoder.params.iter().zip(DualEncoder::new("clipscore-lite", encoder.config.clone(), encoder.vocab.clone(), 2).params.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn zero_epochs_is_score_identity() {
        let (images, pairs, vocab) = separable_fixture();
        let embeddings = pooled_embeddings(&images);
        let cfg = DualEncoderConfig { img_dim: 6, embed_dim: 8, text_dim: 8, text_hidden: 16, scale_w: 2.5 };
        let encoder = DualEncoder::new("clipscore-lite", cfg, vocab, 2);
        let config = RetrainConfig { epochs: 0, ..RetrainConfig::default() };
        let (updated, _) = contrastive_retrain(&encoder, &embeddings, &pairs, &config).unwrap();
        for p in &pairs {
            let emb = &embeddings[&p.image_id];
            let img = ScoreImage { image_id: &p.image_id, embedding: emb };
            let img2 = ScoreImage { image_id: &p.image_id, embedding: emb };
            assert_eq!(
                encoder.score(img, &p.positive).unwrap(),
                updated.score(img2, &p.positive).unwrap()
            );
        }
    }

    #[test]
    fn empty_pairs_rejected() {
        let (images, _, vocab) = separable_fixture();
        let embeddings = pooled_embeddings(&images);
        let cfg = DualEncoderConfig { img_dim: 6, embed_dim: 8, text_dim: 8, text_hidden: 16, scale_w: 2.5 };
        let encoder = DualEncoder::new("x", cfg, vocab, 2);
        let r = contrastive_retrain(&encoder, &embeddings, &[], &RetrainConfig::default());
        assert!(matches!(r, Err(SelfImprovingError::NoPairs)));
    }

    #[test]
    fn pairs_file_round_trip() {
        let (_, pairs, _) = separable_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }
}
