//! Synthetic dataset generator for desk-scale experiments. Images are
//! concept-mixture embeddings; captions are templated sentences naming those
//! concepts, so a dual encoder can actually learn the pairing.

use crate::corpus::{
    write_embedding_file, DatasetSplit, ImageRecord, Manifest, ManifestImage,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 10 images, got {0}")]
    TooSmall(usize),
    #[error("embedding_dim must be at least the concept count ({0}), got {1}")]
    DimTooSmall(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

const NOUNS: [&str; 12] = [
    "dog", "cat", "bus", "bird", "horse", "boat", "train", "bike", "plane", "bear", "truck",
    "sheep",
];
const COLORS: [&str; 6] = ["red", "blue", "green", "brown", "white", "black"];
const SCENES: [&str; 6] = ["park", "street", "field", "river", "station", "beach"];
const VERBS: [&str; 4] = ["standing", "moving", "resting", "waiting"];

/// One embedding slot per noun, color, and scene.
const N_CONCEPTS: usize = NOUNS.len() + COLORS.len() + SCENES.len();

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub embedding_dim: usize,
    pub captions_per_image: usize,
    /// gaussian noise added to each embedding slot
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 600,
            embedding_dim: 32,
            captions_per_image: 3,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Generates the dataset in memory with a 70/15/15 split.
pub fn generate(config: &SynthConfig) -> Result<DatasetSplit, SynthError> {
    if config.n_images < 10 {
        return Err(SynthError::TooSmall(config.n_images));
    }
    if config.embedding_dim < N_CONCEPTS {
        return Err(SynthError::DimTooSmall(N_CONCEPTS, config.embedding_dim));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let dim = config.embedding_dim;

    let mut records = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let noun = rng.gen_range(0..NOUNS.len());
        let color = rng.gen_range(0..COLORS.len());
        let scene = rng.gen_range(0..SCENES.len());

        // salience imbalance on purpose: the image is dominated by its main
        // object, with context contributing little, which leaves a dual
        // encoder trained on these images exploitable by content-word salad
        let mut embedding = vec![0.0f32; dim];
        embedding[noun] = 1.0;
        embedding[NOUNS.len() + color] = 0.2;
        embedding[NOUNS.len() + COLORS.len() + scene] = 0.1;
        for v in embedding.iter_mut() {
            *v += config.noise * standard_normal(&mut rng);
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
        for v in embedding.iter_mut() {
            *v /= norm;
        }

        let captions = (0..config.captions_per_image)
            .map(|_| caption_for(noun, color, scene, &mut rng))
            .collect();
        records.push(ImageRecord {
            image_id: format!("synth_{i:05}"),
            embedding,
            n_regions: 1,
            captions,
        });
    }

    records.shuffle(&mut rng);
    let n_val = config.n_images * 15 / 100;
    let n_test = n_val;
    let n_train = config.n_images - n_val - n_test;
    let mut it = records.into_iter();
    let train: Vec<ImageRecord> = it.by_ref().take(n_train).collect();
    let val: Vec<ImageRecord> = it.by_ref().take(n_val).collect();
    let test: Vec<ImageRecord> = it.collect();
    Ok(DatasetSplit { embedding_dim: dim, train, val, test })
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(1e-7..1.0f32);
    let u2: f32 = rng.gen::<f32>();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn caption_for(noun: usize, color: usize, scene: usize, rng: &mut ChaCha12Rng) -> String {
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    let (noun, color, scene) = (NOUNS[noun], COLORS[color], SCENES[scene]);
    match rng.gen_range(0..4) {
        0 => format!("a {color} {noun} {verb} in the {scene}"),
        1 => format!("the {color} {noun} is {verb} near the {scene}"),
        2 => format!("a {noun} that is {color} {verb} at the {scene}"),
        _ => format!("there is a {color} {noun} {verb} by the {scene}"),
    }
}

/// Writes the dataset in manifest form: `manifest.json` plus one raw
/// little-endian f32 file per image under `embeddings/`.
pub fn write_dataset(config: &SynthConfig, dir: &Path) -> Result<PathBuf, SynthError> {
    let split = generate(config)?;
    let emb_dir = dir.join("embeddings");
    std::fs::create_dir_all(&emb_dir)?;
    let mut images = Vec::new();
    for (name, records) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for rec in records {
            let rel = format!("embeddings/{}.bin", rec.image_id);
            write_embedding_file(&dir.join(&rel), &rec.embedding)
                .map_err(|e| SynthError::Io(std::io::Error::other(e.to_string())))?;
            images.push(ManifestImage {
                image_id: rec.image_id.clone(),
                embedding_path: rel,
                split: name.to_string(),
                captions: rec.captions.clone(),
                n_regions: Some(1),
            });
        }
    }
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let manifest = Manifest { embedding_dim: split.embedding_dim, images };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
