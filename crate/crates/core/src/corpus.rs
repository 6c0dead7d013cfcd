//! Dataset ingestion: tokenization, vocabulary construction, split
//! management, and image-embedding storage.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty caption corpus")]
    EmptyCorpus,
    #[error("missing asset for image {0}")]
    MissingAsset(String),
    #[error("shape error for image {image_id}: expected {expected} floats, got {actual}")]
    ShapeError { image_id: String, expected: usize, actual: usize },
    #[error("image {0} appears in more than one split")]
    SplitOverlap(String),
    #[error("image {0} has no captions")]
    NoCaptions(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(raw.len());
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cleaned.push(lc);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    // BTreeMap keeps serialized checkpoints byte-stable across runs
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
    pub min_frequency: u32,
}

impl Vocabulary {
    /// Counts tokens over the corpus and keeps those with frequency at least
    /// `min_frequency`. Ids are assigned by descending count, lexicographic
    /// within equal counts, after the four specials.
    pub fn build(captions: &[String], min_frequency: u32) -> Result<Self, CorpusError> {
        if captions.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        assert!(min_frequency >= 1, "min_frequency must be >= 1");
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for cap in captions {
            for tok in tokenize(cap) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, u64)> =
            counts.into_iter().filter(|(_, c)| *c >= min_frequency as u64).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token, min_frequency })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Content-hash of the id→token list; used to bind checkpoints to the
    /// vocabulary they were trained under.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Tokenizes and maps to ids, UNK for out-of-vocabulary words, EOS
    /// appended. The empty string encodes to a single EOS.
    pub fn encode(&self, raw: &str) -> TokenSequence {
        let mut ids: Vec<u32> = tokenize(raw)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect();
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Drops specials and joins with single spaces.
    pub fn decode(&self, ts: &TokenSequence) -> String {
        ts.ids
            .iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A tokenized caption. `ids` carries no PAD and ends with EOS when produced
/// by `encode` or by decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Word ids without specials, for n-gram statistics.
    pub fn words(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&id| !Vocabulary::is_special(id)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// `n_regions * embedding_dim` floats, row-major; global embeddings have
    /// one region.
    pub embedding: Vec<f32>,
    pub n_regions: usize,
    pub captions: Vec<String>,
}

impl ImageRecord {
    pub fn embedding_dim(&self) -> usize {
        self.embedding.len() / self.n_regions
    }

    /// Mean over regions; identity for global embeddings.
    pub fn pooled_embedding(&self) -> Vec<f32> {
        let dim = self.embedding_dim();
        if self.n_regions == 1 {
            return self.embedding.clone();
        }
        let mut out = vec![0.0f32; dim];
        for r in 0..self.n_regions {
            for (o, &v) in out.iter_mut().zip(&self.embedding[r * dim..(r + 1) * dim]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.n_regions as f32;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub embedding_dim: usize,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn all_train_captions(&self) -> Vec<String> {
        self.train.iter().flat_map(|r| r.captions.iter().cloned()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub embedding_path: String,
    pub split: String,
    pub captions: Vec<String>,
    #[serde(default)]
    pub n_regions: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub embedding_dim: usize,
    pub images: Vec<ManifestImage>,
}

/// Raw little-endian float32 array.
pub fn read_embedding_file(path: &Path) -> Result<Vec<f32>, CorpusError> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(out)
}

pub fn write_embedding_file(path: &Path, data: &[f32]) -> Result<(), CorpusError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a manifest and every referenced embedding, enforcing split
/// disjointness, shape agreement, and the caption floor on train/val.
pub fn load_split(manifest_path: &Path) -> Result<DatasetSplit, CorpusError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut seen: HashSet<String> = HashSet::new();
    let mut split = DatasetSplit {
        embedding_dim: manifest.embedding_dim,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for img in manifest.images {
        if !seen.insert(img.image_id.clone()) {
            return Err(CorpusError::SplitOverlap(img.image_id));
        }
        let path = base.join(&img.embedding_path);
        if !path.exists() {
            return Err(CorpusError::MissingAsset(img.image_id));
        }
        let embedding = read_embedding_file(&path)?;
        let n_regions = img.n_regions.unwrap_or(1).max(1);
        let expected = manifest.embedding_dim * n_regions;
        if embedding.len() != expected {
            return Err(CorpusError::ShapeError {
                image_id: img.image_id,
                expected,
                actual: embedding.len(),
            });
        }
        let record = ImageRecord { image_id: img.image_id, embedding, n_regions, captions: img.captions };
        match img.split.as_str() {
            "train" | "val" => {
                if record.captions.is_empty() {
                    return Err(CorpusError::NoCaptions(record.image_id));
                }
                if img.split == "train" {
                    split.train.push(record);
                } else {
                    split.val.push(record);
                }
            }
            _ => split.test.push(record),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::fs;

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(&[], 1), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn min_frequency_filters() {
        let caps = vec!["a dog".to_string(), "a cat".to_string()];
        let v = Vocabulary::build(&caps, 2).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS as usize + 1);
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("dog").is_none());
        assert!(v.id_of("cat").is_none());
    }

    #[test]
    fn frequency_invariant_holds_by_recount() {
        let caps: Vec<String> = vec![
            "a dog runs fast".into(),
            "a dog sleeps".into(),
            "the cat runs".into(),
            "a bird".into(),
        ];
        let v = Vocabulary::build(&caps, 2).unwrap();
        let mut counts: HashMap<String, u32> = HashMap::new();
        for c in &caps {
            for t in tokenize(c) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        for id in NUM_SPECIALS..v.size() as u32 {
            let tok = v.token_of(id).unwrap();
            assert!(counts[tok] >= 2, "token {tok} under min_frequency");
        }
    }

    #[test]
    fn equal_frequency_ids_are_lexicographic() {
        let caps = vec!["zebra apple".to_string()];
        let v = Vocabulary::build(&caps, 1).unwrap();
        assert!(v.id_of("apple").unwrap() < v.id_of("zebra").unwrap());
    }

    #[test]
    fn encode_decode_round_trip() {
        let caps = vec!["a dog runs".to_string(), "a dog runs".to_string()];
        let v = Vocabulary::build(&caps, 1).unwrap();
        let ts = v.encode("a dog runs");
        assert_eq!(*ts.ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ts), "a dog runs");
    }

    #[test]
    fn oov_maps_to_unk() {
        let caps = vec!["a dog".to_string()];
        let v = Vocabulary::build(&caps, 1).unwrap();
        let ts = v.encode("a zyzzyva");
        assert_eq!(ts.ids[0], v.id_of("a").unwrap());
        assert_eq!(ts.ids[1], UNK);
    }

    #[test]
    fn empty_string_encodes_to_single_eos() {
        let caps = vec!["a dog".to_string()];
        let v = Vocabulary::build(&caps, 1).unwrap();
        let ts = v.encode("");
        assert_eq!(ts.ids, vec![EOS]);
        assert_eq!(ts.len(), 1);
    }

    fn write_manifest(dir: &Path, manifest: &Manifest) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(manifest).unwrap()).unwrap();
        p
    }

    fn toy_manifest(dir: &Path, n: usize, splits: &[&str]) -> Manifest {
        let mut images = Vec::new();
        for i in 0..n {
            let id = format!("img{i}");
            let path = format!("{id}.bin");
            write_embedding_file(&dir.join(&path), &[i as f32, 1.0, 2.0, 3.0]).unwrap();
            images.push(ManifestImage {
                image_id: id,
                embedding_path: path,
                split: splits[i % splits.len()].to_string(),
                captions: vec!["a toy caption".to_string()],
                n_regions: None,
            });
        }
        Manifest { embedding_dim: 4, images }
    }

    #[test]
    fn load_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(dir.path(), 10, &["train"]);
        m.images[8].split = "val".into();
        m.images[9].split = "test".into();
        let p = write_manifest(dir.path(), &m);
        let split = load_split(&p).unwrap();
        assert_eq!(split.counts(), (8, 1, 1));
    }

    #[test]
    fn missing_asset_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(dir.path(), 2, &["train"]);
        m.images[1].embedding_path = "absent.bin".into();
        let p = write_manifest(dir.path(), &m);
        match load_split(&p) {
            Err(CorpusError::MissingAsset(id)) => assert_eq!(id, "img1"),
            other => panic!("expected MissingAsset, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(dir.path(), 2, &["train", "test"]);
        m.images[1].image_id = "img0".into();
        let p = write_manifest(dir.path(), &m);
        assert!(matches!(load_split(&p), Err(CorpusError::SplitOverlap(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(dir.path(), 1, &["train"]);
        m.embedding_dim = 8;
        let p = write_manifest(dir.path(), &m);
        assert!(matches!(load_split(&p), Err(CorpusError::ShapeError { .. })));
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let data = vec![0.5f32, -1.25, 3.75, f32::MIN_POSITIVE];
        write_embedding_file(&p, &data).unwrap();
        assert_eq!(read_embedding_file(&p).unwrap(), data);
    }
}
