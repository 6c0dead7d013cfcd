//! Degeneracy analysis of generated captions, synthetic flaw injection, and
//! the flawed-caption discrimination benchmark.

use crate::corpus::{tokenize, ImageRecord};
use crate::scorers::{ScoreImage, Scorer, ScorerError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlawsError {
    #[error("caption has no tokens")]
    EmptyCaption,
    #[error("caption too short to flaw ({0} tokens, need at least 4)")]
    TooShort(usize),
    #[error("could not assemble 10 distinct candidates for image {0}")]
    BuildError(String),
    #[error("scorer failed on image {image_id}: {source}")]
    Scorer {
        image_id: String,
        #[source]
        source: ScorerError,
    },
    #[error("benchmark has no embedding for image {0}")]
    MissingImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

/// Final tokens in this list mark a caption as ending mid-phrase.
pub const DEFAULT_STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "or", "to", "for", "by", "from",
    "into", "over", "under", "near", "but", "nor",
];

/// Repetition and truncation statistics for one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    /// highest multiplicity of any n-gram, indexed by n-1 for n in 1..=4
    pub max_repeat: [usize; 4],
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub dangling_tail: bool,
    pub len: usize,
}

fn max_ngram_multiplicity(tokens: &[String], n: usize) -> usize {
    if tokens.len() < n {
        return 1;
    }
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts.values().copied().max().unwrap_or(1)
}

fn distinct_ratio(tokens: &[String], n: usize) -> f64 {
    if tokens.len() < n {
        return 1.0;
    }
    let total = tokens.len() - n + 1;
    let unique: BTreeSet<&[String]> = tokens.windows(n).collect();
    unique.len() as f64 / total as f64
}

/// Analyzes one tokenized caption with the default stop list.
pub fn analyze(tokens: &[String]) -> Result<DegeneracyReport, FlawsError> {
    analyze_with_stops(tokens, DEFAULT_STOP_WORDS)
}

/// Analyzes one tokenized caption; `stops` flags dangling final tokens.
pub fn analyze_with_stops(tokens: &[String], stops: &[&str]) -> Result<DegeneracyReport, FlawsError> {
    if tokens.is_empty() {
        return Err(FlawsError::EmptyCaption);
    }
    let mut max_repeat = [1usize; 4];
    for n in 1..=4 {
        max_repeat[n - 1] = max_ngram_multiplicity(tokens, n);
    }
    let last = tokens.last().expect("non-empty");
    Ok(DegeneracyReport {
        max_repeat,
        distinct_1: distinct_ratio(tokens, 1),
        distinct_2: distinct_ratio(tokens, 2),
        dangling_tail: stops.contains(&last.as_str()),
        len: tokens.len(),
    })
}

/// Convenience: tokenize then analyze.
pub fn analyze_text(caption: &str) -> Result<DegeneracyReport, FlawsError> {
    analyze(&tokenize(caption))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlawKind {
    /// repeat the final k-gram m more times
    TailLoop,
    /// drop the last 1-3 tokens, preferring a cut that leaves a dangling stop word
    Truncate,
    /// duplicate an interior bigram in place
    PhraseDup,
}

pub const ALL_FLAW_KINDS: [FlawKind; 3] = [FlawKind::TailLoop, FlawKind::Truncate, FlawKind::PhraseDup];

/// Produces a degenerate variant of `caption`; the output always differs
/// from the input.
pub fn inject_flaw<R: Rng>(caption: &str, kind: FlawKind, rng: &mut R) -> Result<String, FlawsError> {
    let tokens = tokenize(caption);
    if tokens.len() < 4 {
        return Err(FlawsError::TooShort(tokens.len()));
    }
    let out = match kind {
        FlawKind::TailLoop => {
            let k = rng.gen_range(2..=4usize.min(tokens.len()));
            let m = rng.gen_range(1..=2);
            let tail: Vec<String> = tokens[tokens.len() - k..].to_vec();
            let mut out = tokens;
            for _ in 0..m {
                out.extend(tail.iter().cloned());
            }
            out
        }
        FlawKind::Truncate => {
            let max_cut = 3.min(tokens.len() - 1);
            let dangling_cut = (1..=max_cut)
                .find(|&c| DEFAULT_STOP_WORDS.contains(&tokens[tokens.len() - 1 - c].as_str()));
            let cut = dangling_cut.unwrap_or_else(|| rng.gen_range(1..=max_cut));
            tokens[..tokens.len() - cut].to_vec()
        }
        FlawKind::PhraseDup => {
            // interior bigram: never the leading or trailing position
            let start = if tokens.len() >= 6 { rng.gen_range(1..tokens.len() - 3) } else { 1 };
            let bigram: Vec<String> = tokens[start..start + 2].to_vec();
            let mut out = tokens;
            out.splice(start + 2..start + 2, bigram);
            out
        }
    };
    let flawed = out.join(" ");
    debug_assert_ne!(flawed, tokenize(caption).join(" "));
    Ok(flawed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateLabel {
    Gt,
    Flawed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCandidate {
    pub text: String,
    pub label: CandidateLabel,
    /// provenance: "gt", "generation", or the injector kind
    pub source: String,
}

/// One benchmark row: ten candidates, five ground truth and five flawed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawsBenchItem {
    pub image_id: String,
    pub candidates: Vec<BenchCandidate>,
}

/// Where flawed candidates come from.
#[derive(Debug, Clone)]
pub enum FlawedSource {
    /// degenerate captions decoded from reward-trained checkpoints, keyed by
    /// image id; images not covered fall back to the injectors
    Generations(BTreeMap<String, Vec<String>>),
    Injectors,
}

#[derive(Debug, Clone)]
pub struct BenchBuild {
    pub items: Vec<FlawsBenchItem>,
    /// images whose ground-truth pool was smaller than five (sampled with
    /// replacement)
    pub replacement_sampled: usize,
}

/// Builds one benchmark item per image: 5 ground-truth plus 5 flawed
/// candidates, deterministic per seed.
pub fn build_bench(
    images: &[ImageRecord],
    flawed_source: &FlawedSource,
    seed: u64,
) -> Result<BenchBuild, FlawsError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(images.len());
    let mut replacement_sampled = 0usize;

    for rec in images {
        if rec.captions.is_empty() {
            return Err(FlawsError::BuildError(rec.image_id.clone()));
        }
        let mut seen = BTreeSet::new();
        let mut gt: Vec<String> = Vec::new();
        for c in &rec.captions {
            let norm = tokenize(c).join(" ");
            if !norm.is_empty() && seen.insert(norm.clone()) {
                gt.push(norm);
            }
            if gt.len() == 5 {
                break;
            }
        }
        if gt.is_empty() {
            return Err(FlawsError::BuildError(rec.image_id.clone()));
        }
        if gt.len() < 5 {
            replacement_sampled += 1;
            while gt.len() < 5 {
                let pick = gt[rng.gen_range(0..gt.len())].clone();
                gt.push(pick);
            }
        }

        let mut candidates: Vec<BenchCandidate> = gt
            .into_iter()
            .map(|text| BenchCandidate { text, label: CandidateLabel::Gt, source: "gt".into() })
            .collect();

        let mut flawed: Vec<BenchCandidate> = Vec::new();
        if let FlawedSource::Generations(gens) = flawed_source {
            if let Some(texts) = gens.get(&rec.image_id) {
                for t in texts {
                    let norm = tokenize(t).join(" ");
                    if !norm.is_empty() && seen.insert(norm.clone()) {
                        flawed.push(BenchCandidate {
                            text: norm,
                            label: CandidateLabel::Flawed,
                            source: "generation".into(),
                        });
                    }
                    if flawed.len() == 5 {
                        break;
                    }
                }
            }
        }
        let mut attempts = 0;
        while flawed.len() < 5 {
            attempts += 1;
            if attempts > 200 {
                return Err(FlawsError::BuildError(rec.image_id.clone()));
            }
            let base = &rec.captions[rng.gen_range(0..rec.captions.len())];
            let kind = ALL_FLAW_KINDS[rng.gen_range(0..ALL_FLAW_KINDS.len())];
            let text = match inject_flaw(base, kind, &mut rng) {
                Ok(t) => t,
                Err(FlawsError::TooShort(_)) => continue,
                Err(e) => return Err(e),
            };
            if seen.insert(text.clone()) {
                let source = serde_json::to_value(kind)
                    .expect("kind serializes")
                    .as_str()
                    .expect("kind is a string")
                    .to_string();
                flawed.push(BenchCandidate { text, label: CandidateLabel::Flawed, source });
            }
        }
        candidates.extend(flawed);
        items.push(FlawsBenchItem { image_id: rec.image_id.clone(), candidates });
    }
    Ok(BenchBuild { items, replacement_sampled })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub image_id: String,
    pub top_index: usize,
    pub top_label: CandidateLabel,
    pub tie: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEval {
    pub scorer_id: String,
    pub accuracy: f64,
    pub n_images: usize,
    pub per_image: Vec<BenchRecord>,
}

/// Scores every candidate and checks whether each image's top-1 candidate is
/// ground truth. Ties resolve to the lowest candidate index.
pub fn eval_bench(
    scorer: &dyn Scorer,
    bench: &[FlawsBenchItem],
    embeddings: &BTreeMap<String, Vec<f32>>,
) -> Result<BenchEval, FlawsError> {
    let mut per_image = Vec::with_capacity(bench.len());
    let mut hits = 0usize;
    for item in bench {
        let emb = embeddings
            .get(&item.image_id)
            .ok_or_else(|| FlawsError::MissingImage(item.image_id.clone()))?;
        let mut best: Option<(usize, f64, bool)> = None;
        for (idx, cand) in item.candidates.iter().enumerate() {
            let img = ScoreImage { image_id: &item.image_id, embedding: emb };
            let s = scorer.score(img, &cand.text).map_err(|source| FlawsError::Scorer {
                image_id: item.image_id.clone(),
                source,
            })?;
            best = match best {
                None => Some((idx, s, false)),
                Some((_, bs, _)) if s > bs => Some((idx, s, false)),
                Some((bi, bs, tie)) => Some((bi, bs, tie || s == bs)),
            };
        }
        let (top_index, _, tie) = best.expect("ten candidates");
        let top_label = item.candidates[top_index].label;
        if top_label == CandidateLabel::Gt {
            hits += 1;
        }
        per_image.push(BenchRecord { image_id: item.image_id.clone(), top_index, top_label, tie });
    }
    Ok(BenchEval {
        scorer_id: scorer.id().to_string(),
        accuracy: 100.0 * hits as f64 / bench.len().max(1) as f64,
        n_images: bench.len(),
        per_image,
    })
}

/// Writes a benchmark as JSONL, one item per line.
pub fn write_bench(path: &std::path::Path, items: &[FlawsBenchItem]) -> Result<(), FlawsError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a JSONL benchmark file.
pub fn read_bench(path: &std::path::Path) -> Result<Vec<FlawsBenchItem>, FlawsError> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FlawsError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::FnScorer;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn hand_counted_repetition_cases() {
        let r = analyze(&toks("a dog with a white ball with a white ball")).unwrap();
        assert_eq!(r.len, 10);
        assert!((r.distinct_1 - 0.5).abs() < 1e-12);
        assert_eq!(r.max_repeat[3], 2); // "with a white ball"
        assert!(!r.dangling_tail);

        let r = analyze(&toks("a a a a")).unwrap();
        assert!((r.distinct_1 - 0.25).abs() < 1e-12);
        assert_eq!(r.max_repeat[0], 4);

        let r = analyze(&toks("two dogs chase one ball")).unwrap();
        assert!((r.distinct_1 - 1.0).abs() < 1e-12);
        assert_eq!(r.max_repeat, [1, 1, 1, 1]);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(matches!(analyze(&[]), Err(FlawsError::EmptyCaption)));
    }

    #[test]
    fn dangling_tail_flag() {
        assert!(analyze(&toks("a dog next to a")).unwrap().dangling_tail);
        assert!(!analyze(&toks("a dog next to a tree")).unwrap().dangling_tail);
    }

    #[test]
    fn injectors_always_change_and_are_flagged() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let caption = "a green bus on the road near a tall tree";
        let base = analyze(&toks(caption)).unwrap();
        for _ in 0..50 {
            for kind in ALL_FLAW_KINDS {
                let flawed = inject_flaw(caption, kind, &mut rng).unwrap();
                assert_ne!(flawed, toks(caption).join(" "));
                let rep = analyze(&toks(&flawed)).unwrap();
                match kind {
                    FlawKind::TailLoop | FlawKind::PhraseDup => {
                        assert!(
                            (0..4).any(|n| rep.max_repeat[n] > base.max_repeat[n]),
                            "{kind:?} did not raise repetition: {flawed}"
                        );
                    }
                    FlawKind::Truncate => {
                        let last = flawed.split(' ').next_back().unwrap();
                        if DEFAULT_STOP_WORDS.contains(&last) {
                            assert!(rep.dangling_tail);
                        }
                        assert!(rep.len < base.len);
                    }
                }
            }
        }
    }

    #[test]
    fn too_short_captions_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(matches!(
            inject_flaw("a dog runs", FlawKind::TailLoop, &mut rng),
            Err(FlawsError::TooShort(3))
        ));
    }

    fn toy_images(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord {
                image_id: format!("img{i:04}"),
                embedding: vec![0.1; 4],
                n_regions: 1,
                captions: (0..5)
                    .map(|j| format!("a {} dog number {i} plays with ball {j} in the park", ["red", "blue", "green", "tan", "gray"][j]))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn bench_shape_and_determinism() {
        let images = toy_images(10);
        let a = build_bench(&images, &FlawedSource::Injectors, 7).unwrap();
        let b = build_bench(&images, &FlawedSource::Injectors, 7).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.items.len(), 10);
        let total: usize = a.items.iter().map(|i| i.candidates.len()).sum();
        assert_eq!(total, 100);
        for item in &a.items {
            let gt = item.candidates.iter().filter(|c| c.label == CandidateLabel::Gt).count();
            assert_eq!(gt, 5);
            assert_eq!(item.candidates.len(), 10);
            let unique: BTreeSet<&str> = item.candidates.iter().map(|c| c.text.as_str()).collect();
            assert_eq!(unique.len(), 10);
        }
        let c = build_bench(&images, &FlawedSource::Injectors, 8).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn generation_provenance_preferred() {
        let images = toy_images(3);
        let mut gens = BTreeMap::new();
        for (i, rec) in images.iter().enumerate() {
            gens.insert(
                rec.image_id.clone(),
                (0..5).map(|j| format!("dog dog dog {i} {j} park park")).collect::<Vec<_>>(),
            );
        }
        let b = build_bench(&images, &FlawedSource::Generations(gens), 7).unwrap();
        for item in &b.items {
            let from_gen = item.candidates.iter().filter(|c| c.source == "generation").count();
            assert_eq!(from_gen, 5);
        }
    }

    #[test]
    fn oracle_and_anti_oracle_bounds() {
        let images = toy_images(10);
        let bench = build_bench(&images, &FlawedSource::Injectors, 7).unwrap().items;
        let embeddings: BTreeMap<String, Vec<f32>> =
            images.iter().map(|r| (r.image_id.clone(), r.embedding.clone())).collect();

        // oracle keyed off the ground-truth texts themselves
        let gt_texts: BTreeSet<String> = bench
            .iter()
            .flat_map(|i| i.candidates.iter())
            .filter(|c| c.label == CandidateLabel::Gt)
            .map(|c| c.text.clone())
            .collect();
        let gt2 = gt_texts.clone();
        let oracle = FnScorer {
            name: "oracle".into(),
            f: move |_: ScoreImage<'_>, c: &str| if gt_texts.contains(c) { 1.0 } else { 0.0 },
        };
        let anti = FnScorer {
            name: "anti".into(),
            f: move |_: ScoreImage<'_>, c: &str| if gt2.contains(c) { 0.0 } else { 1.0 },
        };
        assert_eq!(eval_bench(&oracle, &bench, &embeddings).unwrap().accuracy, 100.0);
        assert_eq!(eval_bench(&anti, &bench, &embeddings).unwrap().accuracy, 0.0);
    }

    #[test]
    fn random_scorer_near_half() {
        use crate::scorers::RandomScorer;
        let images = toy_images(1000);
        let bench = build_bench(&images, &FlawedSource::Injectors, 11).unwrap().items;
        let embeddings: BTreeMap<String, Vec<f32>> =
            images.iter().map(|r| (r.image_id.clone(), r.embedding.clone())).collect();
        let eval = eval_bench(&RandomScorer { seed: 99 }, &bench, &embeddings).unwrap();
        assert!((eval.accuracy - 50.0).abs() < 5.0, "accuracy {}", eval.accuracy);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let images = toy_images(2);
        let bench = build_bench(&images, &FlawedSource::Injectors, 7).unwrap().items;
        let embeddings: BTreeMap<String, Vec<f32>> =
            images.iter().map(|r| (r.image_id.clone(), r.embedding.clone())).collect();
        let constant = FnScorer { name: "const".into(), f: |_: ScoreImage<'_>, _: &str| 0.5 };
        let eval = eval_bench(&constant, &bench, &embeddings).unwrap();
        for rec in &eval.per_image {
            assert_eq!(rec.top_index, 0);
            assert!(rec.tie);
            assert_eq!(rec.top_label, CandidateLabel::Gt);
        }
        assert_eq!(eval.accuracy, 100.0);
    }

    #[test]
    fn bench_file_round_trip() {
        let images = toy_images(4);
        let bench = build_bench(&images, &FlawedSource::Injectors, 7).unwrap().items;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        write_bench(&path, &bench).unwrap();
        let back = read_bench(&path).unwrap();
        assert_eq!(bench, back);
    }
}
