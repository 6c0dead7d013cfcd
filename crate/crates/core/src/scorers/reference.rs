//! Reference-based caption metrics: BLEU-n, ROUGE-L, CIDEr, and a
//! deliberately simplified exact-match METEOR ("METEOR-simple": no stemming
//! or synonym stage, so no parity claim with coco-caption's METEOR).

use crate::corpus::tokenize;
use std::collections::BTreeMap;

/// ROUGE-L recall/precision weighting, the coco-caption convention.
const ROUGE_BETA: f64 = 1.2;
/// METEOR unigram-F weighting toward recall.
const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: f64 = 3.0;
const CIDER_MAX_N: usize = 4;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, u64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram precision geometric mean with brevity penalty, range [0,1].
/// An empty candidate scores 0 by convention.
pub fn bleu(candidate: &str, references: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be in 1..=4");
    assert!(!references.is_empty(), "bleu needs at least one reference");
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();

    let mut log_prec_sum = 0.0f64;
    for k in 1..=n {
        let cand_ngrams = ngrams(&cand, k);
        let total: u64 = cand_ngrams.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut clipped = 0u64;
        for (gram, &count) in &cand_ngrams {
            let max_ref = refs
                .iter()
                .map(|r| ngrams(r, k).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        log_prec_sum += (clipped as f64 / total as f64).ln();
    }

    // closest reference length; ties resolved toward the shorter one
    let c = cand.len() as i64;
    let r = refs
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|&rl| ((rl - c).abs(), rl))
        .unwrap();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_prec_sum / n as f64).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0usize;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// LCS-based F-measure, max over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    assert!(!references.is_empty(), "rouge_l needs at least one reference");
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    for r in references {
        let rt = tokenize(r);
        if rt.is_empty() {
            continue;
        }
        let l = lcs_len(&cand, &rt) as f64;
        if l == 0.0 {
            continue;
        }
        let prec = l / cand.len() as f64;
        let rec = l / rt.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let f = (1.0 + b2) * prec * rec / (rec + b2 * prec);
        best = best.max(f);
    }
    best
}

/// Exact-match unigram harmonic mean with the fragmentation penalty.
pub fn meteor_simple(candidate: &str, references: &[String]) -> f64 {
    assert!(!references.is_empty(), "meteor needs at least one reference");
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    for r in references {
        let rt = tokenize(r);
        if rt.is_empty() {
            continue;
        }
        let (matches, chunks) = align(&cand, &rt);
        if matches == 0 {
            continue;
        }
        let p = matches as f64 / cand.len() as f64;
        let rc = matches as f64 / rt.len() as f64;
        let fmean = p * rc / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rc);
        let frag = chunks as f64 / matches as f64;
        let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
        best = best.max(fmean * (1.0 - penalty));
    }
    best
}

/// Greedy position-monotone exact alignment; returns (matches, chunks).
/// Prefers the reference position that extends the current chunk.
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0usize;
    let mut chunks = 0usize;
    let mut prev_ref: Option<usize> = None;
    for word in cand {
        // extend the chunk if the very next reference slot matches
        let next = prev_ref.map(|p| p + 1).filter(|&p| p < reference.len() && !used[p] && &reference[p] == word);
        let pos = next.or_else(|| reference.iter().enumerate().position(|(i, w)| !used[i] && w == word));
        if let Some(p) = pos {
            used[p] = true;
            matches += 1;
            if prev_ref != Some(p.wrapping_sub(1)) {
                chunks += 1;
            }
            prev_ref = Some(p);
        } else {
            prev_ref = None;
        }
    }
    (matches, chunks)
}

/// Per-image reference captions plus the corpus-level document-frequency
/// table CIDEr needs.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub refs_by_image: BTreeMap<String, Vec<String>>,
    /// df[n-1][gram] = number of images whose references contain the n-gram
    df: Vec<BTreeMap<Vec<String>, u64>>,
}

impl ReferenceSet {
    pub fn new(refs_by_image: BTreeMap<String, Vec<String>>) -> Self {
        assert!(refs_by_image.values().all(|v| !v.is_empty()), "every image needs >=1 reference");
        let mut df = vec![BTreeMap::new(); CIDER_MAX_N];
        for refs in refs_by_image.values() {
            for n in 1..=CIDER_MAX_N {
                let mut seen: BTreeMap<Vec<String>, bool> = BTreeMap::new();
                for r in refs {
                    for gram in ngrams(&tokenize(r), n).into_keys() {
                        seen.insert(gram, true);
                    }
                }
                for gram in seen.into_keys() {
                    *df[n - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        ReferenceSet { refs_by_image, df }
    }

    pub fn n_images(&self) -> usize {
        self.refs_by_image.len()
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let n_img = self.n_images() as f64;
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1) as f64;
        (n_img / df).ln()
    }

    /// TF-IDF vector for order `n` of a tokenized sentence; term frequencies
    /// are raw counts, per the CIDEr-D definition.
    fn tfidf(&self, tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(gram, c)| {
                let idf = self.idf(n, &gram);
                (gram, c as f64 * idf)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CiderOutput {
    pub per_image: BTreeMap<String, f64>,
    pub mean: f64,
    /// IDF is meaningless on a single-image corpus; scores are defined as 0.
    pub degenerate_idf: bool,
}

/// Gaussian length-penalty width for the clipped similarity (CIDEr-D).
const CIDER_SIGMA: f64 = 6.0;

/// Clipped cosine between a candidate vector and a reference vector: the
/// candidate's mass on each n-gram is capped at the reference's, so pure
/// repetition of a correct n-gram stops paying past the reference count.
fn clipped_similarity(cand: &BTreeMap<Vec<String>, f64>, rf: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = cand
        .iter()
        .filter_map(|(g, &x)| rf.get(g).map(|&y| x.min(y) * y))
        .sum();
    let nc: f64 = cand.values().map(|x| x * x).sum::<f64>().sqrt();
    let nr: f64 = rf.values().map(|x| x * x).sum::<f64>().sqrt();
    if nc == 0.0 || nr == 0.0 {
        return 0.0;
    }
    dot / (nc * nr)
}

/// CIDEr-D: clipped TF-IDF n-gram similarity (n = 1..4) with a Gaussian
/// length penalty, averaged over orders and references, scaled by 10.
/// Summary tables display a further x100.
pub fn cider(candidates_by_image: &BTreeMap<String, String>, refs: &ReferenceSet) -> CiderOutput {
    if refs.n_images() < 2 {
        let per_image = candidates_by_image.keys().map(|k| (k.clone(), 0.0)).collect();
        return CiderOutput { per_image, mean: 0.0, degenerate_idf: true };
    }
    let mut per_image = BTreeMap::new();
    for (image_id, cand) in candidates_by_image {
        let refs_for_img = refs
            .refs_by_image
            .get(image_id)
            .unwrap_or_else(|| panic!("no references for image {image_id}"));
        let cand_tokens = tokenize(cand);
        let ref_tokens: Vec<Vec<String>> = refs_for_img.iter().map(|r| tokenize(r)).collect();
        let mut score = 0.0f64;
        for n in 1..=CIDER_MAX_N {
            let gc = refs.tfidf(&cand_tokens, n);
            let mut order_score = 0.0f64;
            for rt in &ref_tokens {
                let gr = refs.tfidf(rt, n);
                let delta = cand_tokens.len() as f64 - rt.len() as f64;
                let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                order_score += penalty * clipped_similarity(&gc, &gr);
            }
            score += order_score / refs_for_img.len() as f64;
        }
        per_image.insert(image_id.clone(), 10.0 * score / CIDER_MAX_N as f64);
    }
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.values().sum::<f64>() / per_image.len() as f64
    };
    CiderOutput { per_image, mean, degenerate_idf: false }
}
