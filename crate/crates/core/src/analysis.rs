//! Evaluation plumbing: Kendall rank correlation against human judgments,
//! before/after checkpoint comparison tables, and static report rendering.

use crate::captioner::{greedy_decode, CaptionerModel};
use crate::corpus::{ImageRecord, Vocabulary};
use crate::flaws;
use crate::scorers::reference::{bleu, cider, rouge_l, ReferenceSet};
use crate::scorers::{ScoreImage, Scorer};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("kendall tau needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("kendall tau is undefined: one side is entirely tied")]
    TauUndefined,
    #[error("score pairs must be finite")]
    NonFinite,
    #[error("human judgment set needs >=2 records, got {0}")]
    TooFewRecords(usize),
    #[error("record for image {0} has no human scores")]
    NoScores(String),
    #[error("decode caches cover different images: {0} vs {1}")]
    CacheMismatch(usize, usize),
    #[error("scorer {0} failed: {1}")]
    Scorer(String, String),
    #[error("report inputs missing from {dir}: {missing:?}")]
    Report { dir: String, missing: Vec<String> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Kendall correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauVariant {
    B,
    C,
}

/// Kendall rank correlation over (metric, human) score pairs, computed with
/// merge-sort inversion counting rather than all-pairs enumeration.
pub fn kendall_tau(pairs: &[(f64, f64)], variant: TauVariant) -> Result<f64, AnalysisError> {
    let n = pairs.len();
    if n < 2 {
        return Err(AnalysisError::TooFewPairs(n));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let tie_pairs = |key: &dyn Fn(&(f64, f64)) -> f64, items: &[(f64, f64)]| -> u64 {
        // items must arrive grouped by key
        let mut total = 0u64;
        let mut run = 1u64;
        for w in items.windows(2) {
            if key(&w[0]) == key(&w[1]) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let tx = tie_pairs(&|p| p.0, &sorted);
    let txy = {
        // sorted is ordered by (x, y), so joint ties are grouped
        let mut total = 0u64;
        let mut run = 1u64;
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let mut ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let discordant = count_inversions(&mut ys);
    let mut y_sorted = sorted.clone();
    y_sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
    let ty = tie_pairs(&|p| p.1, &y_sorted);

    let concordant = n0 - tx - ty + txy - discordant;
    let diff = concordant as i64 - discordant as i64;

    match variant {
        TauVariant::B => {
            if tx == n0 || ty == n0 {
                return Err(AnalysisError::TauUndefined);
            }
            let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
            Ok(diff as f64 / denom)
        }
        TauVariant::C => {
            let distinct = |f: &dyn Fn(&(f64, f64)) -> f64| {
                let mut v: Vec<f64> = pairs.iter().map(f).collect();
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                v.dedup();
                v.len()
            };
            let m = distinct(&|p| p.0).min(distinct(&|p| p.1));
            if m < 2 {
                return Err(AnalysisError::TauUndefined);
            }
            Ok(2.0 * m as f64 * diff as f64 / ((n * n) as f64 * (m as f64 - 1.0)))
        }
    }
}

/// Strict inversions (`a[i] > a[j]` with `i < j`) counted during merge sort.
fn count_inversions(values: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = values.split_at_mut(mid);
    let mut inv = count_inversions(left) + count_inversions(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0usize, 0usize);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            merged.push(left[i]);
            i += 1;
        } else {
            inv += (left.len() - i) as u64;
            merged.push(right[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    values.copy_from_slice(&merged);
    inv
}

/// Percentile bootstrap confidence interval on tau. Resamples that land on an
/// undefined tau (all-tied draws) are skipped.
pub fn kendall_tau_bootstrap(
    pairs: &[(f64, f64)],
    variant: TauVariant,
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64), AnalysisError> {
    kendall_tau(pairs, variant)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut taus = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let sample: Vec<(f64, f64)> =
            (0..pairs.len()).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
        if let Ok(t) = kendall_tau(&sample, variant) {
            taus.push(t);
        }
    }
    if taus.is_empty() {
        return Err(AnalysisError::TauUndefined);
    }
    taus.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pick = |q: f64| taus[((taus.len() - 1) as f64 * q).round() as usize];
    Ok((pick(0.025), pick(0.975)))
}

// ---------------------------------------------------------------------------
// Human judgments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanJudgmentRecord {
    pub image_id: String,
    pub caption: String,
    pub human_scores: Vec<f64>,
}

/// Ordinal human ratings for (image, caption) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanJudgmentSet {
    pub provenance: String,
    pub records: Vec<HumanJudgmentRecord>,
}

impl HumanJudgmentSet {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.records.len() < 2 {
            return Err(AnalysisError::TooFewRecords(self.records.len()));
        }
        for r in &self.records {
            if r.human_scores.is_empty() {
                return Err(AnalysisError::NoScores(r.image_id.clone()));
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, AnalysisError> {
        let raw = std::fs::read_to_string(path)?;
        let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
        let provenance = lines
            .next()
            .map(|l| serde_json::from_str::<BTreeMap<String, String>>(l))
            .transpose()?
            .and_then(|m| m.get("provenance").cloned())
            .unwrap_or_default();
        let records = lines.map(serde_json::from_str).collect::<Result<Vec<_>, _>>()?;
        let set = HumanJudgmentSet { provenance, records };
        set.validate()?;
        Ok(set)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut out = serde_json::to_string(&BTreeMap::from([(
            "provenance",
            self.provenance.as_str(),
        )]))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// (metric, human) pairs for correlation. Raters are averaged per record
    /// unless `per_rater` expands each rating into its own pair.
    pub fn correlation_pairs(
        &self,
        metric: &dyn Fn(&str, &str) -> f64,
        per_rater: bool,
    ) -> Vec<(f64, f64)> {
        let mut pairs = Vec::new();
        for r in &self.records {
            let m = metric(&r.image_id, &r.caption);
            if per_rater {
                pairs.extend(r.human_scores.iter().map(|&h| (m, h)));
            } else {
                let mean = r.human_scores.iter().sum::<f64>() / r.human_scores.len() as f64;
                pairs.push((m, mean));
            }
        }
        pairs
    }
}

// ---------------------------------------------------------------------------
// Checkpoint comparison
// ---------------------------------------------------------------------------

/// Greedy decodes for one checkpoint, keyed by image id. Comparison reports
/// are pure functions of these caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeCache {
    pub label: String,
    pub captions: BTreeMap<String, String>,
}

pub fn decode_split(
    model: &CaptionerModel,
    vocab: &Vocabulary,
    images: &[ImageRecord],
    label: &str,
) -> DecodeCache {
    let captions = images
        .iter()
        .map(|rec| {
            let out = greedy_decode(model, &rec.pooled_embedding());
            (rec.image_id.clone(), vocab.decode(&out.tokens))
        })
        .collect();
    DecodeCache { label: label.to_string(), captions }
}

/// One before/after table row: metric name -> value per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn metric(&self, label: &str, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).and_then(|r| r.metrics.get(name).copied())
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&String> =
            self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut out = String::from("checkpoint");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for n in &names {
                out.push_str(&format!(",{}", row.metrics.get(*n).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let names: Vec<&String> =
            self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut out = String::from("| checkpoint |");
        for n in &names {
            out.push_str(&format!(" {n} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(names.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.label));
            for n in &names {
                out.push_str(&format!(
                    " {:.4} |",
                    row.metrics.get(*n).copied().unwrap_or(f64::NAN)
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Scores a set of decode caches with every reference-free scorer, the
/// reference-based metrics, and degeneracy aggregates; one row per cache.
pub fn compare_checkpoints(
    caches: &[&DecodeCache],
    images: &[ImageRecord],
    scorers: &[&dyn Scorer],
) -> Result<CompareReport, AnalysisError> {
    let refs = ReferenceSet::new(
        images.iter().map(|r| (r.image_id.clone(), r.captions.clone())).collect(),
    );
    let by_id: BTreeMap<&str, &ImageRecord> =
        images.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut rows = Vec::new();
    for cache in caches {
        if cache.captions.len() != images.len() {
            return Err(AnalysisError::CacheMismatch(cache.captions.len(), images.len()));
        }
        let n = images.len() as f64;
        let mut metrics = BTreeMap::new();

        for scorer in scorers {
            let mut sum = 0.0;
            for (image_id, caption) in &cache.captions {
                let rec = by_id[image_id.as_str()];
                let emb = rec.pooled_embedding();
                let img = ScoreImage { image_id, embedding: &emb };
                sum += scorer
                    .score(img, caption)
                    .map_err(|e| AnalysisError::Scorer(scorer.id().to_string(), e.to_string()))?;
            }
            metrics.insert(scorer.id().to_string(), sum / n);
        }

        metrics.insert("cider".into(), cider(&cache.captions, &refs).mean);
        let mut bleu4 = 0.0;
        let mut rouge = 0.0;
        let mut rep2 = 0.0;
        let mut d1 = 0.0;
        let mut len = 0.0;
        let mut dangling = 0.0;
        for (image_id, caption) in &cache.captions {
            let gts = &by_id[image_id.as_str()].captions;
            bleu4 += bleu(caption, gts, 4);
            rouge += rouge_l(caption, gts);
            match flaws::analyze_text(caption) {
                Ok(rep) => {
                    rep2 += rep.max_repeat[1] as f64;
                    d1 += rep.distinct_1;
                    len += rep.len as f64;
                    dangling += rep.dangling_tail as u8 as f64;
                }
                // empty decode: fully degenerate
                Err(_) => rep2 += 1.0,
            }
        }
        metrics.insert("bleu4".into(), bleu4 / n);
        metrics.insert("rouge_l".into(), rouge / n);
        metrics.insert("max_repeat_bigram".into(), rep2 / n);
        metrics.insert("distinct_1".into(), d1 / n);
        metrics.insert("mean_length".into(), len / n);
        metrics.insert("dangling_rate".into(), dangling / n);
        rows.push(CompareRow { label: cache.label.clone(), metrics });
    }
    Ok(CompareReport { rows })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// Renders a fixed-size horizontal bar chart. No timestamps or randomness, so
/// reruns are byte-identical.
pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    const WIDTH: f64 = 640.0;
    const BAR_H: f64 = 22.0;
    const GAP: f64 = 8.0;
    const LEFT: f64 = 170.0;
    let max = bars.iter().map(|b| b.1.abs()).fold(1e-12, f64::max);
    let height = 40.0 + bars.len() as f64 * (BAR_H + GAP);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height:.0}\" \
         font-family=\"monospace\" font-size=\"12\">\n\
         <text x=\"8\" y=\"20\" font-size=\"14\">{}</text>\n",
        xml_escape(title)
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = 36.0 + i as f64 * (BAR_H + GAP);
        let w = (value.abs() / max) * (WIDTH - LEFT - 90.0);
        svg.push_str(&format!(
            "<text x=\"8\" y=\"{ty:.1}\">{}</text>\n\
             <rect x=\"{LEFT}\" y=\"{y:.1}\" width=\"{w:.2}\" height=\"{BAR_H}\" fill=\"#4477aa\"/>\n\
             <text x=\"{vx:.1}\" y=\"{ty:.1}\">{value:.4}</text>\n",
            xml_escape(label),
            ty = y + BAR_H - 6.0,
            vx = LEFT + w + 6.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// Renders every recognized result file in `in_dir` into tables and charts
/// under `out_dir`, plus a manifest. Deterministic and idempotent.
pub fn emit_report(in_dir: &Path, out_dir: &Path) -> Result<ReportManifest, AnalysisError> {
    let known = ["trace.jsonl", "compare.json", "bench_eval.json", "judge_aggregate.csv"];
    let present: Vec<&str> = known.iter().copied().filter(|f| in_dir.join(f).exists()).collect();
    if present.is_empty() {
        return Err(AnalysisError::Report {
            dir: in_dir.display().to_string(),
            missing: known.iter().map(|s| s.to_string()).collect(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    let mut md = String::from("# Run report\n");
    let write_out = |name: &str, content: &str, outputs: &mut Vec<String>| {
        std::fs::write(out_dir.join(name), content).map(|_| outputs.push(name.to_string()))
    };

    if present.contains(&"trace.jsonl") {
        let trace = crate::rl::RewardTrace::read_jsonl(&in_dir.join("trace.jsonl"))
            .map_err(|e| AnalysisError::Scorer("trace".into(), e.to_string()))?;
        // per-epoch means of the RL greedy score and the bigram repeat stat
        let mut per_epoch: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in trace.records.iter().filter(|r| r.stage == crate::rl::Stage::Rl) {
            let e = per_epoch.entry(r.epoch).or_insert((0.0, 0.0, 0));
            e.0 += r.mean_greedy_score.unwrap_or(0.0);
            e.1 += r.mean_max_repeat_bigram.unwrap_or(0.0);
            e.2 += 1;
        }
        let score_bars: Vec<(String, f64)> = per_epoch
            .iter()
            .map(|(ep, (s, _, n))| (format!("epoch {ep:02}"), s / *n as f64))
            .collect();
        let rep_bars: Vec<(String, f64)> = per_epoch
            .iter()
            .map(|(ep, (_, r, n))| (format!("epoch {ep:02}"), r / *n as f64))
            .collect();
        if !score_bars.is_empty() {
            write_out(
                "rl_score_by_epoch.svg",
                &svg_bar_chart("Mean greedy scorer reward per epoch", &score_bars),
                &mut outputs,
            )?;
            write_out(
                "rl_repeat_by_epoch.svg",
                &svg_bar_chart("Mean max bigram repeat per epoch", &rep_bars),
                &mut outputs,
            )?;
            md.push_str("\n![score](rl_score_by_epoch.svg)\n![repeat](rl_repeat_by_epoch.svg)\n");
        }
    }

    if present.contains(&"compare.json") {
        let report: CompareReport =
            serde_json::from_str(&std::fs::read_to_string(in_dir.join("compare.json"))?)?;
        write_out("compare.csv", &report.to_csv(), &mut outputs)?;
        md.push_str("\n## Checkpoint comparison\n\n");
        md.push_str(&report.to_markdown());
    }

    if present.contains(&"bench_eval.json") {
        let evals: Vec<flaws::BenchEval> =
            serde_json::from_str(&std::fs::read_to_string(in_dir.join("bench_eval.json"))?)?;
        let bars: Vec<(String, f64)> =
            evals.iter().map(|e| (e.scorer_id.clone(), e.accuracy)).collect();
        write_out(
            "bench_accuracy.svg",
            &svg_bar_chart("Flaw discrimination accuracy", &bars),
            &mut outputs,
        )?;
        let mut csv = String::from("scorer,accuracy,n_images\n");
        for e in &evals {
            csv.push_str(&format!("{},{},{}\n", e.scorer_id, e.accuracy, e.n_images));
        }
        write_out("bench_accuracy.csv", &csv, &mut outputs)?;
        md.push_str("\n## Flaw discrimination\n\n![bench](bench_accuracy.svg)\n");
    }

    if present.contains(&"judge_aggregate.csv") {
        let csv = std::fs::read_to_string(in_dir.join("judge_aggregate.csv"))?;
        write_out("judge_aggregate.csv", &csv, &mut outputs)?;
        md.push_str("\n## Judge aggregates\n\nsee judge_aggregate.csv\n");
    }

    write_out("report.md", &md, &mut outputs)?;
    let manifest = ReportManifest {
        inputs: present.iter().map(|s| s.to_string()).collect(),
        outputs,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::FnScorer;

    /// All-pairs concordance count, written independently of the production
    /// merge-sort path.
    fn tau_oracle(pairs: &[(f64, f64)], variant: TauVariant) -> Option<f64> {
        let n = pairs.len();
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = pairs[i].0 - pairs[j].0;
                let dy = pairs[i].1 - pairs[j].1;
                if dx == 0.0 && dy == 0.0 {
                    tx += 1;
                    ty += 1;
                } else if dx == 0.0 {
                    tx += 1;
                } else if dy == 0.0 {
                    ty += 1;
                } else if dx * dy > 0.0 {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as i64;
        match variant {
            TauVariant::B => {
                if tx == n0 || ty == n0 {
                    return None;
                }
                Some((c - d) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
            }
            TauVariant::C => {
                let distinct = |f: &dyn Fn(&(f64, f64)) -> f64| {
                    let mut v: Vec<f64> = pairs.iter().map(f).collect();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    v.dedup();
                    v.len()
                };
                let m = distinct(&|p| p.0).min(distinct(&|p| p.1));
                if m < 2 {
                    return None;
                }
                Some(2.0 * m as f64 * (c - d) as f64 / ((n * n) as f64 * (m as f64 - 1.0)))
            }
        }
    }

    fn zip(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
        x.iter().copied().zip(y.iter().copied()).collect()
    }

    #[test]
    fn tau_hand_cases() {
        let p = zip(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(kendall_tau(&p, TauVariant::B).unwrap(), 1.0);
        let p = zip(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert_eq!(kendall_tau(&p, TauVariant::B).unwrap(), -1.0);
        // 5 concordant, 1 discordant out of 6 pairs
        let p = zip(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        let tau = kendall_tau(&p, TauVariant::B).unwrap();
        assert!((tau - 4.0 / 6.0).abs() < 1e-12, "tau {tau}");
    }

    #[test]
    fn tau_errors() {
        assert!(matches!(
            kendall_tau(&[(1.0, 1.0)], TauVariant::B),
            Err(AnalysisError::TooFewPairs(1))
        ));
        let all_tied = zip(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            kendall_tau(&all_tied, TauVariant::B),
            Err(AnalysisError::TauUndefined)
        ));
        assert!(matches!(
            kendall_tau(&all_tied, TauVariant::C),
            Err(AnalysisError::TauUndefined)
        ));
        let nan = zip(&[1.0, f64::NAN], &[1.0, 2.0]);
        assert!(matches!(kendall_tau(&nan, TauVariant::B), Err(AnalysisError::NonFinite)));
    }

    #[test]
    fn tau_matches_brute_force_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for case in 0..100 {
            let n = rng.gen_range(2..=50);
            // small integer range forces plenty of ties
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0..6) as f64, rng.gen_range(0..4) as f64))
                .collect();
            for variant in [TauVariant::B, TauVariant::C] {
                let got = kendall_tau(&pairs, variant);
                match tau_oracle(&pairs, variant) {
                    Some(want) => {
                        let got = got.unwrap();
                        assert!(
                            (got - want).abs() < 1e-12,
                            "case {case} {variant:?}: {got} vs {want}"
                        );
                    }
                    None => assert!(matches!(got, Err(AnalysisError::TauUndefined))),
                }
            }
        }
    }

    #[test]
    fn tau_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let pairs: Vec<(f64, f64)> =
            (0..40).map(|_| (rng.gen_range(-5..6) as f64, rng.gen_range(0..5) as f64)).collect();
        for variant in [TauVariant::B, TauVariant::C] {
            let base = kendall_tau(&pairs, variant).unwrap();
            let affine: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (2.0 * x + 3.0, y)).collect();
            let cubed: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x, y * y * y)).collect();
            assert!((kendall_tau(&affine, variant).unwrap() - base).abs() < 1e-12);
            assert!((kendall_tau(&cubed, variant).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_interval_brackets_tau() {
        let pairs: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, (i % 7) as f64)).collect();
        let tau = kendall_tau(&pairs, TauVariant::B).unwrap();
        let (lo, hi) = kendall_tau_bootstrap(&pairs, TauVariant::B, 200, 3).unwrap();
        assert!(lo <= tau && tau <= hi, "({lo}, {hi}) vs {tau}");
    }

    #[test]
    fn human_judgments_round_trip_and_pair_modes() {
        let set = HumanJudgmentSet {
            provenance: "flickr8k-expert-format".into(),
            records: vec![
                HumanJudgmentRecord {
                    image_id: "i1".into(),
                    caption: "a dog".into(),
                    human_scores: vec![3.0, 4.0],
                },
                HumanJudgmentRecord {
                    image_id: "i2".into(),
                    caption: "a cat".into(),
                    human_scores: vec![1.0],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judgments.jsonl");
        set.write_jsonl(&path).unwrap();
        assert_eq!(HumanJudgmentSet::read_jsonl(&path).unwrap(), set);

        let metric = |_: &str, caption: &str| caption.len() as f64;
        let mean = set.correlation_pairs(&metric, false);
        assert_eq!(mean, vec![(5.0, 3.5), (5.0, 1.0)]);
        let per_rater = set.correlation_pairs(&metric, true);
        assert_eq!(per_rater.len(), 3);
    }

    fn fixture_images() -> Vec<ImageRecord> {
        (0..4)
            .map(|i| ImageRecord {
                image_id: format!("img{i}"),
                embedding: vec![i as f32; 4],
                n_regions: 1,
                captions: vec![format!("a red bird number {i}"), "a small red bird".into()],
            })
            .collect()
    }

    #[test]
    fn compare_identical_caches_yield_identical_rows() {
        let images = fixture_images();
        let captions: BTreeMap<String, String> =
            images.iter().map(|r| (r.image_id.clone(), r.captions[0].clone())).collect();
        let a = DecodeCache { label: "before".into(), captions: captions.clone() };
        let b = DecodeCache { label: "after".into(), captions };
        let scorer = FnScorer { name: "len".into(), f: |_, c: &str| c.len() as f64 };
        let report = compare_checkpoints(&[&a, &b], &images, &[&scorer]).unwrap();
        assert_eq!(report.rows[0].metrics, report.rows[1].metrics);
        assert_eq!(report.metric("before", "bleu4"), report.metric("after", "bleu4"));
        // gt decodes: no repetition, perfect rouge against themselves
        assert_eq!(report.metric("before", "max_repeat_bigram"), Some(1.0));
        assert_eq!(report.metric("before", "rouge_l"), Some(1.0));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(report.to_markdown().contains("| before |"));
    }

    #[test]
    fn compare_detects_degenerate_decodes() {
        let images = fixture_images();
        let gt: BTreeMap<String, String> =
            images.iter().map(|r| (r.image_id.clone(), r.captions[0].clone())).collect();
        let degenerate: BTreeMap<String, String> = images
            .iter()
            .map(|r| (r.image_id.clone(), "red bird red bird red bird".to_string()))
            .collect();
        let before = DecodeCache { label: "before".into(), captions: gt };
        let after = DecodeCache { label: "after".into(), captions: degenerate };
        let scorer = FnScorer {
            // reference-free scorer that loves the token "red"
            name: "red_affinity".into(),
            f: |_, c: &str| c.split_whitespace().filter(|t| *t == "red").count() as f64,
        };
        let report = compare_checkpoints(&[&before, &after], &images, &[&scorer]).unwrap();
        assert!(report.metric("after", "red_affinity") > report.metric("before", "red_affinity"));
        assert!(report.metric("after", "cider") < report.metric("before", "cider"));
        assert!(
            report.metric("after", "max_repeat_bigram")
                > report.metric("before", "max_repeat_bigram")
        );
    }

    #[test]
    fn compare_rejects_mismatched_cache() {
        let images = fixture_images();
        let cache = DecodeCache { label: "x".into(), captions: BTreeMap::new() };
        assert!(matches!(
            compare_checkpoints(&[&cache], &images, &[]),
            Err(AnalysisError::CacheMismatch(0, 4))
        ));
    }

    #[test]
    fn emit_report_is_idempotent_and_flags_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let in_dir = dir.path().join("results");
        let out_dir = dir.path().join("report");
        std::fs::create_dir_all(&in_dir).unwrap();
        assert!(matches!(
            emit_report(&in_dir, &out_dir),
            Err(AnalysisError::Report { .. })
        ));

        let images = fixture_images();
        let captions: BTreeMap<String, String> =
            images.iter().map(|r| (r.image_id.clone(), r.captions[0].clone())).collect();
        let cache = DecodeCache { label: "pt".into(), captions };
        let report = compare_checkpoints(&[&cache], &images, &[]).unwrap();
        std::fs::write(in_dir.join("compare.json"), serde_json::to_string(&report).unwrap())
            .unwrap();
        let evals = vec![flaws::BenchEval {
            scorer_id: "oracle".into(),
            accuracy: 100.0,
            n_images: 4,
            per_image: vec![],
        }];
        std::fs::write(in_dir.join("bench_eval.json"), serde_json::to_string(&evals).unwrap())
            .unwrap();

        let manifest = emit_report(&in_dir, &out_dir).unwrap();
        assert!(manifest.outputs.contains(&"report.md".to_string()));
        assert!(manifest.outputs.contains(&"bench_accuracy.svg".to_string()));
        let snapshot: Vec<(String, Vec<u8>)> = manifest
            .outputs
            .iter()
            .map(|f| (f.clone(), std::fs::read(out_dir.join(f)).unwrap()))
            .collect();
        let again = emit_report(&in_dir, &out_dir).unwrap();
        assert_eq!(manifest, again);
        for (f, bytes) in snapshot {
            assert_eq!(std::fs::read(out_dir.join(&f)).unwrap(), bytes, "{f} changed");
        }
    }
}
